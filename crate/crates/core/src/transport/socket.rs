//! Length-prefixed framing over a reliable byte stream.
//!
//! A frame is a `u32` LE byte count followed by one serialized
//! [`WireMessage`]. One session per client per round:
//!
//! ```text
//! client -> server  HELLO(round, client_id, digest)
//! server -> client  GLOBAL_PARAMS            (or close, if the digest is unknown)
//! client -> server  INCREMENT
//! server -> client  ACK
//! ```

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use crate::error::{Error, Result};

use super::wire::{MessageKind, WireMessage};

pub const DEFAULT_MAX_FRAME: usize = 64 << 20;
const IO_TIMEOUT: Duration = Duration::from_secs(60);

pub fn write_frame<W: Write>(w: &mut W, msg: &WireMessage) -> Result<usize> {
    let bytes = msg.encode();
    let len = u32::try_from(bytes.len()).map_err(|_| Error::Framing("message exceeds u32 frame length".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

/// Reads one frame. The length prefix is checked against `max_frame` before
/// any buffer is allocated.
pub fn read_frame<R: Read>(r: &mut R, max_frame: usize) -> Result<WireMessage> {
    let mut prefix = [0u8; 4];
    r.read_exact(&mut prefix).map_err(eof_to_framing)?;
    let len = u32::from_le_bytes(prefix) as usize;
    if len > max_frame {
        return Err(Error::Framing(format!(
            "frame of {len} bytes exceeds the {max_frame}-byte limit"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(eof_to_framing)?;
    WireMessage::decode(&buf)
}

fn eof_to_framing(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Framing("truncated frame".into())
    } else {
        Error::Io(e)
    }
}

fn expect(msg: &WireMessage, kind: MessageKind) -> Result<()> {
    if msg.kind != kind {
        return Err(Error::Protocol(format!("expected {kind:?}, got {:?}", msg.kind)));
    }
    Ok(())
}

/// Server half of one session. Returns the client's increment.
pub fn serve_session(stream: &mut TcpStream, global: &WireMessage, max_frame: usize) -> Result<WireMessage> {
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    let hello = read_frame(stream, max_frame)?;
    expect(&hello, MessageKind::Hello)?;
    if hello.schema_digest != global.schema_digest {
        let _ = stream.shutdown(std::net::Shutdown::Both);
        return Err(Error::Protocol(format!(
            "client {} offered digest {:#018x}, server runs {:#018x}",
            hello.client_id, hello.schema_digest, global.schema_digest
        )));
    }
    write_frame(stream, global)?;
    let inc = read_frame(stream, max_frame)?;
    expect(&inc, MessageKind::Increment)?;
    if inc.client_id != hello.client_id {
        return Err(Error::Protocol(format!(
            "client {} uploaded an increment labelled {}",
            hello.client_id, inc.client_id
        )));
    }
    write_frame(
        stream,
        &WireMessage::control(MessageKind::Ack, inc.round, inc.client_id, inc.schema_digest),
    )?;
    Ok(inc)
}

/// Client half of one session; `work` turns the downloaded global
/// parameters into an increment.
pub fn client_session<F>(addr: SocketAddr, hello: WireMessage, max_frame: usize, work: F) -> Result<()>
where
    F: FnOnce(WireMessage) -> Result<WireMessage>,
{
    let mut stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_nodelay(true)?;
    write_frame(&mut stream, &hello)?;
    let global = match read_frame(&mut stream, max_frame) {
        Err(Error::Framing(_)) => {
            return Err(Error::Protocol(format!(
                "server closed the session for client {} (digest refused)",
                hello.client_id
            )))
        }
        other => other?,
    };
    expect(&global, MessageKind::GlobalParams)?;
    let inc = work(global)?;
    write_frame(&mut stream, &inc)?;
    let ack = read_frame(&mut stream, max_frame)?;
    expect(&ack, MessageKind::Ack)?;
    Ok(())
}

/// Accepts `clients` sessions on `listener`, serving each on its own thread.
/// Increments are returned in arrival order.
pub fn serve_round(
    listener: &TcpListener,
    global: &WireMessage,
    clients: usize,
    max_frame: usize,
) -> Result<Vec<WireMessage>> {
    let (tx, rx) = mpsc::channel();
    thread::scope(|scope| {
        for _ in 0..clients {
            let (mut stream, _) = listener.accept()?;
            let tx = tx.clone();
            scope.spawn(move || {
                let _ = tx.send(serve_session(&mut stream, global, max_frame));
            });
        }
        Ok::<_, Error>(())
    })?;
    drop(tx);
    rx.into_iter().collect()
}
