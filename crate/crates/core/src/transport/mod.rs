//! Moving global parameters down to clients and increments back up.
//!
//! Three interchangeable channels carry one round at a time: in-process
//! hand-off, checkpoint files in a shared directory, and framed TCP
//! sessions. All of them return the uploaded increments in arrival order;
//! callers aggregate by client id, so arrival order never matters.

pub mod fs;
pub mod socket;
pub mod wire;

use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::fs::{FsExchange, ReadMode};
pub use self::wire::{MessageKind, WireMessage};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TransportConfig {
    #[default]
    Memory,
    Fs {
        path: PathBuf,
    },
    Socket {
        addr: String,
    },
}

/// Per-client work for one round: consume the downloaded global message and
/// produce the increment message to upload.
pub type ClientWork<'a, C> = dyn Fn(&mut C, WireMessage) -> Result<WireMessage> + Sync + 'a;

pub enum Channel {
    Memory,
    Fs(FsExchange),
    Socket { listener: TcpListener, max_frame: usize },
}

impl Channel {
    pub fn open(config: &TransportConfig) -> Result<Self> {
        Ok(match config {
            TransportConfig::Memory => Channel::Memory,
            TransportConfig::Fs { path } => {
                std::fs::create_dir_all(path)?;
                Channel::Fs(FsExchange::new(path, ReadMode::default()))
            }
            TransportConfig::Socket { addr } => Channel::Socket {
                listener: TcpListener::bind(addr.as_str())?,
                max_frame: socket::DEFAULT_MAX_FRAME,
            },
        })
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        match self {
            Channel::Socket { listener, .. } => listener.local_addr().ok(),
            _ => None,
        }
    }

    /// Runs one round: every client `i` (with id `i`) receives `global`, runs
    /// `work`, and uploads the result. A failing client aborts the round.
    pub fn exchange_round<C: Send>(
        &self,
        global: &WireMessage,
        clients: &mut [C],
        work: &ClientWork<'_, C>,
    ) -> Result<Vec<WireMessage>> {
        match self {
            Channel::Memory => memory_round(global, clients, work),
            Channel::Fs(ex) => fs_round(ex, global, clients, work),
            Channel::Socket { listener, max_frame } => socket_round(listener, *max_frame, global, clients, work),
        }
    }
}

fn client_err(client_id: u64, e: Error) -> Error {
    match e {
        e @ Error::Client { .. } => e,
        e => Error::Client {
            client_id,
            source: Box::new(e),
        },
    }
}

fn memory_round<C: Send>(
    global: &WireMessage,
    clients: &mut [C],
    work: &ClientWork<'_, C>,
) -> Result<Vec<WireMessage>> {
    let (tx, rx) = mpsc::channel();
    thread::scope(|scope| {
        for (i, client) in clients.iter_mut().enumerate() {
            let tx = tx.clone();
            scope.spawn(move || {
                let r = work(client, global.clone()).map_err(|e| client_err(i as u64, e));
                let _ = tx.send(r);
            });
        }
    });
    drop(tx);
    rx.into_iter().collect()
}

fn fs_round<C: Send>(
    ex: &FsExchange,
    global: &WireMessage,
    clients: &mut [C],
    work: &ClientWork<'_, C>,
) -> Result<Vec<WireMessage>> {
    let round = global.round;
    let digest = global.schema_digest;
    ex.put(global)?;
    let results: Vec<Result<()>> = thread::scope(|scope| {
        let handles: Vec<_> = clients
            .iter_mut()
            .map(|client| {
                scope.spawn(move || {
                    let downloaded = ex.get_global(round, digest)?;
                    let inc = work(client, downloaded)?;
                    ex.put(&inc).map(|_| ())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect()
    });
    for (i, r) in results.into_iter().enumerate() {
        r.map_err(|e| client_err(i as u64, e))?;
    }
    (0..clients.len() as u64)
        .map(|i| ex.get_increment(round, i, digest))
        .collect()
}

fn socket_round<C: Send>(
    listener: &TcpListener,
    max_frame: usize,
    global: &WireMessage,
    clients: &mut [C],
    work: &ClientWork<'_, C>,
) -> Result<Vec<WireMessage>> {
    let addr = listener.local_addr()?;
    let n = clients.len();
    thread::scope(|scope| {
        let server = scope.spawn(|| socket::serve_round(listener, global, n, max_frame));
        let handles: Vec<_> = clients
            .iter_mut()
            .enumerate()
            .map(|(i, client)| {
                scope.spawn(move || {
                    let hello = WireMessage::control(MessageKind::Hello, global.round, i as u64, global.schema_digest);
                    socket::client_session(addr, hello, max_frame, |g| work(client, g))
                        .map_err(|e| client_err(i as u64, e))
                })
            })
            .collect();
        for h in handles {
            h.join().expect("client thread panicked")?;
        }
        server.join().expect("server thread panicked")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn echo_work(client: &mut u64, g: WireMessage) -> Result<WireMessage> {
        *client += 1;
        Ok(WireMessage {
            kind: MessageKind::Increment,
            round: g.round,
            client_id: *client - 1,
            schema_digest: g.schema_digest,
            payload: g.payload.iter().map(|l| l.iter().map(|x| x * 2.0).collect()).collect(),
        })
    }

    fn global() -> WireMessage {
        WireMessage {
            kind: MessageKind::GlobalParams,
            round: 4,
            client_id: 0,
            schema_digest: 99,
            payload: vec![vec![1.0, 2.0], vec![3.0]],
        }
    }

    fn sorted(mut v: Vec<WireMessage>) -> Vec<WireMessage> {
        v.sort_by_key(|m| m.client_id);
        v
    }

    #[test]
    fn channels_deliver_identical_messages() {
        let dir = tempfile::tempdir().unwrap();
        let configs = [
            TransportConfig::Memory,
            TransportConfig::Fs {
                path: dir.path().into(),
            },
            TransportConfig::Socket {
                addr: "127.0.0.1:0".into(),
            },
        ];
        let mut outputs = Vec::new();
        for cfg in &configs {
            let ch = Channel::open(cfg).unwrap();
            let mut clients: Vec<u64> = (0..3).collect();
            let got = ch.exchange_round(&global(), &mut clients, &echo_work).unwrap();
            assert_eq!(clients, vec![1, 2, 3]);
            outputs.push(sorted(got));
        }
        for o in &outputs[1..] {
            assert_eq!(o.len(), 3);
            for (a, b) in o.iter().zip(&outputs[0]) {
                assert!(a.bitwise_eq(b));
            }
        }
    }

    #[test]
    fn client_failure_aborts_round() {
        let ch = Channel::open(&TransportConfig::Memory).unwrap();
        let mut clients = vec![0u64, 1];
        let work = |c: &mut u64, _g: WireMessage| -> Result<WireMessage> {
            if *c == 1 {
                Err(Error::Config("boom".into()))
            } else {
                Ok(WireMessage::control(MessageKind::Increment, 0, 0, 99))
            }
        };
        let err = ch.exchange_round(&global(), &mut clients, &work).unwrap_err();
        assert!(matches!(err, Error::Client { client_id: 1, .. }));
    }
}
