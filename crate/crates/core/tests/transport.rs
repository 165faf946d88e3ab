use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;

use hashfed_core::experiment::{self, RunConfig};
use hashfed_core::transport::socket::{client_session, read_frame, serve_session, DEFAULT_MAX_FRAME};
use hashfed_core::transport::{FsExchange, MessageKind, ReadMode};
use hashfed_core::{Error, TransportConfig, WireMessage};

fn global(round: u64, fill: f32, len: usize) -> WireMessage {
    WireMessage {
        kind: MessageKind::GlobalParams,
        round,
        client_id: 0,
        schema_digest: 0xfeed,
        payload: vec![vec![fill; len], vec![fill; 3]],
    }
}

#[test]
fn readers_never_see_a_torn_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ex = FsExchange::new(dir.path(), ReadMode::NonBlocking);
    ex.put(&global(0, 0.0, 50_000)).unwrap();
    let done = AtomicBool::new(false);
    thread::scope(|s| {
        s.spawn(|| {
            for gen in 1..200 {
                ex.put(&global(0, gen as f32, 50_000)).unwrap();
            }
            done.store(true, Ordering::SeqCst);
        });
        for _ in 0..4 {
            s.spawn(|| {
                let mut reads = 0;
                while !done.load(Ordering::SeqCst) || reads == 0 {
                    let msg = ex.get_global(0, 0xfeed).unwrap();
                    let first = msg.payload[0][0];
                    assert!(msg.payload.iter().flatten().all(|&x| x == first));
                    reads += 1;
                }
            });
        }
    });
}

#[test]
fn missing_checkpoint_is_not_ready() {
    let dir = tempfile::tempdir().unwrap();
    let ex = FsExchange::new(dir.path(), ReadMode::NonBlocking);
    assert!(matches!(ex.get_global(3, 1), Err(Error::NotReady(_))));
}

#[test]
fn checkpoint_with_foreign_digest_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let ex = FsExchange::new(dir.path(), ReadMode::NonBlocking);
    ex.put(&global(0, 1.0, 4)).unwrap();
    assert!(matches!(ex.get_global(0, 0xbeef), Err(Error::CorruptCheckpoint { .. })));
    std::fs::write(ex.global_path(0), b"FOCR\x01").unwrap();
    assert!(matches!(ex.get_global(0, 0xfeed), Err(Error::CorruptCheckpoint { .. })));
}

#[test]
fn two_socket_clients_match_memory() {
    let base = RunConfig {
        clients: 2,
        rounds: 3,
        gamma: "1/4".parse().unwrap(),
        seed: 5,
        ..RunConfig::default()
    };
    let mem = experiment::run_federated(&base).unwrap();
    let sock = experiment::run_federated(&RunConfig {
        transport: TransportConfig::Socket {
            addr: "127.0.0.1:0".into(),
        },
        ..base
    })
    .unwrap();
    assert!(mem.final_params.bitwise_eq(&sock.final_params));
    assert_eq!(mem.csv(), sock.csv());
}

#[test]
fn hello_with_wrong_digest_is_refused() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let g = global(0, 1.0, 4);
    let server = thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        serve_session(&mut stream, &g, DEFAULT_MAX_FRAME)
    });
    let hello = WireMessage::control(MessageKind::Hello, 0, 0, 0xdead);
    let client = client_session(addr, hello, DEFAULT_MAX_FRAME, |_| {
        panic!("must not receive parameters")
    });
    assert!(matches!(client, Err(Error::Protocol(_))));
    assert!(matches!(server.join().unwrap(), Err(Error::Protocol(_))));
}

#[test]
fn oversized_frame_is_rejected_before_reading_body() {
    let mut bytes = (u32::MAX).to_le_bytes().to_vec();
    bytes.extend([0u8; 16]);
    let err = read_frame(&mut &bytes[..], DEFAULT_MAX_FRAME).unwrap_err();
    assert!(matches!(err, Error::Framing(_)));
}

#[test]
fn truncated_frame_is_a_framing_error() {
    let msg = global(1, 2.0, 8).encode();
    let mut bytes = (msg.len() as u32).to_le_bytes().to_vec();
    bytes.extend(&msg[..msg.len() - 3]);
    assert!(matches!(
        read_frame(&mut &bytes[..], DEFAULT_MAX_FRAME),
        Err(Error::Framing(_))
    ));
}
