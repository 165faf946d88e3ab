//! Fixtures produced outside the crate: index maps from the Python reference
//! in `golden/`, PRNG streams, and hand-assembled wire bytes.

use std::fs;
use std::path::Path;

use hashfed_core::hashing::read_index_file;
use hashfed_core::rng::{splitmix64, Xoshiro256StarStar};
use hashfed_core::transport::MessageKind;
use hashfed_core::*;

fn hex(s: &str) -> Vec<u8> {
    let s: String = s.split_whitespace().collect();
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
        .collect()
}

#[test]
fn index_maps_match_reference_files() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut seen = 0;
    for t in [8usize, 16, 64] {
        for (tag, gamma) in [("1-2", Gamma::new(1, 2).unwrap()), ("1-4", Gamma::new(1, 4).unwrap())] {
            for seed in [0u64, 1, 42] {
                let path = dir.join(format!("idx_t{t}_g{tag}_s{seed}.fhix"));
                let expected = read_index_file(fs::File::open(&path).unwrap()).unwrap();
                let got = make_index_map(t, gamma, seed);
                assert_eq!(got.indices(), &expected[..], "{}", path.display());
                seen += 1;
            }
        }
    }
    assert_eq!(seen, 18);
}

#[test]
fn index_file_bytes_round_trip() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let raw = fs::read(dir.join("idx_t8_g1-2_s42.fhix")).unwrap();
    let mut out = Vec::new();
    hashfed_core::hashing::write_index_file(&mut out, &[3, 1, 2, 0, 1, 2, 0, 3]).unwrap();
    assert_eq!(raw, out);
}

#[test]
fn documented_small_map() {
    let map = make_index_map(8, Gamma::new(1, 2).unwrap(), 42);
    assert_eq!(map.indices(), &[3, 1, 2, 0, 1, 2, 0, 3]);
    assert_eq!(map.real_size(), 4);
}

#[test]
fn xoshiro_streams() {
    let mut r = Xoshiro256StarStar::seed_from_u64(0);
    let got: Vec<u64> = (0..4).map(|_| r.next_u64()).collect();
    assert_eq!(
        got,
        [
            11091344671253066420,
            13793997310169335082,
            1900383378846508768,
            7684712102626143532
        ]
    );
    let mut r = Xoshiro256StarStar::seed_from_u64(42);
    let got: Vec<u64> = (0..4).map(|_| r.next_u64()).collect();
    assert_eq!(
        got,
        [
            1546998764402558742,
            6990951692964543102,
            12544586762248559009,
            17057574109182124193
        ]
    );
}

#[test]
fn splitmix_values() {
    let got: Vec<u64> = (0..4).map(splitmix64).collect();
    assert_eq!(
        got,
        [
            16294208416658607535,
            10451216379200822465,
            10905525725756348110,
            2092789425003139053
        ]
    );
}

#[test]
fn hello_message_bytes() {
    let msg = WireMessage::control(MessageKind::Hello, 3, 7, 0x0102_0304_0506_0708);
    let expected = hex("464f4352 01000000 04000000
         0300000000000000 0700000000000000 0807060504030201
         00000000");
    assert_eq!(msg.encode(), expected);
    assert_eq!(WireMessage::decode(&expected).unwrap(), msg);
}

#[test]
fn increment_message_bytes() {
    let msg = WireMessage {
        kind: MessageKind::Increment,
        round: 1,
        client_id: 2,
        schema_digest: 0xaf63_dc4c_8601_ec8c,
        payload: vec![vec![1.0], vec![-2.0, 0.5]],
    };
    let expected = hex("464f4352 01000000 02000000
         0100000000000000 0200000000000000 8cec01864cdc63af
         02000000
         0100000000000000 0200000000000000
         0000803f 000000c0 0000003f");
    assert_eq!(msg.encode(), expected);
    assert_eq!(msg.encoded_len(), expected.len());
    assert!(WireMessage::decode(&expected).unwrap().bitwise_eq(&msg));
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[test]
fn schema_digest_from_hand_encoding() {
    let layers = vec![
        LayerSpec {
            name: "w".into(),
            shape: vec![2, 3],
            exempt: false,
        },
        LayerSpec {
            name: "b".into(),
            shape: vec![2],
            exempt: true,
        },
    ];
    let schema = build_schema(&layers, Gamma::new(1, 2).unwrap(), 5).unwrap();
    let mut bytes = Vec::new();
    for l in schema.layers() {
        bytes.extend((l.name.len() as u32).to_le_bytes());
        bytes.extend(l.name.as_bytes());
        bytes.extend((l.shape.len() as u32).to_le_bytes());
        for &d in &l.shape {
            bytes.extend((d as u32).to_le_bytes());
        }
        bytes.push(l.compressed as u8);
        let (num, den) = if l.compressed { (1u32, 2u32) } else { (1, 1) };
        bytes.extend(num.to_le_bytes());
        bytes.extend(den.to_le_bytes());
        bytes.extend(l.seed.to_le_bytes());
    }
    assert_eq!(schema.digest(), fnv(&bytes));
}
