//! Binary message format shared by every transport.
//!
//! ```text
//! offset size field
//!      0    4 magic "FOCR"
//!      4    4 version (u32 LE, currently 1)
//!      8    4 kind (u32 LE: 1 GLOBAL_PARAMS, 2 INCREMENT, 3 ACK, 4 HELLO)
//!     12    8 round (u64 LE)
//!     20    8 client id (u64 LE, 0 for the server)
//!     28    8 schema digest (u64 LE)
//!     36    4 layer count L (u32 LE)
//!     40  8*L element count per layer (u64 LE)
//!      .  4*n payload, f32 LE, layers in order
//! ```

use crate::error::{Error, Result};
use crate::params::{RealParams, RoundIncrement};
use crate::schema::ParameterSchema;

pub const MAGIC: &[u8; 4] = b"FOCR";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum MessageKind {
    GlobalParams = 1,
    Increment = 2,
    Ack = 3,
    Hello = 4,
}

impl TryFrom<u32> for MessageKind {
    type Error = Error;
    fn try_from(v: u32) -> Result<Self> {
        Ok(match v {
            1 => Self::GlobalParams,
            2 => Self::Increment,
            3 => Self::Ack,
            4 => Self::Hello,
            other => return Err(Error::Framing(format!("unknown message kind {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub round: u64,
    pub client_id: u64,
    pub schema_digest: u64,
    pub payload: Vec<Vec<f32>>,
}

impl WireMessage {
    pub fn control(kind: MessageKind, round: u64, client_id: u64, schema_digest: u64) -> Self {
        Self {
            kind,
            round,
            client_id,
            schema_digest,
            payload: Vec::new(),
        }
    }

    pub fn global(round: u64, params: &RealParams) -> Self {
        Self {
            kind: MessageKind::GlobalParams,
            round,
            client_id: 0,
            schema_digest: params.digest(),
            payload: params.layers().to_vec(),
        }
    }

    pub fn increment(inc: &RoundIncrement) -> Self {
        Self {
            kind: MessageKind::Increment,
            round: inc.round,
            client_id: inc.client_id,
            schema_digest: inc.schema_digest(),
            payload: inc.deltas.layers().to_vec(),
        }
    }

    /// Reinterprets the payload as parameters of `schema`.
    pub fn to_params(&self, schema: &ParameterSchema) -> Result<RealParams> {
        if self.schema_digest != schema.digest() {
            return Err(Error::IncompatibleParameters {
                expected: schema.digest(),
                actual: self.schema_digest,
            });
        }
        RealParams::from_layers(schema, self.payload.clone())
    }

    pub fn to_increment(&self, schema: &ParameterSchema) -> Result<RoundIncrement> {
        if self.kind != MessageKind::Increment {
            return Err(Error::Protocol(format!("expected INCREMENT, got {:?}", self.kind)));
        }
        if self.schema_digest != schema.digest() {
            return Err(Error::RejectedIncrement {
                client_id: self.client_id,
                expected: schema.digest(),
                actual: self.schema_digest,
            });
        }
        Ok(RoundIncrement {
            round: self.round,
            client_id: self.client_id,
            deltas: RealParams::from_layers(schema, self.payload.clone())?,
        })
    }

    pub fn encoded_len(&self) -> usize {
        encoded_len_for(self.payload.iter().map(Vec::len))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&self.schema_digest.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        for layer in &self.payload {
            out.extend_from_slice(&(layer.len() as u64).to_le_bytes());
        }
        for layer in &self.payload {
            for x in layer {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Framing(format!(
                "message of {} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Framing("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Framing(format!("unsupported version {version}")));
        }
        let kind = MessageKind::try_from(u32_at(8))?;
        let round = u64_at(12);
        let client_id = u64_at(20);
        let schema_digest = u64_at(28);
        let layer_count = u32_at(36) as usize;
        let table_end = layer_count
            .checked_mul(8)
            .and_then(|t| t.checked_add(HEADER_LEN))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Framing("truncated length table".into()))?;
        let counts: Vec<usize> = (0..layer_count).map(|i| u64_at(HEADER_LEN + 8 * i) as usize).collect();
        let total = counts
            .iter()
            .try_fold(0usize, |acc, &c| acc.checked_add(c))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Framing("payload size overflows".into()))?;
        if bytes.len() - table_end != total {
            return Err(Error::Framing(format!(
                "payload holds {} bytes, length table declares {total}",
                bytes.len() - table_end
            )));
        }
        let mut offset = table_end;
        let payload = counts
            .iter()
            .map(|&c| {
                let layer = bytes[offset..offset + 4 * c]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                offset += 4 * c;
                layer
            })
            .collect();
        Ok(Self {
            kind,
            round,
            client_id,
            schema_digest,
            payload,
        })
    }

    /// Bitwise equality, including the bit patterns of every float.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.round == other.round
            && self.client_id == other.client_id
            && self.schema_digest == other.schema_digest
            && self.payload.len() == other.payload.len()
            && self
                .payload
                .iter()
                .zip(&other.payload)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

/// Serialized size of a message whose layers hold the given element counts.
pub fn encoded_len_for(layer_lens: impl IntoIterator<Item = usize>) -> usize {
    layer_lens.into_iter().fold(HEADER_LEN, |acc, n| acc + 8 + 4 * n)
}

/// Serialized size of one increment (or global broadcast) for `schema`.
pub fn params_message_len(schema: &ParameterSchema) -> usize {
    encoded_len_for(schema.layers().iter().map(|l| l.real_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ack_is_header_only() {
        let m = WireMessage::control(MessageKind::Ack, 3, 1, 9);
        assert_eq!(m.encode().len(), 40);
        assert_eq!(m.encoded_len(), 40);
    }

    #[test]
    fn one_layer_of_three() {
        let m = WireMessage {
            kind: MessageKind::Increment,
            round: 0,
            client_id: 2,
            schema_digest: 7,
            payload: vec![vec![1.0, 2.0, 3.0]],
        };
        assert_eq!(m.encode().len(), 60);
        assert_eq!(m.encoded_len(), 60);
    }

    #[test]
    fn rejects_malformed() {
        let m = WireMessage {
            kind: MessageKind::GlobalParams,
            round: 1,
            client_id: 0,
            schema_digest: 7,
            payload: vec![vec![1.0], vec![2.0, 3.0]],
        };
        let bytes = m.encode();
        assert!(WireMessage::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(WireMessage::decode(&bytes[..39]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(WireMessage::decode(&bad).is_err());
        let mut bad = bytes;
        bad[36] = 200;
        assert!(WireMessage::decode(&bad).is_err());
    }

    fn arb_message() -> impl Strategy<Value = WireMessage> {
        (
            prop_oneof![
                Just(MessageKind::GlobalParams),
                Just(MessageKind::Increment),
                Just(MessageKind::Ack),
                Just(MessageKind::Hello)
            ],
            any::<u64>(),
            any::<u64>(),
            any::<u64>(),
            proptest::collection::vec(
                proptest::collection::vec(any::<u32>().prop_map(f32::from_bits), 0..20),
                0..5,
            ),
        )
            .prop_map(|(kind, round, client_id, schema_digest, payload)| WireMessage {
                kind,
                round,
                client_id,
                schema_digest,
                payload,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn decode_inverts_encode(m in arb_message()) {
            let bytes = m.encode();
            prop_assert_eq!(bytes.len(), m.encoded_len());
            let back = WireMessage::decode(&bytes).unwrap();
            prop_assert!(back.bitwise_eq(&m));
        }
    }
}
