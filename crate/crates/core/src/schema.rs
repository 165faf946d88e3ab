//! Layer schemas and the digest that binds every participant to one
//! architecture and one set of hash seeds.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::split_seed;

/// Compression ratio as an exact rational `num/den` in `(0, 1]`, kept in
/// lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Gamma {
    num: u32,
    den: u32,
}

impl Gamma {
    pub const ONE: Gamma = Gamma { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::InvalidSchema(format!(
                "gamma must lie in (0, 1], got {num}/{den}"
            )));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    /// `1/m`.
    pub fn reciprocal(m: u32) -> Result<Self> {
        Self::new(1, m)
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `floor(e * gamma)` in exact integer arithmetic.
    pub fn scale_floor(self, e: u64) -> u64 {
        ((e as u128 * self.num as u128) / self.den as u128) as u64
    }

    /// `ceil(t * gamma)` in exact integer arithmetic.
    pub fn scale_ceil(self, t: u64) -> u64 {
        let n = t as u128 * self.num as u128;
        n.div_ceil(self.den as u128) as u64
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl fmt::Display for Gamma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Gamma {
    type Err = Error;

    /// Accepts `"1"`, `"1/4"` or a terminating decimal such as `"0.25"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidSchema(format!("cannot parse gamma `{s}`"));
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Gamma::new(n, d);
        }
        if let Some((int, frac)) = s.split_once('.') {
            if frac.len() > 9 || !frac.chars().all(|c| c.is_ascii_digit()) {
                return Err(bad());
            }
            let int: u32 = if int.is_empty() {
                0
            } else {
                int.parse().map_err(|_| bad())?
            };
            let den = 10u64.pow(frac.len() as u32);
            let frac_val: u64 = if frac.is_empty() {
                0
            } else {
                frac.parse().map_err(|_| bad())?
            };
            let num = int as u64 * den + frac_val;
            let g = gcd64(num, den);
            let (num, den) = (num / g, den / g);
            if den > u32::MAX as u64 || num > u32::MAX as u64 {
                return Err(bad());
            }
            return Gamma::new(num as u32, den as u32);
        }
        Gamma::new(s.parse().map_err(|_| bad())?, 1)
    }
}

fn gcd64(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

impl TryFrom<String> for Gamma {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Gamma> for String {
    fn from(g: Gamma) -> String {
        g.to_string()
    }
}

/// A layer as declared by a model, before compression is applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Exempt layers (biases, normalization parameters) are never hashed.
    pub exempt: bool,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], exempt: bool) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            exempt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSchema {
    pub name: String,
    pub shape: Vec<usize>,
    /// Product of `shape`; the size of the virtual weight matrix.
    pub virtual_size: usize,
    pub compressed: bool,
    /// `1` for exempt layers.
    pub gamma: Gamma,
    pub seed: u64,
    /// Length of the real (stored, trained, transmitted) vector.
    pub real_size: usize,
}

impl LayerSchema {
    fn new(name: String, shape: Vec<usize>, compressed: bool, gamma: Gamma, seed: u64) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidSchema(format!("layer `{name}` has an empty shape")));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidSchema(format!(
                "layer `{name}` has a zero dimension in shape {shape:?}"
            )));
        }
        let virtual_size = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidSchema(format!("layer `{name}` is too large")))?;
        let gamma = if compressed { gamma } else { Gamma::ONE };
        let real_size = if compressed {
            gamma.scale_ceil(virtual_size as u64) as usize
        } else {
            virtual_size
        };
        Ok(Self {
            name,
            shape,
            virtual_size,
            compressed,
            gamma,
            seed,
            real_size,
        })
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.compressed as u8);
        out.extend_from_slice(&self.gamma.num().to_le_bytes());
        out.extend_from_slice(&self.gamma.den().to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
    }
}

/// The ordered layer list shared by all participants, plus its digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterSchema {
    layers: Vec<LayerSchema>,
    digest: u64,
}

impl ParameterSchema {
    /// Builds a schema from explicit per-layer descriptors. Names must be
    /// unique and no dimension may be zero.
    pub fn from_layers(layers: Vec<LayerSchema>) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::InvalidSchema(format!("duplicate layer name `{}`", l.name)));
            }
        }
        let mut schema = Self { layers, digest: 0 };
        schema.digest = fnv1a64(&schema.canonical_bytes());
        Ok(schema)
    }

    pub fn layers(&self) -> &[LayerSchema] {
        &self.layers
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSchema> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn total_real(&self) -> usize {
        self.layers.iter().map(|l| l.real_size).sum()
    }

    pub fn total_virtual(&self) -> usize {
        self.layers.iter().map(|l| l.virtual_size).sum()
    }

    /// The canonical little-endian encoding hashed into the digest.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.encode_into(&mut out);
        }
        out
    }

    /// Returns a copy with one layer's seed replaced (digest recomputed).
    pub fn with_layer_seed(&self, index: usize, seed: u64) -> Self {
        let mut layers = self.layers.clone();
        layers[index].seed = seed;
        Self::from_layers(layers).expect("names unchanged")
    }
}

/// Applies `gamma` to every non-exempt layer and derives per-layer seeds as
/// `splitmix64(master_seed ^ layer_index)`.
pub fn build_schema(layers: &[LayerSpec], gamma: Gamma, master_seed: u64) -> Result<ParameterSchema> {
    if layers.is_empty() {
        return Err(Error::InvalidSchema("model has no layers".into()));
    }
    let layers = layers
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            LayerSchema::new(
                spec.name.clone(),
                spec.shape.clone(),
                !spec.exempt,
                gamma,
                split_seed(master_seed, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    ParameterSchema::from_layers(layers)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}
