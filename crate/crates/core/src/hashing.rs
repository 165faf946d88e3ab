//! Hash-compressed weight sharing.
//!
//! Each compressed layer owns a real vector `R` of `ceil(T * gamma)` values
//! and an index map `Idx` of length `T`. The virtual weight matrix that takes
//! part in forward computation is the gather `V[p] = R[Idx[p]]`; the
//! gradient with respect to `R[k]` is the sum of the virtual gradients at
//! every position that maps to `k`.
//!
//! `Idx[p] = floor(RS[p] * gamma)` where `RS` is a seeded Fisher-Yates
//! permutation of `0..T` (see [`crate::rng`]). The floor is exact integer
//! arithmetic on the rational gamma.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::params::{Params, Real};
use crate::rng::Xoshiro256StarStar;
use crate::schema::{Gamma, LayerSchema, ParameterSchema};

/// Maps every virtual position of one layer to an index into its real vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    pub layer: String,
    pub seed: u64,
    real_size: usize,
    indices: Vec<u32>,
}

impl IndexMap {
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn virtual_size(&self) -> usize {
        self.indices.len()
    }

    pub fn real_size(&self) -> usize {
        self.real_size
    }

    /// Builds a map from raw indices (e.g. a golden fixture); every index
    /// must be below `real_size`.
    pub fn from_indices(layer: impl Into<String>, seed: u64, real_size: usize, indices: Vec<u32>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= real_size) {
            return Err(Error::Shape(format!(
                "index {bad} out of range for real size {real_size}"
            )));
        }
        Ok(Self {
            layer: layer.into(),
            seed,
            real_size,
            indices,
        })
    }

    /// How many virtual positions share each real index.
    pub fn bucket_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.real_size];
        for &i in &self.indices {
            counts[i as usize] += 1;
        }
        counts
    }
}

/// Generates the index map for one layer.
///
/// # Panics
/// If `virtual_size` is zero or exceeds `u32::MAX`.
pub fn make_index_map(virtual_size: usize, gamma: Gamma, seed: u64) -> IndexMap {
    assert!(virtual_size >= 1, "virtual_size must be positive");
    assert!(virtual_size <= u32::MAX as usize, "layer too large for u32 indices");
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut rs: Vec<u32> = (0..virtual_size as u32).collect();
    rng.shuffle(&mut rs);
    let indices = rs.into_iter().map(|e| gamma.scale_floor(e as u64) as u32).collect();
    IndexMap {
        layer: String::new(),
        seed,
        real_size: gamma.scale_ceil(virtual_size as u64) as usize,
        indices,
    }
}

/// The index map of a compressed layer, `None` for exempt layers.
pub fn layer_index_map(layer: &LayerSchema) -> Option<IndexMap> {
    layer.compressed.then(|| {
        let mut map = make_index_map(layer.virtual_size, layer.gamma, layer.seed);
        map.layer = layer.name.clone();
        map
    })
}

/// Index maps for every layer of a schema, in layer order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMaps {
    digest: u64,
    maps: Vec<Option<IndexMap>>,
}

impl IndexMaps {
    pub fn for_schema(schema: &ParameterSchema) -> Self {
        Self {
            digest: schema.digest(),
            maps: schema.layers().iter().map(layer_index_map).collect(),
        }
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn get(&self, layer: usize) -> Option<&IndexMap> {
        self.maps[layer].as_ref()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Materializes the virtual view of one layer; exempt layers are copied.
    pub fn expand_layer<T: Copy>(&self, layer: usize, real: &[T]) -> Result<Vec<T>> {
        match &self.maps[layer] {
            Some(map) => expand(real, map),
            None => Ok(real.to_vec()),
        }
    }

    /// Virtual views of every layer.
    pub fn expand_all<T: Real>(&self, params: &Params<T>) -> Result<Vec<Vec<T>>> {
        if params.digest() != self.digest {
            return Err(Error::IncompatibleParameters {
                expected: self.digest,
                actual: params.digest(),
            });
        }
        params
            .layers()
            .iter()
            .enumerate()
            .map(|(i, r)| self.expand_layer(i, r))
            .collect()
    }

    /// Maps a virtual-space gradient of one layer into real space; exempt
    /// layers pass through unchanged.
    pub fn scatter_layer<T: Real>(&self, layer: usize, virtual_grad: &[T]) -> Result<Vec<T>> {
        match &self.maps[layer] {
            Some(map) => scatter_grad(virtual_grad, map),
            None => Ok(virtual_grad.to_vec()),
        }
    }
}

/// `out[p] = real[map.indices[p]]`.
pub fn expand<T: Copy>(real: &[T], map: &IndexMap) -> Result<Vec<T>> {
    if real.len() != map.real_size {
        return Err(Error::Shape(format!(
            "layer `{}`: real vector has {} values, map expects {}",
            map.layer,
            real.len(),
            map.real_size
        )));
    }
    Ok(map.indices.iter().map(|&i| real[i as usize]).collect())
}

/// `out[k] = sum of virtual_grad[p] over p with map.indices[p] == k`,
/// accumulated in ascending `p` with 64-bit accumulators.
pub fn scatter_grad<T: Real>(virtual_grad: &[T], map: &IndexMap) -> Result<Vec<T>> {
    if virtual_grad.len() != map.indices.len() {
        return Err(Error::Shape(format!(
            "layer `{}`: gradient has {} values, map covers {} positions",
            map.layer,
            virtual_grad.len(),
            map.indices.len()
        )));
    }
    let mut acc = vec![0.0f64; map.real_size];
    for (&k, &g) in map.indices.iter().zip(virtual_grad) {
        acc[k as usize] += g.to_f64();
    }
    Ok(acc.into_iter().map(T::from_f64).collect())
}

const FHIX_MAGIC: &[u8; 4] = b"FHIX";
const FHIX_VERSION: u32 = 1;

/// Writes indices as `"FHIX"`, version `u32`, count `u64`, then `u32` LE
/// entries.
pub fn write_index_file<W: Write>(mut w: W, indices: &[u32]) -> io::Result<()> {
    w.write_all(FHIX_MAGIC)?;
    w.write_all(&FHIX_VERSION.to_le_bytes())?;
    w.write_all(&(indices.len() as u64).to_le_bytes())?;
    for i in indices {
        w.write_all(&i.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_index_file<R: Read>(mut r: R) -> Result<Vec<u32>> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != FHIX_MAGIC {
        return Err(Error::Framing("bad index file magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != FHIX_VERSION {
        return Err(Error::Framing(format!("unsupported index file version {version}")));
    }
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != count * 4 {
        return Err(Error::Framing(format!(
            "index file declares {count} entries but holds {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
