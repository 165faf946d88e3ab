//! Flat per-layer parameter storage in real-vector space.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::schema::ParameterSchema;

/// Scalar types the engine computes in: `f32` for training and the wire,
/// `f64` as a shadow precision for gradient checks.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// One flat array per layer, bound to a schema digest.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    digest: u64,
    layers: Vec<Vec<T>>,
}

/// The authoritative compressed parameter store.
pub type RealParams = Params<f32>;

impl<T: Real> Params<T> {
    pub fn zeros(schema: &ParameterSchema) -> Self {
        Self {
            digest: schema.digest(),
            layers: schema.layers().iter().map(|l| vec![T::zero(); l.real_size]).collect(),
        }
    }

    /// Wraps existing arrays; lengths must match the schema's real sizes.
    pub fn from_layers(schema: &ParameterSchema, layers: Vec<Vec<T>>) -> Result<Self> {
        check_layout(schema, &layers)?;
        Ok(Self {
            digest: schema.digest(),
            layers,
        })
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn layers(&self) -> &[Vec<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Vec<T>> {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flatten()
    }

    pub fn ensure_compatible(&self, other_digest: u64) -> Result<()> {
        if self.digest != other_digest {
            return Err(Error::IncompatibleParameters {
                expected: self.digest,
                actual: other_digest,
            });
        }
        Ok(())
    }

    fn check_same_layout(&self, other: &Self) -> Result<()> {
        self.ensure_compatible(other.digest)?;
        if self.layers.len() != other.layers.len()
            || self.layers.iter().zip(&other.layers).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        Ok(())
    }

    /// `self[k] += alpha * src[k]` for every element. `alpha == 0` leaves
    /// `self` bitwise untouched (no `-0.0 + 0.0` or `inf * 0` rewrites).
    pub fn axpy(&mut self, alpha: T, src: &Self) -> Result<()> {
        self.check_same_layout(src)?;
        if alpha.is_zero() {
            return Ok(());
        }
        for (d, s) in self.layers.iter_mut().zip(&src.layers) {
            for (x, &y) in d.iter_mut().zip(s) {
                *x = *x + alpha * y;
            }
        }
        Ok(())
    }

    pub fn add(&mut self, src: &Self) -> Result<()> {
        self.check_same_layout(src)?;
        for (d, s) in self.layers.iter_mut().zip(&src.layers) {
            for (x, &y) in d.iter_mut().zip(s) {
                *x = *x + y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for x in self.layers.iter_mut().flatten() {
            *x = *x * alpha;
        }
    }

    /// `self - base`, elementwise.
    pub fn difference(&self, base: &Self) -> Result<Self> {
        self.check_same_layout(base)?;
        let layers = self
            .layers
            .iter()
            .zip(&base.layers)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x - y).collect())
            .collect();
        Ok(Self {
            digest: self.digest,
            layers,
        })
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            digest: self.digest,
            layers: self
                .layers
                .iter()
                .map(|l| l.iter().map(|&x| U::from_f64(x.to_f64())).collect())
                .collect(),
        }
    }

    /// Bitwise equality (distinguishes `-0.0` from `0.0`, equates equal NaNs).
    pub fn bitwise_eq(&self, other: &Self) -> bool
    where
        T: Into<f64>,
    {
        self.digest == other.digest
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.len() == b.len()
                    && a.iter()
                        .zip(b)
                        .all(|(&x, &y)| Into::<f64>::into(x).to_bits() == Into::<f64>::into(y).to_bits())
            })
    }
}

pub(crate) fn check_layout<T>(schema: &ParameterSchema, layers: &[Vec<T>]) -> Result<()> {
    if layers.len() != schema.layers().len() {
        return Err(Error::Shape(format!(
            "expected {} layers, got {}",
            schema.layers().len(),
            layers.len()
        )));
    }
    for (l, data) in schema.layers().iter().zip(layers) {
        if data.len() != l.real_size {
            return Err(Error::Shape(format!(
                "layer `{}` expects {} real values, got {}",
                l.name,
                l.real_size,
                data.len()
            )));
        }
    }
    Ok(())
}

/// One client's parameter increment for one round: trained local params
/// minus round-start global params, in real-vector space.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundIncrement {
    pub round: u64,
    pub client_id: u64,
    pub deltas: RealParams,
}

impl RoundIncrement {
    pub fn schema_digest(&self) -> u64 {
        self.deltas.digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{build_schema, Gamma, LayerSpec};
    use proptest::prelude::*;

    fn schema(n: usize) -> ParameterSchema {
        build_schema(&[LayerSpec::new("b", &[n], true)], Gamma::ONE, 0).unwrap()
    }

    fn p(s: &ParameterSchema, v: &[f32]) -> RealParams {
        RealParams::from_layers(s, vec![v.to_vec()]).unwrap()
    }

    #[test]
    fn axpy_examples() {
        let s = schema(2);
        let mut d = p(&s, &[1.0, 2.0]);
        d.axpy(1.0, &p(&s, &[2.0, 4.0])).unwrap();
        assert_eq!(d.layers()[0], vec![3.0, 6.0]);

        let s1 = schema(1);
        let mut d = p(&s1, &[0.0]);
        d.axpy(-1.0, &p(&s1, &[5.0])).unwrap();
        assert_eq!(d.layers()[0], vec![-5.0]);
    }

    #[test]
    fn axpy_zero_alpha_is_identity() {
        let s = schema(3);
        let orig = p(&s, &[1.5, -0.0, 3.25e-9]);
        let mut d = orig.clone();
        d.axpy(0.0, &p(&s, &[7.0, 8.0, 9.0])).unwrap();
        assert!(d.bitwise_eq(&orig));
    }

    #[test]
    fn axpy_digest_mismatch() {
        let a = schema(2);
        let b = build_schema(&[LayerSpec::new("b", &[2], true)], Gamma::ONE, 1).unwrap();
        let mut d = p(&a, &[1.0, 2.0]);
        let err = d.axpy(1.0, &p(&b, &[1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::IncompatibleParameters { .. }));
    }

    #[test]
    fn from_layers_checks_length() {
        let s = schema(2);
        assert!(matches!(
            RealParams::from_layers(&s, vec![vec![1.0]]),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn add_then_subtract_within_one_ulp(
            v in proptest::collection::vec(-1e3f32..1e3, 1..64),
            seed in any::<u64>(),
        ) {
            let s = schema(v.len());
            let mut rng = crate::rng::Xoshiro256StarStar::seed_from_u64(seed);
            let delta: Vec<f32> = (0..v.len()).map(|_| (rng.next_f64() as f32 - 0.5) * 10.0).collect();
            let orig = p(&s, &v);
            let d = p(&s, &delta);
            let mut x = orig.clone();
            x.axpy(1.0, &d).unwrap();
            x.axpy(-1.0, &d).unwrap();
            for (a, b) in x.iter().zip(orig.iter()) {
                let ulp = (b.abs().max(f32::MIN_POSITIVE) * f32::EPSILON).max(delta_ulp(&delta));
                prop_assert!((a - b).abs() <= ulp, "{} vs {}", a, b);
            }
        }
    }

    // An add/subtract pair rounds twice at the magnitude of the larger operand.
    fn delta_ulp(d: &[f32]) -> f32 {
        d.iter().fold(0.0f32, |m, x| m.max(x.abs())) * f32::EPSILON
    }
}
