//! Small differentiable classifiers whose weights live behind virtual views.
//!
//! Forward and backward passes run on the expanded virtual matrices; the
//! resulting virtual gradients are folded back to real space with
//! [`IndexMaps::scatter_layer`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::IndexMaps;
use crate::params::{Params, Real, RealParams};
use crate::rng::{mix_seed, Xoshiro256StarStar};
use crate::schema::{LayerSpec, ParameterSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearSoftmax,
    #[serde(rename = "mlp-1h")]
    Mlp1h,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub exempt_biases: bool,
}

fn default_hidden() -> usize {
    32
}

fn default_true() -> bool {
    true
}

impl ModelSpec {
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::LinearSoftmax,
            input_dim,
            hidden_dim: 0,
            num_classes,
            exempt_biases: true,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp1h,
            input_dim,
            hidden_dim,
            num_classes,
            exempt_biases: true,
        }
    }

    /// `[W, b]` or `[W1, b1, W2, b2]`; weights are `(out x in)` row-major.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let eb = self.exempt_biases;
        match self.kind {
            ModelKind::LinearSoftmax => vec![
                LayerSpec::new("w", &[self.num_classes, self.input_dim], false),
                LayerSpec::new("b", &[self.num_classes], eb),
            ],
            ModelKind::Mlp1h => vec![
                LayerSpec::new("w1", &[self.hidden_dim, self.input_dim], false),
                LayerSpec::new("b1", &[self.hidden_dim], eb),
                LayerSpec::new("w2", &[self.num_classes, self.hidden_dim], false),
                LayerSpec::new("b2", &[self.num_classes], eb),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "model.input_dim and model.num_classes must be positive".into(),
            ));
        }
        if self.kind == ModelKind::Mlp1h && self.hidden_dim == 0 {
            return Err(Error::Config("model.hidden_dim must be positive for mlp-1h".into()));
        }
        Ok(())
    }

    fn check_schema(&self, schema_layers: usize, maps: &IndexMaps) -> Result<()> {
        let expected = self.layer_specs().len();
        if schema_layers != expected || maps.len() != expected {
            return Err(Error::Shape(format!(
                "model expects {expected} layers, parameters have {schema_layers}"
            )));
        }
        Ok(())
    }
}

/// A set of labelled examples, features stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input_dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Batch {
    pub fn new(input_dim: usize, features: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::Shape(format!(
                "{} features for {} examples of dimension {input_dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            input_dim,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> &[f32] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Copies the listed examples, in the listed order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.example(i));
            labels.push(self.labels[i]);
        }
        Batch {
            input_dim: self.input_dim,
            features,
            labels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub grad: Params<T>,
}

fn check_labels(spec: &ModelSpec, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if batch.input_dim != spec.input_dim {
        return Err(Error::Shape(format!(
            "batch has input dimension {}, model expects {}",
            batch.input_dim, spec.input_dim
        )));
    }
    if let Some(&l) = batch.labels.iter().find(|&&l| l as usize >= spec.num_classes) {
        return Err(Error::Shape(format!(
            "label {l} out of range for {} classes",
            spec.num_classes
        )));
    }
    Ok(())
}

// out[r] = sum_c m[r * cols + c] * x[c]
fn matvec<T: Real>(m: &[T], x: &[T], bias: &[T], out: &mut [T]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * cols..(r + 1) * cols];
        *o = row.iter().zip(x).fold(bias[r], |acc, (&w, &xi)| acc + w * xi);
    }
}

/// Numerically stable `log(sum(exp(z)))` and the softmax written to `probs`.
fn log_softmax<T: Real>(logits: &[T], probs: &mut [T]) -> T {
    let max = logits.iter().fold(T::neg_infinity(), |m, &z| m.max(z));
    let mut sum = T::zero();
    for (p, &z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
        sum = sum + *p;
    }
    for p in probs.iter_mut() {
        *p = *p / sum;
    }
    max + sum.ln()
}

/// Mean cross-entropy loss and its real-space gradient.
pub fn forward_loss_grad<T: Real>(
    spec: &ModelSpec,
    params: &Params<T>,
    maps: &IndexMaps,
    batch: &Batch,
) -> Result<LossGrad<T>> {
    check_labels(spec, batch)?;
    spec.check_schema(params.layers().len(), maps)?;
    let virt = maps.expand_all(params)?;
    let n = T::from_f64(batch.len() as f64);
    let mut vgrad: Vec<Vec<T>> = virt.iter().map(|v| vec![T::zero(); v.len()]).collect();
    let mut total = T::zero();

    let x_buf = &mut vec![T::zero(); spec.input_dim];
    let c = spec.num_classes;
    let mut logits = vec![T::zero(); c];
    let mut probs = vec![T::zero(); c];

    match spec.kind {
        ModelKind::LinearSoftmax => {
            let (w, b) = (&virt[0], &virt[1]);
            for i in 0..batch.len() {
                load(x_buf, batch.example(i));
                matvec(w, x_buf, b, &mut logits);
                let y = batch.labels[i] as usize;
                total = total + log_softmax(&logits, &mut probs) - logits[y];
                let (gw, rest) = vgrad.split_at_mut(1);
                for k in 0..c {
                    let d = (probs[k] - indicator::<T>(k == y)) / n;
                    rest[0][k] = rest[0][k] + d;
                    let row = &mut gw[0][k * spec.input_dim..(k + 1) * spec.input_dim];
                    for (g, &xj) in row.iter_mut().zip(x_buf.iter()) {
                        *g = *g + d * xj;
                    }
                }
            }
        }
        ModelKind::Mlp1h => {
            let h = spec.hidden_dim;
            let (w1, b1, w2, b2) = (&virt[0], &virt[1], &virt[2], &virt[3]);
            let mut z1 = vec![T::zero(); h];
            let mut act = vec![T::zero(); h];
            let mut dl = vec![T::zero(); c];
            let mut dz = vec![T::zero(); h];
            for i in 0..batch.len() {
                load(x_buf, batch.example(i));
                matvec(w1, x_buf, b1, &mut z1);
                for (a, &z) in act.iter_mut().zip(&z1) {
                    *a = z.max(T::zero());
                }
                matvec(w2, &act, b2, &mut logits);
                let y = batch.labels[i] as usize;
                total = total + log_softmax(&logits, &mut probs) - logits[y];

                for k in 0..c {
                    dl[k] = (probs[k] - indicator::<T>(k == y)) / n;
                }
                dz.iter_mut().for_each(|d| *d = T::zero());
                for k in 0..c {
                    let d = dl[k];
                    vgrad[3][k] = vgrad[3][k] + d;
                    let wrow = &w2[k * h..(k + 1) * h];
                    let grow = &mut vgrad[2][k * h..(k + 1) * h];
                    for j in 0..h {
                        grow[j] = grow[j] + d * act[j];
                        dz[j] = dz[j] + d * wrow[j];
                    }
                }
                for j in 0..h {
                    if z1[j] <= T::zero() {
                        continue;
                    }
                    let d = dz[j];
                    vgrad[1][j] = vgrad[1][j] + d;
                    let grow = &mut vgrad[0][j * spec.input_dim..(j + 1) * spec.input_dim];
                    for (g, &xk) in grow.iter_mut().zip(x_buf.iter()) {
                        *g = *g + d * xk;
                    }
                }
            }
        }
    }

    let loss = total.to_f64() / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            layer: offending_layer(spec, params),
        });
    }
    let grad = vgrad
        .iter()
        .enumerate()
        .map(|(l, g)| maps.scatter_layer(l, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossGrad {
        loss,
        grad: params_like(params, grad),
    })
}

fn params_like<T: Real>(params: &Params<T>, layers: Vec<Vec<T>>) -> Params<T> {
    let mut out = params.clone();
    for (dst, src) in out.layers_mut().iter_mut().zip(layers) {
        *dst = src;
    }
    out
}

fn load<T: Real>(dst: &mut [T], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = T::from_f64(s as f64);
    }
}

fn indicator<T: Real>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}

/// First layer holding a non-finite value; the output layer when every
/// parameter is finite (the overflow happened in the logits).
fn offending_layer<T: Real>(spec: &ModelSpec, params: &Params<T>) -> String {
    let names = spec.layer_specs();
    params
        .layers()
        .iter()
        .position(|l| l.iter().any(|x| !x.is_finite()))
        .map(|i| names[i].name.clone())
        .unwrap_or_else(|| names[names.len() - 2].name.clone())
}

/// Index of the largest logit for every example; ties go to the lowest
/// class index.
pub fn predict(spec: &ModelSpec, params: &RealParams, maps: &IndexMaps, batch: &Batch) -> Result<Vec<u32>> {
    spec.check_schema(params.layers().len(), maps)?;
    if batch.input_dim != spec.input_dim {
        return Err(Error::Shape("batch input dimension does not match the model".into()));
    }
    let virt = maps.expand_all(params)?;
    let mut logits = vec![0.0f32; spec.num_classes];
    let mut hidden = vec![0.0f32; spec.hidden_dim];
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let x = batch.example(i);
        match spec.kind {
            ModelKind::LinearSoftmax => matvec(&virt[0], x, &virt[1], &mut logits),
            ModelKind::Mlp1h => {
                matvec(&virt[0], x, &virt[1], &mut hidden);
                hidden.iter_mut().for_each(|a| *a = a.max(0.0));
                matvec(&virt[2], &hidden, &virt[3], &mut logits);
            }
        }
        let mut best = 0;
        for k in 1..logits.len() {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        out.push(best as u32);
    }
    Ok(out)
}

/// Fraction of examples whose predicted class equals the label.
pub fn evaluate(spec: &ModelSpec, params: &RealParams, maps: &IndexMaps, eval: &Batch) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Shape("empty evaluation split".into()));
    }
    let pred = predict(spec, params, maps, eval)?;
    let correct = pred.iter().zip(&eval.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / eval.len() as f64)
}

const INIT_STREAM: u64 = 0x1a17;

/// Uniform(-s, s) with `s = sqrt(6 / (fan_in + fan_out))` drawn directly in
/// real space for every weight matrix; biases start at zero.
pub fn init_params(schema: &ParameterSchema, master_seed: u64) -> RealParams {
    let mut params = RealParams::zeros(schema);
    for (i, (layer, data)) in schema.layers().iter().zip(params.layers_mut()).enumerate() {
        if layer.shape.len() != 2 {
            continue;
        }
        let (fan_out, fan_in) = (layer.shape[0], layer.shape[1]);
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = Xoshiro256StarStar::seed_from_u64(mix_seed(master_seed, &[INIT_STREAM, i as u64]));
        for x in data.iter_mut() {
            *x = ((rng.next_f64() * 2.0 - 1.0) * s) as f32;
        }
    }
    params
}
