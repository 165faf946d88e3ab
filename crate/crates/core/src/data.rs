//! Procedural glyph dataset and client partitioners.

use std::io::{self, Read, Write};

use rand_distr::{Distribution, Gamma as GammaDist};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{mix_seed, Xoshiro256StarStar};

pub const GLYPH_SIDE: usize = 8;
pub const NUM_GLYPHS: usize = 10;

/// Bold 8x8 letter masks (O I L T X H E Z V C), one byte per row, MSB is
/// the left-most pixel. Strokes are two pixels wide so that a one-pixel
/// shift keeps most of a glyph's mass in place.
pub const GLYPHS: [[u8; GLYPH_SIDE]; NUM_GLYPHS] = [
    // O
    [
        0b01111110, 0b11000011, 0b11000011, 0b11000011, 0b11000011, 0b11000011, 0b01111110, 0b00000000,
    ],
    // I
    [
        0b00111100, 0b00011000, 0b00011000, 0b00011000, 0b00011000, 0b00011000, 0b00111100, 0b00000000,
    ],
    // L
    [
        0b11000000, 0b11000000, 0b11000000, 0b11000000, 0b11000000, 0b11000000, 0b11111110, 0b00000000,
    ],
    // T
    [
        0b11111111, 0b11111111, 0b00011000, 0b00011000, 0b00011000, 0b00011000, 0b00011000, 0b00000000,
    ],
    // X
    [
        0b11000011, 0b01100110, 0b00111100, 0b00011000, 0b00111100, 0b01100110, 0b11000011, 0b00000000,
    ],
    // H
    [
        0b11000011, 0b11000011, 0b11000011, 0b11111111, 0b11000011, 0b11000011, 0b11000011, 0b00000000,
    ],
    // E
    [
        0b11111111, 0b11000000, 0b11000000, 0b11111100, 0b11000000, 0b11000000, 0b11111111, 0b00000000,
    ],
    // Z
    [
        0b11111111, 0b00000110, 0b00001100, 0b00011000, 0b00110000, 0b01100000, 0b11111111, 0b00000000,
    ],
    // V
    [
        0b11000011, 0b11000011, 0b11000011, 0b01100110, 0b01100110, 0b00111100, 0b00011000, 0b00000000,
    ],
    // C
    [
        0b01111110, 0b11000000, 0b11000000, 0b11000000, 0b11000000, 0b11000000, 0b01111110, 0b00000000,
    ],
];

/// The clean mask of one glyph as `0.0`/`1.0` pixels.
pub fn glyph_pixels(class: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(GLYPH_SIDE * GLYPH_SIDE);
    for row in GLYPHS[class] {
        for c in 0..GLYPH_SIDE {
            out.push(((row >> (GLYPH_SIDE - 1 - c)) & 1) as f32);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_flip")]
    pub p_flip: f64,
    #[serde(default = "default_shift")]
    pub max_shift: u32,
    /// Generator seed; derived from the run's master seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_n() -> usize {
    5000
}

fn default_flip() -> f64 {
    0.05
}

fn default_shift() -> u32 {
    1
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: default_n(),
            p_flip: default_flip(),
            max_shift: default_shift(),
            seed: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("data.n must be at least 2".into()));
        }
        if !(0.0..0.5).contains(&self.p_flip) {
            return Err(Error::Config("data.p_flip must lie in [0, 0.5)".into()));
        }
        if self.max_shift > 2 {
            return Err(Error::Config("data.max_shift must be 0, 1 or 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphDataset {
    pub seed: u64,
    pub p_flip: f64,
    pub max_shift: u32,
    pub examples: Batch,
}

impl GlyphDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        NUM_GLYPHS
    }

    /// Held-out evaluation examples: the last 20% of generated indices.
    pub fn eval_range(&self) -> std::ops::Range<usize> {
        let n = self.len();
        (n - n / 5)..n
    }

    /// Indices available for training (everything before the eval split).
    pub fn train_len(&self) -> usize {
        self.eval_range().start
    }

    pub fn train_split(&self) -> Batch {
        self.examples.select(&(0..self.train_len()).collect::<Vec<_>>())
    }

    pub fn eval_split(&self) -> Batch {
        self.examples.select(&self.eval_range().collect::<Vec<_>>())
    }
}

/// Generates `n` noisy glyphs. Each example draws, in order from one
/// xoshiro256** stream: its class (`below(10)`), its horizontal then
/// vertical shift (`below(2s+1) - s` each), then one `next_f64() < p_flip`
/// test per pixel in row-major order.
pub fn generate(n: usize, seed: u64, p_flip: f64, max_shift: u32) -> GlyphDataset {
    assert!(n >= 1);
    assert!((0.0..0.5).contains(&p_flip));
    assert!(max_shift <= 2);
    let side = GLYPH_SIDE as i64;
    let masks: Vec<Vec<f32>> = (0..NUM_GLYPHS).map(glyph_pixels).collect();
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n * GLYPH_SIDE * GLYPH_SIDE);
    let mut labels = Vec::with_capacity(n);
    let s = max_shift as u64;
    for _ in 0..n {
        let class = rng.below(NUM_GLYPHS as u64) as usize;
        let dx = rng.below(2 * s + 1) as i64 - s as i64;
        let dy = rng.below(2 * s + 1) as i64 - s as i64;
        for r in 0..side {
            for c in 0..side {
                let (sr, sc) = (r - dy, c - dx);
                let mut v = if (0..side).contains(&sr) && (0..side).contains(&sc) {
                    masks[class][(sr * side + sc) as usize]
                } else {
                    0.0
                };
                if rng.next_f64() < p_flip {
                    v = 1.0 - v;
                }
                features.push(v);
            }
        }
        labels.push(class as u32);
    }
    GlyphDataset {
        seed,
        p_flip,
        max_shift,
        examples: Batch {
            input_dim: GLYPH_SIDE * GLYPH_SIDE,
            features,
            labels,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionKind {
    Uniform,
    LabelSkew { alpha: f64 },
}

/// Disjoint, exhaustive assignment of example indices to clients. Each shard
/// is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }
}

/// Seeded permutation of `0..n` dealt round-robin into `c` shards.
pub fn split_uniform(n: usize, c: usize, seed: u64) -> Result<Partition> {
    if c == 0 || n < c {
        return Err(Error::Config(format!("cannot split {n} examples across {c} clients")));
    }
    let perm = Xoshiro256StarStar::seed_from_u64(seed).permutation(n);
    let mut shards = vec![Vec::with_capacity(n / c + 1); c];
    for (i, idx) in perm.into_iter().enumerate() {
        shards[i % c].push(idx);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(Partition { shards })
}

const MAX_SKEW_DRAWS: usize = 10;

/// Label-skewed split. For every class in ascending order: shuffle that
/// class's indices, draw client proportions from Dirichlet(alpha) (normalized
/// Gamma(alpha, 1) draws), and cut the shuffled list at
/// `floor(cumulative_share * class_count)`. The whole draw is repeated, up to
/// ten times, while any client ends up empty.
pub fn split_label_skew(labels: &[u32], c: usize, alpha: f64, seed: u64) -> Result<Partition> {
    if c == 0 || labels.len() < c {
        return Err(Error::Config(format!(
            "cannot split {} examples across {c} clients",
            labels.len()
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("label-skew alpha must be positive, got {alpha}")));
    }
    let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let gamma = GammaDist::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    for _ in 0..MAX_SKEW_DRAWS {
        let mut shards = vec![Vec::new(); c];
        for members in &by_class {
            let mut members = members.clone();
            rng.shuffle(&mut members);
            let mut weights: Vec<f64> = (0..c).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                weights.iter_mut().for_each(|w| *w /= total);
            } else {
                weights = vec![1.0 / c as f64; c];
            }
            let n = members.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (client, w) in weights.iter().enumerate() {
                cum += w;
                let end = if client + 1 == c {
                    n
                } else {
                    ((cum * n as f64).floor() as usize).clamp(start, n)
                };
                shards[client].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            for s in &mut shards {
                s.sort_unstable();
            }
            return Ok(Partition { shards });
        }
    }
    Err(Error::Config(format!(
        "label-skew split left a client empty after {MAX_SKEW_DRAWS} draws (alpha={alpha}, clients={c})"
    )))
}

const DATASET_MAGIC: &[u8; 4] = b"FGLY";
const DATASET_VERSION: u32 = 1;

/// Flat export: `"FGLY"`, version `u32`, count `u64`, input_dim `u32`,
/// classes `u32`, then `count * input_dim` f32 LE pixels, then `count` u32 LE
/// labels.
pub fn write_dataset<W: Write>(mut w: W, ds: &GlyphDataset) -> io::Result<()> {
    let ex = &ds.examples;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(ex.len() as u64).to_le_bytes())?;
    w.write_all(&(ex.input_dim as u32).to_le_bytes())?;
    w.write_all(&(NUM_GLYPHS as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(ex.features.len() * 4 + ex.labels.len() * 4);
    for x in &ex.features {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for l in &ex.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads a file written by [`write_dataset`]; returns the examples and the
/// declared class count.
pub fn read_dataset<R: Read>(mut r: R) -> Result<(Batch, usize)> {
    let mut header = [0u8; 24];
    r.read_exact(&mut header)?;
    if &header[..4] != DATASET_MAGIC {
        return Err(Error::Framing("bad dataset magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::Framing(format!("unsupported dataset version {version}")));
    }
    let n = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
    let classes = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != n * dim * 4 + n * 4 {
        return Err(Error::Framing("dataset body length does not match header".into()));
    }
    let (px, lb) = body.split_at(n * dim * 4);
    let features = px
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = lb
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Batch::new(dim, features, labels)?, classes))
}

/// Seed for the data generator of a run.
pub fn data_seed(master_seed: u64, cfg: &DataConfig) -> u64 {
    cfg.seed.unwrap_or_else(|| mix_seed(master_seed, &[0xda7a]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clean_glyphs_are_exact_masks() {
        let ds = generate(200, 4, 0.0, 0);
        for i in 0..ds.len() {
            let class = ds.examples.labels[i] as usize;
            assert_eq!(ds.examples.example(i), glyph_pixels(class).as_slice());
        }
    }

    #[test]
    fn glyphs_are_distinct() {
        for a in 0..NUM_GLYPHS {
            for b in a + 1..NUM_GLYPHS {
                assert_ne!(GLYPHS[a], GLYPHS[b]);
            }
        }
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        assert_eq!(generate(300, 8, 0.1, 2), generate(300, 8, 0.1, 2));
        assert_ne!(generate(300, 8, 0.1, 2), generate(300, 9, 0.1, 2));
    }

    #[test]
    fn flip_rate_is_close_to_requested() {
        let ds = generate(10_000, 21, 0.1, 0);
        let mut flipped = 0usize;
        for i in 0..ds.len() {
            let clean = glyph_pixels(ds.examples.labels[i] as usize);
            flipped += ds
                .examples
                .example(i)
                .iter()
                .zip(&clean)
                .filter(|(a, b)| a != b)
                .count();
        }
        let rate = flipped as f64 / (ds.len() * 64) as f64;
        assert!((rate - 0.1).abs() <= 0.01, "flip rate {rate}");
    }

    #[test]
    fn classes_roughly_uniform() {
        let n = 5000;
        let ds = generate(n, 1, 0.05, 1);
        let mut counts = [0usize; NUM_GLYPHS];
        for &l in &ds.examples.labels {
            counts[l as usize] += 1;
        }
        let expected = n as f64 / NUM_GLYPHS as f64;
        for c in counts {
            assert!((c as f64 - expected).abs() <= (n as f64).sqrt(), "{counts:?}");
        }
    }

    #[test]
    fn uniform_split_examples() {
        let p = split_uniform(10, 5, 3).unwrap();
        assert!(p.shards.iter().all(|s| s.len() == 2));
        let one = split_uniform(10, 1, 3).unwrap();
        assert_eq!(one.shards, vec![(0..10).collect::<Vec<_>>()]);
        assert!(split_uniform(3, 5, 0).is_err());
        assert!(split_uniform(3, 0, 0).is_err());
    }

    fn assert_exhaustive(p: &Partition, n: usize) {
        let mut all: Vec<usize> = p.shards.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_split_many_trials() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(77);
        for _ in 0..1000 {
            let c = 1 + rng.below(12) as usize;
            let n = c + rng.below(300) as usize;
            let p = split_uniform(n, c, rng.next_u64()).unwrap();
            assert_exhaustive(&p, n);
            let sizes: Vec<usize> = p.shards.iter().map(Vec::len).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn label_skew_concentrates_at_small_alpha() {
        let ds = generate(2000, 5, 0.05, 1);
        let mut skewed = 0;
        for seed in 0..100u64 {
            let p = split_label_skew(&ds.examples.labels, 5, 0.1, seed).unwrap();
            assert_exhaustive(&p, ds.len());
            let dominated = p.shards.iter().any(|s| {
                let mut counts = [0usize; NUM_GLYPHS];
                for &i in s {
                    counts[ds.examples.labels[i] as usize] += 1;
                }
                *counts.iter().max().unwrap() * 2 > s.len()
            });
            skewed += dominated as usize;
        }
        assert!(skewed >= 90, "only {skewed}/100 seeds skewed");
    }

    #[test]
    fn label_skew_large_alpha_is_near_uniform() {
        let ds = generate(5000, 6, 0.05, 1);
        let p = split_label_skew(&ds.examples.labels, 5, 1e4, 2).unwrap();
        for s in &p.shards {
            assert!((s.len() as f64 - 1000.0).abs() < 50.0, "{}", s.len());
        }
    }

    #[test]
    fn label_skew_rejects_bad_alpha() {
        assert!(split_label_skew(&[0, 1, 2], 2, 0.0, 0).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let ds = generate(20, 2, 0.1, 1);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        assert_eq!(buf.len(), 24 + 20 * 64 * 4 + 20 * 4);
        let (batch, classes) = read_dataset(&buf[..]).unwrap();
        assert_eq!(batch, ds.examples);
        assert_eq!(classes, NUM_GLYPHS);
    }

    proptest! {
        #[test]
        fn label_skew_is_disjoint_and_exhaustive(seed in any::<u64>(), alpha in 0.05f64..10.0, c in 1usize..6) {
            let labels: Vec<u32> = (0..300u32).map(|i| (i * 7 + i / 13) % 10).collect();
            if let Ok(p) = split_label_skew(&labels, c, alpha, seed) {
                let mut all: Vec<usize> = p.shards.iter().flatten().copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..300).collect::<Vec<_>>());
                prop_assert!(p.shards.iter().all(|s| !s.is_empty()));
            }
        }
    }
}
