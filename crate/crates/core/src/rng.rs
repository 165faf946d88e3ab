//! Deterministic pseudo-random streams.
//!
//! Every random decision in the engine (hash index maps, weight init, data
//! generation, partitioning, epoch order) is drawn from the generators in this
//! module so that runs reproduce bit-for-bit across platforms and across
//! independent implementations.
//!
//! * [`splitmix64`] is the stateless SplitMix64 finalizer applied to
//!   `x + 0x9e3779b97f4a7c15`.
//! * [`Xoshiro256StarStar`] is seeded by running a SplitMix64 stream from the
//!   seed and taking its first four outputs as `s[0..4]`.
//! * [`Xoshiro256StarStar::below`] draws uniformly from `[0, n)` by rejecting
//!   raw outputs smaller than `2^64 mod n`, then reducing modulo `n`.
//! * [`Xoshiro256StarStar::shuffle`] is Fisher-Yates with a descending index:
//!   for `i = len-1` down to `1`, swap `i` with `below(i + 1)`.

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// One SplitMix64 output for the state `x` (the state is advanced once
/// before mixing).
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a stream index:
/// `splitmix64(parent ^ index)`.
pub fn split_seed(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ index)
}

/// Folds several words into one seed, left to right, with [`split_seed`].
pub fn mix_seed(parent: u64, words: &[u64]) -> u64 {
    words.iter().fold(parent, |acc, &w| split_seed(acc, splitmix64(w)))
}

/// SplitMix64 as a stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = splitmix64(self.state);
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        out
    }
}

/// xoshiro256** 1.0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Xoshiro256StarStar {
    s: [u64; 4],
}

impl Xoshiro256StarStar {
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut sm = SplitMix64::new(seed);
        let s = [sm.next_u64(), sm.next_u64(), sm.next_u64(), sm.next_u64()];
        Self { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;

        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];

        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);

        result
    }

    /// Uniform in `[0, n)`. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return r % n;
            }
        }
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// A Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        self.shuffle(&mut perm);
        perm
    }
}

impl rand_core::RngCore for Xoshiro256StarStar {
    fn next_u32(&mut self) -> u32 {
        (Xoshiro256StarStar::next_u64(self) >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        Xoshiro256StarStar::next_u64(self)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = Xoshiro256StarStar::next_u64(self).to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
