//! Reproducible random-number streams.
//!
//! Every subject owns one block of auxiliary random numbers. A block is fully
//! described by a 64-bit seed, so a block pseudo-marginal update only has to
//! swap one seed; the remaining blocks replay bit-identically.
//!
//! Draws are fixed-width: one `u64` per uniform and one uniform per normal
//! (inverse-CDF), so the position of every draw in a stream is a pure
//! function of how many draws came before it.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::math::probit;

/// SplitMix64 finaliser, used for counter-based seed derivation.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the `index`-th child seed of `seed`.
#[inline]
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5DEE_CE66_D1CE_4E5B)))
}

/// A deterministic random stream (ChaCha8).
#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream `sub` of the generator keyed by `seed`; distinct `sub` values
    /// give independent streams.
    pub fn with_substream(seed: u64, sub: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(sub);
        Self { rng }
    }

    /// Position in 32-bit words since the start of the stream.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal by inversion; consumes exactly one uniform.
    #[inline]
    pub fn normal(&mut self) -> f64 {
        probit(self.uniform())
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        out.iter_mut().for_each(|z| *z = self.normal());
    }

    pub fn fill_uniform(&mut self, out: &mut [f64]) {
        out.iter_mut().for_each(|u| *u = self.uniform());
    }
}

/// Per-subject seeds for the auxiliary variables `u = (u_1, …, u_M)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngBlockStore {
    master_seed: u64,
    block_seeds: Vec<u64>,
}

impl RngBlockStore {
    /// Block `m` gets `derive_seed(master_seed, m)`.
    pub fn new(master_seed: u64, blocks: usize) -> Self {
        let block_seeds = (0..blocks as u64).map(|m| derive_seed(master_seed, m)).collect();
        Self {
            master_seed,
            block_seeds,
        }
    }

    pub fn from_seeds(master_seed: u64, block_seeds: Vec<u64>) -> Self {
        Self {
            master_seed,
            block_seeds,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn blocks(&self) -> usize {
        self.block_seeds.len()
    }

    pub fn block_seed(&self, m: usize) -> u64 {
        self.block_seeds[m]
    }

    pub fn block_seeds(&self) -> &[u64] {
        &self.block_seeds
    }

    /// Stream `sub` of block `m`. Sub-stream 0 is used by the particle
    /// filter of correlated likelihood estimators; importance sampling uses
    /// 0 for the random-effect draws and `1 + l` for the filter of draw `l`.
    pub fn stream(&self, m: usize, sub: u64) -> Stream {
        Stream::with_substream(self.block_seeds[m], sub)
    }

    /// Replaces block `m` with a fresh seed drawn from `source`.
    pub fn refresh_block(&mut self, m: usize, source: &mut Stream) {
        self.block_seeds[m] = source.next_u64();
    }

    /// Replaces every block.
    pub fn refresh_all(&mut self, source: &mut Stream) {
        for s in &mut self.block_seeds {
            *s = source.next_u64();
        }
    }
}
