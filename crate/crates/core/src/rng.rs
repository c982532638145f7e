//! Counter-addressed random streams.
//!
//! A [`RngStream`] is a `(seed, stream, counter)` triple. Every draw is a
//! pure function of that triple: draw `i` reads the 128-bit ChaCha20 block
//! at word position `4 * (counter + i)` of stream `stream` under key
//! `seed`. Regenerating a perturbation therefore needs only the triple,
//! never the generator state.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

const WORDS_PER_DRAW: u128 = 4;
const TWO_PI: f64 = std::f64::consts::TAU;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
    pub counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0, counter: 0 }
    }

    /// Sub-stream for `label`, starting at counter zero. Distinct labels give
    /// distinct ChaCha stream ids and hence non-overlapping sequences.
    pub fn derive(&self, label: u64) -> Self {
        Self { seed: self.seed, stream: mix(self.stream, label), counter: 0 }
    }

    pub fn derive_str(&self, label: &str) -> Self {
        self.derive(label_hash(label))
    }

    fn generator(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(u128::from(self.counter) * WORDS_PER_DRAW);
        rng
    }

    /// `count` standard normals starting at the current counter, without advancing.
    pub fn peek_normals(&self, count: usize) -> Vec<f64> {
        let mut rng = self.generator();
        (0..count).map(|_| box_muller(rng.next_u64(), rng.next_u64())).collect()
    }

    /// `count` standard normals; advances the counter by `count`.
    pub fn normals(&mut self, count: usize) -> Vec<f64> {
        let out = self.peek_normals(count);
        self.counter += count as u64;
        out
    }

    /// Uniform draws in `[0, 1)`; advances the counter by `count`.
    pub fn uniforms(&mut self, count: usize) -> Vec<f64> {
        let mut rng = self.generator();
        let out = (0..count)
            .map(|_| {
                let u = unit_open_high(rng.next_u64());
                rng.next_u64();
                u
            })
            .collect();
        self.counter += count as u64;
        out
    }

    pub fn uniform_in(&mut self, count: usize, lo: f64, hi: f64) -> Vec<f64> {
        self.uniforms(count).into_iter().map(|u| lo + (hi - lo) * u).collect()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        let mut rng = self.generator();
        let x = rng.next_u64();
        self.counter += 1;
        ((u128::from(x) * n as u128) >> 64) as usize
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

fn unit_open_high(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(a: u64, b: u64) -> f64 {
    // u1 in (0, 1] keeps the log finite.
    let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = unit_open_high(b);
    (-2.0 * u1.ln()).sqrt() * (TWO_PI * u2).cos()
}

/// SplitMix64 finalizer over a combination of two words.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a.rotate_left(29) ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes.
pub fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01B3))
}
