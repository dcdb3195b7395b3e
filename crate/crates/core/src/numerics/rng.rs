//! Seeded, counter-based random streams.
//!
//! Every stream is a ChaCha20 keystream keyed by `seed` and selected by a
//! 64-bit `stream` id; the counter is the ChaCha word position, so a stream is
//! fully described by `(seed, stream, counter)`. Normal variates use the
//! Box–Muller transform evaluated with `libm`, which keeps draws bit-identical
//! across platforms.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::scalar::Scalar;

const TWO_PI: f64 = std::f64::consts::TAU;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha20Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Recreates a stream positioned at `counter` 32-bit words.
    pub fn at(seed: u64, stream: u64, counter: u128) -> Self {
        let mut s = Self::new(seed, stream);
        s.rng.set_word_pos(counter);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit keystream words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// An independent child stream, reproducible from `(seed, stream, label)`
    /// and unaffected by how far this stream has advanced.
    pub fn derive(&self, label: u64) -> RngStream {
        let child = splitmix64(self.stream ^ splitmix64(label.wrapping_add(0x5151_5151)));
        RngStream::new(self.seed, child)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`.
    #[inline]
    pub fn uniform_open_low(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (rejection sampling, no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return (v % n) as usize;
            }
        }
    }

    /// Uniform timestep in `1..=horizon`.
    pub fn timestep(&mut self, horizon: usize) -> usize {
        1 + self.below(horizon)
    }

    /// Bernoulli draw with success probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// One pair of independent standard normals.
    #[inline]
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform_open_low();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = TWO_PI * u2;
        (r * libm::cos(theta), r * libm::sin(theta))
    }

    /// `n` i.i.d. standard normals. Pairs are consumed whole, so an odd `n`
    /// discards the last sine branch.
    pub fn standard_normal<T: Scalar>(&mut self, n: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            let (a, b) = self.normal_pair();
            out.push(T::of(a));
            out.push(T::of(b));
        }
        out.truncate(n);
        out
    }

    /// `n` i.i.d. uniforms on `[0, 1)`.
    pub fn standard_uniform<T: Scalar>(&mut self, n: usize) -> Vec<T> {
        (0..n).map(|_| T::of(self.uniform())).collect()
    }
}

/// Draws `n` standard normal variates from `rng`.
pub fn draw_standard_normal<T: Scalar>(rng: &mut RngStream, n: usize) -> Vec<T> {
    rng.standard_normal(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_replay_from_seed_stream_and_counter() {
        let mut a = RngStream::new(7, 3);
        let _ = a.standard_normal::<f64>(5);
        let pos = a.counter();
        let next: Vec<f64> = a.standard_normal(4);
        let mut b = RngStream::at(7, 3, pos);
        assert_eq!(next, b.standard_normal::<f64>(4));
    }

    #[test]
    fn known_prefix_is_frozen() {
        // Frozen from the first run; guards against silent changes to the
        // generator or the transform.
        let mut r = RngStream::new(42, 0);
        let v: Vec<f64> = r.standard_normal(4);
        let bits: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, FROZEN_PREFIX);
    }

    const FROZEN_PREFIX: [u64; 4] = [
        13830327628190423328,
        4603732039996472655,
        4607494561520304930,
        4611111446982324909,
    ];

    #[test]
    fn normal_moments() {
        let mut r = RngStream::new(2024, 1);
        let n = 1_000_000;
        let v: Vec<f64> = r.standard_normal(n);
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((0.99..=1.01).contains(&var), "var {var}");
    }

    #[test]
    fn derived_streams_differ_and_ignore_parent_position() {
        let mut parent = RngStream::new(1, 0);
        let c1 = parent.derive(5);
        parent.next_u64();
        let c2 = parent.derive(5);
        assert_eq!(c1.stream(), c2.stream());
        assert_ne!(parent.derive(6).stream(), c1.stream());
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = RngStream::new(9, 9);
        let mut seen = [0usize; 3];
        for _ in 0..3000 {
            seen[r.below(3)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 900));
    }
}
