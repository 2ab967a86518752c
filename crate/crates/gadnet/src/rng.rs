//! Deterministic random streams with checkpointable state.
//!
//! Every stochastic choice in the crate (batch sampling, reparameterization
//! noise, initialization) is drawn from a [`Stream`], a ChaCha8 generator
//! whose full state is three plain values (seed, stream id, word position).
//! That makes resume-from-checkpoint bit-exact: restoring the state replays
//! the identical draw sequence.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Serializable snapshot of a [`Stream`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: [u8; 32],
    pub stream_id: u64,
    /// ChaCha word position split into (hi, lo) halves of the u128.
    pub word_pos: (u64, u64),
}

/// Deterministic random stream.
#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha8Rng,
    seed: [u8; 32],
    stream_id: u64,
}

impl Stream {
    /// Derive a stream from a user seed and a domain label so that different
    /// uses (dataset build, stage 1, probes, ...) never share draws.
    pub fn new(seed: u64, domain: &str) -> Self {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&seed.to_le_bytes());
        // fold the domain label into the remaining seed bytes (FNV-1a)
        let mut h: u64 = 0xcbf29ce484222325;
        for b in domain.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        bytes[8..16].copy_from_slice(&h.to_le_bytes());
        let mut h2 = h;
        for b in domain.bytes().rev() {
            h2 ^= b as u64;
            h2 = h2.wrapping_mul(0x100000001b3);
        }
        bytes[16..24].copy_from_slice(&h2.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(bytes);
        rng.set_stream(0);
        Stream {
            rng,
            seed: bytes,
            stream_id: 0,
        }
    }

    pub fn state(&self) -> StreamState {
        let pos = self.rng.get_word_pos();
        StreamState {
            seed: self.seed,
            stream_id: self.stream_id,
            word_pos: ((pos >> 64) as u64, pos as u64),
        }
    }

    pub fn restore(state: &StreamState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream_id);
        let pos = ((state.word_pos.0 as u128) << 64) | state.word_pos.1 as u128;
        rng.set_word_pos(pos);
        Stream {
            rng,
            seed: state.seed,
            stream_id: state.stream_id,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased integer in [0, n) (Lemire rejection).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index bound must be positive");
        let n = n as u64;
        loop {
            let x = self.next_u64();
            let (hi, lo) = mulhilo(x, n);
            if lo >= n.wrapping_neg() % n {
                return hi as usize;
            }
        }
    }

    /// Standard normal draw (Box-Muller, one value per call; the sine twin
    /// is discarded to keep the draw count independent of call pairing).
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fill a slice with standard normal draws.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Draw from a count-weighted categorical distribution given cumulative
    /// counts (last entry = total).
    pub fn weighted_index(&mut self, cumulative: &[u64]) -> usize {
        let total = *cumulative.last().expect("empty weight table");
        assert!(total > 0, "weight table sums to zero");
        let x = {
            let n = total;
            loop {
                let r = self.next_u64();
                let (hi, lo) = mulhilo(r, n);
                if lo >= n.wrapping_neg() % n {
                    break hi;
                }
            }
        };
        cumulative.partition_point(|&c| c <= x)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, data: &mut [T]) {
        for i in (1..data.len()).rev() {
            let j = self.index(i + 1);
            data.swap(i, j);
        }
    }
}

fn mulhilo(a: u64, b: u64) -> (u64, u64) {
    let wide = (a as u128) * (b as u128);
    ((wide >> 64) as u64, wide as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restore_replays_identically() {
        let mut a = Stream::new(7, "test");
        for _ in 0..123 {
            a.next_u64();
        }
        let state = a.state();
        let tail: Vec<u64> = (0..50).map(|_| a.next_u64()).collect();
        let mut b = Stream::restore(&state);
        let replay: Vec<u64> = (0..50).map(|_| b.next_u64()).collect();
        assert_eq!(tail, replay);
    }

    #[test]
    fn domains_are_independent() {
        let mut a = Stream::new(7, "alpha");
        let mut b = Stream::new(7, "beta");
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut s = Stream::new(11, "normal");
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = s.normal();
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn index_is_unbiased_at_boundaries() {
        let mut s = Stream::new(3, "idx");
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[s.index(3)] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 500.0, "counts {counts:?}");
        }
    }
}
