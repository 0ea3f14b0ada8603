//! Deterministic random streams.
//!
//! Every stochastic operation takes an explicit generator. Independent work
//! items (samples, design draws) get their own ChaCha stream derived from a
//! base seed so results do not depend on evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

/// Generator for work item `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Serializable position of a ChaCha generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position, stored as decimal text since it is 128 bits wide.
    pub word_pos: alloc::string::String,
}

impl RngState {
    pub fn capture(rng: &StreamRng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: alloc::format!("{}", rng.get_word_pos()),
        }
    }

    pub fn restore(&self) -> crate::Result<StreamRng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| crate::error::invalid("rng word position is not an integer"))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Standard normal draw (Box-Muller).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > f64::MIN_POSITIVE {
            let r = libm::sqrt(-2.0 * libm::log(u1));
            return r * libm::cos(core::f64::consts::TAU * u2);
        }
    }
}

/// Fisher-Yates shuffle.
pub fn shuffle<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// 64-bit mix used for deterministic hashing rules (splitmix64 finalizer).
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_state_round_trip_continues_stream() {
        let mut rng = stream_rng(7, 3);
        for _ in 0..17 {
            let _: u64 = rng.random();
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        for _ in 0..10 {
            assert_eq!(rng.random::<u64>(), restored.random::<u64>());
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = stream_rng(1, 0);
        let n = 20_000;
        let xs: alloc::vec::Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.05);
    }
}
