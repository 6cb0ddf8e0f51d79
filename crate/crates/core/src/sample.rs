//! Single-draw sampling primitives.
//!
//! Every stochastic choice in this crate consumes exactly one uniform f64
//! from the random source. That convention makes run streams easy to reason
//! about and lets reference implementations in tests reproduce a run
//! bit-for-bit.

use rand::{Rng, RngExt};

/// True with probability `p` (one draw, even for p = 0 or 1).
#[inline]
pub fn bernoulli<R: Rng>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Index sampled from an (approximately normalized) probability vector.
///
/// Scans the cumulative sum; if rounding leaves the draw above the total
/// mass, the last index with positive mass is returned.
#[inline]
pub fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Uniformly random index in `0..n` (one draw).
#[inline]
pub fn uniform_index<R: Rng>(rng: &mut R, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.random::<f64>() * n as f64) as usize).min(n - 1)
}
