//! The relative-noise observation model.
//!
//! Each measured component is `y_k = G_k (1 + ε_k)` with independent
//! `ε_k ~ Normal(0, σ_k²)`, so `y_k ~ Normal(G_k, (σ_k G_k)²)` and the log
//! density in `y` carries a `−log G_k` change-of-variables term:
//!
//! `log p(y_k | G_k) = −½ log 2π − log σ_k − (y_k/G_k − 1)² / (2σ_k²) − log G_k`.
//!
//! `G_k <= 0` (an absent edge) makes the density degenerate; by convention
//! the log-likelihood is then `-inf` regardless of `y_k`: a measurement of an
//! absent flow is treated as impossible under that structure, even when the
//! measured value is zero. Structures killed by this convention are flagged
//! by the inference layer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numeric::NEG_HALF_LN_2PI;

/// Log density of one component.
#[inline]
pub fn log_likelihood_component(y: f64, g: f64, sigma: f64) -> f64 {
    if g <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let rel = y / g - 1.0;
    NEG_HALF_LN_2PI - sigma.ln() - rel * rel / (2.0 * sigma * sigma) - g.ln()
}

/// Joint log density of an observation vector given predicted QoIs; the
/// components are independent so the joint is the sum.
pub fn log_likelihood(y: &[f64], g: &[f64], sigmas: &[f64]) -> Result<f64> {
    if y.len() != g.len() || y.len() != sigmas.len() {
        return Err(Error::LengthMismatch {
            expected: g.len(),
            got: y.len(),
        });
    }
    let mut total = 0.0;
    for ((&yk, &gk), &sk) in y.iter().zip(g).zip(sigmas) {
        let ll = log_likelihood_component(yk, gk, sk);
        if ll == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        total += ll;
    }
    Ok(total)
}

/// Simulate one observation vector: `y_k = G_k (1 + σ_k ε_k)`. A zero QoI
/// yields exactly zero.
pub fn simulate_observation(g: &[f64], sigmas: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    if g.len() != sigmas.len() {
        return Err(Error::LengthMismatch {
            expected: g.len(),
            got: sigmas.len(),
        });
    }
    Ok(g.iter()
        .zip(sigmas)
        .map(|(&gk, &sk)| {
            let eps: f64 = StandardNormal.sample(rng);
            gk * (1.0 + sk * eps)
        })
        .collect())
}
