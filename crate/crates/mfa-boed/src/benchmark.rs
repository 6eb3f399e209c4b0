//! Estimator error benchmarking: standard deviation, RMSE, and bias of
//! repeated independent utility evaluations against a high-budget reference.
//!
//! Each trial is a fully independent evaluation (fresh batch, fresh noise)
//! at the working sample budget. The reference value comes from one
//! high-budget run of a chosen estimator; RMSE is measured against it and
//! the bias magnitude is recovered as `sqrt(max(RMSE² − std², 0))`, signed
//! by `mean − reference`.

use std::time::{Duration, Instant};

use crate::batch::ReuseBatch;
use crate::design::Design;
use crate::error::{Error, Result};
use crate::estimators::{estimate_utility, target_universe, EstimatorId};
use crate::network::CandidateSet;
use crate::priors::{AllocationPrior, InputPrior};
use crate::rng::{RngFactory, StreamPurpose};

/// Which estimator, at which per-structure budget, defines "truth".
#[derive(Debug, Clone, Copy)]
pub struct ReferenceSpec {
    pub estimator: EstimatorId,
    pub n_samples: usize,
}

/// Error statistics for one estimator.
#[derive(Debug, Clone)]
pub struct EstimatorErrors {
    pub estimator: EstimatorId,
    pub mean: f64,
    pub std_dev: f64,
    pub rmse: f64,
    /// `sign(mean − reference) · sqrt(max(RMSE² − std², 0))`.
    pub bias: f64,
    pub trials: usize,
    pub values: Vec<f64>,
    pub wall_clock: Duration,
}

/// A complete benchmark report for one design.
#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub reference: ReferenceSpec,
    pub reference_value: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub per_estimator: Vec<EstimatorErrors>,
}

/// Std/RMSE/bias of a series against a reference value.
pub fn error_stats(values: &[f64], reference: f64) -> (f64, f64, f64) {
    let (mean, std) = crate::numeric::mean_and_std(values);
    let mse = values.iter().map(|v| (v - reference) * (v - reference)).sum::<f64>()
        / values.len() as f64;
    let rmse = mse.sqrt();
    let magnitude = (rmse * rmse - std * std).max(0.0).sqrt();
    let bias = if mean >= reference { magnitude } else { -magnitude };
    (std, rmse, bias)
}

/// Run `trials` independent evaluations of each estimator at budget `n` for
/// one design, and score them against a single reference run.
///
/// Trial `t` uses the child factory `(BenchmarkTrial, t)`, the reference uses
/// `(BenchmarkTrial, u64::MAX)`; all are reproducible from the parent seed.
#[allow(clippy::too_many_arguments)]
pub fn benchmark_estimators(
    candidates: &CandidateSet,
    base_alloc: &AllocationPrior,
    input: &InputPrior,
    design: &Design,
    estimators: &[EstimatorId],
    n: usize,
    trials: usize,
    reference: ReferenceSpec,
    factory: &RngFactory,
) -> Result<BenchmarkReport> {
    if trials < 2 {
        return Err(Error::TooFewTrials { got: trials });
    }
    let universe = target_universe(std::slice::from_ref(design));

    let ref_factory = factory.child(StreamPurpose::BenchmarkTrial, u64::MAX);
    let ref_batch = ReuseBatch::build(
        candidates,
        base_alloc,
        input,
        &universe,
        reference.n_samples,
        &ref_factory,
    )?;
    let reference_value =
        estimate_utility(reference.estimator, design, 0, &ref_batch, &ref_factory)?.value;
    drop(ref_batch);

    let mut per_estimator = Vec::with_capacity(estimators.len());
    for &id in estimators {
        let start = Instant::now();
        let mut values = Vec::with_capacity(trials);
        for t in 0..trials {
            let trial_factory = factory.child(StreamPurpose::BenchmarkTrial, t as u64);
            let batch = ReuseBatch::build(candidates, base_alloc, input, &universe, n, &trial_factory)?;
            values.push(estimate_utility(id, design, 0, &batch, &trial_factory)?.value);
        }
        let (std_dev, rmse, bias) = error_stats(&values, reference_value);
        per_estimator.push(EstimatorErrors {
            estimator: id,
            mean: crate::numeric::mean_and_std(&values).0,
            std_dev,
            rmse,
            bias,
            trials,
            values,
            wall_clock: start.elapsed(),
        });
    }
    Ok(BenchmarkReport {
        reference,
        reference_value,
        n_samples: n,
        seed: factory.seed(),
        per_estimator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_on_deterministic_series() {
        // A constant series has zero spread, so RMSE is pure bias.
        let (std, rmse, bias) = error_stats(&[0.7, 0.7, 0.7, 0.7], 0.5);
        assert_eq!(std, 0.0);
        assert!((rmse - 0.2).abs() < 1e-12);
        assert!((bias - 0.2).abs() < 1e-12);
        // Negative direction keeps the sign.
        let (_, _, bias) = error_stats(&[0.3, 0.3], 0.5);
        assert!((bias + 0.2).abs() < 1e-12);
    }

    #[test]
    fn stats_decompose_rmse() {
        let values = [0.4, 0.6, 0.5, 0.5];
        let (std, rmse, bias) = error_stats(&values, 0.5);
        assert!(bias.abs() < 1e-9);
        assert!(rmse <= std + 1e-12);
    }
}
