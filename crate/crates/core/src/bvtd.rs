//! Divergence numerics and the bias–variance decomposition of the expected
//! KL error.
//!
//! Everything here is a pure function of its inputs except
//! [`variance_error_estimate`], which trains an ensemble through a caller
//! supplied closure.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::data::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::trainer::VatModel;

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Floor applied to Gaussian standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Tolerance on the total mass accepted by [`DistributionVector::new`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// A finite discrete probability distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionVector(Vec<f64>);

impl DistributionVector {
    /// Accepts non-negative probabilities that sum to one within
    /// [`NORMALIZATION_TOL`], renormalizing the residual away.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let total = check_weights(&probs)?;
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Contract(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self(probs.into_iter().map(|p| p / total).collect()))
    }

    /// Normalizes arbitrary non-negative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total = check_weights(&weights)?;
        if total <= 0.0 {
            return Err(Error::Contract("weights sum to zero".into()));
        }
        Ok(Self(weights.into_iter().map(|w| w / total).collect()))
    }

    /// Two-outcome distribution `(p, 1 − p)`.
    pub fn bernoulli(p: f64) -> Result<Self> {
        Self::new(vec![p, 1.0 - p])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_weights(w: &[f64]) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::Contract("empty distribution".into()));
    }
    if let Some(bad) = w.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Contract(format!("invalid probability {bad}")));
    }
    Ok(w.iter().sum())
}

fn same_len(op: &'static str, a: &DistributionVector, b: &DistributionVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(
            op,
            format!("lengths {} vs {}", a.len(), b.len()),
        ));
    }
    Ok(())
}

/// `Σ pᵢ ln(pᵢ / qᵢ)` with `0 · ln(0/·) = 0` and `q` floored at [`PROB_FLOOR`].
pub fn kl_discrete(p: &DistributionVector, q: &DistributionVector) -> Result<f64> {
    same_len("kl_discrete", p, q)?;
    Ok(p.0
        .iter()
        .zip(&q.0)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(PROB_FLOOR)).ln())
        .sum())
}

/// `½ Σ |pᵢ − qᵢ|`.
pub fn tv_distance(p: &DistributionVector, q: &DistributionVector) -> Result<f64> {
    same_len("tv_distance", p, q)?;
    Ok(0.5
        * p.0
            .iter()
            .zip(&q.0)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}

/// Pinsker's upper bound on the total-variation distance, `√(KL(p‖q)/2)`.
pub fn pinsker_bound(p: &DistributionVector, q: &DistributionVector) -> Result<f64> {
    Ok((kl_discrete(p, q)? / 2.0).sqrt())
}

/// Diagonal Gaussian summary of a population of feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>, count: usize) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::dim(
                "gaussian_stats",
                format!("mean {} vs std {}", mean.len(), std.len()),
            ));
        }
        if count < 2 {
            return Err(Error::Contract(format!(
                "need at least 2 samples, got {count}"
            )));
        }
        let std = std.into_iter().map(|s| s.max(STD_FLOOR)).collect();
        Ok(Self { mean, std, count })
    }

    /// Fits per-coordinate mean and unbiased standard deviation.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Contract(format!(
                "need at least 2 samples, got {}",
                samples.len()
            )));
        }
        let dim = samples[0].len();
        if samples.iter().any(|s| s.len() != dim) {
            return Err(Error::dim("gaussian_stats", "ragged sample vectors"));
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|v| (v / (n - 1.0)).sqrt()).collect();
        Self::new(mean, std, samples.len())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Closed-form `KL(a‖b)` between diagonal Gaussians, summed over coordinates.
pub fn kl_gaussian_diag(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim(
            "kl_gaussian_diag",
            format!("dimensions {} vs {}", a.dim(), b.dim()),
        ));
    }
    let mut total = 0.0;
    for i in 0..a.dim() {
        let (sa, sb) = (a.std[i], b.std[i]);
        let d = a.mean[i] - b.mean[i];
        total += (sb / sa).ln() + (sa * sa + d * d) / (2.0 * sb * sb) - 0.5;
    }
    Ok(total)
}

/// `KL(a‖b) + KL(b‖a)`.
pub fn symmetric_kl_gaussian(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    Ok(kl_gaussian_diag(a, b)? + kl_gaussian_diag(b, a)?)
}

/// How the ensemble's central predictor is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MeanPredictor {
    /// Normalized geometric mean of the members; the decomposition is exact.
    #[default]
    Geometric,
    /// `½(arithmetic mean of members + Q)`; kept for reporting, the split is
    /// not an identity and the residual shows by how much.
    HalfwayToTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    /// Mean over members of `KL(Q‖P̄ⱼ)`, computed directly.
    pub expected_kl: f64,
    /// `KL(Q‖P̂)`.
    pub bias: f64,
    /// Mean over members of `KL(P̂‖P̄ⱼ)`.
    pub variance: f64,
    /// `Σ Qᵢ ln Qᵢ`, reported as a separate line.
    pub bayes: f64,
    /// `expected_kl − (bias + variance)`.
    pub residual: f64,
    /// `expected_kl − (bias + variance + bayes)`.
    pub residual_with_bayes: f64,
    pub mean_predictor: DistributionVector,
}

/// Splits the expected KL error of an ensemble against the target `q` into
/// bias and variance terms around a central predictor.
pub fn heskes_decompose(
    q: &DistributionVector,
    ensemble: &[DistributionVector],
    mode: MeanPredictor,
) -> Result<DecompositionReport> {
    if ensemble.is_empty() {
        return Err(Error::Contract(
            "decomposition needs a non-empty ensemble".into(),
        ));
    }
    for member in ensemble {
        same_len("heskes_decompose", q, member)?;
    }
    let m = ensemble.len() as f64;
    let mean_predictor = match mode {
        MeanPredictor::Geometric => {
            let weights = (0..q.len())
                .map(|i| {
                    let mean_log = ensemble
                        .iter()
                        .map(|p| p.0[i].max(PROB_FLOOR).ln())
                        .sum::<f64>()
                        / m;
                    mean_log.exp()
                })
                .collect();
            DistributionVector::from_weights(weights)?
        }
        MeanPredictor::HalfwayToTarget => {
            let weights = (0..q.len())
                .map(|i| 0.5 * (ensemble.iter().map(|p| p.0[i]).sum::<f64>() / m + q.0[i]))
                .collect();
            DistributionVector::from_weights(weights)?
        }
    };

    let mut expected_kl = 0.0;
    let mut variance = 0.0;
    for member in ensemble {
        expected_kl += kl_discrete(q, member)?;
        variance += kl_discrete(&mean_predictor, member)?;
    }
    expected_kl /= m;
    variance /= m;
    let bias = kl_discrete(q, &mean_predictor)?;
    let bayes: f64 = q.0.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    Ok(DecompositionReport {
        expected_kl,
        bias,
        variance,
        bayes,
        residual: expected_kl - (bias + variance),
        residual_with_bayes: expected_kl - (bias + variance + bayes),
        mean_predictor,
    })
}

/// Settings for [`variance_error_estimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarianceEstimate {
    pub n_runs: usize,
    pub seed: u64,
    /// Resample the training subset with replacement for every run.
    pub bootstrap: bool,
    /// Give each run its own seed; when false every run receives `seed`.
    pub vary_seeds: bool,
}

impl VarianceEstimate {
    pub fn new(n_runs: usize, seed: u64) -> Self {
        Self {
            n_runs,
            seed,
            bootstrap: true,
            vary_seeds: true,
        }
    }
}

/// Estimates the variance term of an ensemble trained on resampled copies
/// of the training subset.
///
/// `fit_fn(split, seed)` trains one model and returns its predictive
/// distribution for every item of `split.test`. The result is the
/// decomposition's variance term averaged over test items.
pub fn variance_error_estimate<F>(
    fit_fn: F,
    splits: &DatasetSplit,
    opts: VarianceEstimate,
) -> Result<f64>
where
    F: Fn(&DatasetSplit, u64) -> Result<Vec<DistributionVector>> + Sync,
{
    if opts.n_runs < 2 {
        return Err(Error::Contract(format!(
            "variance estimate needs at least 2 runs, got {}",
            opts.n_runs
        )));
    }
    let predictions: Vec<Vec<DistributionVector>> = (0..opts.n_runs)
        .into_par_iter()
        .map(|run| {
            let run_seed = if opts.vary_seeds {
                opts.seed.wrapping_add(run as u64)
            } else {
                opts.seed
            };
            let split = if opts.bootstrap {
                let mut rng = rng::substream(opts.seed, Stream::Bootstrap, run as u64);
                let n = splits.train.len();
                let mut resampled = splits.clone();
                resampled.train = (0..n)
                    .map(|_| splits.train[rng.gen_range(0..n)].clone())
                    .collect();
                resampled
            } else {
                splits.clone()
            };
            fit_fn(&split, run_seed)
        })
        .collect::<Result<_>>()?;

    let items = predictions[0].len();
    if items == 0 || predictions.iter().any(|p| p.len() != items) {
        return Err(Error::Contract(
            "every run must predict the same non-empty set of test items".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..items {
        let ensemble: Vec<_> = predictions.iter().map(|p| p[i].clone()).collect();
        // The variance term does not involve the target, so any q of the right length works.
        let q = ensemble[0].clone();
        total += heskes_decompose(&q, &ensemble, MeanPredictor::Geometric)?.variance;
    }
    Ok(total / items as f64)
}

/// Symmetrized diagonal-Gaussian KL between the feature-statistics
/// populations of two image subsets under the given model parameters.
///
/// Statistics are taken from every encoder block, whatever aggregation the
/// model was trained with, so gaps are comparable across methods.
pub fn feature_gap(
    model: &VatModel,
    params: &ParamStore,
    subset_a: &[Sample],
    subset_b: &[Sample],
) -> Result<f64> {
    if subset_a.len() < 2 || subset_b.len() < 2 {
        return Err(Error::Contract(format!(
            "feature gap needs at least 2 samples per subset, got {} and {}",
            subset_a.len(),
            subset_b.len()
        )));
    }
    let a = GaussianStats::fit(&model.stats_population(params, subset_a)?)?;
    let b = GaussianStats::fit(&model.stats_population(params, subset_b)?)?;
    symmetric_kl_gaussian(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn d(v: &[f64]) -> DistributionVector {
        DistributionVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn distribution_validation() {
        assert!(DistributionVector::new(vec![0.5, 0.4]).is_err());
        assert!(DistributionVector::new(vec![1.2, -0.2]).is_err());
        assert!(DistributionVector::new(vec![]).is_err());
        let p = DistributionVector::from_weights(vec![2.0, 6.0]).unwrap();
        assert_eq!(p.probs(), &[0.25, 0.75]);
    }

    #[test]
    fn kl_and_tv_hand_cases() {
        let p = d(&[1.0, 0.0]);
        let u = d(&[0.5, 0.5]);
        assert_eq!(kl_discrete(&u, &u).unwrap(), 0.0);
        assert!((kl_discrete(&p, &u).unwrap() - LN_2).abs() < 1e-15);
        assert_eq!(tv_distance(&u, &u).unwrap(), 0.0);
        assert_eq!(tv_distance(&p, &u).unwrap(), 0.5);
        let bound = pinsker_bound(&p, &u).unwrap();
        assert!((bound - 0.5887).abs() < 1e-4 && 0.5 <= bound);
        assert!(kl_discrete(&p, &d(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])).is_err());
    }

    #[test]
    fn gaussian_kl_cases() {
        let a = GaussianStats::new(vec![0.0], vec![1.0], 10).unwrap();
        let b = GaussianStats::new(vec![1.0], vec![1.0], 10).unwrap();
        assert_eq!(kl_gaussian_diag(&a, &a).unwrap(), 0.0);
        assert!((kl_gaussian_diag(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        let c = GaussianStats::new(vec![0.0, 0.0], vec![1.0, 1.0], 10).unwrap();
        assert!(kl_gaussian_diag(&a, &c).is_err());
        assert!(GaussianStats::new(vec![0.0], vec![0.0], 1).is_err());
        assert_eq!(
            GaussianStats::new(vec![0.0], vec![0.0], 2).unwrap().std,
            vec![STD_FLOOR]
        );
    }

    #[test]
    fn decomposition_singleton_and_symmetric_pair() {
        let q = d(&[0.3, 0.7]);
        let r = heskes_decompose(&q, std::slice::from_ref(&q), MeanPredictor::Geometric).unwrap();
        assert!(r.bias.abs() < 1e-15 && r.variance.abs() < 1e-15 && r.expected_kl == 0.0);

        let u = d(&[0.5, 0.5]);
        let ens = [d(&[0.6, 0.4]), d(&[0.4, 0.6])];
        let r = heskes_decompose(&u, &ens, MeanPredictor::Geometric).unwrap();
        assert!((r.mean_predictor.probs()[0] - 0.5).abs() < 1e-15);
        assert!(r.bias.abs() < 1e-15);
        let expected_var = kl_discrete(&u, &ens[0]).unwrap();
        assert!((r.variance - expected_var).abs() < 1e-15);
        assert!(r.residual.abs() < 1e-15);
        assert!((r.bayes + LN_2).abs() < 1e-15);

        assert!(heskes_decompose(&u, &[], MeanPredictor::Geometric).is_err());
    }

    #[test]
    fn halfway_mode_reports_residual() {
        let q = d(&[0.2, 0.8]);
        let ens = [d(&[0.6, 0.4]), d(&[0.9, 0.1])];
        let r = heskes_decompose(&q, &ens, MeanPredictor::HalfwayToTarget).unwrap();
        assert!(r.residual.is_finite());
        assert!((r.expected_kl - (r.bias + r.variance + r.residual)).abs() < 1e-15);
    }
}
