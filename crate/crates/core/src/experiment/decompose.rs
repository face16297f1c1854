use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::report::PredictionRow;
use crate::bvtd::{heskes_decompose, DistributionVector, MeanPredictor};
use crate::error::{Error, Result};
use crate::trainer::Method;

/// Bias-variance split of one (method, λ) ensemble, averaged over the test
/// images that every member predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDecomposition {
    pub method: Method,
    pub lambda: f64,
    pub members: usize,
    pub items: usize,
    pub expected_kl: f64,
    pub bias: f64,
    pub variance: f64,
    pub bayes: f64,
    pub residual: f64,
}

/// Decomposes the saved test predictions of binary runs.
///
/// Runs of one (method, λ) form an ensemble; an image enters the average
/// when at least two members predicted it on the same dataset, which
/// requires runs that share their data (`resample_data = false`). Each
/// prediction is read as a Bernoulli distribution and the target is the
/// label's point mass.
pub fn decompose_predictions(
    rows: &[PredictionRow],
    mode: MeanPredictor,
) -> Result<Vec<EnsembleDecomposition>> {
    if let Some(bad) = rows
        .iter()
        .find(|r| !(0.0..=1.0).contains(&r.prediction) || r.label > 1)
    {
        return Err(Error::Config(format!(
            "run {} holds prediction {} with label {}; decomposition needs binary probabilities",
            bad.run_id, bad.prediction, bad.label
        )));
    }
    let mut order: Vec<(Method, f64)> = Vec::new();
    for r in rows {
        if !order.contains(&(r.method, r.lambda)) {
            order.push((r.method, r.lambda));
        }
    }
    let mut out = Vec::new();
    for (method, lambda) in order {
        let group: Vec<&PredictionRow> = rows
            .iter()
            .filter(|r| r.method == method && r.lambda == lambda)
            .collect();
        let mut members: Vec<&str> = group.iter().map(|r| r.run_id.as_str()).collect();
        members.sort_unstable();
        members.dedup();
        let mut items: BTreeMap<(u64, u64), Vec<&PredictionRow>> = BTreeMap::new();
        for r in &group {
            items.entry((r.data_seed, r.sample_id)).or_default().push(r);
        }
        let (mut n, mut kl, mut bias, mut variance, mut bayes, mut residual) =
            (0usize, 0.0, 0.0, 0.0, 0.0, 0.0);
        for preds in items.values().filter(|p| p.len() >= 2) {
            let q = DistributionVector::bernoulli(preds[0].label as f64)?;
            let ensemble = preds
                .iter()
                .map(|r| DistributionVector::bernoulli(r.prediction))
                .collect::<Result<Vec<_>>>()?;
            let d = heskes_decompose(&q, &ensemble, mode)?;
            n += 1;
            kl += d.expected_kl;
            bias += d.bias;
            variance += d.variance;
            bayes += d.bayes;
            residual += d.residual;
        }
        if n == 0 {
            return Err(Error::Config(format!(
                "{method} at lambda {lambda}: no test image was predicted by two runs on the same data \
                 (run several seeds with resample_data = false)"
            )));
        }
        let k = n as f64;
        out.push(EnsembleDecomposition {
            method,
            lambda,
            members: members.len(),
            items: n,
            expected_kl: kl / k,
            bias: bias / k,
            variance: variance / k,
            bayes: bayes / k,
            residual: residual / k,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(run: &str, seed: u64, sample_id: u64, label: usize, prediction: f64) -> PredictionRow {
        PredictionRow {
            run_id: run.into(),
            method: Method::Baseline,
            lambda: 0.0,
            seed,
            data_seed: 0,
            sample_id,
            label,
            prediction,
        }
    }

    #[test]
    fn identical_members_have_zero_variance() {
        let rows = vec![
            row("a", 0, 1, 1, 0.8),
            row("b", 1, 1, 1, 0.8),
            row("a", 0, 2, 0, 0.3),
            row("b", 1, 2, 0, 0.3),
        ];
        let d = &decompose_predictions(&rows, MeanPredictor::Geometric).unwrap()[0];
        assert_eq!((d.members, d.items), (2, 2));
        assert!(d.variance.abs() < 1e-15);
        let expected = (-(0.8f64).ln() - (0.7f64).ln()) / 2.0;
        assert!((d.bias - expected).abs() < 1e-12);
        assert!(d.residual.abs() < 1e-10);
    }

    #[test]
    fn disagreeing_members_have_positive_variance() {
        let rows = vec![row("a", 0, 1, 1, 0.9), row("b", 1, 1, 1, 0.2)];
        let d = &decompose_predictions(&rows, MeanPredictor::Geometric).unwrap()[0];
        assert!(d.variance > 0.0);
    }

    #[test]
    fn needs_shared_items_and_probabilities() {
        let unshared = vec![row("a", 0, 1, 1, 0.9), row("b", 1, 2, 1, 0.2)];
        assert!(decompose_predictions(&unshared, MeanPredictor::Geometric).is_err());
        let regression = vec![row("a", 0, 1, 3, 2.5), row("b", 1, 1, 3, 2.0)];
        assert!(decompose_predictions(&regression, MeanPredictor::Geometric).is_err());
    }
}
