//! Variance-aware training: auxiliary sampling, feature statistics, the
//! pair discriminator and the training loop with early stopping.

mod fit;
mod model;
mod sampling;

pub use fit::{
    discriminator_heldout_bce, fit, task_metric, train_step, EpochRecord, FitResult, StepLosses,
    TrainState,
};
pub use model::{
    feature_stats, feature_stats_on_tape, vat_total_loss, Encoded, FeatureStatsVector, ModelSpec,
    VatModel,
};
pub use sampling::{sample_auxiliary, sample_auxiliary_at, AuxSample};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentPolicy, TaskKind};
use crate::error::{Error, Result};
use crate::nn::AdamConfig;

/// Which encoder blocks feed the discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Statistics of every block.
    Early,
    /// Statistics of the final block only.
    Late,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Baseline,
    VatEarly,
    VatLate,
}

impl Method {
    pub fn aggregation(self) -> Option<Aggregation> {
        match self {
            Method::Baseline => None,
            Method::VatEarly => Some(Aggregation::Early),
            Method::VatLate => Some(Aggregation::Late),
        }
    }

    pub fn is_vat(self) -> bool {
        self != Method::Baseline
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::VatEarly => "vat-early",
            Method::VatLate => "vat-late",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "vat-early" => Ok(Method::VatEarly),
            "vat-late" => Ok(Method::VatLate),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected baseline, vat-early or vat-late)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VatConfig {
    pub method: Method,
    /// Mixing coefficient of the adversarial term.
    pub lambda: f64,
    pub task: TaskKind,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
    pub augment: AugmentPolicy,
    pub model: ModelSpec,
    pub seed: u64,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self {
            method: Method::VatEarly,
            lambda: 0.1,
            task: TaskKind::Binary,
            batch_size: 32,
            max_epochs: 500,
            patience: 50,
            adam: AdamConfig::default(),
            augment: AugmentPolicy::identity(),
            model: ModelSpec::default(),
            seed: 0,
        }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be finite and ≥ 0, got {}",
                self.lambda
            )));
        }
        if self.method == Method::Baseline && self.lambda != 0.0 {
            return Err(Error::Config(format!(
                "the baseline has no adversarial term, but lambda = {}",
                self.lambda
            )));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::Config(
                "batch size and max epochs must be at least 1".into(),
            ));
        }
        let a = &self.adam;
        if !(a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0)
        {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
