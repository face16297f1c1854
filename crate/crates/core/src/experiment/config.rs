use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::data::{AugmentPolicy, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::nn::AdamConfig;
use crate::trainer::{Method, ModelSpec, VatConfig};

/// Optimization settings shared by every run of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub augment: AugmentPolicy,
    pub model: ModelSpec,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let v = VatConfig::default();
        Self {
            batch_size: v.batch_size,
            max_epochs: v.max_epochs,
            patience: v.patience,
            adam: v.adam,
            augment: v.augment,
            model: v.model,
        }
    }
}

/// The default mixing-coefficient grid.
pub const DEFAULT_LAMBDAS: [f64; 7] = [0.0, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0];

/// A grid of runs: every method, every mixing coefficient (VAT methods
/// only; the baseline runs once per seed) and every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskSpec,
    pub methods: Vec<Method>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub training: TrainingConfig,
    /// Generate a fresh dataset for every seed (`task.seed + seed`) instead
    /// of sharing the one generated from `task.seed`.
    pub resample_data: bool,
    /// Read the dataset from an IDX cache directory instead of generating it.
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub parallel: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: SyntheticTaskSpec::default(),
            methods: vec![Method::Baseline, Method::VatEarly],
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            seeds: (0..5).collect(),
            training: TrainingConfig::default(),
            resample_data: true,
            data_dir: None,
            out_dir: None,
            parallel: 1,
        }
    }
}

/// The on-disk form. Grid axes keep their source spans so validation
/// errors can name a line.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    task: SyntheticTaskSpec,
    methods: Option<Spanned<Vec<Method>>>,
    lambdas: Option<Spanned<Vec<f64>>>,
    seeds: Option<Spanned<Vec<u64>>>,
    #[serde(default)]
    training: TrainingConfig,
    resample_data: Option<bool>,
    data_dir: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    parallel: Option<Spanned<usize>>,
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    /// Parses and validates a TOML document. Errors carry the 1-based line
    /// of the offending value.
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(src).map_err(|e| {
            let line = e.span().map(|s| line_of(src, s.start));
            match line {
                Some(l) => Error::Config(format!("line {l}: {}", e.message())),
                None => Error::Config(e.message().to_string()),
            }
        })?;
        let defaults = Self::default();
        let at = |span: std::ops::Range<usize>, msg: String| {
            Error::Config(format!("line {}: {msg}", line_of(src, span.start)))
        };

        let config = Self {
            task: raw.task,
            methods: raw
                .methods
                .as_ref()
                .map_or(defaults.methods.clone(), |m| m.get_ref().clone()),
            lambdas: raw
                .lambdas
                .as_ref()
                .map_or(defaults.lambdas.clone(), |l| l.get_ref().clone()),
            seeds: raw
                .seeds
                .as_ref()
                .map_or(defaults.seeds.clone(), |s| s.get_ref().clone()),
            training: raw.training,
            resample_data: raw.resample_data.unwrap_or(defaults.resample_data),
            data_dir: raw.data_dir,
            out_dir: raw.out_dir,
            parallel: raw
                .parallel
                .as_ref()
                .map_or(defaults.parallel, |p| *p.get_ref()),
        };
        // Re-run the checks that name a grid axis against its span.
        if let Some(m) = &raw.methods {
            config.check_methods().map_err(|e| at(m.span(), e))?;
        }
        if let Some(l) = &raw.lambdas {
            config.check_lambdas().map_err(|e| at(l.span(), e))?;
        }
        if let Some(s) = &raw.seeds {
            config.check_seeds().map_err(|e| at(s.span(), e))?;
        }
        if let Some(p) = &raw.parallel {
            config.check_parallel().map_err(|e| at(p.span(), e))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&src).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn check_methods(&self) -> std::result::Result<(), String> {
        if self.methods.is_empty() {
            return Err("`methods` is empty".into());
        }
        let distinct: HashSet<_> = self.methods.iter().collect();
        if distinct.len() != self.methods.len() {
            return Err("`methods` lists a method twice".into());
        }
        Ok(())
    }

    fn check_lambdas(&self) -> std::result::Result<(), String> {
        if self.lambdas.is_empty() {
            return Err("`lambdas` is empty".into());
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(format!("lambda {l} is not a finite value ≥ 0"));
        }
        let mut seen = Vec::new();
        for &l in &self.lambdas {
            if seen.contains(&l) {
                return Err(format!("lambda {l} is listed twice"));
            }
            seen.push(l);
        }
        if self.methods.iter().any(|m| m.is_vat()) && !self.lambdas.contains(&0.0) {
            return Err(
                "`lambdas` must contain 0 when a VAT method is run (baseline anchor)".into(),
            );
        }
        Ok(())
    }

    fn check_seeds(&self) -> std::result::Result<(), String> {
        if self.seeds.is_empty() {
            return Err("`seeds` is empty".into());
        }
        let distinct: HashSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return Err("`seeds` must be distinct".into());
        }
        Ok(())
    }

    fn check_parallel(&self) -> std::result::Result<(), String> {
        if self.parallel == 0 {
            return Err("`parallel` must be at least 1".into());
        }
        Ok(())
    }

    /// Checks every invariant; called before any run starts.
    pub fn validate(&self) -> Result<()> {
        for check in [
            Self::check_methods,
            Self::check_lambdas,
            Self::check_seeds,
            Self::check_parallel,
        ] {
            check(self).map_err(Error::Config)?;
        }
        if self.data_dir.is_none() {
            self.task.validate()?;
        }
        self.vat_config(self.methods[0], 0.0, self.seeds[0])
            .validate()
    }

    /// The training configuration of one grid point.
    pub fn vat_config(&self, method: Method, lambda: f64, seed: u64) -> VatConfig {
        let t = &self.training;
        VatConfig {
            method,
            lambda,
            task: self.task.kind,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            adam: t.adam,
            augment: t.augment,
            model: ModelSpec {
                image_size: self.task.image_size,
                ..t.model.clone()
            },
            seed,
        }
    }

    /// Seed of the dataset used by runs with the given training seed.
    pub fn data_seed(&self, seed: u64) -> u64 {
        if self.resample_data {
            self.task.seed.wrapping_add(seed)
        } else {
            self.task.seed
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(
            ExperimentConfig::from_toml_str("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn full_document() {
        let src = r#"
methods = ["baseline", "vat-late"]
lambdas = [0.0, 0.5]
seeds = [3, 4]
parallel = 2
resample_data = false

[task]
kind = "ordinal"
shift = 2.0

[task.counts]
train = 8
val = 8
pre = 16
test = 8

[training]
max_epochs = 3
patience = 1

[training.adam]
lr = 0.01
"#;
        let c = ExperimentConfig::from_toml_str(src).unwrap();
        assert_eq!(c.methods, vec![Method::Baseline, Method::VatLate]);
        assert_eq!(c.task.counts.pre, 16);
        assert_eq!(c.training.adam.lr, 0.01);
        assert_eq!(c.training.adam.beta2, 0.999);
        assert_eq!(c.data_seed(4), c.task.seed);
    }

    fn err_line(src: &str) -> String {
        match ExperimentConfig::from_toml_str(src) {
            Err(Error::Config(msg)) => msg,
            other => panic!("expected a configuration error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_line() {
        assert!(err_line("seeds = [1]\nlambdas = [0.1]\n").starts_with("line 2:"));
        assert!(err_line("\n\nseeds = [1, 1]\n").starts_with("line 3:"));
        assert!(err_line("lambdas = [0.0, -1.0]\n").starts_with("line 1:"));
        assert!(err_line("\nmethods = [\"sgd\"]\n").starts_with("line 2:"));
        assert!(err_line("[training]\nbogus = 1\n").starts_with("line 2:"));
        assert!(err_line("parallel = 0").starts_with("line 1:"));
    }
}
