use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::report::{summarize, Prediction, ReportWriter, RunReport, Summary};
use crate::bvtd::feature_gap;
use crate::data::{gen_shapes_task, read_cache, DatasetSplit, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::trainer::{fit, task_metric, Method};

/// One grid point of an experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub method: Method,
    pub lambda: f64,
    pub seed: u64,
}

impl RunSpec {
    pub fn run_id(&self) -> String {
        format!("{}-l{}-s{}", self.method, self.lambda, self.seed)
    }
}

/// Grid points in execution and report order: method, then λ, then seed.
/// The baseline has no mixing coefficient and runs once per seed at λ = 0.
pub fn plan_runs(config: &ExperimentConfig) -> Vec<RunSpec> {
    let mut runs = Vec::new();
    for &method in &config.methods {
        let lambdas: &[f64] = if method.is_vat() {
            &config.lambdas
        } else {
            &[0.0]
        };
        for &lambda in lambdas {
            for &seed in &config.seeds {
                runs.push(RunSpec {
                    method,
                    lambda,
                    seed,
                });
            }
        }
    }
    runs
}

/// Loads or generates the dataset of every distinct data seed.
fn datasets(config: &ExperimentConfig) -> Result<HashMap<u64, DatasetSplit>> {
    let mut out = HashMap::new();
    for &seed in &config.seeds {
        let data_seed = config.data_seed(seed);
        if out.contains_key(&data_seed) {
            continue;
        }
        let split = match &config.data_dir {
            Some(dir) => read_cache(dir)?,
            None => gen_shapes_task(&SyntheticTaskSpec {
                seed: data_seed,
                ..config.task.clone()
            })?,
        };
        out.insert(data_seed, split);
    }
    Ok(out)
}

/// Trains one grid point and evaluates its best-validation parameters on
/// the test subset.
pub fn execute_run(
    config: &ExperimentConfig,
    spec: RunSpec,
    split: &DatasetSplit,
) -> Result<RunReport> {
    let start = Instant::now();
    let vat = config.vat_config(spec.method, spec.lambda, spec.seed);
    let result = fit(split, &vat)?;
    let params = &result.state.best_params;
    let preds = result.model.predict(params, &split.test)?;
    let test = task_metric(vat.task, &preds, &split.test)?;
    let gap = feature_gap(&result.model, params, &split.train, &split.val)?;
    Ok(RunReport {
        run_id: spec.run_id(),
        method: spec.method,
        lambda: spec.lambda,
        seed: spec.seed,
        data_seed: config.data_seed(spec.seed),
        records: result.records,
        best_epoch: result.state.best_epoch,
        best_val_metric: result.state.best_metric,
        metric: test.metric,
        test_metric: test.value,
        feature_gap: gap,
        predictions: split
            .test
            .iter()
            .zip(&preds)
            .map(|(s, &value)| Prediction {
                sample_id: s.id,
                label: s.label,
                value,
            })
            .collect(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every grid point on a pool of `config.parallel` workers.
///
/// Reports are handed to a single writer in plan order, so the files in
/// `out` (when given) always hold a prefix of the complete output. The
/// configuration is validated before any run starts.
pub fn run_experiment(
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<(Vec<RunReport>, Summary)> {
    config.validate()?;
    let plan = plan_runs(config);
    let data = datasets(config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallel)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", config.parallel)))?;
    let mut writer = out.map(ReportWriter::create).transpose()?;

    let failed = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<RunReport>)>();
    let mut reports = Vec::with_capacity(plan.len());
    let mut first_error = None;
    std::thread::scope(|scope| {
        let plan = &plan;
        let data = &data;
        let failed = &failed;
        scope.spawn(move || {
            pool.install(|| {
                plan.par_iter()
                    .enumerate()
                    .for_each_with(tx, |tx, (i, spec)| {
                        if failed.load(Ordering::SeqCst) {
                            return;
                        }
                        let split = &data[&config.data_seed(spec.seed)];
                        let result = execute_run(config, *spec, split);
                        if result.is_err() {
                            failed.store(true, Ordering::SeqCst);
                        }
                        let _ = tx.send((i, result));
                    });
            });
        });

        // Single writer: buffer out-of-order completions, emit in plan order.
        let mut pending = BTreeMap::new();
        for (i, result) in rx {
            pending.insert(i, result);
            while let Some(result) = pending.remove(&reports.len()) {
                match result {
                    Ok(report) => {
                        if let Some(w) = writer.as_mut() {
                            if let Err(e) = w.append(&report) {
                                failed.store(true, Ordering::SeqCst);
                                first_error.get_or_insert(e);
                                break;
                            }
                        }
                        reports.push(report);
                    }
                    Err(e) => {
                        first_error.get_or_insert(e);
                        break;
                    }
                }
            }
        }
    });
    if let Some(e) = first_error {
        return Err(e);
    }
    if reports.len() != plan.len() {
        return Err(Error::Contract(format!(
            "{} of {} runs completed",
            reports.len(),
            plan.len()
        )));
    }
    let summary = match writer {
        Some(w) => w.finish(&reports)?,
        None => summarize(&reports),
    };
    Ok((reports, summary))
}

/// For every (method, seed), the λ whose run reached the best validation
/// metric. Ties go to the smaller λ. The baseline counts as λ = 0 of every
/// VAT method.
pub fn select_lambda(
    reports: &[RunReport],
    method: Method,
    positive_only: bool,
) -> BTreeMap<u64, f64> {
    let mut best: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for r in reports {
        let candidate = r.method == method || (r.method == Method::Baseline && method.is_vat());
        if !candidate || (positive_only && r.lambda <= 0.0) {
            continue;
        }
        let entry = best.entry(r.seed).or_insert((r.lambda, r.best_val_metric));
        let (lambda, metric) = *entry;
        if r.best_val_metric > metric || (r.best_val_metric == metric && r.lambda < lambda) {
            *entry = (r.lambda, r.best_val_metric);
        }
    }
    best.into_iter()
        .map(|(seed, (lambda, _))| (seed, lambda))
        .collect()
}
