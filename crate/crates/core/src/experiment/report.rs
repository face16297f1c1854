use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{EpochRecord, Method};

/// Everything one (method, λ, seed) run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub method: Method,
    pub lambda: f64,
    pub seed: u64,
    pub data_seed: u64,
    /// Per-epoch rows, ordered by epoch.
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    /// Name of the task metric (`auc` or `kappa`).
    pub metric: String,
    /// Test metric of the best-validation parameters, evaluated once.
    pub test_metric: f64,
    /// Train/validation feature gap of the best-validation parameters.
    pub feature_gap: f64,
    pub predictions: Vec<Prediction>,
    pub wall_seconds: f64,
}

/// Raw task output for one test image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: u64,
    pub label: usize,
    pub value: f64,
}

/// One line of `runs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: String,
    pub method: Method,
    pub lambda: f64,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub aux_bce: Option<f64>,
    pub total_loss: f64,
    pub val_metric: f64,
    pub feature_gap: f64,
}

/// Column order of `runs.csv`.
pub const RUNS_COLUMNS: [&str; 10] = [
    "run_id",
    "method",
    "lambda",
    "seed",
    "epoch",
    "train_loss",
    "aux_bce",
    "total_loss",
    "val_metric",
    "feature_gap",
];

/// One line of `finals.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub run_id: String,
    pub method: Method,
    pub lambda: f64,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub metric: String,
    pub test_metric: f64,
    pub feature_gap: f64,
}

/// One line of `predictions.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub run_id: String,
    pub method: Method,
    pub lambda: f64,
    pub seed: u64,
    pub data_seed: u64,
    pub sample_id: u64,
    pub label: usize,
    pub prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryGroup {
    pub method: Method,
    pub lambda: f64,
    pub runs: usize,
    pub mean_test_metric: f64,
    pub std_test_metric: f64,
    pub mean_feature_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metric: Option<String>,
    pub groups: Vec<SummaryGroup>,
}

impl RunReport {
    pub fn rows(&self) -> impl Iterator<Item = RunRow> + '_ {
        self.records.iter().map(|r| RunRow {
            run_id: self.run_id.clone(),
            method: self.method,
            lambda: self.lambda,
            seed: self.seed,
            epoch: r.epoch,
            train_loss: r.train_loss,
            aux_bce: r.aux_bce,
            total_loss: r.total_loss,
            val_metric: r.val_metric,
            feature_gap: r.feature_gap,
        })
    }

    pub fn final_row(&self) -> FinalRow {
        FinalRow {
            run_id: self.run_id.clone(),
            method: self.method,
            lambda: self.lambda,
            seed: self.seed,
            best_epoch: self.best_epoch,
            best_val_metric: self.best_val_metric,
            metric: self.metric.clone(),
            test_metric: self.test_metric,
            feature_gap: self.feature_gap,
        }
    }
}

/// Arithmetic mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups reports by (method, λ) in first-appearance order.
pub fn summarize(reports: &[RunReport]) -> Summary {
    let mut keys: Vec<(Method, f64)> = Vec::new();
    for r in reports {
        if !keys.iter().any(|&(m, l)| m == r.method && l == r.lambda) {
            keys.push((r.method, r.lambda));
        }
    }
    let groups = keys
        .into_iter()
        .map(|(method, lambda)| {
            let members: Vec<&RunReport> = reports
                .iter()
                .filter(|r| r.method == method && r.lambda == lambda)
                .collect();
            let tests: Vec<f64> = members.iter().map(|r| r.test_metric).collect();
            let gaps: Vec<f64> = members.iter().map(|r| r.feature_gap).collect();
            let (mean, std) = mean_std(&tests);
            SummaryGroup {
                method,
                lambda,
                runs: members.len(),
                mean_test_metric: mean,
                std_test_metric: std,
                mean_feature_gap: mean_std(&gaps).0,
            }
        })
        .collect();
    Summary {
        metric: reports.first().map(|r| r.metric.clone()),
        groups,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

/// Appends reports to the CSV files of an output directory, flushing after
/// every run so an interrupted experiment leaves complete-run prefixes.
pub struct ReportWriter {
    dir: PathBuf,
    runs: csv::Writer<File>,
    finals: csv::Writer<File>,
    predictions: csv::Writer<File>,
    timings: csv::Writer<File>,
}

impl ReportWriter {
    /// Creates `dir` and writes the CSV headers.
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let open = |name: &str, header: &[&str]| -> Result<csv::Writer<File>> {
            let path = dir.join(name);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(file);
            w.write_record(header).map_err(|e| csv_err(&path, e))?;
            w.flush().map_err(|e| Error::io(&path, e))?;
            Ok(w)
        };
        Ok(Self {
            runs: open("runs.csv", &RUNS_COLUMNS)?,
            finals: open(
                "finals.csv",
                &[
                    "run_id",
                    "method",
                    "lambda",
                    "seed",
                    "best_epoch",
                    "best_val_metric",
                    "metric",
                    "test_metric",
                    "feature_gap",
                ],
            )?,
            predictions: open(
                "predictions.csv",
                &[
                    "run_id",
                    "method",
                    "lambda",
                    "seed",
                    "data_seed",
                    "sample_id",
                    "label",
                    "prediction",
                ],
            )?,
            timings: open("timings.csv", &["run_id", "wall_seconds"])?,
            dir,
        })
    }

    pub fn append(&mut self, report: &RunReport) -> Result<()> {
        let path = |name: &str| self.dir.join(name);
        for row in report.rows() {
            self.runs
                .serialize(row)
                .map_err(|e| csv_err(&path("runs.csv"), e))?;
        }
        self.finals
            .serialize(report.final_row())
            .map_err(|e| csv_err(&path("finals.csv"), e))?;
        for p in &report.predictions {
            self.predictions
                .serialize(PredictionRow {
                    run_id: report.run_id.clone(),
                    method: report.method,
                    lambda: report.lambda,
                    seed: report.seed,
                    data_seed: report.data_seed,
                    sample_id: p.sample_id,
                    label: p.label,
                    prediction: p.value,
                })
                .map_err(|e| csv_err(&path("predictions.csv"), e))?;
        }
        self.timings
            .serialize((&report.run_id, report.wall_seconds))
            .map_err(|e| csv_err(&path("timings.csv"), e))?;
        for (name, w) in [
            ("runs.csv", &mut self.runs),
            ("finals.csv", &mut self.finals),
            ("predictions.csv", &mut self.predictions),
            ("timings.csv", &mut self.timings),
        ] {
            w.flush().map_err(|e| Error::io(self.dir.join(name), e))?;
        }
        Ok(())
    }

    /// Writes `summary.json` for the given reports.
    pub fn finish(self, reports: &[RunReport]) -> Result<Summary> {
        let summary = summarize(reports);
        write_json(&self.dir.join("summary.json"), &summary)?;
        Ok(summary)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `runs.csv`, `finals.csv`, `predictions.csv`, `timings.csv` and
/// `summary.json` for a finished list of reports.
pub fn write_reports(reports: &[RunReport], dir: impl AsRef<Path>) -> Result<Summary> {
    let mut writer = ReportWriter::create(dir)?;
    for r in reports {
        writer.append(r)?;
    }
    writer.finish(reports)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| csv_err(path, e))
}

pub fn read_runs_csv(path: impl AsRef<Path>) -> Result<Vec<RunRow>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().ne(RUNS_COLUMNS) {
        return Err(Error::Config(format!(
            "{}: columns {:?}, expected {RUNS_COLUMNS:?}",
            path.display(),
            header.iter().collect::<Vec<_>>()
        )));
    }
    read_csv(path)
}

pub fn read_finals_csv(path: impl AsRef<Path>) -> Result<Vec<FinalRow>> {
    read_csv(path.as_ref())
}

pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    read_csv(path.as_ref())
}
