use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vat_core::bvtd::MeanPredictor;
use vat_core::data::{gen_shapes_task, write_cache, SyntheticTaskSpec};
use vat_core::experiment::{
    decompose_predictions, execute_run, gradcheck_suite, lambda_sweep, read_predictions_csv,
    write_reports, ExperimentConfig, RunSpec,
};
use vat_core::{Error, Method};

#[derive(Parser, Debug)]
#[command(name = "vat", version, about = "Variance-aware training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated training seeds; overrides `seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Number of concurrent runs; overrides `parallel`.
    #[arg(long)]
    parallel: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate one (method, lambda, seed) run.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "vat-early")]
        method: Method,
        /// Mixing coefficient; 0 for the baseline, 0.1 otherwise.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Run every configured method over the lambda grid and plot the sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every differentiable operation.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Bias-variance decomposition of the ensembles saved in `--out`.
    Decompose {
        #[command(flatten)]
        common: Common,
        /// Centre the split on ½(arithmetic mean + target) instead of the
        /// normalized geometric mean.
        #[arg(long)]
        halfway: bool,
    },
    /// Write the configured synthetic dataset to IDX files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

/// Exit status for an error: 1 when the input was invalid, 2 otherwise.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Format { .. } | Error::Dimension { .. } => 1,
        _ => 2,
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = &common.seeds {
        config.seeds = seeds.clone();
    }
    if let Some(p) = common.parallel {
        config.parallel = p;
    }
    if let Some(out) = &common.out {
        config.out_dir = Some(out.clone());
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(config: &ExperimentConfig) -> Result<&Path, Error> {
    config
        .out_dir
        .as_deref()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))
}

fn train(common: &Common, method: Method, lambda: Option<f64>) -> Result<(), Error> {
    let config = load(common)?;
    let out = out_dir(&config)?;
    let lambda = lambda.unwrap_or(if method.is_vat() { 0.1 } else { 0.0 });
    let spec = RunSpec {
        method,
        lambda,
        seed: config.seeds[0],
    };
    config.vat_config(method, lambda, spec.seed).validate()?;
    let split = gen_shapes_task(&SyntheticTaskSpec {
        seed: config.data_seed(spec.seed),
        ..config.task.clone()
    })?;
    let report = execute_run(&config, spec, &split)?;
    write_reports(std::slice::from_ref(&report), out)?;
    println!(
        "{}: {} epochs, best epoch {}, val {:.4}, test {} {:.4}, feature gap {:.4}",
        report.run_id,
        report.records.len(),
        report.best_epoch,
        report.best_val_metric,
        report.metric,
        report.test_metric,
        report.feature_gap
    );
    Ok(())
}

fn sweep(common: &Common) -> Result<(), Error> {
    let config = load(common)?;
    let out = out_dir(&config)?;
    let (_, sweep) = lambda_sweep(&config, Some(out))?;
    if let Some(b) = &sweep.baseline {
        println!("baseline        {:.4} ± {:.4}", b.mean_metric, b.std_metric);
    }
    for p in &sweep.points {
        println!(
            "{:<9} λ={:<6} {:.4} ± {:.4}",
            p.method, p.lambda, p.mean_metric, p.std_metric
        );
    }
    Ok(())
}

fn gradcheck(common: &Common, instances: usize) -> Result<bool, Error> {
    let seed = common
        .seeds
        .as_ref()
        .and_then(|s| s.first().copied())
        .unwrap_or(0);
    let cases = gradcheck_suite(instances, seed)?;
    for c in &cases {
        println!(
            "{:<16} {:>4} instances  max rel err {:.3e}  {}",
            c.op,
            c.instances,
            c.max_rel_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        let path = out.join("gradcheck.json");
        let json = serde_json::to_string_pretty(&cases).expect("cases serialize");
        std::fs::write(&path, json + "\n").map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(cases.iter().all(|c| c.passed()))
}

fn decompose(common: &Common, halfway: bool) -> Result<(), Error> {
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("decompose needs --out pointing at a run directory".into()))?;
    let rows = read_predictions_csv(out.join("predictions.csv"))?;
    let mode = if halfway {
        MeanPredictor::HalfwayToTarget
    } else {
        MeanPredictor::Geometric
    };
    let groups = decompose_predictions(&rows, mode)?;
    let path = out.join("decomposition.csv");
    let io = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    for g in &groups {
        w.serialize(g).map_err(io)?;
        println!(
            "{:<9} λ={:<6} members {:>2}  E[KL] {:.4} = bias {:.4} + variance {:.4} (residual {:.1e})",
            g.method, g.lambda, g.members, g.expected_kl, g.bias, g.variance, g.residual
        );
    }
    w.flush().map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(())
}

fn gen_data(common: &Common) -> Result<(), Error> {
    let config = load(common)?;
    let out = out_dir(&config)?;
    let seed = config.data_seed(config.seeds[0]);
    let split = gen_shapes_task(&SyntheticTaskSpec {
        seed,
        ..config.task.clone()
    })?;
    write_cache(&split, out)?;
    println!(
        "wrote train {} / val {} / pre {} / test {} images to {}",
        split.train.len(),
        split.val.len(),
        split.pre.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train {
            common,
            method,
            lambda,
        } => train(common, *method, *lambda),
        Command::Sweep { common } => sweep(common),
        Command::Gradcheck { common, instances } => match gradcheck(common, *instances) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
        Command::Decompose { common, halfway } => decompose(common, *halfway),
        Command::GenData { common } => gen_data(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
