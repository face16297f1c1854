use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::report::{mean_std, write_json, RunReport};
use super::run::run_experiment;
use crate::error::{Error, Result};
use crate::trainer::Method;

/// Mean and spread of the test metric at one (method, λ) point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub method: Method,
    pub lambda: f64,
    pub mean_metric: f64,
    pub std_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metric: Option<String>,
    /// Mean test metric of the baseline runs, when the baseline was run.
    pub baseline: Option<SweepPoint>,
    /// VAT points in method, then grid, order.
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// Builds the sweep table from finished reports.
    pub fn from_reports(reports: &[RunReport]) -> Self {
        let point = |method: Method, lambda: f64| {
            let values: Vec<f64> = reports
                .iter()
                .filter(|r| r.method == method && r.lambda == lambda)
                .map(|r| r.test_metric)
                .collect();
            let (mean_metric, std_metric) = mean_std(&values);
            SweepPoint {
                method,
                lambda,
                mean_metric,
                std_metric,
            }
        };
        let mut keys: Vec<(Method, f64)> = Vec::new();
        for r in reports.iter().filter(|r| r.method.is_vat()) {
            if !keys.contains(&(r.method, r.lambda)) {
                keys.push((r.method, r.lambda));
            }
        }
        Self {
            metric: reports.first().map(|r| r.metric.clone()),
            baseline: reports
                .iter()
                .any(|r| r.method == Method::Baseline)
                .then(|| point(Method::Baseline, 0.0)),
            points: keys.into_iter().map(|(m, l)| point(m, l)).collect(),
        }
    }

    /// The λ with the highest mean metric for a method; ties go to the
    /// smaller λ.
    pub fn argmax_lambda(&self, method: Method) -> Option<f64> {
        self.points
            .iter()
            .filter(|p| p.method == method)
            .fold(None, |best: Option<&SweepPoint>, p| match best {
                Some(b) if b.mean_metric >= p.mean_metric => Some(b),
                _ => Some(p),
            })
            .map(|p| p.lambda)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for p in self.baseline.iter().chain(&self.points) {
            w.serialize(p)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        std::fs::write(path, render_svg(self)).map_err(|e| Error::io(path, e))
    }
}

/// Runs the λ grid of every configured method and writes the reports plus
/// `sweep.csv`, `sweep.json` and `sweep.svg` to `out`.
pub fn lambda_sweep(
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<(Vec<RunReport>, SweepReport)> {
    if config.lambdas.len() < 2 || !config.lambdas.contains(&0.0) {
        return Err(Error::Config(
            "a sweep needs at least two lambdas including 0".into(),
        ));
    }
    if !config.methods.iter().any(|m| m.is_vat()) {
        return Err(Error::Config(
            "a sweep needs at least one VAT method".into(),
        ));
    }
    let (reports, _) = run_experiment(config, out)?;
    let sweep = SweepReport::from_reports(&reports);
    if let Some(dir) = out {
        sweep.write_csv(&dir.join("sweep.csv"))?;
        write_json(&dir.join("sweep.json"), &sweep)?;
        sweep.write_svg(&dir.join("sweep.svg"))?;
    }
    Ok((reports, sweep))
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];

/// A line plot of mean metric against the λ grid (evenly spaced, since the
/// grid is log-like and contains 0), with ±1 std error bars and the
/// baseline mean as a dashed line.
pub fn render_svg(sweep: &SweepReport) -> String {
    let mut lambdas: Vec<f64> = Vec::new();
    for p in &sweep.points {
        if !lambdas.contains(&p.lambda) {
            lambdas.push(p.lambda);
        }
    }
    lambdas.sort_by(f64::total_cmp);

    let finite = |v: f64| v.is_finite().then_some(v);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in sweep.points.iter().chain(&sweep.baseline) {
        if let Some(m) = finite(p.mean_metric) {
            let s = finite(p.std_metric).unwrap_or(0.0);
            lo = lo.min(m - s);
            hi = hi.max(m + s);
        }
    }
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);

    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let x_of = |lambda: f64| {
        let i = lambdas.iter().position(|&l| l == lambda).unwrap_or(0) as f64;
        let n = lambdas.len().max(2) as f64 - 1.0;
        MARGIN + plot_w * i / n
    };
    let y_of = |v: f64| MARGIN + plot_h * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{x0} {y0} L{x0} {y1} L{x1} {y1}" fill="none" stroke="black"/>"#
    );
    for &l in &lambdas {
        let x = x_of(l);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{y1}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{l}</text>"#,
            y1 + 5.0,
            y1 + 20.0
        );
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0
        );
    }
    let metric = sweep.metric.as_deref().unwrap_or("metric");
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">λ</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">mean test {metric}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );

    let mut legend = Vec::new();
    if let Some(b) = sweep
        .baseline
        .as_ref()
        .filter(|b| b.mean_metric.is_finite())
    {
        let y = y_of(b.mean_metric);
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="gray" stroke-dasharray="6 4"/>"#
        );
        legend.push(("baseline".to_string(), "gray", true));
    }
    let mut methods: Vec<Method> = Vec::new();
    for p in &sweep.points {
        if !methods.contains(&p.method) {
            methods.push(p.method);
        }
    }
    for (k, &method) in methods.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut pts: Vec<&SweepPoint> = sweep
            .points
            .iter()
            .filter(|p| p.method == method && p.mean_metric.is_finite())
            .collect();
        pts.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        let path: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                format!(
                    "{}{:.2} {:.2}",
                    if i == 0 { "M" } else { "L" },
                    x_of(p.lambda),
                    y_of(p.mean_metric)
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for p in pts {
            let x = x_of(p.lambda);
            let sd = if p.std_metric.is_finite() {
                p.std_metric
            } else {
                0.0
            };
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/><circle cx="{x:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                y_of(p.mean_metric - sd),
                y_of(p.mean_metric + sd),
                y_of(p.mean_metric)
            );
        }
        legend.push((method.to_string(), color, false));
    }
    for (i, (name, color, dashed)) in legend.iter().enumerate() {
        let y = MARGIN - 35.0 + 14.0 * i as f64;
        let dash = if *dashed {
            r#" stroke-dasharray="6 4""#
        } else {
            ""
        };
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}">{name}</text>"#,
            x1 - 120.0,
            x1 - 95.0,
            x1 - 90.0,
            y + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(method: Method, lambda: f64, mean: f64) -> SweepPoint {
        SweepPoint {
            method,
            lambda,
            mean_metric: mean,
            std_metric: 0.01,
        }
    }

    #[test]
    fn argmax_prefers_smaller_lambda_on_ties() {
        let sweep = SweepReport {
            metric: Some("auc".into()),
            baseline: None,
            points: vec![
                point(Method::VatEarly, 0.0, 0.7),
                point(Method::VatEarly, 0.1, 0.8),
                point(Method::VatEarly, 1.0, 0.8),
                point(Method::VatLate, 0.0, 0.9),
            ],
        };
        assert_eq!(sweep.argmax_lambda(Method::VatEarly), Some(0.1));
        assert_eq!(sweep.argmax_lambda(Method::VatLate), Some(0.0));
        assert_eq!(sweep.argmax_lambda(Method::Baseline), None);
    }

    #[test]
    fn svg_is_well_formed() {
        let sweep = SweepReport {
            metric: Some("auc".into()),
            baseline: Some(point(Method::Baseline, 0.0, 0.75)),
            points: vec![
                point(Method::VatEarly, 0.0, 0.75),
                point(Method::VatEarly, 0.1, f64::NAN),
            ],
        };
        let svg = render_svg(&sweep);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("stroke-dasharray"));
        assert!(!svg.contains("NaN"));
    }
}
