//! Curves (mean ± 2 std over seeds) and pooled reward histograms from a
//! completed pipeline run, as CSV and SVG.

use std::path::{Path, PathBuf};

use rdiff_core::io::{atomic_write, read_matrix};
use rdiff_core::metrics::histogram;
use rdiff_core::MetricsReport;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::{RunLog, RunManifest};
use crate::stages::{load_data, load_metrics, SeedPaths};
use crate::svg::{LinePlot, Series};

pub const FIGURES_DIR: &str = "figures";
/// Error bars span this many standard deviations over seeds.
pub const ERRORBAR_MULTIPLIER: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub a: f64,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

impl CurvePoint {
    pub fn lower(&self) -> f64 {
        self.mean - ERRORBAR_MULTIPLIER * self.std
    }
    pub fn upper(&self) -> f64 {
        self.mean + ERRORBAR_MULTIPLIER * self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curve {
    pub name: &'static str,
    pub points: Vec<CurvePoint>,
}

/// Rewards of all generated points at one `a`, pooled over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledHistogram {
    pub a: f64,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Figures {
    pub avg_reward: Curve,
    pub distribution_shift: Curve,
    pub off_support: Curve,
    pub histograms: Vec<PooledHistogram>,
    pub files: Vec<PathBuf>,
}

/// Mean and sample standard deviation; zero spread for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn curve(name: &'static str, targets: &[f64], reports: &[MetricsReport], field: fn(&MetricsReport) -> f64) -> Curve {
    let points = targets
        .iter()
        .map(|&a| {
            let vals: Vec<f64> = reports.iter().filter(|r| r.a == a).map(field).collect();
            let (mean, std) = mean_std(&vals);
            CurvePoint { a, mean, std, runs: vals.len() }
        })
        .collect();
    Curve { name, points }
}

fn curve_csv(c: &Curve) -> String {
    let mut s = String::from("a,mean,std,lower,upper,runs\n");
    for p in &c.points {
        s.push_str(&format!("{},{},{},{},{},{}\n", p.a, p.mean, p.std, p.lower(), p.upper(), p.runs));
    }
    s
}

fn curve_plot(c: &Curve, title: &str, y_label: &str) -> LinePlot {
    LinePlot {
        title: title.into(),
        x_label: "target reward a".into(),
        y_label: y_label.into(),
        series: vec![Series {
            name: format!("mean ± {ERRORBAR_MULTIPLIER} std over seeds"),
            points: c.points.iter().map(|p| (p.a, p.mean)).collect(),
            error: Some(c.points.iter().map(|p| ERRORBAR_MULTIPLIER * p.std).collect()),
        }],
    }
}

pub fn cmd_figures(out: &Path) -> CliResult<Figures> {
    let manifest = RunManifest::read(out)?
        .filter(|m| m.complete)
        .ok_or_else(|| CliError::MissingArtifact { path: RunManifest::path(out), stage: "pipeline" })?;
    let cfg = &manifest.config;
    let targets = &cfg.sweep.targets;

    let mut reports = Vec::new();
    let mut rewards: Vec<Vec<f64>> = vec![Vec::new(); targets.len()];
    for &seed in &cfg.sweep.seeds {
        let paths = SeedPaths::new(out, seed);
        let world = load_data(cfg, seed, &paths)?.world;
        for (k, &a) in targets.iter().enumerate() {
            reports.push(load_metrics(&paths.metrics(a))?);
            let x = read_matrix(&paths.samples(a)).map_err(CliError::stage("figures", Some(seed)))?;
            rewards[k].extend(world.rewards(&x).iter());
        }
    }

    let avg_reward = curve("avg_reward", targets, &reports, |r| r.avg_reward);
    let distribution_shift = curve("distribution_shift", targets, &reports, |r| r.distro_shift);
    let off_support = curve("off_support", targets, &reports, |r| r.off_support_mean);

    let lo = rewards.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = rewards.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let histograms = targets
        .iter()
        .zip(&rewards)
        .map(|(&a, r)| {
            let h = histogram(r, cfg.sweep.histogram_bins, Some((lo, hi))).map_err(CliError::stage("figures", None))?;
            Ok(PooledHistogram { a, n: r.len(), mean: h.mean, std: h.std, edges: h.edges, counts: h.counts })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let dir = out.join(FIGURES_DIR);
    std::fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let mut files = Vec::new();
    let mut emit = |name: &str, body: String| -> CliResult<()> {
        let path = dir.join(name);
        atomic_write(&path, body.as_bytes()).map_err(CliError::stage("figures", None))?;
        files.push(path);
        Ok(())
    };
    for (c, title, y) in [
        (&avg_reward, "Average reward of generated samples", "mean reward"),
        (&distribution_shift, "Distribution shift", "max loss ratio"),
        (&off_support, "Off-support deviation", "mean ||x_perp||"),
    ] {
        emit(&format!("curve_{}.csv", c.name), curve_csv(c))?;
        emit(&format!("{}.svg", c.name), curve_plot(c, title, y).render())?;
    }

    let mut hist_csv = String::from("a,bin_lo,bin_hi,count\n");
    let mut summary = String::from("a,n,mean,std\n");
    let mut series = Vec::new();
    for h in &histograms {
        for (i, c) in h.counts.iter().enumerate() {
            hist_csv.push_str(&format!("{},{},{},{}\n", h.a, h.edges[i], h.edges[i + 1], c));
        }
        summary.push_str(&format!("{},{},{},{}\n", h.a, h.n, h.mean, h.std));
        let width = h.edges[1] - h.edges[0];
        let density = |c: usize| if h.n == 0 || width <= 0.0 { 0.0 } else { c as f64 / (h.n as f64 * width) };
        series.push(Series {
            name: format!("a = {}", h.a),
            points: h.counts.iter().enumerate().map(|(i, &c)| (0.5 * (h.edges[i] + h.edges[i + 1]), density(c))).collect(),
            error: None,
        });
    }
    emit("histograms.csv", hist_csv)?;
    emit("histogram_summary.csv", summary)?;
    let plot = LinePlot {
        title: "Reward distribution of generated samples".into(),
        x_label: "reward".into(),
        y_label: "density".into(),
        series,
    };
    emit("reward_histograms.svg", plot.render())?;

    // Keep the manifest's promise that every output it lists hash-matches.
    let mut log = RunLog::default();
    for f in &files {
        log.record(out, f)?;
    }
    let mut manifest = manifest;
    manifest.artifacts.retain(|a| !log.artifacts.iter().any(|b| b.path == a.path));
    manifest.artifacts.extend(log.artifacts);
    manifest.write(out)?;

    Ok(Figures { avg_reward, distribution_shift, off_support, histograms, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_run_has_zero_width_bars() {
        let (m, s) = mean_std(&[3.0]);
        assert_eq!((m, s), (3.0, 0.0));
        let p = CurvePoint { a: 1.0, mean: m, std: s, runs: 1 };
        assert_eq!(p.lower(), p.upper());
    }

    #[test]
    fn bars_span_two_sample_deviations() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        let p = CurvePoint { a: 0.0, mean: m, std: s, runs: 2 };
        assert!((p.upper() - p.lower() - 4.0 * s).abs() < 1e-12);
    }
}
