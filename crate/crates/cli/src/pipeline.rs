//! End-to-end runs over the `(a, seed)` grid.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rdiff_core::io::atomic_write;
use rdiff_core::score::TrainReport;
use rdiff_core::MetricsReport;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{RunLog, RunManifest};
use crate::stages::{self, CellInputs, SeedPaths};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CSV_COLUMNS: [&str; 10] = ["a", "seed", "subopt", "avg_reward", "e1", "e2", "e3", "angle", "offsupport", "shift"];

#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineOptions {
    pub dry_run: bool,
    pub force: bool,
}

#[derive(Debug)]
pub enum PipelineOutcome {
    /// A complete run with the same config already exists.
    UpToDate(RunManifest),
    DryRun(RunManifest),
    Completed(RunManifest),
}

impl PipelineOutcome {
    pub fn manifest(&self) -> &RunManifest {
        match self {
            PipelineOutcome::UpToDate(m) | PipelineOutcome::DryRun(m) | PipelineOutcome::Completed(m) => m,
        }
    }
}

/// What one seed produced, including a partial result on failure.
pub struct SeedRun {
    pub log: RunLog,
    pub report: Option<TrainReport>,
    pub metrics: Vec<MetricsReport>,
    pub error: Option<CliError>,
}

/// Runs every stage for one seed; stops at the first failing stage but
/// keeps what was produced so far.
pub fn run_seed(cfg: &RunConfig, seed: u64, out: &Path) -> SeedRun {
    let mut log = RunLog::default();
    let paths = SeedPaths::new(out, seed);
    let mut metrics = Vec::new();
    let mut report = None;
    let result = (|| -> CliResult<()> {
        let data = stages::gen_data(cfg, seed, &paths, &mut log)?;
        let est = stages::train_reward(cfg, seed, &data.labeled, &paths, &mut log)?;
        let (model, train_report, curated) = stages::train_score(cfg, seed, &data.unlabeled, &est, &paths, &mut log)?;
        report = Some(train_report);
        let inputs = CellInputs { world: &data.world, est: &est, model: &model, curated: &curated };
        for &a in &cfg.sweep.targets {
            metrics.push(stages::sample_cell(cfg, seed, a, &inputs, &paths, &mut log)?);
        }
        Ok(())
    })();
    SeedRun { log, report, metrics, error: result.err() }
}

fn worker_count(cfg: &RunConfig, jobs: usize) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let wanted = if cfg.workers == 0 { available } else { cfg.workers };
    wanted.clamp(1, jobs.max(1))
}

/// Writes the sweep table: one row per `(a, seed)`, ordered by seed then `a`.
pub fn write_sweep_csv(path: &Path, rows: &[MetricsReport]) -> rdiff_core::Result<()> {
    let mut s = CSV_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.a, r.seed, r.subopt, r.avg_reward, r.e1, r.e2, r.e3, r.subspace_angle, r.off_support_mean, r.distro_shift
        ));
    }
    atomic_write(path, s.as_bytes())
}

pub fn cmd_pipeline(cfg: &RunConfig, out: &Path, opts: PipelineOptions) -> CliResult<PipelineOutcome> {
    cfg.validate()?;
    if let Some(existing) = RunManifest::read(out)? {
        if !opts.force && !existing.dry_run {
            if existing.config != *cfg {
                return Err(CliError::Config(format!(
                    "{} holds a run with a different config; pass --force to overwrite or choose another --out",
                    out.display()
                )));
            }
            if existing.complete && existing.verify(out).is_empty() {
                return Ok(PipelineOutcome::UpToDate(existing));
            }
        }
    }

    let mut manifest = RunManifest::new(cfg.clone());
    if opts.dry_run {
        manifest.dry_run = true;
        manifest.write(out)?;
        return Ok(PipelineOutcome::DryRun(manifest));
    }
    manifest.write(out)?;
    let started = Instant::now();

    let seeds = &cfg.sweep.seeds;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SeedRun>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..worker_count(cfg, seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let run = run_seed(cfg, seeds[i], out);
                results.lock().expect("no worker panicked")[i] = Some(run);
            });
        }
    });

    let mut rows = Vec::new();
    let mut first_error = None;
    for (seed, run) in seeds.iter().zip(results.into_inner().expect("no worker panicked")) {
        let run = run.expect("every seed ran");
        manifest.artifacts.extend(run.log.artifacts);
        manifest.timings.extend(run.log.timings);
        if let Some(r) = run.report {
            manifest.loss_traces.insert(*seed, r);
        }
        rows.extend(run.metrics);
        if first_error.is_none() {
            first_error = run.error;
        }
    }
    if let Some(e) = first_error {
        manifest.failed_stage = Some(match &e {
            CliError::Stage { stage, .. } => stage.to_string(),
            other => other.to_string(),
        });
        manifest.write(out)?;
        return Err(e);
    }

    let mut log = RunLog::default();
    let csv = out.join(SWEEP_FILE);
    write_sweep_csv(&csv, &rows).map_err(CliError::stage("pipeline", None))?;
    log.record(out, &csv)?;
    let cfg_path = out.join(CONFIG_FILE);
    atomic_write(&cfg_path, cfg.to_toml().as_bytes()).map_err(CliError::stage("pipeline", None))?;
    log.record(out, &cfg_path)?;
    log.time("pipeline", None, started.elapsed().as_secs_f64());
    manifest.artifacts.extend(log.artifacts);
    manifest.timings.extend(log.timings);
    manifest.complete = true;
    manifest.write(out)?;
    Ok(PipelineOutcome::Completed(manifest))
}

/// Parses a sweep table written by [`write_sweep_csv`].
pub fn read_sweep_csv(path: &Path) -> CliResult<Vec<SweepRow>> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != CSV_COLUMNS.join(",") {
        return Err(CliError::Validation(format!("{}: unexpected header `{header}`", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || CliError::Validation(format!("{}: malformed row {}", path.display(), i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != CSV_COLUMNS.len() {
                return Err(bad());
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
            Ok(SweepRow {
                a: num(0)?,
                seed: f[1].parse().map_err(|_| bad())?,
                subopt: num(2)?,
                avg_reward: num(3)?,
                e1: num(4)?,
                e2: num(5)?,
                e3: num(6)?,
                angle: num(7)?,
                offsupport: num(8)?,
                shift: num(9)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub a: f64,
    pub seed: u64,
    pub subopt: f64,
    pub avg_reward: f64,
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    pub angle: f64,
    pub offsupport: f64,
    pub shift: f64,
}
