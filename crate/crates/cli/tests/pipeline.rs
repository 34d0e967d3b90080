use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rdiff_cli::config::RunConfig;
use rdiff_cli::error::{CliError, EXIT_COMPUTE, EXIT_CONFIG, EXIT_OK, EXIT_VALIDATION};
use rdiff_cli::figures::{cmd_figures, FIGURES_DIR};
use rdiff_cli::manifest::{RunManifest, MANIFEST_FILE};
use rdiff_cli::pipeline::{read_sweep_csv, CSV_COLUMNS, SWEEP_FILE};
use rdiff_cli::stages::SeedPaths;
use rdiff_cli::validate::{check_artifacts, cmd_validate};
use rdiff_cli::{cmd_pipeline, PipelineOptions, PipelineOutcome};

const GOLDEN_HEADER: &str = include_str!("golden/sweep_header.csv");

fn rdiff(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rdiff"))
        .args(args)
        .env_remove(rdiff_cli::config::OUT_ENV)
        .output()
        .expect("binary runs")
}

fn code(out: &std::process::Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn files_under(dir: &Path) -> Vec<String> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                found.push(p.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    found.sort();
    found
}

#[test]
fn sweep_schema_matches_golden_file() {
    assert_eq!(CSV_COLUMNS.join(",") + "\n", GOLDEN_HEADER);
}

#[test]
fn dry_run_writes_only_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let outcome = cmd_pipeline(&RunConfig::smoke(), &out, PipelineOptions { dry_run: true, force: false }).unwrap();
    assert!(matches!(outcome, PipelineOutcome::DryRun(_)));
    assert_eq!(files_under(&out), vec![MANIFEST_FILE.to_string()]);
    let m = RunManifest::read(&out).unwrap().unwrap();
    assert!(m.dry_run && !m.complete && m.artifacts.is_empty());
}

#[test]
fn invalid_config_is_rejected_before_compute() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::smoke();
    cfg.world.latent_dim = 9;
    let err = cmd_pipeline(&cfg, tmp.path(), PipelineOptions::default()).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert!(files_under(tmp.path()).is_empty());
}

#[test]
fn smoke_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = RunConfig::smoke();

    let started = Instant::now();
    let first = cmd_pipeline(&cfg, &out, PipelineOptions::default()).unwrap();
    assert!(started.elapsed().as_secs() < 120, "smoke run took {:?}", started.elapsed());
    let manifest = match first {
        PipelineOutcome::Completed(m) => m,
        other => panic!("expected a completed run, got {other:?}"),
    };
    assert!(manifest.complete && manifest.failed_stage.is_none());
    assert!(manifest.verify(&out).is_empty());
    assert!(manifest.loss_traces.contains_key(&0));

    let csv = fs::read_to_string(out.join(SWEEP_FILE)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), GOLDEN_HEADER.trim_end());
    let rows = read_sweep_csv(&out.join(SWEEP_FILE)).unwrap();
    assert_eq!(rows.len(), cfg.sweep.targets.len());
    assert!(rows.iter().all(|r| r.subopt.is_finite() && r.angle.is_finite() && r.shift.is_finite()));
    let targets: Vec<f64> = rows.iter().map(|r| r.a).collect();
    assert_eq!(targets, cfg.sweep.targets);

    // identical config: no-op
    let before = fs::read(out.join(MANIFEST_FILE)).unwrap();
    let again = cmd_pipeline(&cfg, &out, PipelineOptions::default()).unwrap();
    assert!(matches!(again, PipelineOutcome::UpToDate(_)));
    assert_eq!(fs::read(out.join(MANIFEST_FILE)).unwrap(), before);

    // different config without --force
    let mut other = cfg.clone();
    other.sweep.samples = 256;
    let err = cmd_pipeline(&other, &out, PipelineOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_CONFIG);

    // --force recomputes the same bytes
    let samples = SeedPaths::new(&out, 0).samples(2.0);
    let metrics = SeedPaths::new(&out, 0).metrics(2.0);
    let (s0, m0) = (fs::read(&samples).unwrap(), fs::read(&metrics).unwrap());
    let forced = cmd_pipeline(&cfg, &out, PipelineOptions { dry_run: false, force: true }).unwrap();
    assert!(matches!(forced, PipelineOutcome::Completed(_)));
    assert_eq!(fs::read(&samples).unwrap(), s0);
    assert_eq!(fs::read(&metrics).unwrap(), m0);
    assert_eq!(fs::read_to_string(out.join(SWEEP_FILE)).unwrap(), csv);

    // figures: one seed gives zero-width bars
    let figs = cmd_figures(&out).unwrap();
    for curve in [&figs.avg_reward, &figs.distribution_shift, &figs.off_support] {
        assert_eq!(curve.points.len(), cfg.sweep.targets.len());
        for p in &curve.points {
            assert_eq!((p.std, p.runs), (0.0, 1));
            assert_eq!((p.lower(), p.upper()), (p.mean, p.mean));
        }
    }
    assert_eq!(figs.histograms.len(), cfg.sweep.targets.len());
    assert!(figs.histograms.iter().all(|h| h.counts.iter().sum::<usize>() == h.n && h.n == cfg.sweep.samples));
    for f in &figs.files {
        assert!(f.exists(), "{}", f.display());
    }
    let curve_csv = fs::read_to_string(out.join(FIGURES_DIR).join("curve_avg_reward.csv")).unwrap();
    assert_eq!(curve_csv.lines().next().unwrap(), "a,mean,std,lower,upper,runs");
    assert!(RunManifest::read(&out).unwrap().unwrap().verify(&out).is_empty());

    // artifacts check passes, then fails once the score model is corrupted
    assert!(check_artifacts(&out).unwrap().passed);
    let score = SeedPaths::new(&out, 0).score();
    let mut bytes = fs::read(&score).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&score, bytes).unwrap();
    let bad = check_artifacts(&out).unwrap();
    assert!(!bad.passed);
    assert!(bad.detail.contains("load error"), "{}", bad.detail);
    assert!(bad.detail.contains("hash mismatch") || bad.value >= 2.0, "{}", bad.detail);

    let run = rdiff(&["validate", "--check", "artifacts", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&run), EXIT_VALIDATION);
    assert!(String::from_utf8_lossy(&run.stdout).contains("load error"));

    // a changed manifest means the run is no longer up to date
    let rerun = cmd_pipeline(&cfg, &out, PipelineOptions::default()).unwrap();
    assert!(matches!(rerun, PipelineOutcome::Completed(_)));
    assert!(check_artifacts(&out).unwrap().passed);
}

fn with<'a>(cmd: &[&'a str], base: &[&'a str]) -> Vec<&'a str> {
    [cmd, base].concat()
}

#[test]
fn single_stage_commands_chain_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &RunConfig::smoke());
    let out = tmp.path().join("stages");
    let out = out.to_str().unwrap();
    let base = ["--config", config.as_str(), "--out", out, "--seed", "3"];

    let early = rdiff(&with(&["train-score"], &base));
    assert_eq!(code(&early), EXIT_COMPUTE);
    assert!(String::from_utf8_lossy(&early.stderr).contains("rdiff gen-data"));

    for cmd in [&["gen-data"][..], &["train-reward"], &["train-score"], &["sample", "--a", "4"]] {
        let run = rdiff(&with(cmd, &base));
        assert_eq!(code(&run), EXIT_OK, "{cmd:?}: {}", String::from_utf8_lossy(&run.stderr));
    }
    let paths = SeedPaths::new(Path::new(out), 3);
    assert!(paths.samples(4.0).exists() && paths.metrics(4.0).exists());
    let stdout = String::from_utf8_lossy(&rdiff(&with(&["sample", "--a", "4"], &base)).stdout).into_owned();
    assert!(stdout.contains("a=4 avg_reward="), "{stdout}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[world]\nambient_dimm = 8\n").unwrap();
    let run = rdiff(&["pipeline", "--config", bad.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&run), EXIT_CONFIG);
    assert!(String::from_utf8_lossy(&run.stderr).contains("ambient_dimm"));

    let run = rdiff(&["validate", "--check", "no-such-check"]);
    assert_eq!(code(&run), EXIT_CONFIG);

    let empty = tmp.path().join("empty");
    let run = rdiff(&["figures", "--out", empty.to_str().unwrap()]);
    assert_eq!(code(&run), EXIT_COMPUTE);
    assert!(String::from_utf8_lossy(&run.stderr).contains("rdiff pipeline"));

    let started = Instant::now();
    let run = rdiff(&["validate", "--check", "trace-identity"]);
    let elapsed = started.elapsed();
    assert_eq!(code(&run), EXIT_OK);
    assert!(elapsed.as_secs_f64() < 1.0, "trace-identity took {elapsed:?}");
    assert!(String::from_utf8_lossy(&run.stdout).contains("trace-identity  pass"));

    let config = write_config(tmp.path(), &RunConfig::smoke());
    let run = rdiff(&["pipeline", "--dry-run", "--config", &config, "--out", tmp.path().join("dry").to_str().unwrap()]);
    assert_eq!(code(&run), EXIT_OK);
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &RunConfig::smoke());
    let root = tmp.path().join("from-env");
    let run = Command::new(env!("CARGO_BIN_EXE_rdiff"))
        .args(["pipeline", "--dry-run", "--config", &config])
        .env(rdiff_cli::config::OUT_ENV, &root)
        .output()
        .unwrap();
    assert_eq!(code(&run), EXIT_OK);
    assert!(root.join(MANIFEST_FILE).exists());
}

#[test]
fn validate_runs_every_core_check() {
    let outcomes = cmd_validate(None, None, 0).unwrap();
    assert_eq!(outcomes.len(), rdiff_core::validation::CHECK_NAMES.len());
    for o in &outcomes {
        assert!(o.passed, "{}: {} ({})", o.name, o.value, o.detail);
    }
}
