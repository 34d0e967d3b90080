//! The `validate` command: oracle and property checks from the core crate,
//! plus an integrity check of the artifacts under an output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rdiff_core::io::{read_matrix, ridge_from_file, score_model_from_file, TensorFile};
use rdiff_core::validation::{run_check, CheckOutcome, CHECK_NAMES};

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

pub const ARTIFACT_CHECK: &str = "artifacts";

pub fn check_names() -> Vec<&'static str> {
    CHECK_NAMES.iter().copied().chain([ARTIFACT_CHECK]).collect()
}

fn collect_files(dir: &Path, found: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, found)?;
        } else if matches!(path.extension().and_then(|e| e.to_str()), Some("rdmd" | "rdds")) {
            found.push(path);
        }
    }
    Ok(())
}

fn load_problem(path: &Path) -> Option<String> {
    let result = match path.extension().and_then(|e| e.to_str()) {
        Some("rdds") => read_matrix(path).map(|_| ()),
        _ => TensorFile::read(path).and_then(|f| match f.header.variant.as_str() {
            "ridge" => ridge_from_file(&f).map(|_| ()),
            _ => score_model_from_file(&f).map(|_| ()),
        }),
    };
    result.err().map(|e| format!("{}: load error: {e}", path.display()))
}

/// Every model and matrix file under `out` loads, and the manifest (when
/// present) hash-matches. Statistic: number of problems, against 0.
pub fn check_artifacts(out: &Path) -> CliResult<CheckOutcome> {
    let started = Instant::now();
    if !out.is_dir() {
        return Err(CliError::MissingArtifact { path: out.to_path_buf(), stage: "pipeline" });
    }
    let mut problems = Vec::new();
    if let Some(m) = RunManifest::read(out)? {
        problems.extend(m.verify(out));
    }
    let mut files = Vec::new();
    collect_files(out, &mut files).map_err(CliError::io(out))?;
    files.sort();
    problems.extend(files.iter().filter_map(|f| load_problem(f)));
    Ok(CheckOutcome {
        name: ARTIFACT_CHECK.into(),
        passed: problems.is_empty(),
        value: problems.len() as f64,
        threshold: 0.0,
        detail: if problems.is_empty() {
            format!("{} files load", files.len())
        } else {
            problems.join("; ")
        },
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Runs one named check, or every check when `only` is `None`. The artifact
/// check runs by default only when `out` holds a manifest.
pub fn cmd_validate(out: Option<&Path>, only: Option<&str>, seed: u64) -> CliResult<Vec<CheckOutcome>> {
    let names: Vec<&str> = match only {
        Some(name) if check_names().contains(&name) => vec![name],
        Some(name) => {
            return Err(CliError::Config(format!("unknown check `{name}`; expected one of {}", check_names().join(", "))))
        }
        None => {
            let mut all = CHECK_NAMES.to_vec();
            if out.is_some_and(|o| RunManifest::path(o).exists()) {
                all.push(ARTIFACT_CHECK);
            }
            all
        }
    };
    names
        .into_iter()
        .map(|name| {
            if name == ARTIFACT_CHECK {
                let out = out.ok_or_else(|| CliError::Config("the artifacts check needs --out".into()))?;
                check_artifacts(out)
            } else {
                run_check(name, seed).map_err(CliError::stage("validate", Some(seed)))
            }
        })
        .collect()
}

pub fn render_table(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  {:<6}  {:>10}  {:>10}  {:>8}  detail\n", "check", "status", "value", "threshold", "seconds");
    for o in outcomes {
        s.push_str(&format!(
            "{:<width$}  {:<6}  {:>10.3e}  {:>10.3e}  {:>8.2}  {}\n",
            o.name,
            if o.passed { "pass" } else { "FAIL" },
            o.value,
            o.threshold,
            o.seconds,
            o.detail
        ));
    }
    s
}

/// `Ok` iff every outcome passed.
pub fn summarize(outcomes: &[CheckOutcome]) -> CliResult<()> {
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("failing checks: {}", failed.join(", "))))
    }
}
