//! The steps of one run, shared by `pipeline` and the single-stage commands.
//! Each stage reads its inputs from the seed directory, writes its outputs
//! atomically and records them in a [`RunLog`].

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rdiff_core::io::{self, TensorFile};
use rdiff_core::metrics::{self, LabeledSamples};
use rdiff_core::ridge::{fit_ridge, pseudo_label};
use rdiff_core::rng::{derive_seed, tag};
use rdiff_core::sampler::run_backward;
use rdiff_core::score::{train, TrainReport, ZeroScore};
use rdiff_core::world::{generate_datasets, make_world};
use rdiff_core::{
    EncoderDecoderScore, GaussianDesignOracle, LabeledDataset, MetricsReport, PseudoLabeledDataset, RidgeEstimate,
    SubspaceWorld, UnlabeledDataset,
};

use crate::config::{RunConfig, Variant};
use crate::error::{CliError, CliResult};
use crate::manifest::RunLog;

/// File locations for one seed.
#[derive(Debug, Clone)]
pub struct SeedPaths {
    pub out: PathBuf,
    pub dir: PathBuf,
}

impl SeedPaths {
    pub fn new(out: &Path, seed: u64) -> Self {
        Self { out: out.to_path_buf(), dir: out.join(format!("seed-{seed}")) }
    }
    pub fn world(&self) -> PathBuf {
        self.dir.join("world.json")
    }
    pub fn unlabeled(&self) -> PathBuf {
        self.dir.join("unlabeled.rdds")
    }
    pub fn labeled_x(&self) -> PathBuf {
        self.dir.join("labeled_x.rdds")
    }
    pub fn labeled_y(&self) -> PathBuf {
        self.dir.join("labeled_y.rdds")
    }
    pub fn ridge(&self) -> PathBuf {
        self.dir.join("ridge.rdmd")
    }
    pub fn pseudo_labels(&self) -> PathBuf {
        self.dir.join("pseudo_y.rdds")
    }
    pub fn score(&self) -> PathBuf {
        self.dir.join("score.rdmd")
    }
    pub fn train_report(&self) -> PathBuf {
        self.dir.join("train_report.json")
    }
    pub fn cell(&self, a: f64) -> PathBuf {
        self.dir.join(format!("a{a}"))
    }
    pub fn samples(&self, a: f64) -> PathBuf {
        self.cell(a).join("samples.rdds")
    }
    pub fn metrics(&self, a: f64) -> PathBuf {
        self.cell(a).join("metrics.json")
    }
}

/// Independent sub-seeds of one run seed.
fn stream(seed: u64, name: &str) -> u64 {
    derive_seed(seed, tag(name))
}

fn core_err(stage: &'static str, seed: u64) -> impl FnOnce(rdiff_core::Error) -> CliError {
    CliError::stage(stage, Some(seed))
}

fn require(path: &Path, stage: &'static str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact { path: path.to_path_buf(), stage })
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> rdiff_core::Result<()> {
    io::atomic_write(path, &serde_json::to_vec_pretty(value)?)
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(CliError::io(path))
}

pub struct DataArtifacts {
    pub world: SubspaceWorld,
    pub unlabeled: UnlabeledDataset,
    pub labeled: LabeledDataset,
}

/// Ground truth and both datasets.
pub fn gen_data(cfg: &RunConfig, seed: u64, paths: &SeedPaths, log: &mut RunLog) -> CliResult<DataArtifacts> {
    const STAGE: &str = "gen-data";
    let started = Instant::now();
    create_dir(&paths.dir)?;
    let world = make_world(&cfg.world, stream(seed, "world")).map_err(core_err(STAGE, seed))?;
    let (unlabeled, labeled) = generate_datasets(
        &world,
        cfg.data.n_unlabeled,
        cfg.data.n_labeled,
        cfg.data.label_noise,
        stream(seed, "data"),
    )
    .map_err(core_err(STAGE, seed))?;
    let write = || -> rdiff_core::Result<()> {
        write_json(&paths.world(), &world)?;
        io::write_matrix(&paths.unlabeled(), &unlabeled.x)?;
        io::write_matrix(&paths.labeled_x(), &labeled.x)?;
        io::write_vector(&paths.labeled_y(), &labeled.y)
    };
    write().map_err(core_err(STAGE, seed))?;
    for p in [paths.world(), paths.unlabeled(), paths.labeled_x(), paths.labeled_y()] {
        log.record(&paths.out, &p)?;
    }
    log.time(STAGE, Some(seed), started.elapsed().as_secs_f64());
    Ok(DataArtifacts { world, unlabeled, labeled })
}

pub fn load_data(cfg: &RunConfig, seed: u64, paths: &SeedPaths) -> CliResult<DataArtifacts> {
    const STAGE: &str = "gen-data";
    for p in [paths.world(), paths.unlabeled(), paths.labeled_x(), paths.labeled_y()] {
        require(&p, STAGE)?;
    }
    let load = || -> rdiff_core::Result<DataArtifacts> {
        let w: SubspaceWorld = serde_json::from_slice(&std::fs::read(paths.world())?)?;
        let world = SubspaceWorld::new(w.a, w.sigma, w.beta_star, w.offsupport_coeff, w.offsupport_sign)?;
        let unlabeled = UnlabeledDataset { x: io::read_matrix(&paths.unlabeled())? };
        let labeled = LabeledDataset {
            x: io::read_matrix(&paths.labeled_x())?,
            y: io::read_vector(&paths.labeled_y())?,
            noise_sigma: cfg.data.label_noise,
        };
        Ok(DataArtifacts { world, unlabeled, labeled })
    };
    load().map_err(core_err(STAGE, seed))
}

/// Ridge fit on the labeled set.
pub fn train_reward(
    cfg: &RunConfig,
    seed: u64,
    labeled: &LabeledDataset,
    paths: &SeedPaths,
    log: &mut RunLog,
) -> CliResult<RidgeEstimate> {
    const STAGE: &str = "train-reward";
    let started = Instant::now();
    let est = fit_ridge(labeled, cfg.data.lambda).map_err(core_err(STAGE, seed))?;
    io::ridge_to_file(&est).write(&paths.ridge()).map_err(core_err(STAGE, seed))?;
    log.record(&paths.out, &paths.ridge())?;
    log.time(STAGE, Some(seed), started.elapsed().as_secs_f64());
    Ok(est)
}

pub fn load_ridge(seed: u64, paths: &SeedPaths) -> CliResult<RidgeEstimate> {
    require(&paths.ridge(), "train-reward")?;
    TensorFile::read(&paths.ridge())
        .and_then(|f| io::ridge_from_file(&f))
        .map_err(core_err("train-reward", seed))
}

pub fn initial_model(cfg: &RunConfig, seed: u64) -> rdiff_core::Result<EncoderDecoderScore> {
    let (big_d, d) = (cfg.world.ambient_dim, cfg.world.latent_dim);
    let init = stream(seed, "model-init");
    match cfg.model.variant {
        Variant::Covering => EncoderDecoderScore::covering(big_d, d, cfg.nu(), init),
        Variant::Mlp => EncoderDecoderScore::mlp(big_d, d, &cfg.model.hidden, init),
    }
}

/// Pseudo-labeling followed by score training.
pub fn train_score(
    cfg: &RunConfig,
    seed: u64,
    unlabeled: &UnlabeledDataset,
    est: &RidgeEstimate,
    paths: &SeedPaths,
    log: &mut RunLog,
) -> CliResult<(EncoderDecoderScore, TrainReport, PseudoLabeledDataset)> {
    let started = Instant::now();
    let curated = pseudo_label(unlabeled, est, cfg.nu(), stream(seed, "pseudo-label"))
        .map_err(core_err("pseudo-label", seed))?;
    io::write_vector(&paths.pseudo_labels(), &curated.y_hat).map_err(core_err("pseudo-label", seed))?;
    log.record(&paths.out, &paths.pseudo_labels())?;
    log.time("pseudo-label", Some(seed), started.elapsed().as_secs_f64());

    const STAGE: &str = "train-score";
    let started = Instant::now();
    let model = initial_model(cfg, seed).map_err(core_err(STAGE, seed))?;
    let train_cfg = cfg.train.to_train_config(stream(seed, "train"));
    let (model, report) = train(model, &curated, &train_cfg, &cfg.schedule).map_err(core_err(STAGE, seed))?;
    io::score_model_to_file(&model, Some(cfg.schedule))
        .write(&paths.score())
        .map_err(core_err(STAGE, seed))?;
    write_json(&paths.train_report(), &report).map_err(core_err(STAGE, seed))?;
    log.record(&paths.out, &paths.score())?;
    log.record(&paths.out, &paths.train_report())?;
    log.time(STAGE, Some(seed), started.elapsed().as_secs_f64());
    Ok((model, report, curated))
}

pub fn load_score(cfg: &RunConfig, seed: u64, paths: &SeedPaths) -> CliResult<(EncoderDecoderScore, PseudoLabeledDataset)> {
    const STAGE: &str = "train-score";
    for p in [paths.score(), paths.pseudo_labels()] {
        require(&p, STAGE)?;
    }
    let model = TensorFile::read(&paths.score())
        .and_then(|f| io::score_model_from_file(&f))
        .map_err(core_err(STAGE, seed))?;
    let y_hat = io::read_vector(&paths.pseudo_labels()).map_err(core_err(STAGE, seed))?;
    let x = io::read_matrix(&paths.unlabeled()).map_err(core_err("gen-data", seed))?;
    Ok((model, PseudoLabeledDataset { x, y_hat, nu: cfg.nu() }))
}

pub fn load_train_report(seed: u64, paths: &SeedPaths) -> CliResult<TrainReport> {
    require(&paths.train_report(), "train-score")?;
    let bytes = std::fs::read(paths.train_report()).map_err(CliError::io(paths.train_report()))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::stage("train-score", Some(seed))(e.into()))
}

/// Everything a sampling cell needs besides the label value.
pub struct CellInputs<'a> {
    pub world: &'a SubspaceWorld,
    pub est: &'a RidgeEstimate,
    pub model: &'a EncoderDecoderScore,
    pub curated: &'a PseudoLabeledDataset,
}

/// Generates the batch for label value `a`, writes it with its metrics.
pub fn sample_cell(
    cfg: &RunConfig,
    seed: u64,
    a: f64,
    inputs: &CellInputs<'_>,
    paths: &SeedPaths,
    log: &mut RunLog,
) -> CliResult<MetricsReport> {
    const STAGE: &str = "sample";
    let started = Instant::now();
    let err = core_err(STAGE, seed);
    // Every cell of a seed shares the sampler noise, so differences across
    // `a` come from the conditioning alone.
    let batch = run_backward(inputs.model, a, cfg.sweep.samples, &cfg.schedule, stream(seed, "sampler")).map_err(err)?;
    let report = evaluate(cfg, seed, a, &batch.x, inputs).map_err(core_err("metrics", seed))?;
    report.check().map_err(core_err("metrics", seed))?;

    create_dir(&paths.cell(a))?;
    io::write_matrix(&paths.samples(a), &batch.x).map_err(core_err(STAGE, seed))?;
    write_json(&paths.metrics(a), &report).map_err(core_err("metrics", seed))?;
    log.record(&paths.out, &paths.samples(a))?;
    log.record(&paths.out, &paths.metrics(a))?;
    log.time(&format!("sample a={a}"), Some(seed), started.elapsed().as_secs_f64());
    Ok(report)
}

fn head_rows(x: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    x.rows(0, n.min(x.nrows())).into_owned()
}

/// Metrics of one generated batch.
pub fn evaluate(
    cfg: &RunConfig,
    seed: u64,
    a: f64,
    x: &DMatrix<f64>,
    inputs: &CellInputs<'_>,
) -> rdiff_core::Result<MetricsReport> {
    let CellInputs { world, est, model, curated } = *inputs;
    let nu = cfg.nu();
    let oracle = GaussianDesignOracle::from_world(world, est.beta_hat(world), nu)?;
    let v = model.extract_subspace()?;
    let (subopt, avg_reward) = metrics::suboptimality(x, world, a);
    let dec = metrics::subopt_decomposition(x, world, est, &oracle, a, cfg.sweep.reference_samples, stream(seed, "reference"))?;

    let rows = cfg.sweep.shift_rows;
    let generated = LabeledSamples { x: head_rows(x, rows), y: nalgebra::DVector::from_element(rows.min(x.nrows()), a) };
    let training = LabeledSamples {
        x: head_rows(&curated.x, rows),
        y: curated.y_hat.rows(0, rows.min(curated.len())).into_owned(),
    };
    let zero = ZeroScore { dim: world.ambient_dim() };
    let (draws, shift_seed) = (cfg.sweep.shift_draws, stream(seed, "shift"));
    let losses = [
        metrics::denoising_loss_evaluator("fitted", model, &cfg.schedule, draws, shift_seed),
        metrics::denoising_loss_evaluator("zero", &zero, &cfg.schedule, draws, shift_seed),
        metrics::denoising_loss_evaluator("oracle", &oracle, &cfg.schedule, draws, shift_seed),
    ];
    let shift = metrics::distribution_shift_mc(&generated, &training, &losses)?;

    let t0 = cfg.schedule.t0;
    let (mean, cov) = oracle.noised_conditional_law(a, t0)?;
    let (moment_mean_gap, moment_cov_gap) = metrics::moment_discrepancy(x, &mean, &cov);
    let u = metrics::procrustes_align(&v, &world.a)?;
    let (lmean, lcov) = metrics::latent_law_at(&oracle, a, t0);
    let (latent_mean_gap, latent_cov_gap) =
        metrics::moment_discrepancy(&metrics::latent_pushforward(x, &v, &u), &lmean, &lcov);

    Ok(MetricsReport {
        a,
        seed,
        n: x.nrows(),
        subspace_angle: metrics::subspace_angle(&v, &world.a)?,
        off_support_mean: metrics::off_support_deviation(x, world),
        avg_reward,
        subopt,
        e1: dec.e1,
        e2: dec.e2,
        e3: dec.e3,
        distro_shift: shift.value,
        distro_shift_argmax: shift.argmax,
        distro_shift_surrogate: oracle.distro_shift_surrogate(a).1,
        moment_mean_gap,
        moment_cov_gap,
        latent_mean_gap,
        latent_cov_gap,
        histogram: metrics::reward_histogram(x, world, cfg.sweep.histogram_bins, None)?,
    })
}

pub fn load_metrics(path: &Path) -> CliResult<MetricsReport> {
    require(path, "pipeline")?;
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}
