//! Denoising score matching: per-batch loss and pathwise gradients, the
//! training loop, and Monte Carlo estimates of the explicit objective under
//! the Gaussian design.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::{EncoderDecoderScore, ScoreFunction};
use crate::error::{Error, Result};
use crate::oracle::GaussianDesignOracle;
use crate::ridge::PseudoLabeledDataset;
use crate::rng::{derive_seed, normal_vector, rng_from_seed, tag, SeededRng};
use crate::schedule::{alpha, h, DiffusionSchedule};

/// How training times are drawn from `[t0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TimeSampling {
    #[default]
    Uniform,
    LogUniform,
}

impl TimeSampling {
    fn draw(self, rng: &mut SeededRng, t0: f64, t_end: f64) -> f64 {
        if t_end <= t0 {
            return t0;
        }
        match self {
            TimeSampling::Uniform => rng.random_range(t0..t_end),
            TimeSampling::LogUniform => (rng.random_range(t0.ln()..t_end.ln())).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub time_sampling: TimeSampling,
    /// Rows in the fixed evaluation batch used for the loss trace.
    #[serde(default = "default_validation_size")]
    pub validation_size: usize,
    pub seed: u64,
}

fn default_validation_size() -> usize {
    1024
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 10,
            optimizer: AdamConfig::default(),
            time_sampling: TimeSampling::Uniform,
            validation_size: default_validation_size(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be >= 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Validation("learning rate must be > 0".into()));
        }
        if self.validation_size == 0 {
            return Err(Error::Validation("validation size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Clean rows with their labels and the noise draws that turn them into
/// training pairs.
#[derive(Debug, Clone)]
pub struct DenoisingBatch {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub t: Vec<f64>,
    pub eps: DMatrix<f64>,
}

/// Draws one time per row from `law` over `[t0, T]` and a standard normal
/// perturbation per row.
pub fn draw_denoising_batch(
    x: DMatrix<f64>,
    y: DVector<f64>,
    schedule: &DiffusionSchedule,
    law: TimeSampling,
    seed: u64,
) -> DenoisingBatch {
    let mut rng = rng_from_seed(seed);
    let n = x.nrows();
    let big_d = x.ncols();
    let mut t = Vec::with_capacity(n);
    let mut eps = DMatrix::zeros(n, big_d);
    for i in 0..n {
        t.push(law.draw(&mut rng, schedule.t0, schedule.t_end));
        let e = normal_vector(&mut rng, big_d);
        eps.set_row(i, &e.transpose());
    }
    DenoisingBatch { x, y, t, eps }
}

impl DenoisingBatch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// `(x', target)` for row `i`: `x' = alpha x + sqrt(h) eps` and
    /// `target = -(x' - alpha x) / h`.
    pub fn noised_row(&self, i: usize) -> (DVector<f64>, DVector<f64>) {
        let t = self.t[i];
        let (al, ht) = (alpha(t), h(t));
        let clean = self.x.row(i).transpose() * al;
        let x_noised = &clean + self.eps.row(i).transpose() * ht.sqrt();
        let target = -(&x_noised - clean) / ht;
        (x_noised, target)
    }
}

fn batch_loss(model: &EncoderDecoderScore, batch: &DenoisingBatch, mut grad: Option<&mut [f64]>) -> f64 {
    let n = batch.len();
    let w = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let (xn, target) = batch.noised_row(i);
        let g = grad.as_deref_mut();
        total += model.row_loss_grad(&xn, &target, batch.y[i], batch.t[i], w, g);
    }
    total * w
}

/// Mean denoising loss of `model` on a fixed batch.
pub fn denoising_loss(model: &EncoderDecoderScore, batch: &DenoisingBatch) -> f64 {
    batch_loss(model, batch, None)
}

/// Mean denoising loss and its exact gradient for the fixed noise in `batch`.
pub fn denoising_loss_and_grad(model: &EncoderDecoderScore, batch: &DenoisingBatch) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    if batch.x.ncols() != model.ambient_dim() {
        return Err(Error::Dimension("batch and model disagree on D".into()));
    }
    let mut grad = vec![0.0; model.num_params()];
    let loss = batch_loss(model, batch, Some(&mut grad));
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_validation_loss: f64,
    pub final_validation_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
}

fn rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

fn param_summary(model: &EncoderDecoderScore) -> String {
    let p = model.params();
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let finite = p.iter().all(|v| v.is_finite());
    format!("parameter norm {norm:e}, all finite: {finite}, variant {}", model.head.variant())
}

/// Minimizes the denoising objective over `data` with mini-batch Adam.
pub fn train(
    mut model: EncoderDecoderScore,
    data: &PseudoLabeledDataset,
    config: &TrainConfig,
    schedule: &DiffusionSchedule,
) -> Result<(EncoderDecoderScore, TrainReport)> {
    config.validate()?;
    schedule.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Validation("curated dataset is empty".into()));
    }
    if data.x.ncols() != model.ambient_dim() {
        return Err(Error::Dimension("curated data and model disagree on D".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let val_idx = {
        let mut rng = rng_from_seed(derive_seed(config.seed, tag("validation-rows")));
        let mut all = order.clone();
        all.shuffle(&mut rng);
        all.truncate(config.validation_size.min(n));
        all
    };
    let y_val = DVector::from_iterator(val_idx.len(), val_idx.iter().map(|&i| data.y_hat[i]));
    let val_batch = draw_denoising_batch(
        rows(&data.x, &val_idx),
        y_val,
        schedule,
        config.time_sampling,
        derive_seed(config.seed, tag("validation-noise")),
    );
    let initial_validation_loss = denoising_loss(&model, &val_batch);

    let mut params = model.params();
    let mut grad = vec![0.0; params.len()];
    let mut opt = Adam::new(config.optimizer, params.len());
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut steps = 0;

    for epoch in 0..config.epochs {
        let epoch_seed = derive_seed(config.seed, epoch as u64);
        order.shuffle(&mut rng_from_seed(derive_seed(epoch_seed, tag("shuffle"))));
        let mut sum = 0.0;
        let mut count = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let y = DVector::from_iterator(chunk.len(), chunk.iter().map(|&i| data.y_hat[i]));
            let batch = draw_denoising_batch(
                rows(&data.x, chunk),
                y,
                schedule,
                config.time_sampling,
                derive_seed(epoch_seed, step as u64),
            );
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = batch_loss(&model, &batch, Some(&mut grad));
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch, step, detail: param_summary(&model) });
            }
            opt.step(&mut params, &grad);
            model.set_params(&params);
            sum += loss;
            count += 1;
            steps += 1;
        }
        let validation_loss = denoising_loss(&model, &val_batch);
        if !validation_loss.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                step: count,
                detail: format!("validation loss {validation_loss}; {}", param_summary(&model)),
            });
        }
        epochs.push(EpochRecord { epoch, train_loss: sum / count as f64, validation_loss });
    }
    let final_validation_loss = epochs.last().map_or(initial_validation_loss, |e| e.validation_loss);
    Ok((model, TrainReport { initial_validation_loss, final_validation_loss, epochs, steps }))
}

/// Mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self { mean, stderr: (var / n as f64).sqrt(), n }
    }
}

/// One draw `(x, y, t, x')` from the curated joint law and the forward kernel.
#[derive(Debug, Clone)]
pub struct ObjectiveSample {
    pub x: DVector<f64>,
    pub y: f64,
    pub t: f64,
    pub x_noised: DVector<f64>,
}

/// Draws `z ~ N(0, Sigma)`, `y = beta_hatᵀz + N(0, nu²)`, `x = A z`,
/// `t ~ U[t0, T]` and `x' ~ N(alpha x, h I)`.
pub fn draw_objective_samples(
    oracle: &GaussianDesignOracle,
    n: usize,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Vec<ObjectiveSample> {
    let chol = oracle.sigma.clone().cholesky().expect("oracle sigma is SPD");
    let l = chol.l();
    let mut rng = rng_from_seed(seed);
    let (big_d, d) = (oracle.ambient_dim(), oracle.latent_dim());
    (0..n)
        .map(|_| {
            let z = &l * normal_vector(&mut rng, d);
            let y = oracle.beta_hat.dot(&z) + oracle.nu * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let x = &oracle.a * z;
            let t = TimeSampling::Uniform.draw(&mut rng, schedule.t0, schedule.t_end);
            let x_noised = &x * alpha(t) + normal_vector(&mut rng, big_d) * h(t).sqrt();
            ObjectiveSample { x, y, t, x_noised }
        })
        .collect()
}

/// Per-sample `||grad log p_t(x' | y) - s(x', y, t)||²`.
pub fn exact_losses<S: ScoreFunction + ?Sized>(
    model: &S,
    oracle: &GaussianDesignOracle,
    samples: &[ObjectiveSample],
) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let truth = oracle.analytic_score(&s.x_noised, s.y, s.t)?;
            Ok((truth - model.score(&s.x_noised, s.y, s.t)?).norm_squared())
        })
        .collect()
}

/// Per-sample `||-(x' - alpha x)/h - s(x', y, t)||²`.
pub fn denoising_losses<S: ScoreFunction + ?Sized>(model: &S, samples: &[ObjectiveSample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let target = -(&s.x_noised - &s.x * alpha(s.t)) / h(s.t);
            Ok((target - model.score(&s.x_noised, s.y, s.t)?).norm_squared())
        })
        .collect()
}

/// Monte Carlo estimate of the explicit score-matching objective, with the
/// analytic score as ground truth.
pub fn exact_objective<S: ScoreFunction + ?Sized>(
    model: &S,
    oracle: &GaussianDesignOracle,
    n_mc: usize,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<McEstimate> {
    if n_mc == 0 {
        return Err(Error::Validation("n_mc must be >= 1".into()));
    }
    let samples = draw_objective_samples(oracle, n_mc, schedule, seed);
    Ok(McEstimate::from_values(&exact_losses(model, oracle, &samples)?))
}
