//! Conditional score functions and the trainable encoder-decoder class
//!
//! ```text
//! s(x, y, t) = (V psi(Vᵀx, y, t) - x) / h(t)
//! ```
//!
//! with a `D x d` matrix `V` and one of two inner maps `psi`.

mod adam;
mod covering;
mod mlp;
mod train;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{normal_matrix, rng_from_seed};
use crate::schedule::h;

pub use adam::{Adam, AdamConfig};
pub use covering::CoveringHead;
pub use mlp::MlpHead;
pub use train::{
    denoising_loss, denoising_loss_and_grad, draw_denoising_batch, draw_objective_samples, exact_losses,
    exact_objective, denoising_losses, train, DenoisingBatch, EpochRecord, McEstimate, ObjectiveSample,
    TimeSampling, TrainConfig, TrainReport,
};

/// Any map `(x, y, t) -> R^D` approximating `grad_x log p_t(x | y)`.
pub trait ScoreFunction: Sync {
    fn dim(&self) -> usize;

    fn score(&self, x: &DVector<f64>, y: f64, t: f64) -> Result<DVector<f64>>;

    /// Scores of every row of `x` at a shared label and time.
    fn score_batch(&self, x: &DMatrix<f64>, y: f64, t: f64) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for i in 0..x.nrows() {
            let s = self.score(&x.row(i).transpose(), y, t)?;
            out.set_row(i, &s.transpose());
        }
        Ok(out)
    }

    /// Short identity string recorded with generated samples.
    fn identity(&self) -> String;
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("score is undefined at t = {t}; need t > 0")));
    }
    Ok(())
}

/// The zero map.
#[derive(Debug, Clone, Copy)]
pub struct ZeroScore {
    pub dim: usize,
}

impl ScoreFunction for ZeroScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, _x: &DVector<f64>, _y: f64, _t: f64) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.dim))
    }

    fn identity(&self) -> String {
        "zero".into()
    }
}

/// `-x / h(t)`: the encoder-decoder class with `psi = 0`.
#[derive(Debug, Clone, Copy)]
pub struct ShortcutScore {
    pub dim: usize,
}

impl ScoreFunction for ShortcutScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &DVector<f64>, _y: f64, t: f64) -> Result<DVector<f64>> {
        check_time(t)?;
        Ok(-x / h(t))
    }

    fn identity(&self) -> String {
        "shortcut".into()
    }
}

/// Inner map of the encoder-decoder class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Head {
    /// Gaussian-covering family: a learnable `Sigma⁻¹` candidate and label
    /// direction plugged into the closed-form posterior map.
    Covering(CoveringHead),
    /// Fully connected ReLU network on `(u, y, t, alpha(t), h(t))`.
    Mlp(MlpHead),
}

/// Cached intermediate values of one forward pass of a head.
pub(crate) enum HeadCache {
    Covering(covering::Cache),
    Mlp(mlp::Cache),
}

impl Head {
    pub fn variant(&self) -> &'static str {
        match self {
            Head::Covering(_) => "covering",
            Head::Mlp(_) => "mlp",
        }
    }

    fn num_params(&self) -> usize {
        match self {
            Head::Covering(c) => c.num_params(),
            Head::Mlp(m) => m.num_params(),
        }
    }

    fn write_params(&self, out: &mut [f64]) {
        match self {
            Head::Covering(c) => c.write_params(out),
            Head::Mlp(m) => m.write_params(out),
        }
    }

    fn read_params(&mut self, p: &[f64]) {
        match self {
            Head::Covering(c) => c.read_params(p),
            Head::Mlp(m) => m.read_params(p),
        }
    }

    pub(crate) fn forward(&self, u: &DVector<f64>, y: f64, t: f64) -> (DVector<f64>, HeadCache) {
        match self {
            Head::Covering(c) => {
                let (psi, cache) = c.forward(u, y, t);
                (psi, HeadCache::Covering(cache))
            }
            Head::Mlp(m) => {
                let (psi, cache) = m.forward(u, y, t);
                (psi, HeadCache::Mlp(cache))
            }
        }
    }

    /// Accumulates parameter gradients into `grad` and returns `d loss / d u`.
    pub(crate) fn backward(&self, cache: &HeadCache, g_psi: &DVector<f64>, grad: &mut [f64]) -> DVector<f64> {
        match (self, cache) {
            (Head::Covering(c), HeadCache::Covering(k)) => c.backward(k, g_psi, grad),
            (Head::Mlp(m), HeadCache::Mlp(k)) => m.backward(k, g_psi, grad),
            _ => unreachable!("head/cache variant mismatch"),
        }
    }

    fn forward_batch(&self, u: &DMatrix<f64>, y: f64, t: f64) -> DMatrix<f64> {
        match self {
            Head::Covering(c) => c.forward_batch(u, y, t),
            Head::Mlp(m) => m.forward_batch(u, y, t),
        }
    }
}

/// Trainable member of the encoder-decoder score class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderDecoderScore {
    /// `D x d`; unconstrained during training.
    pub v: DMatrix<f64>,
    pub head: Head,
}

impl EncoderDecoderScore {
    /// Covering-parametric model with random orthonormal `V`, `Sigma⁻¹ = I`
    /// and zero label direction. `nu` is the pseudo-label noise of the
    /// training data.
    pub fn covering(ambient: usize, latent: usize, nu: f64, seed: u64) -> Result<Self> {
        let v = crate::world::sample_orthonormal(ambient, latent, seed)?;
        Ok(Self { v, head: Head::Covering(CoveringHead::new(latent, nu)?) })
    }

    /// MLP model with random orthonormal `V` and He-initialized layers.
    pub fn mlp(ambient: usize, latent: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let v = crate::world::sample_orthonormal(ambient, latent, crate::rng::derive_seed(seed, 0))?;
        let head = MlpHead::new(latent, hidden, crate::rng::derive_seed(seed, 1))?;
        Ok(Self { v, head: Head::Mlp(head) })
    }

    pub fn ambient_dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.v.len() + self.head.num_params()
    }

    /// Flattened parameters: `V` column-major, then the head.
    pub fn params(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_params()];
        let nv = self.v.len();
        out[..nv].copy_from_slice(self.v.as_slice());
        self.head.write_params(&mut out[nv..]);
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params(), "parameter vector length");
        let nv = self.v.len();
        self.v.as_mut_slice().copy_from_slice(&p[..nv]);
        self.head.read_params(&p[nv..]);
    }

    /// Orthonormal basis of `col(V)`.
    pub fn extract_subspace(&self) -> Result<DMatrix<f64>> {
        linalg::orthonormalize(&self.v).map_err(|e| match e {
            Error::Rank(m) => Error::Rank(format!("cannot extract subspace: {m}")),
            other => other,
        })
    }

    /// Content hash of the parameters and variant, used as the score
    /// identity of generated samples.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.head.variant().as_bytes());
        hasher.update((self.ambient_dim() as u64).to_le_bytes());
        hasher.update((self.latent_dim() as u64).to_le_bytes());
        for p in self.params() {
            hasher.update(p.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Loss `||target - s(x', y, t)||²` of a single noised row, with gradient
    /// accumulated (scaled by `weight`) into `grad`.
    pub(crate) fn row_loss_grad(
        &self,
        x_noised: &DVector<f64>,
        target: &DVector<f64>,
        y: f64,
        t: f64,
        weight: f64,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let ht = h(t);
        let u = self.v.transpose() * x_noised;
        let (psi, cache) = self.head.forward(&u, y, t);
        let s = (&self.v * &psi - x_noised) / ht;
        let r = target - s;
        let loss = r.norm_squared();
        if let Some(grad) = grad {
            // d loss / d (V psi) = -2 r / h
            let g_vpsi = &r * (-2.0 * weight / ht);
            let g_psi = self.v.transpose() * &g_vpsi;
            let nv = self.v.len();
            let (gv, gh) = grad.split_at_mut(nv);
            let g_u = self.head.backward(&cache, &g_psi, gh);
            let (big_d, d) = self.v.shape();
            for j in 0..d {
                let (pj, uj) = (psi[j], g_u[j]);
                let col = &mut gv[j * big_d..(j + 1) * big_d];
                for i in 0..big_d {
                    col[i] += g_vpsi[i] * pj + x_noised[i] * uj;
                }
            }
        }
        loss
    }
}

impl ScoreFunction for EncoderDecoderScore {
    fn dim(&self) -> usize {
        self.ambient_dim()
    }

    fn score(&self, x: &DVector<f64>, y: f64, t: f64) -> Result<DVector<f64>> {
        check_time(t)?;
        let u = self.v.transpose() * x;
        let (psi, _) = self.head.forward(&u, y, t);
        Ok((&self.v * psi - x) / h(t))
    }

    fn score_batch(&self, x: &DMatrix<f64>, y: f64, t: f64) -> Result<DMatrix<f64>> {
        check_time(t)?;
        let u = x * &self.v;
        let psi = self.head.forward_batch(&u, y, t);
        Ok((psi * self.v.transpose() - x) / h(t))
    }

    fn identity(&self) -> String {
        format!("{}:{}", self.head.variant(), &self.hash()[..16])
    }
}

/// Random unit direction in parameter space, for derivative checks.
pub fn random_direction(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let v = normal_matrix(&mut rng, n, 1);
    let norm = v.norm();
    v.iter().map(|x| x / norm).collect()
}
