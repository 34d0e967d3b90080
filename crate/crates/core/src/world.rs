//! Synthetic ground truth: a random `d`-dimensional subspace of `R^D`, a
//! Gaussian latent law on it, and a reward that is linear on the subspace and
//! quadratic in the distance to it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, orthonormalize};
use crate::rng::{derive_seed, normal_matrix, normal_vector, rng_from_seed, tag};

/// Whether the off-support term of the reward is subtracted or added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OffSupportSign {
    #[default]
    Penalty,
    Bonus,
}

impl OffSupportSign {
    pub fn factor(self) -> f64 {
        match self {
            OffSupportSign::Penalty => -1.0,
            OffSupportSign::Bonus => 1.0,
        }
    }
}

/// Latent covariance specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SigmaSpec {
    #[default]
    Identity,
    Diagonal { values: Vec<f64> },
    Full { rows: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub ambient_dim: usize,
    pub latent_dim: usize,
    pub sigma: SigmaSpec,
    pub offsupport_coeff: f64,
    pub offsupport_sign: OffSupportSign,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            ambient_dim: 64,
            latent_dim: 16,
            sigma: SigmaSpec::Identity,
            offsupport_coeff: 5.0,
            offsupport_sign: OffSupportSign::Penalty,
        }
    }
}

impl WorldConfig {
    fn sigma_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.latent_dim;
        let m = match &self.sigma {
            SigmaSpec::Identity => DMatrix::identity(d, d),
            SigmaSpec::Diagonal { values } => {
                if values.len() != d {
                    return Err(Error::Dimension(format!(
                        "diagonal sigma has {} entries, latent dimension is {d}",
                        values.len()
                    )));
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(values))
            }
            SigmaSpec::Full { rows } => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Dimension(format!("full sigma must be {d}x{d}")));
                }
                DMatrix::from_fn(d, d, |i, j| rows[i][j])
            }
        };
        Ok(m)
    }
}

/// Ground truth of one synthetic experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubspaceWorld {
    /// `D x d`, orthonormal columns.
    pub a: DMatrix<f64>,
    /// Latent covariance, eigenvalues in `(0, 1]`.
    pub sigma: DMatrix<f64>,
    pub beta_star: DVector<f64>,
    /// `A beta_star`.
    pub theta_star: DVector<f64>,
    pub offsupport_coeff: f64,
    pub offsupport_sign: OffSupportSign,
}

/// Haar-distributed `D x d` matrix with orthonormal columns.
pub fn sample_orthonormal(ambient: usize, latent: usize, seed: u64) -> Result<DMatrix<f64>> {
    if latent == 0 || latent > ambient {
        return Err(Error::Dimension(format!(
            "need 1 <= d <= D, got d={latent}, D={ambient}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let g = normal_matrix(&mut rng, ambient, latent);
    orthonormalize(&g)
}

/// Uniform draw from the unit sphere in `R^d`.
pub fn sample_unit_sphere(dim: usize, seed: u64) -> DVector<f64> {
    let mut rng = rng_from_seed(seed);
    loop {
        let v = normal_vector(&mut rng, dim);
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

pub fn make_world(config: &WorldConfig, seed: u64) -> Result<SubspaceWorld> {
    let sigma = config.sigma_matrix()?;
    validate_sigma(&sigma)?;
    if !(config.offsupport_coeff >= 0.0) {
        return Err(Error::Validation("off-support coefficient must be nonnegative".into()));
    }
    let a = sample_orthonormal(config.ambient_dim, config.latent_dim, derive_seed(seed, tag("A")))?;
    let beta_star = sample_unit_sphere(config.latent_dim, derive_seed(seed, tag("beta")));
    SubspaceWorld::new(a, sigma, beta_star, config.offsupport_coeff, config.offsupport_sign)
}

fn validate_sigma(sigma: &DMatrix<f64>) -> Result<()> {
    linalg::check_psd(sigma, "latent covariance")?;
    let eig = SymmetricEigen::new(linalg::symmetrize(sigma));
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if lo <= 0.0 {
        return Err(Error::Validation(format!("latent covariance is singular (min eigenvalue {lo:e})")));
    }
    if hi > 1.0 + 1e-12 {
        return Err(Error::Validation(format!("latent covariance eigenvalues must be <= 1, got {hi}")));
    }
    Ok(())
}

impl SubspaceWorld {
    pub fn new(
        a: DMatrix<f64>,
        sigma: DMatrix<f64>,
        beta_star: DVector<f64>,
        offsupport_coeff: f64,
        offsupport_sign: OffSupportSign,
    ) -> Result<Self> {
        let (big_d, d) = a.shape();
        if d == 0 || d > big_d {
            return Err(Error::Dimension(format!("A must be DxD' with 1 <= d <= D, got {big_d}x{d}")));
        }
        if sigma.shape() != (d, d) || beta_star.len() != d {
            return Err(Error::Dimension("sigma / beta_star do not match the latent dimension".into()));
        }
        if linalg::orthonormality_error(&a) > 1e-10 {
            return Err(Error::Validation("A must have orthonormal columns".into()));
        }
        if (beta_star.norm() - 1.0).abs() > 1e-10 {
            return Err(Error::Validation("beta_star must have unit norm".into()));
        }
        validate_sigma(&sigma)?;
        let theta_star = &a * &beta_star;
        Ok(Self { a, sigma, beta_star, theta_star, offsupport_coeff, offsupport_sign })
    }

    pub fn ambient_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.a.ncols()
    }

    /// `(x_parallel, x_perp)` with `x_parallel = A Aᵀ x`.
    pub fn decompose(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let par = &self.a * (self.a.transpose() * x);
        let perp = x - &par;
        (par, perp)
    }

    /// On-support part of the reward, `theta*ᵀ x_parallel`.
    pub fn on_support_reward(&self, x: &DVector<f64>) -> f64 {
        self.beta_star.dot(&(self.a.transpose() * x))
    }

    /// Signed off-support term `±c ||x_perp||²`.
    pub fn off_support_reward(&self, x: &DVector<f64>) -> f64 {
        let (_, perp) = self.decompose(x);
        self.offsupport_sign.factor() * self.offsupport_coeff * perp.norm_squared()
    }

    pub fn true_reward(&self, x: &DVector<f64>) -> f64 {
        let (par, perp) = self.decompose(x);
        self.theta_star.dot(&par) + self.offsupport_sign.factor() * self.offsupport_coeff * perp.norm_squared()
    }

    /// Rewards of every row of `x`.
    pub fn rewards(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let latent = x * &self.a;
        let par = &latent * self.a.transpose();
        let perp = x - par;
        let on = &latent * &self.beta_star;
        let s = self.offsupport_sign.factor() * self.offsupport_coeff;
        DVector::from_fn(x.nrows(), |i, _| on[i] + s * perp.row(i).norm_squared())
    }

    /// Largest distance of any row of `x` from `col(A)`.
    pub fn support_residual(&self, x: &DMatrix<f64>) -> f64 {
        let perp = x - (x * &self.a) * self.a.transpose();
        perp.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
    }

    /// `n x d` latent draws from `N(0, Sigma)`.
    pub fn sample_latent(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let d = self.latent_dim();
        let chol = self.sigma.clone().cholesky().expect("sigma validated SPD");
        let mut rng = rng_from_seed(seed);
        normal_matrix(&mut rng, n, d) * chol.l().transpose()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlabeledDataset {
    pub x: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub noise_sigma: f64,
}

impl UnlabeledDataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// Draws the unlabeled set (`n1` rows) and the noisy labeled set (`n2` rows)
/// from independent sub-streams of `seed`.
pub fn generate_datasets(
    world: &SubspaceWorld,
    n1: usize,
    n2: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(UnlabeledDataset, LabeledDataset)> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::Validation("dataset sizes must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&noise_sigma) {
        return Err(Error::Validation(format!("label noise std must be in [0, 1), got {noise_sigma}")));
    }
    let at = world.a.transpose();
    let x1 = world.sample_latent(n1, derive_seed(seed, tag("unlabeled"))) * &at;
    let x2 = world.sample_latent(n2, derive_seed(seed, tag("labeled"))) * &at;
    let mut y = world.rewards(&x2);
    if noise_sigma > 0.0 {
        let mut rng = rng_from_seed(derive_seed(seed, tag("label-noise")));
        y += normal_vector(&mut rng, n2) * noise_sigma;
    }
    Ok((UnlabeledDataset { x: x1 }, LabeledDataset { x: x2, y, noise_sigma }))
}
