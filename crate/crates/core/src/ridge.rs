//! Ridge estimation of the linear reward, pseudo-labeling of the unlabeled
//! pool, and the coverage quantities that control off-policy regret.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::oracle::conditional_latent_law_parts;
use crate::rng::{normal_vector, rng_from_seed};
use crate::world::{LabeledDataset, SubspaceWorld, UnlabeledDataset};

/// Default ridge coefficient.
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Largest condition number accepted for an unregularized (`lambda = 0`) fit.
pub const MAX_UNREGULARIZED_CONDITION: f64 = 1e12;

/// Default pseudo-label noise, `1/sqrt(D)`.
pub fn default_nu(ambient_dim: usize) -> f64 {
    1.0 / (ambient_dim as f64).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeEstimate {
    pub theta_hat: DVector<f64>,
    pub lambda: f64,
    pub n2: usize,
    /// `(XᵀX + lambda I) / n2`.
    pub sigma_hat_lambda: DMatrix<f64>,
}

impl RidgeEstimate {
    /// Latent coefficients `Aᵀ theta_hat`.
    pub fn beta_hat(&self, world: &SubspaceWorld) -> DVector<f64> {
        world.a.transpose() * &self.theta_hat
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        x * &self.theta_hat
    }
}

/// Solves `(XᵀX + lambda I) theta = Xᵀy` by Cholesky.
pub fn fit_ridge(data: &LabeledDataset, lambda: f64) -> Result<RidgeEstimate> {
    if data.is_empty() {
        return Err(Error::Validation("labeled dataset is empty".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Validation(format!("ridge coefficient must be >= 0, got {lambda}")));
    }
    let x = &data.x;
    let big_d = x.ncols();
    let gram = x.transpose() * x;
    let rhs = x.transpose() * &data.y;
    let system = &gram + DMatrix::identity(big_d, big_d) * lambda;

    if lambda == 0.0 {
        let eig = SymmetricEigen::new(linalg::symmetrize(&gram));
        let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
        if lo <= 0.0 || hi / lo > MAX_UNREGULARIZED_CONDITION {
            return Err(Error::Rank(format!(
                "XᵀX is numerically singular (eigenvalues in [{lo:e}, {hi:e}]); use lambda > 0"
            )));
        }
    }
    let chol = linalg::cholesky(&system, "ridge system")?;
    let theta_hat = chol.solve(&rhs);

    let residual = (&system * &theta_hat - &rhs).norm();
    if residual > 1e-8 * rhs.norm().max(f64::MIN_POSITIVE) {
        return Err(Error::Rank(format!("ridge solve residual {residual:e} too large")));
    }
    let n2 = x.nrows();
    Ok(RidgeEstimate { theta_hat, lambda, n2, sigma_hat_lambda: system / n2 as f64 })
}

/// Unlabeled rows annotated with `theta_hatᵀx + N(0, nu²)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabeledDataset {
    pub x: DMatrix<f64>,
    pub y_hat: DVector<f64>,
    pub nu: f64,
}

impl PseudoLabeledDataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

pub fn pseudo_label(
    unlabeled: &UnlabeledDataset,
    est: &RidgeEstimate,
    nu: f64,
    seed: u64,
) -> Result<PseudoLabeledDataset> {
    if !(nu >= 0.0) {
        return Err(Error::Validation(format!("pseudo-label noise must be >= 0, got {nu}")));
    }
    if unlabeled.x.ncols() != est.theta_hat.len() {
        return Err(Error::Dimension("unlabeled data and ridge estimate disagree on D".into()));
    }
    let mut y_hat = est.predict(&unlabeled.x);
    if nu > 0.0 {
        let mut rng = rng_from_seed(seed);
        y_hat += normal_vector(&mut rng, y_hat.len()) * nu;
    }
    Ok(PseudoLabeledDataset { x: unlabeled.x.clone(), y_hat, nu })
}

/// `Tr((lambda I_D + A S1 Aᵀ)⁻¹ A S2 Aᵀ)` by a full `D`-dimensional solve.
pub fn trace_full(lambda: f64, a: &DMatrix<f64>, s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let big_d = a.nrows();
    let m = DMatrix::identity(big_d, big_d) * lambda + a * s1 * a.transpose();
    let rhs = a * s2 * a.transpose();
    let sol = linalg::cholesky(&m, "regularized covariance")?.solve(&rhs);
    Ok(sol.trace())
}

/// `Tr((lambda I_d + S1)⁻¹ S2)`, the reduced form of [`trace_full`] when `A`
/// has orthonormal columns.
pub fn trace_reduced(lambda: f64, s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = s1.nrows();
    let m = DMatrix::identity(d, d) * lambda + s1;
    let sol = linalg::cholesky(&m, "reduced regularized covariance")?.solve(s2);
    Ok(sol.trace())
}

/// Target second-moment matrix for [`coverage_trace`].
#[derive(Debug, Clone)]
pub enum CoverageTarget<'a> {
    Full(&'a DMatrix<f64>),
    /// `A S2 Aᵀ` supplied as its factors.
    Factored { a: &'a DMatrix<f64>, s2: &'a DMatrix<f64> },
}

/// `Tr(Sigma_hat_lambda⁻¹ Sigma_target)`.
///
/// The factored target takes the reduced `d`-dimensional route, which assumes
/// the regression data lie in `col(A)`.
pub fn coverage_trace(est: &RidgeEstimate, target: CoverageTarget<'_>) -> Result<f64> {
    match target {
        CoverageTarget::Full(s) => {
            linalg::check_psd(s, "target covariance")?;
            if s.nrows() != est.theta_hat.len() {
                return Err(Error::Dimension("target covariance has wrong dimension".into()));
            }
            let sol = linalg::cholesky(&est.sigma_hat_lambda, "Sigma_hat_lambda")?.solve(s);
            Ok(sol.trace())
        }
        CoverageTarget::Factored { a, s2 } => {
            linalg::check_psd(s2, "latent target covariance")?;
            let shrink = est.lambda / est.n2 as f64;
            let d = a.ncols();
            let s1 = a.transpose() * &est.sigma_hat_lambda * a - DMatrix::identity(d, d) * shrink;
            trace_reduced(shrink, &linalg::symmetrize(&s1), s2)
        }
    }
}

/// Second moment `A (mu muᵀ + Gamma) Aᵀ` of `x | y_hat = a` under the fitted
/// reward.
pub fn target_covariance(world: &SubspaceWorld, est: &RidgeEstimate, a: f64, nu: f64) -> Result<DMatrix<f64>> {
    let (mean, cov) = target_latent_moments(world, est, a, nu)?;
    let latent = &mean * mean.transpose() + cov;
    Ok(&world.a * latent * world.a.transpose())
}

/// Latent factor `mu muᵀ + Gamma` of [`target_covariance`] and its parts.
pub fn target_latent_moments(
    world: &SubspaceWorld,
    est: &RidgeEstimate,
    a: f64,
    nu: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !(nu > 0.0) {
        return Err(Error::Validation("target covariance needs nu > 0".into()));
    }
    let beta_hat = est.beta_hat(world);
    Ok(conditional_latent_law_parts(&world.sigma, &beta_hat, nu, a))
}
