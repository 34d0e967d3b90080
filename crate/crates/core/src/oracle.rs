//! Closed-form Gaussian-design quantities: the conditional score of the
//! noised joint law, the conditional latent law given a pseudo-label, its
//! forward-noised version, and the second moment used by the shift bounds.
//!
//! With `z ~ N(0, Sigma)`, `x = A z` and `y = beta_hatᵀ z + N(0, nu²)`, the
//! forward marginal at time `t` has score
//!
//! ```text
//! grad_x log p_t(x, y) = (alpha/h) A B_t (alpha Aᵀx + (h/nu²) y beta_hat) - x/h
//! B_t = (alpha² I + (h/nu²) beta_hat beta_hatᵀ + h Sigma⁻¹)⁻¹
//! ```
//!
//! Every trained component in this crate is checked against these formulas.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{normal_matrix, rng_from_seed};
use crate::schedule::{alpha, h};
use crate::score::ScoreFunction;
use crate::world::SubspaceWorld;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianDesignOracle {
    pub a: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    pub beta_hat: DVector<f64>,
    pub nu: f64,
}

/// Mean and covariance of `z | y_hat = a` for `z ~ N(0, sigma)` and
/// `y_hat = betaᵀz + N(0, nu²)`.
pub fn conditional_latent_law_parts(
    sigma: &DMatrix<f64>,
    beta: &DVector<f64>,
    nu: f64,
    a: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let g = sigma * beta;
    let k = beta.dot(&g) + nu * nu;
    let mean = &g * (a / k);
    let cov = sigma - &g * g.transpose() / k;
    (mean, linalg::symmetrize(&cov))
}

impl GaussianDesignOracle {
    pub fn new(a: DMatrix<f64>, sigma: DMatrix<f64>, beta_hat: DVector<f64>, nu: f64) -> Result<Self> {
        if !(nu > 0.0) {
            return Err(Error::Validation(format!("oracle needs nu > 0, got {nu}")));
        }
        let d = a.ncols();
        if sigma.shape() != (d, d) || beta_hat.len() != d {
            return Err(Error::Dimension("oracle parameters disagree on the latent dimension".into()));
        }
        let sigma_inv = linalg::spd_inverse(&sigma, "latent covariance")
            .map_err(|_| Error::Validation("latent covariance is singular".into()))?;
        Ok(Self { a, sigma, sigma_inv, beta_hat, nu })
    }

    /// Oracle for the curated data of a world, given fitted latent
    /// coefficients `beta_hat = Aᵀ theta_hat`.
    pub fn from_world(world: &SubspaceWorld, beta_hat: DVector<f64>, nu: f64) -> Result<Self> {
        Self::new(world.a.clone(), world.sigma.clone(), beta_hat, nu)
    }

    pub fn ambient_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.a.ncols()
    }

    fn check_time(t: f64) -> Result<()> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Domain(format!("score is undefined at t = {t}; need t > 0")));
        }
        Ok(())
    }

    pub fn b_matrix(&self, t: f64) -> Result<DMatrix<f64>> {
        Self::check_time(t)?;
        let (al, ht) = (alpha(t), h(t));
        let d = self.latent_dim();
        let m = DMatrix::identity(d, d) * (al * al)
            + &self.beta_hat * self.beta_hat.transpose() * (ht / (self.nu * self.nu))
            + &self.sigma_inv * ht;
        linalg::spd_inverse(&linalg::symmetrize(&m), "B_t⁻¹")
    }

    /// On-support map `u(latent, y, t) = alpha B_t (alpha latent + (h/nu²) y beta_hat)`,
    /// so that the score is `(A u - x) / h`.
    pub fn on_support_map(&self, latent: &DVector<f64>, y: f64, t: f64) -> Result<DVector<f64>> {
        let b = self.b_matrix(t)?;
        let (al, ht) = (alpha(t), h(t));
        let w = latent * al + &self.beta_hat * (ht / (self.nu * self.nu) * y);
        Ok(b * w * al)
    }

    /// Score computed through [`Self::on_support_map`].
    pub fn score_via_decomposition(&self, x: &DVector<f64>, y: f64, t: f64) -> Result<DVector<f64>> {
        let u = self.on_support_map(&(self.a.transpose() * x), y, t)?;
        Ok((&self.a * u - x) / h(t))
    }

    pub fn analytic_score(&self, x: &DVector<f64>, y: f64, t: f64) -> Result<DVector<f64>> {
        let b = self.b_matrix(t)?;
        let (al, ht) = (alpha(t), h(t));
        let mu = self.a.transpose() * x * al + &self.beta_hat * (ht / (self.nu * self.nu) * y);
        Ok(&self.a * (b * mu) * (al / ht) - x / ht)
    }

    /// `(mean, cov)` of `z | y_hat = a`.
    pub fn conditional_latent_law(&self, a: f64) -> (DVector<f64>, DMatrix<f64>) {
        conditional_latent_law_parts(&self.sigma, &self.beta_hat, self.nu, a)
    }

    /// `(mean, cov)` of the forward-noised `x_t | y_hat = a`.
    pub fn noised_conditional_law(&self, a: f64, t: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("time must be >= 0, got {t}")));
        }
        let (mu, gamma) = self.conditional_latent_law(a);
        let (al, ht) = (alpha(t), h(t));
        let big_d = self.ambient_dim();
        let mean = &self.a * mu * al;
        let cov = &self.a * gamma * self.a.transpose() * (al * al) + DMatrix::identity(big_d, big_d) * ht;
        Ok((mean, linalg::symmetrize(&cov)))
    }

    /// `M(a) = E ||z||²` under the conditional latent law.
    pub fn latent_second_moment(&self, a: f64) -> f64 {
        let g = &self.sigma * &self.beta_hat;
        let k = self.beta_hat.dot(&g) + self.nu * self.nu;
        g.norm_squared() / (k * k) * a * a + (self.sigma.trace() - g.norm_squared() / k)
    }

    /// `(E||z||², sqrt(E||z||² / Tr Sigma))` written as a correction to the
    /// marginal second moment `Tr Sigma`.
    pub fn distro_shift_surrogate(&self, a: f64) -> (f64, f64) {
        let g = &self.sigma * &self.beta_hat;
        let k = self.beta_hat.dot(&g) + self.nu * self.nu;
        let second = (a * a - k) * g.norm_squared() / (k * k) + self.sigma.trace();
        (second, (second / self.sigma.trace()).sqrt())
    }

    /// `n x d` draws of `z | y_hat = a`.
    pub fn sample_conditional_latent(&self, a: f64, n: usize, seed: u64) -> DMatrix<f64> {
        let (mean, cov) = self.conditional_latent_law(a);
        sample_gaussian_rows(&mean, &cov, n, seed)
    }

    /// `n x D` draws of `A z` with `z | y_hat = a`.
    pub fn sample_conditional(&self, a: f64, n: usize, seed: u64) -> DMatrix<f64> {
        self.sample_conditional_latent(a, n, seed) * self.a.transpose()
    }
}

/// Rows drawn from `N(mean, cov)` for a symmetric PSD `cov`.
pub fn sample_gaussian_rows(mean: &DVector<f64>, cov: &DMatrix<f64>, n: usize, seed: u64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(linalg::symmetrize(cov));
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    let mut rng = rng_from_seed(seed);
    let mut out = normal_matrix(&mut rng, n, mean.len()) * root.transpose();
    for mut row in out.row_iter_mut() {
        row += mean.transpose();
    }
    out
}

impl ScoreFunction for GaussianDesignOracle {
    fn dim(&self) -> usize {
        self.ambient_dim()
    }

    fn score(&self, x: &DVector<f64>, y: f64, t: f64) -> Result<DVector<f64>> {
        self.analytic_score(x, y, t)
    }

    fn score_batch(&self, x: &DMatrix<f64>, y: f64, t: f64) -> Result<DMatrix<f64>> {
        let b = self.b_matrix(t)?;
        let (al, ht) = (alpha(t), h(t));
        let mut w = x * &self.a * al;
        let shift = self.beta_hat.transpose() * (ht / (self.nu * self.nu) * y);
        for mut row in w.row_iter_mut() {
            row += &shift;
        }
        let psi = w * b * al;
        Ok((psi * self.a.transpose() - x) / ht)
    }

    fn identity(&self) -> String {
        "oracle".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_vector;
    use crate::world::sample_orthonormal;

    fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        let g = normal_matrix(&mut rng, d, d);
        let m = &g * g.transpose() / d as f64 + DMatrix::identity(d, d) * 0.2;
        let top = SymmetricEigen::new(m.clone()).eigenvalues.max();
        m / top
    }

    fn oracle(big_d: usize, d: usize, seed: u64) -> GaussianDesignOracle {
        let a = sample_orthonormal(big_d, d, seed).unwrap();
        let mut rng = rng_from_seed(seed + 1);
        let beta = normal_vector(&mut rng, d);
        GaussianDesignOracle::new(a, random_spd(d, seed + 2), beta, 0.4).unwrap()
    }

    #[test]
    fn b_is_identity_without_conditioning() {
        let a = sample_orthonormal(6, 3, 1).unwrap();
        let o = GaussianDesignOracle::new(a, DMatrix::identity(3, 3), DVector::zeros(3), 0.5).unwrap();
        for t in [0.01, 0.5, 3.0] {
            assert!(linalg::max_abs_diff(&o.b_matrix(t).unwrap(), &DMatrix::identity(3, 3)) < 1e-12);
        }
    }

    #[test]
    fn b_scalar_case() {
        let a = DMatrix::from_element(1, 1, 1.0);
        let o = GaussianDesignOracle::new(a, DMatrix::identity(1, 1), DVector::from_element(1, 1.0), 1.0).unwrap();
        let b = o.b_matrix(std::f64::consts::LN_2).unwrap();
        assert!((b[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn b_inverse_identity_random_sigma() {
        let o = oracle(7, 4, 3);
        let t = 0.37;
        let b = o.b_matrix(t).unwrap();
        let binv = DMatrix::identity(4, 4) * alpha(t).powi(2)
            + &o.beta_hat * o.beta_hat.transpose() * (h(t) / (o.nu * o.nu))
            + o.sigma_inv.clone() * h(t);
        assert!(linalg::max_abs_diff(&(b * binv), &DMatrix::identity(4, 4)) < 1e-10);
    }

    #[test]
    fn singular_sigma_is_rejected() {
        let a = sample_orthonormal(4, 2, 1).unwrap();
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            GaussianDesignOracle::new(a, s, DVector::zeros(2), 1.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn standard_marginal_score_is_minus_x() {
        let a = sample_orthonormal(6, 3, 1).unwrap();
        let o = GaussianDesignOracle::new(a.clone(), DMatrix::identity(3, 3), DVector::zeros(3), 0.5).unwrap();
        let x = &a * DVector::from_vec(vec![0.3, -0.4, 1.1]);
        let s = o.analytic_score(&x, 2.0, 0.8).unwrap();
        assert!((s + &x).amax() < 1e-12);
    }

    #[test]
    fn orthogonal_input_has_pure_shortcut_score() {
        let o = oracle(8, 3, 4);
        let mut x = DVector::from_fn(8, |i, _| (i as f64 * 0.7).cos());
        x -= &o.a * (o.a.transpose() * &x);
        let t = 0.2;
        let s = o.analytic_score(&x, 0.0, t).unwrap();
        assert!((s + &x / h(t)).amax() < 1e-10);
    }

    #[test]
    fn nonpositive_time_is_a_domain_error() {
        let o = oracle(4, 2, 1);
        let x = DVector::zeros(4);
        assert!(matches!(o.analytic_score(&x, 0.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(o.analytic_score(&x, 0.0, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn decomposition_route_agrees() {
        let o = oracle(9, 4, 5);
        let mut rng = rng_from_seed(6);
        for k in 0..20 {
            let x = normal_vector(&mut rng, 9);
            let t = 0.01 + 0.3 * k as f64;
            let s1 = o.analytic_score(&x, 0.7, t).unwrap();
            let s2 = o.score_via_decomposition(&x, 0.7, t).unwrap();
            assert!((s1 - s2).amax() < 1e-10);
        }
    }

    #[test]
    fn batch_score_matches_pointwise() {
        let o = oracle(9, 4, 5);
        let mut rng = rng_from_seed(8);
        let x = normal_matrix(&mut rng, 13, 9);
        let sb = o.score_batch(&x, -1.3, 0.6).unwrap();
        for i in 0..13 {
            let s = o.analytic_score(&x.row(i).transpose(), -1.3, 0.6).unwrap();
            assert!((sb.row(i).transpose() - s).amax() < 1e-12);
        }
    }

    #[test]
    fn conditional_law_zero_target() {
        let o = oracle(6, 3, 2);
        let (mean, cov) = o.conditional_latent_law(0.0);
        assert!(mean.amax() == 0.0);
        let g = &o.sigma * &o.beta_hat;
        let gamma = &o.sigma - &g * g.transpose() / (o.beta_hat.dot(&g) + o.nu * o.nu);
        assert!(linalg::max_abs_diff(&cov, &gamma) < 1e-12);
    }

    #[test]
    fn conditional_law_unit_case() {
        let a = sample_orthonormal(5, 3, 1).unwrap();
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let o = GaussianDesignOracle::new(a, DMatrix::identity(3, 3), e1.clone(), 1.0).unwrap();
        let (mean, cov) = o.conditional_latent_law(2.0);
        assert!((mean - &e1).amax() < 1e-12);
        let expect = DMatrix::identity(3, 3) - &e1 * e1.transpose() * 0.5;
        assert!(linalg::max_abs_diff(&cov, &expect) < 1e-12);
    }

    #[test]
    fn noised_law_limits() {
        let o = oracle(6, 2, 3);
        let (mu, gamma) = o.conditional_latent_law(1.7);
        let (m0, c0) = o.noised_conditional_law(1.7, 1e-12).unwrap();
        assert!((m0 - &o.a * &mu).amax() < 1e-10);
        assert!(linalg::max_abs_diff(&c0, &(&o.a * &gamma * o.a.transpose())) < 1e-10);

        let (m, c) = o.noised_conditional_law(1.7, 10.0).unwrap();
        assert!(m.amax() <= (-5.0f64).exp() * mu.norm() + 1e-15);
        assert!(linalg::max_abs_diff(&c, &DMatrix::identity(6, 6)) <= (-10.0f64).exp() + 1e-12);
    }

    #[test]
    fn noised_law_has_isotropic_off_support_block() {
        let o = oracle(7, 3, 9);
        let t0 = 0.01;
        let (_, c) = o.noised_conditional_law(2.0, t0).unwrap();
        let perp = DMatrix::identity(7, 7) - &o.a * o.a.transpose();
        let off = &perp * c * &perp;
        assert!(linalg::max_abs_diff(&off, &(&perp * h(t0))) < 1e-12);
    }

    #[test]
    fn second_moment_substitution() {
        let a = sample_orthonormal(20, 16, 1).unwrap();
        let e1 = DVector::from_fn(16, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let o = GaussianDesignOracle::new(a, DMatrix::identity(16, 16), e1, 1.0).unwrap();
        assert!((o.latent_second_moment(0.0) - 15.5).abs() < 1e-12);
    }

    #[test]
    fn second_moment_without_conditioning_is_trace() {
        let a = sample_orthonormal(6, 3, 1).unwrap();
        let s = random_spd(3, 4);
        let o = GaussianDesignOracle::new(a, s.clone(), DVector::zeros(3), 0.3).unwrap();
        for v in [0.0, 1.0, 7.0] {
            assert!((o.latent_second_moment(v) - s.trace()).abs() < 1e-12);
        }
    }

    #[test]
    fn surrogate_substitutions() {
        let a = sample_orthonormal(10, 4, 1).unwrap();
        let e1 = DVector::from_fn(4, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let o = GaussianDesignOracle::new(a, DMatrix::identity(4, 4), e1, 1.0).unwrap();
        let (m, _) = o.distro_shift_surrogate(4.0);
        assert!((m - (3.5 + 4.0)).abs() < 1e-12);
        let (m, s) = o.distro_shift_surrogate(2f64.sqrt());
        assert!((m - 4.0).abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-12);
        assert!(o.distro_shift_surrogate(0.0).1 <= o.distro_shift_surrogate(8.0).1);
    }

    #[test]
    fn surrogate_and_second_moment_agree() {
        let o = oracle(8, 3, 12);
        for v in [-3.0, 0.0, 0.5, 6.0] {
            assert!((o.distro_shift_surrogate(v).0 - o.latent_second_moment(v)).abs() < 1e-10);
        }
    }

    #[test]
    fn score_is_linear_in_x_and_y() {
        let o = oracle(8, 3, 21);
        let mut rng = rng_from_seed(22);
        let (x1, x2) = (normal_vector(&mut rng, 8), normal_vector(&mut rng, 8));
        let (y1, y2, c1, c2, t) = (0.4, -1.1, 1.7, -0.6, 0.9);
        let lhs = o.analytic_score(&(&x1 * c1 + &x2 * c2), c1 * y1 + c2 * y2, t).unwrap();
        let rhs = o.analytic_score(&x1, y1, t).unwrap() * c1 + o.analytic_score(&x2, y2, t).unwrap() * c2;
        assert!((lhs - rhs).amax() < 1e-9);
    }
}
