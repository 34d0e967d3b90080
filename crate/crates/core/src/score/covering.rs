use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::floored_spd_inverse;
use crate::schedule::{alpha, h};

/// Eigenvalue floor applied when inverting the learned precision system.
pub const PRECISION_FLOOR: f64 = 1e-6;

/// `psi(u, y, t) = alpha B (alpha u + (h/nu²) y beta)` with
/// `B = (alpha² I + (h/nu²) beta betaᵀ + h S)⁻¹`, where `S` is a learnable
/// symmetric stand-in for `Sigma⁻¹` and `beta` for the latent label
/// direction. `nu` is fixed to the pseudo-label noise of the training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoveringHead {
    latent: usize,
    pub nu: f64,
    /// Lower triangle of `S`, row by row.
    s_lower: Vec<f64>,
    pub beta: DVector<f64>,
}

pub(crate) struct Cache {
    b: DMatrix<f64>,
    m: DVector<f64>,
    alpha: f64,
    h: f64,
    c: f64,
    y: f64,
}

fn tri_index(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

impl CoveringHead {
    pub fn new(latent: usize, nu: f64) -> Result<Self> {
        if !(nu > 0.0) {
            return Err(Error::Validation(format!("covering head needs nu > 0, got {nu}")));
        }
        let mut s_lower = vec![0.0; latent * (latent + 1) / 2];
        for i in 0..latent {
            s_lower[tri_index(i, i)] = 1.0;
        }
        Ok(Self { latent, nu, s_lower, beta: DVector::zeros(latent) })
    }

    /// Head with the given precision candidate and label direction.
    pub fn with_parameters(sigma_inv: &DMatrix<f64>, beta: DVector<f64>, nu: f64) -> Result<Self> {
        let mut head = Self::new(beta.len(), nu)?;
        if sigma_inv.shape() != (head.latent, head.latent) {
            return Err(Error::Dimension("precision candidate has wrong shape".into()));
        }
        for i in 0..head.latent {
            for j in 0..=i {
                head.s_lower[tri_index(i, j)] = 0.5 * (sigma_inv[(i, j)] + sigma_inv[(j, i)]);
            }
        }
        head.beta = beta;
        Ok(head)
    }

    /// The symmetric precision candidate `S`.
    pub fn sigma_inv(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.latent, self.latent, |i, j| {
            if j <= i {
                self.s_lower[tri_index(i, j)]
            } else {
                self.s_lower[tri_index(j, i)]
            }
        })
    }

    pub(crate) fn num_params(&self) -> usize {
        self.s_lower.len() + self.latent
    }

    pub(crate) fn write_params(&self, out: &mut [f64]) {
        let k = self.s_lower.len();
        out[..k].copy_from_slice(&self.s_lower);
        out[k..].copy_from_slice(self.beta.as_slice());
    }

    pub(crate) fn read_params(&mut self, p: &[f64]) {
        let k = self.s_lower.len();
        self.s_lower.copy_from_slice(&p[..k]);
        self.beta.as_mut_slice().copy_from_slice(&p[k..]);
    }

    fn b_matrix(&self, t: f64) -> (DMatrix<f64>, f64, f64, f64) {
        let (al, ht) = (alpha(t), h(t));
        let c = ht / (self.nu * self.nu);
        let d = self.latent;
        let m = DMatrix::identity(d, d) * (al * al) + &self.beta * self.beta.transpose() * c + self.sigma_inv() * ht;
        (floored_spd_inverse(&m, PRECISION_FLOOR), al, ht, c)
    }

    pub(crate) fn forward(&self, u: &DVector<f64>, y: f64, t: f64) -> (DVector<f64>, Cache) {
        let (b, al, ht, c) = self.b_matrix(t);
        let w = u * al + &self.beta * (c * y);
        let m = &b * w;
        let psi = &m * al;
        (psi, Cache { b, m, alpha: al, h: ht, c, y })
    }

    pub(crate) fn backward(&self, k: &Cache, g_psi: &DVector<f64>, grad: &mut [f64]) -> DVector<f64> {
        let d = self.latent;
        let g_m = g_psi * k.alpha;
        let g_w = &k.b * g_m;
        // d loss / d M = -g_w mᵀ, with M = alpha² I + c beta betaᵀ + h S.
        let n_tri = self.s_lower.len();
        let (gs, gb) = grad.split_at_mut(n_tri);
        for i in 0..d {
            for j in 0..=i {
                let g = if i == j {
                    -g_w[i] * k.m[i]
                } else {
                    -(g_w[i] * k.m[j] + g_w[j] * k.m[i])
                };
                gs[tri_index(i, j)] += k.h * g;
            }
        }
        // Symmetric part of g_M applied to beta, plus the direct path through w.
        let wm = g_w.dot(&self.beta);
        let mb = k.m.dot(&self.beta);
        for i in 0..d {
            gb[i] += -k.c * (g_w[i] * mb + k.m[i] * wm) + k.c * k.y * g_w[i];
        }
        g_w * k.alpha
    }

    pub(crate) fn forward_batch(&self, u: &DMatrix<f64>, y: f64, t: f64) -> DMatrix<f64> {
        let (b, al, _, c) = self.b_matrix(t);
        let mut w = u * al;
        let shift = self.beta.transpose() * (c * y);
        for mut row in w.row_iter_mut() {
            row += &shift;
        }
        w * b * al
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::GaussianDesignOracle;
    use crate::score::{EncoderDecoderScore, Head, ScoreFunction};
    use crate::world::sample_orthonormal;

    #[test]
    fn oracle_parameters_reproduce_the_analytic_score() {
        let a = sample_orthonormal(7, 3, 1).unwrap();
        let sigma = DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, 0.1, 0.6, 0.2, 0.0, 0.2, 0.5]);
        let beta = DVector::from_vec(vec![0.3, -0.8, 0.5]);
        let nu = 0.25;
        let oracle = GaussianDesignOracle::new(a.clone(), sigma.clone(), beta.clone(), nu).unwrap();
        let inv = sigma.try_inverse().unwrap();
        let head = CoveringHead::with_parameters(&inv, beta, nu).unwrap();
        let model = EncoderDecoderScore { v: a, head: Head::Covering(head) };
        let x = DVector::from_fn(7, |i, _| (i as f64 + 0.5).ln() - 1.0);
        for t in [0.01, 0.3, 2.0, 9.0] {
            let s1 = model.score(&x, 1.4, t).unwrap();
            let s2 = oracle.analytic_score(&x, 1.4, t).unwrap();
            assert!((s1 - &s2).amax() < 1e-9 * s2.amax().max(1.0));
        }
    }

    #[test]
    fn symmetric_by_construction() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.6, 2.0]);
        let head = CoveringHead::with_parameters(&m, DVector::zeros(2), 1.0).unwrap();
        let s = head.sigma_inv();
        assert_eq!(s[(0, 1)], s[(1, 0)]);
        assert!((s[(0, 1)] - 0.4).abs() < 1e-15);
    }
}
