use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::schedule::{alpha, h};

/// Number of non-latent inputs: label, t, alpha(t), h(t).
const EXTRA_INPUTS: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Layer {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

/// ReLU network `psi(u, y, tau(t))` with time features `tau(t) = (t, alpha(t), h(t))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpHead {
    latent: usize,
    layers: Vec<Layer>,
}

pub(crate) struct Cache {
    /// Inputs to every layer; `acts[0]` is the feature vector.
    acts: Vec<DVector<f64>>,
}

fn features(u: &DVector<f64>, y: f64, t: f64) -> DVector<f64> {
    let d = u.len();
    let mut f = DVector::zeros(d + EXTRA_INPUTS);
    f.rows_mut(0, d).copy_from(u);
    f[d] = y;
    f[d + 1] = t;
    f[d + 2] = alpha(t);
    f[d + 3] = h(t);
    f
}

impl MlpHead {
    pub fn new(latent: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Validation("MLP needs at least one nonempty hidden layer".into()));
        }
        let mut rng = rng_from_seed(seed);
        let mut sizes = vec![latent + EXTRA_INPUTS];
        sizes.extend_from_slice(hidden);
        sizes.push(latent);
        let layers = sizes
            .windows(2)
            .map(|io| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let scale = (2.0 / fan_in as f64).sqrt();
                let w = DMatrix::from_fn(fan_out, fan_in, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
                Layer { w, b: DVector::zeros(fan_out) }
            })
            .collect();
        Ok(Self { latent, layers })
    }

    /// Rebuilds a head from `(weight, bias)` pairs, input layer first.
    pub fn from_layers(latent: usize, layers: Vec<(DMatrix<f64>, DVector<f64>)>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::Validation("MLP needs at least one hidden layer".into()));
        }
        let mut expect_in = latent + EXTRA_INPUTS;
        for (w, b) in &layers {
            if w.ncols() != expect_in || b.len() != w.nrows() {
                return Err(Error::Dimension("MLP layer shapes do not chain".into()));
            }
            expect_in = w.nrows();
        }
        if expect_in != latent {
            return Err(Error::Dimension("MLP output width must equal the latent dimension".into()));
        }
        let layers = layers.into_iter().map(|(w, b)| Layer { w, b }).collect();
        Ok(Self { latent, layers })
    }

    /// `(weight, bias)` pairs, input layer first.
    pub fn layers(&self) -> impl Iterator<Item = (&DMatrix<f64>, &DVector<f64>)> {
        self.layers.iter().map(|l| (&l.w, &l.b))
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.w.nrows()).collect()
    }

    pub(crate) fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub(crate) fn write_params(&self, out: &mut [f64]) {
        let mut k = 0;
        for l in &self.layers {
            out[k..k + l.w.len()].copy_from_slice(l.w.as_slice());
            k += l.w.len();
            out[k..k + l.b.len()].copy_from_slice(l.b.as_slice());
            k += l.b.len();
        }
    }

    pub(crate) fn read_params(&mut self, p: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&p[k..k + nw]);
            k += nw;
            let nb = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&p[k..k + nb]);
            k += nb;
        }
    }

    pub(crate) fn forward(&self, u: &DVector<f64>, y: f64, t: f64) -> (DVector<f64>, Cache) {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut a = features(u, y, t);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.w * &a + &l.b;
            if i < last {
                z.apply(|v| *v = v.max(0.0));
            }
            acts.push(a);
            a = z;
        }
        (a, Cache { acts })
    }

    pub(crate) fn backward(&self, k: &Cache, g_psi: &DVector<f64>, grad: &mut [f64]) -> DVector<f64> {
        // Offsets of each layer's block in the flat parameter vector.
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.w.len() + l.b.len();
        }
        let mut g = g_psi.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &k.acts[i];
            let (rows, cols) = l.w.shape();
            let base = offsets[i];
            for c in 0..cols {
                let ic = input[c];
                if ic == 0.0 {
                    continue;
                }
                let col = &mut grad[base + c * rows..base + (c + 1) * rows];
                for r in 0..rows {
                    col[r] += g[r] * ic;
                }
            }
            let gb = &mut grad[base + rows * cols..base + rows * cols + rows];
            for r in 0..rows {
                gb[r] += g[r];
            }
            let mut g_in = l.w.tr_mul(&g);
            if i > 0 {
                // Input of layer i is the ReLU output of layer i-1.
                for (gv, &av) in g_in.iter_mut().zip(input.iter()) {
                    if av <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            g = g_in;
        }
        g.rows(0, self.latent).into_owned()
    }

    pub(crate) fn forward_batch(&self, u: &DMatrix<f64>, y: f64, t: f64) -> DMatrix<f64> {
        let n = u.nrows();
        let d = self.latent;
        let mut a = DMatrix::zeros(n, d + EXTRA_INPUTS);
        a.columns_mut(0, d).copy_from(u);
        a.column_mut(d).fill(y);
        a.column_mut(d + 1).fill(t);
        a.column_mut(d + 2).fill(alpha(t));
        a.column_mut(d + 3).fill(h(t));
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = a * l.w.transpose();
            for mut row in z.row_iter_mut() {
                row += l.b.transpose();
            }
            if i < last {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a
    }
}
