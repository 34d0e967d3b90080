//! Shared fixtures for the benchmarks: the full-scale world with its
//! datasets and a fitted reward model, built once per bench binary.

use nalgebra::{DMatrix, DVector};
use rdiff_core::ridge::{default_nu, fit_ridge};
use rdiff_core::world::{generate_datasets, make_world};
use rdiff_core::{EncoderDecoderScore, LabeledDataset, RidgeEstimate, SubspaceWorld, WorldConfig};

pub const SEED: u64 = 7;

pub struct Fixture {
    pub world: SubspaceWorld,
    pub unlabeled: DMatrix<f64>,
    pub labeled: LabeledDataset,
    pub ridge: RidgeEstimate,
}

impl Fixture {
    /// Default dimensions, `n1` unlabeled and `n2` labeled rows.
    pub fn new(n1: usize, n2: usize) -> Self {
        let world = make_world(&WorldConfig::default(), SEED).expect("default world is valid");
        let (unlabeled, labeled) = generate_datasets(&world, n1, n2, 0.1, SEED + 1).expect("valid sizes");
        let ridge = fit_ridge(&labeled, 1.0).expect("ridge fit");
        Self { world, unlabeled: unlabeled.x, labeled, ridge }
    }

    pub fn nu(&self) -> f64 {
        default_nu(self.world.ambient_dim())
    }

    pub fn covering(&self) -> EncoderDecoderScore {
        let (big_d, d) = (self.world.ambient_dim(), self.world.a.ncols());
        EncoderDecoderScore::covering(big_d, d, self.nu(), SEED).expect("valid dims")
    }

    pub fn mlp(&self) -> EncoderDecoderScore {
        let (big_d, d) = (self.world.ambient_dim(), self.world.a.ncols());
        EncoderDecoderScore::mlp(big_d, d, &[256, 256], SEED).expect("valid dims")
    }

    /// First `n` unlabeled rows with their ridge pseudo-labels.
    pub fn rows(&self, n: usize) -> (DMatrix<f64>, DVector<f64>) {
        let x = self.unlabeled.rows(0, n).into_owned();
        let y = self.ridge.predict(&x);
        (x, y)
    }
}
