//! Conditional generation by Euler-Maruyama discretization of the backward
//! SDE, started from `N(0, I_D)` at time `T` and stopped at `t0`:
//!
//! ```text
//! x <- x + dt (x/2 + s(x, a, t)) + sqrt(dt) eps,   t <- t - dt
//! ```
//!
//! The score is evaluated at the left endpoint of each backward step (the
//! larger forward time). Rows are generated in fixed chunks of
//! [`CHUNK_ROWS`]; chunk `c` draws from `derive_seed(seed, c)`, so the output
//! does not depend on how chunks are scheduled.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal_matrix, rng_from_seed};
use crate::schedule::DiffusionSchedule;
use crate::score::ScoreFunction;

pub const CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleBatch {
    /// `n x D` generated points.
    pub x: DMatrix<f64>,
    /// Conditioning value.
    pub a: f64,
    pub schedule: DiffusionSchedule,
    pub score_identity: String,
    pub seed: u64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

fn run_chunk<S: ScoreFunction + ?Sized>(
    score: &S,
    a: f64,
    rows: usize,
    schedule: &DiffusionSchedule,
    steps: &[f64],
    seed: u64,
) -> Result<DMatrix<f64>> {
    let big_d = score.dim();
    let mut rng = rng_from_seed(seed);
    let mut x = normal_matrix(&mut rng, rows, big_d);
    let mut t = schedule.t_end;
    for (k, &dt) in steps.iter().enumerate() {
        let s = score.score_batch(&x, a, t)?;
        let noise = normal_matrix(&mut rng, rows, big_d);
        let decay = 1.0 + 0.5 * dt;
        let sq = dt.sqrt();
        for ((xv, sv), nv) in x.iter_mut().zip(s.iter()).zip(noise.iter()) {
            *xv = decay * *xv + dt * sv + sq * nv;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplerDiverged { step: k, time: t });
        }
        t -= dt;
    }
    Ok(x)
}

/// Generates `n` points conditioned on the label value `a`.
pub fn run_backward<S: ScoreFunction + ?Sized>(
    score: &S,
    a: f64,
    n: usize,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<SampleBatch> {
    schedule.validate()?;
    if n == 0 {
        return Err(Error::Validation("sample count must be >= 1".into()));
    }
    let steps = schedule.step_sizes();
    let big_d = score.dim();
    let mut x = DMatrix::zeros(n, big_d);
    for (c, start) in (0..n).step_by(CHUNK_ROWS).enumerate() {
        let rows = CHUNK_ROWS.min(n - start);
        let chunk = run_chunk(score, a, rows, schedule, &steps, derive_seed(seed, c as u64))?;
        x.rows_mut(start, rows).copy_from(&chunk);
    }
    Ok(SampleBatch { x, a, schedule: *schedule, score_identity: score.identity(), seed })
}
