//! Evaluation quantities for generated populations: subspace recovery,
//! off-support deviation, suboptimality and its decomposition, moment
//! discrepancies, class-restricted distribution shift and reward histograms.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::oracle::GaussianDesignOracle;
use crate::rng::{normal_vector, rng_from_seed};
use crate::ridge::RidgeEstimate;
use crate::schedule::{alpha, h, DiffusionSchedule};
use crate::score::ScoreFunction;
use crate::world::SubspaceWorld;

/// `||V Vᵀ - A Aᵀ||_F²`, in `[0, 2d]` for orthonormal inputs.
pub fn subspace_angle(v: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<f64> {
    if v.shape() != a.shape() {
        return Err(Error::Dimension(format!(
            "subspace bases differ in shape: {:?} vs {:?}",
            v.shape(),
            a.shape()
        )));
    }
    // ||VVᵀ - AAᵀ||² = ||VᵀV||² + ||AᵀA||² - 2||VᵀA||², all d x d.
    let vv = (v.transpose() * v).norm_squared();
    let aa = (a.transpose() * a).norm_squared();
    // Summed in sorted order so that swapping the arguments is exact.
    let mut cross: Vec<f64> = (v.transpose() * a).iter().map(|c| c * c).collect();
    cross.sort_by(f64::total_cmp);
    let va: f64 = cross.iter().sum();
    Ok((vv + aa - 2.0 * va).max(0.0))
}

/// Mean distance of the rows of `x` from `col(A)`.
pub fn off_support_deviation(x: &DMatrix<f64>, world: &SubspaceWorld) -> f64 {
    let perp = x - (x * &world.a) * world.a.transpose();
    perp.row_iter().map(|r| r.norm()).sum::<f64>() / x.nrows() as f64
}

/// `(a - mean reward, mean reward)`.
pub fn suboptimality(x: &DMatrix<f64>, world: &SubspaceWorld, a: f64) -> (f64, f64) {
    let avg = world.rewards(x).mean();
    (a - avg, avg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuboptDecomposition {
    /// Reward-estimation error under the target law.
    pub e1: f64,
    /// On-support gap between target and generated populations.
    pub e2: f64,
    /// Off-support reward magnitude of the generated population.
    pub e3: f64,
}

impl SuboptDecomposition {
    pub fn total(&self) -> f64 {
        self.e1 + self.e2 + self.e3
    }
}

/// Splits the regret of a generated batch into its three sources. The target
/// law is represented by `n_ref` draws of `A z` with `z | y_hat = a`.
pub fn subopt_decomposition(
    x: &DMatrix<f64>,
    world: &SubspaceWorld,
    est: &RidgeEstimate,
    oracle: &GaussianDesignOracle,
    a: f64,
    n_ref: usize,
    seed: u64,
) -> Result<SuboptDecomposition> {
    if n_ref == 0 {
        return Err(Error::Validation("n_ref must be >= 1".into()));
    }
    let reference = oracle.sample_conditional(a, n_ref, seed);
    Ok(subopt_decomposition_with_reference(x, &reference, world, est))
}

/// [`subopt_decomposition`] against an explicit reference sample.
pub fn subopt_decomposition_with_reference(
    x: &DMatrix<f64>,
    reference: &DMatrix<f64>,
    world: &SubspaceWorld,
    est: &RidgeEstimate,
) -> SuboptDecomposition {
    let diff = &est.theta_hat - &world.theta_star;
    let e1 = (reference * &diff).abs().mean();

    let ref_on = (reference * &world.a * &world.beta_star).mean();
    let gen_on = (x * &world.a * &world.beta_star).mean();
    let e2 = (ref_on - gen_on).abs();

    let perp = x - (x * &world.a) * world.a.transpose();
    let e3 = world.offsupport_coeff * perp.row_iter().map(|r| r.norm_squared()).sum::<f64>() / x.nrows() as f64;
    SuboptDecomposition { e1, e2, e3 }
}

/// `(||m̂ - mean||₂, ||Ĉ - cov||_F / ||cov||_F)`.
pub fn moment_discrepancy(x: &DMatrix<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> (f64, f64) {
    let m = linalg::column_mean(x);
    let c = linalg::sample_covariance(x);
    ((m - mean).norm(), (c - cov).norm() / cov.norm())
}

/// Rotation `U` minimizing `||V U - A||_F` over orthogonal `d x d` matrices.
pub fn procrustes_align(v: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if v.shape() != a.shape() {
        return Err(Error::Dimension("procrustes inputs differ in shape".into()));
    }
    let svd = (v.transpose() * a).svd(true, true);
    let (p, qt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    Ok(p * qt)
}

/// Latent coordinates `x V U` of a generated batch, comparable with the
/// oracle latent law after Procrustes alignment of `V` to `A`.
pub fn latent_pushforward(x: &DMatrix<f64>, v: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    x * v * u
}

/// Latent law at time `t0` of the target population: `(alpha mu, alpha² Gamma + h I)`.
pub fn latent_law_at(oracle: &GaussianDesignOracle, a: f64, t: f64) -> (DVector<f64>, DMatrix<f64>) {
    let (mu, gamma) = oracle.conditional_latent_law(a);
    let d = mu.len();
    let (al, ht) = (alpha(t), h(t));
    (mu * al, gamma * (al * al) + DMatrix::identity(d, d) * ht)
}

/// Rows with labels.
#[derive(Debug, Clone)]
pub struct LabeledSamples {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

type LossFn<'a> = Box<dyn Fn(&DVector<f64>, f64) -> f64 + 'a>;

/// A named nonnegative per-example loss `l(x, y)`.
pub struct NamedLoss<'a> {
    pub name: String,
    pub eval: LossFn<'a>,
}

impl<'a> NamedLoss<'a> {
    pub fn new(name: impl Into<String>, eval: impl Fn(&DVector<f64>, f64) -> f64 + 'a) -> Self {
        Self { name: name.into(), eval: Box::new(eval) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftEstimate {
    pub value: f64,
    pub argmax: String,
    pub ratios: Vec<(String, f64)>,
}

fn mean_loss(samples: &LabeledSamples, loss: &NamedLoss<'_>) -> f64 {
    let n = samples.x.nrows();
    (0..n).map(|i| (loss.eval)(&samples.x.row(i).transpose(), samples.y[i])).sum::<f64>() / n as f64
}

/// `max_l E_{P1}[l] / E_{P2}[l]` over a finite loss family.
pub fn distribution_shift_mc(p1: &LabeledSamples, p2: &LabeledSamples, losses: &[NamedLoss<'_>]) -> Result<ShiftEstimate> {
    if losses.is_empty() {
        return Err(Error::Validation("loss family is empty".into()));
    }
    let mut ratios = Vec::with_capacity(losses.len());
    for l in losses {
        let num = mean_loss(p1, l);
        let den = mean_loss(p2, l);
        if !(den > 0.0) {
            return Err(Error::DegenerateShift(l.name.clone()));
        }
        ratios.push((l.name.clone(), num / den));
    }
    let (argmax, value) = ratios
        .iter()
        .cloned()
        .fold((String::new(), f64::NEG_INFINITY), |best, r| if r.1 > best.1 { r } else { best });
    Ok(ShiftEstimate { value, argmax, ratios })
}

/// Per-example denoising loss of `score`, averaged over `draws` fixed
/// `(t, eps)` pairs shared by every example.
pub fn denoising_loss_evaluator<'a, S: ScoreFunction + ?Sized>(
    name: impl Into<String>,
    score: &'a S,
    schedule: &DiffusionSchedule,
    draws: usize,
    seed: u64,
) -> NamedLoss<'a> {
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    let big_d = score.dim();
    let noise: Vec<(f64, DVector<f64>)> = (0..draws)
        .map(|_| {
            let t = if schedule.t_end > schedule.t0 { rng.random_range(schedule.t0..schedule.t_end) } else { schedule.t0 };
            (t, normal_vector(&mut rng, big_d))
        })
        .collect();
    NamedLoss::new(name, move |x: &DVector<f64>, y: f64| {
        noise
            .iter()
            .map(|(t, eps)| {
                let (al, ht) = (alpha(*t), h(*t));
                let xn = x * al + eps * ht.sqrt();
                let target = -eps / ht.sqrt();
                score.score(&xn, y, *t).map_or(f64::INFINITY, |s| (target - s).norm_squared())
            })
            .sum::<f64>()
            / noise.len() as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

/// Uniform-bin histogram of `values` over `range` (default: their own
/// `[min, max]`). Values outside the range are clamped into the end bins.
pub fn histogram(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Validation("histogram needs at least one bin".into()));
    }
    if values.is_empty() {
        return Err(Error::Validation("histogram of an empty sample".into()));
    }
    let (mut lo, mut hi) = range.unwrap_or_else(|| {
        values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)))
    });
    if hi <= lo {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Histogram { edges, counts, mean, std: var.sqrt() })
}

/// Histogram of the true rewards of a generated batch.
pub fn reward_histogram(x: &DMatrix<f64>, world: &SubspaceWorld, bins: usize, range: Option<(f64, f64)>) -> Result<Histogram> {
    let r = world.rewards(x);
    histogram(r.as_slice(), bins, range)
}

/// Spearman rank correlation, averaging ranks over ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Everything measured for one `(a, seed)` cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub a: f64,
    pub seed: u64,
    pub n: usize,
    pub subspace_angle: f64,
    pub off_support_mean: f64,
    pub avg_reward: f64,
    pub subopt: f64,
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    /// Class-restricted shift estimated by Monte Carlo over the loss family.
    pub distro_shift: f64,
    pub distro_shift_argmax: String,
    /// Known-covariance closed-form surrogate `sqrt(M(a) / Tr Sigma)`.
    pub distro_shift_surrogate: f64,
    pub moment_mean_gap: f64,
    pub moment_cov_gap: f64,
    pub latent_mean_gap: f64,
    pub latent_cov_gap: f64,
    pub histogram: Histogram,
}

impl MetricsReport {
    pub fn check(&self) -> Result<()> {
        if self.subopt != self.a - self.avg_reward {
            return Err(Error::Validation("subopt must equal a - avg_reward".into()));
        }
        let vals = [
            self.subspace_angle,
            self.off_support_mean,
            self.avg_reward,
            self.subopt,
            self.e1,
            self.e2,
            self.e3,
            self.distro_shift,
            self.distro_shift_surrogate,
            self.moment_mean_gap,
            self.moment_cov_gap,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("metrics report contains non-finite values".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, rng_from_seed};
    use crate::world::{make_world, sample_orthonormal, WorldConfig};

    #[test]
    fn angle_of_identical_and_orthogonal_spans() {
        let a = sample_orthonormal(64, 16, 1).unwrap();
        assert!(subspace_angle(&a, &a).unwrap() < 1e-12);
        let full = sample_orthonormal(64, 32, 2).unwrap();
        let (p, q) = (full.columns(0, 16).into_owned(), full.columns(16, 16).into_owned());
        assert!((subspace_angle(&p, &q).unwrap() - 32.0).abs() < 1e-10);
    }

    #[test]
    fn angle_shape_mismatch() {
        let a = sample_orthonormal(6, 2, 1).unwrap();
        let b = sample_orthonormal(6, 3, 1).unwrap();
        assert!(matches!(subspace_angle(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn angle_matches_direct_frobenius() {
        let a = sample_orthonormal(10, 3, 1).unwrap();
        let v = sample_orthonormal(10, 3, 2).unwrap();
        let direct = (linalg::projector(&v) - linalg::projector(&a)).norm_squared();
        assert!((subspace_angle(&v, &a).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_rotation_invariant() {
        let a = sample_orthonormal(12, 4, 1).unwrap();
        let v = sample_orthonormal(12, 4, 2).unwrap();
        let q = sample_orthonormal(4, 4, 3).unwrap();
        let base = subspace_angle(&v, &a).unwrap();
        assert_eq!(base, subspace_angle(&a, &v).unwrap());
        assert!((subspace_angle(&(&v * q), &a).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn on_support_batch_has_no_deviation() {
        let w = make_world(&WorldConfig { ambient_dim: 8, latent_dim: 3, ..Default::default() }, 1).unwrap();
        let x = w.sample_latent(50, 2) * w.a.transpose();
        assert!(off_support_deviation(&x, &w) < 1e-12);
        let est = RidgeEstimate { theta_hat: w.theta_star.clone(), lambda: 1.0, n2: 1, sigma_hat_lambda: DMatrix::identity(8, 8) };
        let reference = w.sample_latent(50, 3) * w.a.transpose();
        let dec = subopt_decomposition_with_reference(&x, &reference, &w, &est);
        assert_eq!(dec.e1, 0.0);
        assert!(dec.e3 < 1e-20);
    }

    #[test]
    fn subopt_definition_and_shift() {
        let w = make_world(&WorldConfig { ambient_dim: 6, latent_dim: 2, offsupport_coeff: 0.0, ..Default::default() }, 4).unwrap();
        let x = w.sample_latent(100, 2) * w.a.transpose();
        let m = (&x * &w.theta_star).mean();
        let (s, avg) = suboptimality(&x, &w, 3.0);
        assert!((avg - m).abs() < 1e-12);
        assert_eq!(s, 3.0 - avg);
        // Shifting every point along theta* by c raises rewards by c.
        let mut shifted = x.clone();
        for mut row in shifted.row_iter_mut() {
            row += w.theta_star.transpose() * 0.7;
        }
        let (s2, avg2) = suboptimality(&shifted, &w, 3.0);
        assert!((avg2 - avg - 0.7).abs() < 1e-12);
        assert!((s2 - s + 0.7).abs() < 1e-12);
    }

    #[test]
    fn e1_vanishes_only_for_correct_on_support_estimate() {
        let w = make_world(&WorldConfig { ambient_dim: 6, latent_dim: 2, ..Default::default() }, 4).unwrap();
        let x = w.sample_latent(100, 2) * w.a.transpose();
        let reference = w.sample_latent(100, 3) * w.a.transpose();
        // Error orthogonal to the support is invisible on supported data.
        let mut off = DVector::from_element(6, 1.0);
        off -= &w.a * (w.a.transpose() * &off);
        let mut est = RidgeEstimate { theta_hat: &w.theta_star + &off, lambda: 1.0, n2: 1, sigma_hat_lambda: DMatrix::identity(6, 6) };
        assert!(subopt_decomposition_with_reference(&x, &reference, &w, &est).e1 < 1e-12);
        est.theta_hat = &w.theta_star + &w.a.column(0) * 0.1;
        assert!(subopt_decomposition_with_reference(&x, &reference, &w, &est).e1 > 1e-3);
    }

    #[test]
    fn moment_discrepancy_of_zeros_against_standard_normal() {
        let x = DMatrix::zeros(10, 3);
        let (mg, cg) = moment_discrepancy(&x, &DVector::zeros(3), &DMatrix::identity(3, 3));
        assert_eq!(mg, 0.0);
        assert!((cg - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shift_is_one_on_identical_samples() {
        let mut rng = rng_from_seed(1);
        let p = LabeledSamples { x: normal_matrix(&mut rng, 200, 3), y: normal_vector(&mut rng, 200) };
        let losses = [
            NamedLoss::new("sq", |x: &DVector<f64>, _| x.norm_squared()),
            NamedLoss::new("abs-y", |_: &DVector<f64>, y| y.abs() + 0.1),
        ];
        let s = distribution_shift_mc(&p, &p, &losses).unwrap();
        assert_eq!(s.value, 1.0);
        assert!(s.ratios.iter().all(|(_, r)| *r == 1.0));
    }

    #[test]
    fn shift_of_scaled_gaussian_is_four() {
        let mut rng = rng_from_seed(2);
        let base = normal_matrix(&mut rng, 100_000, 3);
        let p2 = LabeledSamples { x: base.clone(), y: DVector::zeros(100_000) };
        let p1 = LabeledSamples { x: normal_matrix(&mut rng, 100_000, 3) * 2.0, y: DVector::zeros(100_000) };
        let losses = [NamedLoss::new("sq", |x: &DVector<f64>, _| x.norm_squared())];
        let s = distribution_shift_mc(&p1, &p2, &losses).unwrap();
        // Relative MC error of each mean is about sqrt(2/3)/sqrt(1e5) < 0.3%.
        assert!((s.value - 4.0).abs() < 0.05, "{}", s.value);
        assert_eq!(s.argmax, "sq");
    }

    #[test]
    fn zero_denominator_is_degenerate() {
        let p = LabeledSamples { x: DMatrix::zeros(4, 2), y: DVector::zeros(4) };
        let losses = [NamedLoss::new("sq", |x: &DVector<f64>, _| x.norm_squared())];
        assert!(matches!(distribution_shift_mc(&p, &p, &losses), Err(Error::DegenerateShift(_))));
    }

    #[test]
    fn histogram_basics() {
        let h1 = histogram(&[2.5], 50, None).unwrap();
        assert_eq!(h1.counts.iter().sum::<usize>(), 1);
        assert_eq!(h1.counts.iter().filter(|&&c| c > 0).count(), 1);
        let mut rng = rng_from_seed(3);
        let v = normal_vector(&mut rng, 100_000);
        let h = histogram(v.as_slice(), 50, None).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 100_000);
        assert!(h.edges.windows(2).all(|w| w[1] > w[0]));
        assert!(h.mean.abs() < 0.02);
        assert!(histogram(&[1.0], 0, None).is_err());
    }

    #[test]
    fn procrustes_recovers_rotation() {
        let a = sample_orthonormal(9, 3, 1).unwrap();
        let q = sample_orthonormal(3, 3, 2).unwrap();
        let v = &a * q.transpose();
        let u = procrustes_align(&v, &a).unwrap();
        assert!(linalg::max_abs_diff(&(v * u), &a) < 1e-10);
    }

    #[test]
    fn spearman_extremes() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
