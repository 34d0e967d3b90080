use nalgebra::DMatrix;
use rdiff_core::linalg::{column_mean, sample_covariance};
use rdiff_core::metrics::off_support_deviation;
use rdiff_core::sampler::run_backward;
use rdiff_core::world::{make_world, SigmaSpec, WorldConfig};
use rdiff_core::{DiffusionSchedule, GaussianDesignOracle};

fn frobenius_noise(cov: &DMatrix<f64>, n: usize) -> f64 {
    // sqrt(E||C_hat - C||_F²) / ||C||_F for Gaussian rows.
    ((cov.trace().powi(2) + cov.norm_squared()) / n as f64).sqrt() / cov.norm()
}

#[test]
fn covariance_error_does_not_grow_as_eta_halves() {
    let world = make_world(
        &WorldConfig {
            ambient_dim: 4,
            latent_dim: 2,
            sigma: SigmaSpec::Diagonal { values: vec![1.0, 0.5] },
            ..WorldConfig::default()
        },
        3,
    )
    .unwrap();
    let oracle = GaussianDesignOracle::from_world(&world, world.beta_star.clone(), 0.5).unwrap();
    let (a, t0, n) = (2.0, 0.04, 8192);
    let (_, cov) = oracle.noised_conditional_law(a, t0).unwrap();
    let noise = frobenius_noise(&cov, n);
    let errors: Vec<f64> = [0.04, 0.02, 0.01, 0.005]
        .iter()
        .map(|&eta| {
            let sched = DiffusionSchedule::new(10.0, t0, eta).unwrap();
            let x = run_backward(&oracle, a, n, &sched, 11).unwrap().x;
            (sample_covariance(&x) - &cov).norm() / cov.norm()
        })
        .collect();
    for w in errors.windows(2) {
        assert!(w[1] <= w[0] + 2.0 * noise, "errors {errors:?}, noise {noise}");
    }
}

#[test]
fn off_support_deviation_scales_with_root_t0() {
    let world = make_world(&WorldConfig::default(), 5).unwrap();
    let oracle = GaussianDesignOracle::from_world(&world, world.beta_star.clone(), 0.125).unwrap();
    let dev = |t0: f64| {
        let sched = DiffusionSchedule::new(10.0, t0, 0.005).unwrap();
        off_support_deviation(&run_backward(&oracle, 1.0, 2048, &sched, 2).unwrap().x, &world)
    };
    let (small, large) = (dev(0.01), dev(0.04));
    let ratio = large / small;
    assert!((1.6..=2.5).contains(&ratio), "ratio {ratio}");
    let predicted = (0.01f64 * 48.0).sqrt();
    assert!((small - predicted).abs() <= 0.15 * predicted, "{small} vs {predicted}");
}

#[test]
fn oracle_samples_center_on_the_target_law() {
    let world = make_world(&WorldConfig { ambient_dim: 6, latent_dim: 3, ..WorldConfig::default() }, 8).unwrap();
    let oracle = GaussianDesignOracle::from_world(&world, world.beta_star.clone(), 0.4).unwrap();
    let sched = DiffusionSchedule::default();
    let x = run_backward(&oracle, 4.0, 4096, &sched, 1).unwrap().x;
    let (mean, _) = oracle.noised_conditional_law(4.0, sched.t0).unwrap();
    assert!((column_mean(&x) - mean).amax() < 0.1);
    // the reward of the generated points tracks the requested value
    let avg = world.rewards(&x).mean();
    assert!((avg - 4.0 * world.beta_star.norm_squared() / (1.0 + 0.16)).abs() < 0.3, "{avg}");
}
