//! Adaptive Simpson quadrature and finite-difference helpers. These are the
//! independent references for the closed-form score; nothing here uses the
//! formulas in [`crate::oracle`].

fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adapt<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(fa, flm, fm, a, m);
    let right = simpson(fm, frm, fb, m, b);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adapt(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + adapt(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson integral of `f` over `[a, b]` to absolute tolerance
/// `tol`. The interval is first split into `panels` equal pieces so narrow
/// peaks are not missed by the initial coarse estimate.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64, panels: usize) -> f64 {
    let width = (b - a) / panels as f64;
    (0..panels)
        .map(|k| {
            let (lo, hi) = (a + width * k as f64, a + width * (k + 1) as f64);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            adapt(&f, lo, hi, fa, fm, fb, simpson(fa, fm, fb, lo, hi), tol / panels as f64, 40)
        })
        .sum()
}

/// `log ∫ exp(g(z)) dz` over `[a, b]`, shifting by the maximum of `g` on a
/// grid so the integrand stays in floating-point range.
pub fn log_integral_exp<G: Fn(f64) -> f64>(g: G, a: f64, b: f64, rel_tol: f64) -> f64 {
    let grid = 4000;
    let shift = (0..=grid)
        .map(|k| g(a + (b - a) * k as f64 / grid as f64))
        .fold(f64::NEG_INFINITY, f64::max);
    let integral = adaptive_simpson(|z| (g(z) - shift).exp(), a, b, rel_tol, 64);
    shift + integral.ln()
}

/// Central difference of `f` at `x` with one Richardson extrapolation step.
pub fn richardson_derivative<F: Fn(f64) -> f64>(f: F, x: f64, step: f64) -> f64 {
    let d = |s: f64| (f(x + s) - f(x - s)) / (2.0 * s);
    (4.0 * d(0.5 * step) - d(step)) / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_integral() {
        let v = adaptive_simpson(|z| (-0.5 * z * z).exp(), -12.0, 12.0, 1e-13, 16);
        assert!((v - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-11);
    }

    #[test]
    fn narrow_peak_in_log_space() {
        // ∫ exp(-(z-0.3)²/(2·1e-4) + 800) dz = sqrt(2π·1e-4)·e^800
        let l = log_integral_exp(|z| -(z - 0.3).powi(2) / 2e-4 + 800.0, -10.0, 10.0, 1e-12);
        let expect = 800.0 + (2.0 * std::f64::consts::PI * 1e-4).sqrt().ln();
        assert!((l - expect).abs() < 1e-9);
    }

    #[test]
    fn derivative_of_sine() {
        let d = richardson_derivative(f64::sin, 0.7, 1e-3);
        assert!((d - 0.7f64.cos()).abs() < 1e-12);
    }
}
