//! Adaptive quadrature.
//!
//! Kernel moments, kernel–kernel convolutions, and the special-function
//! integral representations all reduce to one-dimensional integrals whose only
//! non-smoothness is a power factor t^{p-1} at an endpoint. The strategy is
//! always the same: remove the power by the substitution u = t^p (which maps
//! t^{p-1} dt to du/p) and hand the remaining smooth integrand to adaptive
//! Simpson with a Richardson acceptance test.

use crate::error::{Error, Result};
use crate::special::gamma_fn;
use statrs::function::gamma::gamma_lr;

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_depth: u32,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions {
            rel_tol: 1e-13,
            abs_tol: 1e-300,
            max_depth: 52,
        }
    }
}

impl QuadOptions {
    pub fn with_rel_tol(rel_tol: f64) -> Self {
        QuadOptions {
            rel_tol,
            ..Default::default()
        }
    }
}

/// ∫_a^b f(t) dt by adaptive Simpson with Richardson extrapolation on accept.
///
/// The integrand must be finite on [a, b]. On tolerance exhaustion at maximum
/// depth the local Richardson value is used, so the routine is total; with the
/// default depth of 52 this only happens for integrands far outside this
/// crate's usage.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, opt: &QuadOptions) -> f64 {
    integrate_impl(&f, a, b, opt).0
}

/// Like [`integrate`], but reports tolerance exhaustion at maximum depth as a
/// numerical error instead of silently accepting the local estimate.
pub fn try_integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, opt: &QuadOptions) -> Result<f64> {
    match integrate_impl(&f, a, b, opt) {
        (v, true) => Ok(v),
        (v, false) => Err(Error::numerical(format!(
            "adaptive quadrature on [{a}, {b}] did not converge (estimate {v:.6e})"
        ))),
    }
}

fn integrate_impl<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, opt: &QuadOptions) -> (f64, bool) {
    if a == b {
        return (0.0, true);
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);

    // A crude magnitude scale so the relative tolerance has something to act
    // on; refined estimates only shrink the accepted error further.
    let mut scale = whole.abs();
    for k in 1..8 {
        let t = a + (b - a) * (k as f64) / 8.0;
        scale = scale.max(f(t).abs() * (b - a));
    }
    let eps = (opt.rel_tol * scale).max(opt.abs_tol);
    let mut converged = true;
    let v = simpson_rec(
        f,
        a,
        b,
        fa,
        fm,
        fb,
        whole,
        eps,
        opt.max_depth,
        &mut converged,
    );
    (v, converged)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    eps: f64,
    depth: u32,
    converged: &mut bool,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * eps {
        left + right + delta / 15.0
    } else if depth == 0 {
        *converged = false;
        left + right + delta / 15.0
    } else {
        simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1, converged)
            + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1, converged)
    }
}

/// ∫_0^b t^{p-1} f(t) dt for p > 0 with f smooth on [0, b].
///
/// For p < 1 the substitution u = t^p turns the integrand into f(u^{1/p})/p,
/// which is continuous with bounded derivative at 0; for p ≥ 1 the integrand
/// is already continuous and is integrated directly.
pub fn integrate_with_left_power<F: Fn(f64) -> f64>(
    f: F,
    p: f64,
    b: f64,
    opt: &QuadOptions,
) -> f64 {
    debug_assert!(p > 0.0 && b >= 0.0);
    if b == 0.0 {
        return 0.0;
    }
    if p < 1.0 {
        let inv_p = 1.0 / p;
        integrate(|u| f(u.powf(inv_p)) * inv_p, 0.0, b.powf(p), opt)
    } else if p == 1.0 {
        integrate(f, 0.0, b, opt)
    } else {
        integrate(|t| t.powf(p - 1.0) * f(t), 0.0, b, opt)
    }
}

/// Convergence-checked form of [`integrate_with_left_power`].
pub fn try_integrate_with_left_power<F: Fn(f64) -> f64>(
    f: F,
    p: f64,
    b: f64,
    opt: &QuadOptions,
) -> Result<f64> {
    debug_assert!(p > 0.0 && b >= 0.0);
    if b == 0.0 {
        return Ok(0.0);
    }
    if p < 1.0 {
        let inv_p = 1.0 / p;
        try_integrate(|u| f(u.powf(inv_p)) * inv_p, 0.0, b.powf(p), opt)
    } else if p == 1.0 {
        try_integrate(f, 0.0, b, opt)
    } else {
        try_integrate(|t| t.powf(p - 1.0) * f(t), 0.0, b, opt)
    }
}

/// ∫_a^b t^{q-1} e^{-mu·t} dt for q > 0, mu ≥ 0, 0 ≤ a < b, in closed form
/// through the regularized lower incomplete gamma function.
pub fn power_exp_integral(q: f64, mu: f64, a: f64, b: f64) -> f64 {
    debug_assert!(q > 0.0 && mu >= 0.0 && a >= 0.0 && b >= a);
    if mu == 0.0 {
        (b.powf(q) - a.powf(q)) / q
    } else {
        let lower = if a == 0.0 { 0.0 } else { gamma_lr(q, mu * a) };
        gamma_fn(q) / mu.powf(q) * (gamma_lr(q, mu * b) - lower)
    }
}
