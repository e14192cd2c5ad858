//! Convolution kernel families and their exact grid calculus.
//!
//! Every scalar kernel handled here is a finite sum of gamma-type atoms
//!
//! ```text
//! κ(t) = c · e^{-λt} · t^{α-1} / Γ(α),      c > 0, α ∈ (1/2, 1], λ ≥ 0,
//! ```
//!
//! which covers the constant (α = 1, λ = 0), fractional (λ = 0), exponential
//! (α = 1) and gamma families and is closed under the operations the rest of
//! the crate needs: cell integrals ∫ K, ∫ K², ∫ t·K have closed antiderivatives
//! when λ = 0 and are otherwise integrated adaptively with the t^{α-1}
//! endpoint singularity removed by substitution, and the convolution of two
//! atoms with a common decay rate is again an atom up to a constant. Kernels
//! may blow up at t = 0 (α < 1), so no routine ever evaluates a kernel at 0;
//! all grid-facing quantities are cell integrals.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::quad::{try_integrate, try_integrate_with_left_power, QuadOptions};
use crate::special::gamma_fn;
use serde::{Deserialize, Serialize};

pub use crate::special::mittag_leffler;

/// Symbolic description of a scalar or diagonal-matrix convolution kernel.
///
/// The JSON form uses a `kind` tag:
/// `{"kind":"fractional","c":1.0,"alpha":0.6}`,
/// `{"kind":"gamma","c":1.0,"alpha":0.75,"lambda":2.0}`,
/// `{"kind":"sum","components":[…]}`,
/// `{"kind":"diagonal","entries":[…]}` and so on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    /// K(t) = c.
    Constant { c: f64 },
    /// K(t) = c·t^{α-1}/Γ(α).
    Fractional { c: f64, alpha: f64 },
    /// K(t) = c·e^{-λt}.
    Exponential { c: f64, lambda: f64 },
    /// K(t) = c·e^{-λt}·t^{α-1}/Γ(α).
    #[serde(rename = "gamma")]
    GammaKernel { c: f64, alpha: f64, lambda: f64 },
    /// Pointwise sum of scalar kernels.
    Sum { components: Vec<KernelSpec> },
    /// Diagonal matrix kernel K = diag(K_1, …, K_d) with scalar entries.
    #[serde(rename = "diagonal")]
    DiagonalMatrix { entries: Vec<KernelSpec> },
}

impl KernelSpec {
    /// Checks parameter ranges: c > 0, α ∈ (1/2, 1], λ ≥ 0, and that `Sum` /
    /// `DiagonalMatrix` contain only (nonempty lists of) scalar kernels.
    ///
    /// α ≤ 1/2 is rejected because the kernel then fails to be square
    /// integrable near 0, which every resolvent and simulation formula in this
    /// crate relies on.
    pub fn validate(&self) -> Result<()> {
        fn check_c(c: f64) -> Result<()> {
            if c <= 0.0 || !c.is_finite() {
                return Err(Error::invalid(format!(
                    "kernel weight c must be positive and finite, got {c}"
                )));
            }
            Ok(())
        }
        fn check_alpha(alpha: f64) -> Result<()> {
            if alpha <= 0.5 || !alpha.is_finite() {
                return Err(Error::invalid(format!(
                    "kernel alpha must exceed 0.5 (got {alpha}): t^(alpha-1) is not square-integrable at 0 otherwise"
                )));
            }
            if alpha > 1.0 {
                return Err(Error::invalid(format!(
                    "kernel alpha must lie in (0.5, 1], got {alpha}"
                )));
            }
            Ok(())
        }
        fn check_lambda(lambda: f64) -> Result<()> {
            if lambda < 0.0 || !lambda.is_finite() {
                return Err(Error::invalid(format!(
                    "kernel decay rate lambda must be nonnegative and finite, got {lambda}"
                )));
            }
            Ok(())
        }
        match self {
            KernelSpec::Constant { c } => check_c(*c),
            KernelSpec::Fractional { c, alpha } => {
                check_c(*c)?;
                check_alpha(*alpha)
            }
            KernelSpec::Exponential { c, lambda } => {
                check_c(*c)?;
                check_lambda(*lambda)
            }
            KernelSpec::GammaKernel { c, alpha, lambda } => {
                check_c(*c)?;
                check_alpha(*alpha)?;
                check_lambda(*lambda)
            }
            KernelSpec::Sum { components } => {
                if components.is_empty() {
                    return Err(Error::invalid("sum kernel must have at least one component"));
                }
                for k in components {
                    if !k.is_scalar() {
                        return Err(Error::invalid(
                            "sum kernel components must be scalar kernels",
                        ));
                    }
                    k.validate()?;
                }
                Ok(())
            }
            KernelSpec::DiagonalMatrix { entries } => {
                if entries.is_empty() {
                    return Err(Error::invalid(
                        "diagonal kernel must have at least one entry",
                    ));
                }
                for k in entries {
                    if !k.is_scalar() {
                        return Err(Error::invalid(
                            "diagonal kernel entries must be scalar kernels",
                        ));
                    }
                    k.validate()?;
                }
                Ok(())
            }
        }
    }

    /// True for everything except `DiagonalMatrix`.
    pub fn is_scalar(&self) -> bool {
        !matches!(self, KernelSpec::DiagonalMatrix { .. })
    }

    /// State dimension the kernel acts on: entry count for diagonal kernels,
    /// 1 otherwise.
    pub fn dim(&self) -> usize {
        match self {
            KernelSpec::DiagonalMatrix { entries } => entries.len(),
            _ => 1,
        }
    }

    /// The scalar kernels on the diagonal (a one-element list for scalar
    /// kernels).
    pub fn diagonal_entries(&self) -> Vec<KernelSpec> {
        match self {
            KernelSpec::DiagonalMatrix { entries } => entries.clone(),
            other => vec![other.clone()],
        }
    }

    /// Flattens a scalar kernel into gamma-type atoms.
    pub(crate) fn gamma_atoms(&self) -> Result<Vec<GammaAtom>> {
        let mut atoms = Vec::new();
        self.push_atoms(&mut atoms)?;
        Ok(atoms)
    }

    fn push_atoms(&self, out: &mut Vec<GammaAtom>) -> Result<()> {
        match self {
            KernelSpec::Constant { c } => out.push(GammaAtom {
                c: *c,
                alpha: 1.0,
                lambda: 0.0,
            }),
            KernelSpec::Fractional { c, alpha } => out.push(GammaAtom {
                c: *c,
                alpha: *alpha,
                lambda: 0.0,
            }),
            KernelSpec::Exponential { c, lambda } => out.push(GammaAtom {
                c: *c,
                alpha: 1.0,
                lambda: *lambda,
            }),
            KernelSpec::GammaKernel { c, alpha, lambda } => out.push(GammaAtom {
                c: *c,
                alpha: *alpha,
                lambda: *lambda,
            }),
            KernelSpec::Sum { components } => {
                for k in components {
                    k.push_atoms(out)?;
                }
            }
            KernelSpec::DiagonalMatrix { .. } => {
                return Err(Error::invalid(
                    "operation requires a scalar kernel, got a diagonal matrix kernel",
                ));
            }
        }
        Ok(())
    }
}

/// One term c·e^{-λt}·t^{α-1}/Γ(α) of a scalar kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct GammaAtom {
    pub c: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl GammaAtom {
    fn norm(&self) -> f64 {
        self.c / gamma_fn(self.alpha)
    }

    pub(crate) fn eval(&self, t: f64) -> f64 {
        if self.alpha == 1.0 {
            // t^0 ≡ 1 also at t = 0.
            self.c * (-self.lambda * t).exp()
        } else {
            self.norm() * (-self.lambda * t).exp() * t.powf(self.alpha - 1.0)
        }
    }

    /// ∫_{t_j}^{t_{j+1}} κ(s) ds.
    fn m1_cell(&self, g: TimeGrid, j: usize) -> Result<f64> {
        let (t0, t1) = (g.node(j), g.node(j + 1));
        if self.lambda == 0.0 {
            if self.alpha == 1.0 {
                return Ok(self.c * g.dt());
            }
            let a = self.alpha;
            return Ok(self.c * (t1.powf(a) - t0.powf(a)) / gamma_fn(a + 1.0));
        }
        let opt = QuadOptions::with_rel_tol(1e-12);
        let r = if j == 0 {
            try_integrate_with_left_power(
                |t| self.norm() * (-self.lambda * t).exp(),
                self.alpha,
                t1,
                &opt,
            )
        } else {
            try_integrate(|t| self.eval(t), t0, t1, &opt)
        };
        r.map_err(|e| Error::numerical(format!("kernel cell integral m1[{j}]: {e}")))
    }

    /// ∫_{t_j}^{t_{j+1}} κ(s)² ds (finite because α > 1/2).
    fn m2_cell(&self, g: TimeGrid, j: usize) -> Result<f64> {
        let (t0, t1) = (g.node(j), g.node(j + 1));
        let n = self.norm();
        if self.lambda == 0.0 {
            if self.alpha == 1.0 {
                return Ok(self.c * self.c * g.dt());
            }
            let q = 2.0 * self.alpha - 1.0;
            return Ok(n * n * (t1.powf(q) - t0.powf(q)) / q);
        }
        let opt = QuadOptions::with_rel_tol(1e-12);
        let r = if j == 0 {
            try_integrate_with_left_power(
                |t| n * n * (-2.0 * self.lambda * t).exp(),
                2.0 * self.alpha - 1.0,
                t1,
                &opt,
            )
        } else {
            try_integrate(
                |t| {
                    let v = self.eval(t);
                    v * v
                },
                t0,
                t1,
                &opt,
            )
        };
        r.map_err(|e| Error::numerical(format!("kernel cell integral m2[{j}]: {e}")))
    }

    /// ∫_{t_j}^{t_{j+1}} s·κ(s) ds, the first-moment weight used by the
    /// piecewise-linear convolution rules of the resolvent solvers.
    fn mt_cell(&self, g: TimeGrid, j: usize) -> Result<f64> {
        let (t0, t1) = (g.node(j), g.node(j + 1));
        if self.lambda == 0.0 {
            let a = self.alpha;
            return Ok(self.norm() * (t1.powf(a + 1.0) - t0.powf(a + 1.0)) / (a + 1.0));
        }
        let opt = QuadOptions::with_rel_tol(1e-12);
        let r = if j == 0 {
            // t·κ(t) = t^{α-1}·(t·n·e^{-λt}): the bracket is smooth with a
            // zero at 0, so the power substitution sees a C¹ integrand.
            try_integrate_with_left_power(
                |t| self.norm() * t * (-self.lambda * t).exp(),
                self.alpha,
                t1,
                &opt,
            )
        } else {
            try_integrate(|t| t * self.eval(t), t0, t1, &opt)
        };
        r.map_err(|e| Error::numerical(format!("kernel cell integral mt[{j}]: {e}")))
    }

    /// (κ_a ∗ κ_b)(t). Closed form for a common decay rate; otherwise the
    /// integral is split at t/2 and each half gets the endpoint power removed
    /// by substitution.
    fn conv_with(&self, other: &GammaAtom, t: f64) -> Result<f64> {
        if t <= 0.0 {
            return Ok(0.0);
        }
        if self.lambda == other.lambda {
            let s = self.alpha + other.alpha;
            return Ok(
                self.c * other.c * (-self.lambda * t).exp() * t.powf(s - 1.0) / gamma_fn(s),
            );
        }
        let opt = QuadOptions::with_rel_tol(1e-12);
        let half = 0.5 * t;
        let near_b = try_integrate_with_left_power(
            |s| self.eval(t - s) * other.norm() * (-other.lambda * s).exp(),
            other.alpha,
            half,
            &opt,
        );
        let near_a = try_integrate_with_left_power(
            |s| other.eval(t - s) * self.norm() * (-self.lambda * s).exp(),
            self.alpha,
            half,
            &opt,
        );
        match (near_a, near_b) {
            (Ok(x), Ok(y)) => Ok(x + y),
            (Err(e), _) | (_, Err(e)) => Err(Error::numerical(format!(
                "kernel convolution at t = {t}: {e}"
            ))),
        }
    }
}

/// Exact cell integrals of a scalar kernel over a uniform grid:
/// `m1[j] = ∫_{t_j}^{t_{j+1}} K` and `m2[j] = ∫_{t_j}^{t_{j+1}} K²`.
#[derive(Debug, Clone)]
pub struct KernelMoments {
    pub grid: TimeGrid,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
}

/// Cell integrals ∫ K and ∫ t·K used by the piecewise-linear product
/// integration inside the resolvent machinery.
#[derive(Debug, Clone)]
pub(crate) struct CellWeights {
    pub m1: Vec<f64>,
    pub mt: Vec<f64>,
}

/// Pointwise kernel value K(t).
///
/// Kernels with a fractional atom blow up at 0, so `t = 0` is a domain error
/// for them; for bounded kernels K(0) is the finite limit from the right.
pub fn eval_kernel(k: &KernelSpec, t: f64) -> Result<f64> {
    k.validate()?;
    let atoms = k.gamma_atoms()?;
    if t < 0.0 {
        return Err(Error::invalid(format!(
            "eval_kernel: t must be positive, got {t}"
        )));
    }
    if t == 0.0 && atoms.iter().any(|a| a.alpha < 1.0) {
        return Err(Error::invalid(
            "eval_kernel: kernel is singular at t = 0 (fractional atom present)",
        ));
    }
    Ok(atoms.iter().map(|a| a.eval(t)).sum())
}

/// Exact cell integrals m1, m2 of a scalar kernel over `g`.
pub fn kernel_moments(k: &KernelSpec, g: TimeGrid) -> Result<KernelMoments> {
    k.validate()?;
    let atoms = k.gamma_atoms()?;
    let n = g.n_steps();
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    for j in 0..n {
        for a in &atoms {
            m1[j] += a.m1_cell(g, j)?;
            m2[j] += a.m2_cell(g, j)?;
        }
    }
    Ok(KernelMoments { grid: g, m1, m2 })
}

/// Cell integrals ∫ K and ∫ t·K of a scalar kernel over `g`.
pub(crate) fn cell_weights(k: &KernelSpec, g: TimeGrid) -> Result<CellWeights> {
    k.validate()?;
    let atoms = k.gamma_atoms()?;
    let n = g.n_steps();
    let mut m1 = vec![0.0; n];
    let mut mt = vec![0.0; n];
    for j in 0..n {
        for a in &atoms {
            m1[j] += a.m1_cell(g, j)?;
            mt[j] += a.mt_cell(g, j)?;
        }
    }
    Ok(CellWeights { m1, mt })
}

/// (K_a ∗ K_b)(t_i) for two scalar kernels at every node of `g`; the value at
/// t_0 = 0 is the limit 0 (the convolution of L²_loc kernels vanishes at 0).
pub(crate) fn conv_kernels_at_nodes(
    ka: &KernelSpec,
    kb: &KernelSpec,
    g: TimeGrid,
) -> Result<Vec<f64>> {
    let atoms_a = ka.gamma_atoms()?;
    let atoms_b = kb.gamma_atoms()?;
    let mut out = vec![0.0; g.n_nodes()];
    for (i, v) in out.iter_mut().enumerate().skip(1) {
        let t = g.node(i);
        for a in &atoms_a {
            for b in &atoms_b {
                *v += a.conv_with(b, t)?;
            }
        }
    }
    Ok(out)
}

/// K(0+) when finite (all atoms bounded), `None` for singular kernels.
pub(crate) fn kernel_value_at_zero(k: &KernelSpec) -> Result<Option<f64>> {
    let atoms = k.gamma_atoms()?;
    if atoms.iter().any(|a| a.alpha < 1.0) {
        Ok(None)
    } else {
        Ok(Some(atoms.iter().map(|a| a.c).sum()))
    }
}

/// The regularity index γ ∈ (0, 2] governing the kernel's local Hölder scale:
/// bounded kernels give 1, a fractional or gamma atom gives 2α − 1, and sums
/// and diagonal kernels take the worst (smallest) of their parts.
pub fn holder_exponent_estimate(k: &KernelSpec) -> f64 {
    match k {
        KernelSpec::Constant { .. } | KernelSpec::Exponential { .. } => 1.0,
        KernelSpec::Fractional { alpha, .. } | KernelSpec::GammaKernel { alpha, .. } => {
            2.0 * alpha - 1.0
        }
        KernelSpec::Sum { components } => components
            .iter()
            .map(holder_exponent_estimate)
            .fold(f64::INFINITY, f64::min),
        KernelSpec::DiagonalMatrix { entries } => entries
            .iter()
            .map(holder_exponent_estimate)
            .fold(f64::INFINITY, f64::min),
    }
}
