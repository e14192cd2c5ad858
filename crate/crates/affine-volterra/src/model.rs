//! Affine parameter sets and state spaces.
//!
//! The coefficients of the stochastic Volterra equation are affine maps
//!
//! ```text
//! a(x) = A⁰ + x₁A¹ + … + x_d A^d,       b(x) = b⁰ + Bx,
//! ```
//!
//! with a(x) the diffusion square σ(x)σ(x)ᵀ. Which parameter combinations are
//! admissible depends on the state space: the whole of ℝ^d forces a constant
//! diffusion, the nonnegative orthant requires the square-root structure
//! a(x) = diag(σ₁²x₁, …, σ_d²x_d) with inward-pointing drift, and the
//! Heston-type spaces fix the matrices up to the scalar parameters
//! (κ, θ, σ, ρ). The quadratic map A(u) = (uA¹uᵀ, …, uA^duᵀ) entering the
//! Riccati equations uses the ordinary (not conjugate) transpose on complex
//! rows.

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Domain on which the affine model lives; decides which parameter
/// combinations are admissible and which diffusion factorization the
/// simulation scheme uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSpace {
    /// All of ℝ^d; the diffusion must be constant (A^i = 0 for i ≥ 1).
    RealSpace,
    /// The nonnegative orthant ℝ₊^d with square-root diffusion
    /// a(x) = diag(σ₁²x₁, …, σ_d²x_d).
    Orthant,
    /// ℝ × ℝ₊ with the log-price/variance structure: A⁰ = A¹ = 0,
    /// A² = [[1, ρσ], [ρσ, σ²]], b⁰ = (0, κθ), B = [[0, −1/2], [0, −κ]].
    HestonSpace,
    /// ℝ × ℝ₊ × ℝ₊ for the three-factor variant in which the variance
    /// feeding the price is itself smoothed by a second kernel:
    /// A² = diag(0, σ², 0), A³ = diag(1, 0, 0).
    LiftedHestonSpace,
}

/// Parameters (A⁰..A^d, b⁰, B) of the affine specification together with the
/// state space they are meant for.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub d: usize,
    /// A⁰, A¹, …, A^d (d + 1 symmetric d×d matrices).
    pub a: Vec<DMatrix<f64>>,
    pub b0: DVector<f64>,
    /// Drift matrix B whose columns are b¹..b^d.
    pub big_b: DMatrix<f64>,
    pub state_space: StateSpace,
}

impl AffineParams {
    /// Builds a parameter set, rejecting shape mismatches outright;
    /// mathematical admissibility is the business of [`validate`].
    ///
    /// [`validate`]: AffineParams::validate
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b0: DVector<f64>,
        big_b: DMatrix<f64>,
        state_space: StateSpace,
    ) -> Result<Self> {
        let d = b0.len();
        if d == 0 {
            return Err(Error::invalid("affine parameters need dimension d ≥ 1"));
        }
        if a.len() != d + 1 {
            return Err(Error::invalid(format!(
                "need d + 1 = {} diffusion matrices A⁰..A^d, got {}",
                d + 1,
                a.len()
            )));
        }
        for (i, m) in a.iter().enumerate() {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::invalid(format!(
                    "A^{i} must be {d}×{d}, got {}×{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if big_b.nrows() != d || big_b.ncols() != d {
            return Err(Error::invalid(format!(
                "B must be {d}×{d}, got {}×{}",
                big_b.nrows(),
                big_b.ncols()
            )));
        }
        Ok(AffineParams {
            d,
            a,
            b0,
            big_b,
            state_space,
        })
    }

    /// Exhaustive admissibility report; an empty list means the parameters
    /// satisfy every condition of their state space.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let d = self.d;
        for (i, m) in self.a.iter().enumerate() {
            if !is_symmetric(m) {
                out.push(format!("A^{i} is not symmetric"));
            }
        }
        let finite = self.a.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.b0.iter().all(|v| v.is_finite())
            && self.big_b.iter().all(|v| v.is_finite());
        if !finite {
            out.push("parameters contain non-finite entries".to_string());
            return out;
        }
        match self.state_space {
            StateSpace::RealSpace => {
                if !is_psd(&self.a[0]) {
                    out.push("a(x) must be psd on E: A⁰ is not positive semidefinite".to_string());
                }
                for i in 1..=d {
                    if self.a[i].iter().any(|&v| v != 0.0) {
                        out.push(format!(
                            "a(x) must be psd on E: A^{i} ≠ 0 makes a(x) indefinite for some x ∈ ℝ^d"
                        ));
                    }
                }
            }
            StateSpace::Orthant => {
                if self.a[0].iter().any(|&v| v != 0.0) {
                    out.push("orthant model requires A⁰ = 0".to_string());
                }
                for i in 1..=d {
                    for r in 0..d {
                        for c in 0..d {
                            let v = self.a[i][(r, c)];
                            if r == i - 1 && c == i - 1 {
                                if v <= 0.0 {
                                    out.push(format!(
                                        "orthant model requires A^{i}[{r},{c}] = σ_{i}² > 0, got {v}"
                                    ));
                                }
                            } else if v != 0.0 {
                                out.push(format!(
                                    "orthant model requires A^{i} to vanish off the ({},{}) entry",
                                    i - 1,
                                    i - 1
                                ));
                            }
                        }
                    }
                }
                for (r, v) in self.b0.iter().enumerate() {
                    if *v < 0.0 {
                        out.push(format!("orthant drift requires b⁰_{r} ≥ 0, got {v}"));
                    }
                }
                for r in 0..d {
                    for c in 0..d {
                        if r != c && self.big_b[(r, c)] < 0.0 {
                            out.push(format!(
                                "off-diagonal B negative: B[{r},{c}] = {} violates B_ij ≥ 0 for i ≠ j",
                                self.big_b[(r, c)]
                            ));
                        }
                    }
                }
            }
            StateSpace::HestonSpace => {
                if d != 2 {
                    out.push(format!("Heston structure requires d = 2, got {d}"));
                    return out;
                }
                if self.a[0].iter().any(|&v| v != 0.0) || self.a[1].iter().any(|&v| v != 0.0) {
                    out.push("Heston structure requires A⁰ = A¹ = 0".to_string());
                }
                let a2 = &self.a[2];
                if a2[(0, 0)] != 1.0 {
                    out.push(format!(
                        "Heston structure requires A²[0,0] = 1, got {}",
                        a2[(0, 0)]
                    ));
                }
                let s2 = a2[(1, 1)];
                let rs = a2[(0, 1)];
                if s2 < 0.0 {
                    out.push(format!("Heston structure requires A²[1,1] = σ² ≥ 0, got {s2}"));
                } else if rs * rs > s2 * (1.0 + 1e-12) + 1e-300 {
                    out.push(format!(
                        "Heston structure requires |A²[0,1]| = |ρ|σ ≤ σ, got ρσ = {rs} with σ² = {s2}"
                    ));
                }
                if self.b0[0] != 0.0 || self.b0[1] < 0.0 {
                    out.push(format!(
                        "Heston structure requires b⁰ = (0, κθ) with κθ ≥ 0, got ({}, {})",
                        self.b0[0], self.b0[1]
                    ));
                }
                let b = &self.big_b;
                if b[(0, 0)] != 0.0 || b[(1, 0)] != 0.0 || b[(0, 1)] != -0.5 {
                    out.push(
                        "Heston structure requires B = [[0, −1/2], [0, −κ]] in the first column and row"
                            .to_string(),
                    );
                }
                if b[(1, 1)] > 0.0 {
                    out.push(format!(
                        "Heston structure requires B[1,1] = −κ ≤ 0, got {}",
                        b[(1, 1)]
                    ));
                }
            }
            StateSpace::LiftedHestonSpace => {
                if d != 3 {
                    out.push(format!("lifted Heston structure requires d = 3, got {d}"));
                    return out;
                }
                if self.a[0].iter().any(|&v| v != 0.0) || self.a[1].iter().any(|&v| v != 0.0) {
                    out.push("lifted Heston structure requires A⁰ = A¹ = 0".to_string());
                }
                let want2 = |r: usize, c: usize| if r == 1 && c == 1 { self.a[2][(1, 1)] } else { 0.0 };
                for r in 0..3 {
                    for c in 0..3 {
                        if self.a[2][(r, c)] != want2(r, c) {
                            out.push("lifted Heston structure requires A² = diag(0, σ², 0)".to_string());
                        }
                        let w3 = if r == 0 && c == 0 { 1.0 } else { 0.0 };
                        if self.a[3][(r, c)] != w3 {
                            out.push("lifted Heston structure requires A³ = diag(1, 0, 0)".to_string());
                        }
                    }
                }
                if self.a[2][(1, 1)] < 0.0 {
                    out.push(format!(
                        "lifted Heston structure requires A²[1,1] = σ² ≥ 0, got {}",
                        self.a[2][(1, 1)]
                    ));
                }
                if self.b0[0] != 0.0 || self.b0[1] < 0.0 || self.b0[2] != 0.0 {
                    out.push(format!(
                        "lifted Heston structure requires b⁰ = (0, κθ, 0) with κθ ≥ 0, got ({}, {}, {})",
                        self.b0[0], self.b0[1], self.b0[2]
                    ));
                }
                let b = &self.big_b;
                let fixed = [
                    (0usize, 0usize, 0.0),
                    (0, 1, 0.0),
                    (0, 2, -0.5),
                    (1, 0, 0.0),
                    (1, 2, 0.0),
                    (2, 0, 0.0),
                    (2, 1, 1.0),
                    (2, 2, 0.0),
                ];
                for (r, c, w) in fixed {
                    if b[(r, c)] != w {
                        out.push(format!(
                            "lifted Heston structure requires B[{r},{c}] = {w}, got {}",
                            b[(r, c)]
                        ));
                    }
                }
                if b[(1, 1)] > 0.0 {
                    out.push(format!(
                        "lifted Heston structure requires B[1,1] = −κ ≤ 0, got {}",
                        b[(1, 1)]
                    ));
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.iter().fold(0.0_f64, |s, v| s.max(v.abs())).max(1.0);
    for r in 0..m.nrows() {
        for c in 0..r {
            if (m[(r, c)] - m[(c, r)]).abs() > 1e-14 * scale {
                return false;
            }
        }
    }
    true
}

fn is_psd(m: &DMatrix<f64>) -> bool {
    let scale = m.iter().fold(0.0_f64, |s, v| s.max(v.abs()));
    if scale == 0.0 {
        return true;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .all(|&ev| ev >= -1e-12 * scale)
}

/// a(x) = A⁰ + Σᵢ xᵢ Aⁱ and b(x) = b⁰ + Bx.
pub fn evaluate_affine(p: &AffineParams, x: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = p.a[0].clone();
    for i in 0..p.d {
        a += &p.a[i + 1] * x[i];
    }
    let b = &p.b0 + &p.big_b * x;
    (a, b)
}

/// The quadratic map A(u) = (uA¹uᵀ, …, uA^duᵀ) on complex rows, with the
/// ordinary (not conjugate) transpose.
pub fn quadratic_form(p: &AffineParams, u: &[Complex64]) -> Vec<Complex64> {
    assert_eq!(u.len(), p.d, "quadratic_form: u must have length d");
    (1..=p.d)
        .map(|i| {
            let m = &p.a[i];
            let mut acc = Complex64::new(0.0, 0.0);
            for r in 0..p.d {
                for c in 0..p.d {
                    let coeff = m[(r, c)];
                    if coeff != 0.0 {
                        acc += u[r] * u[c] * coeff;
                    }
                }
            }
            acc
        })
        .collect()
}

/// Volterra Heston parameters: price/variance initial values, mean reversion
/// speed and level, vol-of-vol, leverage correlation, and the memory kernel
/// of the variance equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    pub s0: f64,
    pub v0: f64,
    pub kappa: f64,
    pub theta: f64,
    pub sigma: f64,
    pub rho: f64,
    pub kernel: KernelSpec,
}

impl HestonParams {
    /// Range report mirroring [`AffineParams::validate`]; empty = admissible.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let finite = [self.s0, self.v0, self.kappa, self.theta, self.sigma, self.rho]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            out.push("parameters contain non-finite entries".to_string());
            return out;
        }
        if self.s0 <= 0.0 {
            out.push(format!("S0 must be positive, got {}", self.s0));
        }
        if self.v0 < 0.0 {
            out.push(format!("V0 must be nonnegative, got {}", self.v0));
        }
        if self.kappa < 0.0 {
            out.push(format!("kappa must be nonnegative, got {}", self.kappa));
        }
        if self.theta < 0.0 {
            out.push(format!("theta must be nonnegative, got {}", self.theta));
        }
        if self.sigma < 0.0 {
            out.push(format!("sigma must be nonnegative, got {}", self.sigma));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            out.push(format!("rho must lie in [−1, 1], got {}", self.rho));
        }
        if let Err(e) = self.kernel.validate() {
            out.push(format!("kernel: {e}"));
        } else if !self.kernel.is_scalar() {
            out.push("kernel must be scalar for the Heston model".to_string());
        }
        out
    }
}

/// The two-dimensional affine representation of the Volterra Heston model
/// for the state X = (log S, V):
///
/// ```text
/// A⁰ = A¹ = 0,   A² = [[1, ρσ], [ρσ, σ²]],
/// b⁰ = (0, κθ),  B = [[0, −1/2], [0, −κ]].
/// ```
pub fn heston_to_affine(h: &HestonParams) -> AffineParams {
    let zero = DMatrix::zeros(2, 2);
    let rs = h.rho * h.sigma;
    let a2 = DMatrix::from_row_slice(2, 2, &[1.0, rs, rs, h.sigma * h.sigma]);
    let b0 = DVector::from_row_slice(&[0.0, h.kappa * h.theta]);
    let big_b = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.0, -h.kappa]);
    AffineParams {
        d: 2,
        a: vec![zero.clone(), zero, a2],
        b0,
        big_b,
        state_space: StateSpace::HestonSpace,
    }
}

/// The matrix kernel of the two-dimensional Heston representation,
/// diag(1, K): the log-price row carries no memory, the variance row
/// carries the model kernel.
pub fn heston_model_kernel(h: &HestonParams) -> KernelSpec {
    KernelSpec::DiagonalMatrix {
        entries: vec![KernelSpec::Constant { c: 1.0 }, h.kernel.clone()],
    }
}

/// Three-factor lift in which the variance is smoothed by a second kernel K̃
/// before it feeds the price: state X = (log S, V, U) with kernel
/// diag(1, 1, K̃) and
///
/// ```text
/// A² = diag(0, σ², 0),  A³ = diag(1, 0, 0),
/// b⁰ = (0, κθ, 0),      B = [[0, 0, −1/2], [0, −κ, 0], [0, 1, 0]].
/// ```
///
/// Returns the affine parameters and the diagonal model kernel.
pub fn lifted_heston_to_affine(
    h: &HestonParams,
    k_tilde: &KernelSpec,
) -> Result<(AffineParams, KernelSpec)> {
    k_tilde.validate()?;
    if !k_tilde.is_scalar() {
        return Err(Error::invalid(
            "lifted Heston smoothing kernel must be scalar",
        ));
    }
    let zero = DMatrix::zeros(3, 3);
    let mut a2 = DMatrix::zeros(3, 3);
    a2[(1, 1)] = h.sigma * h.sigma;
    let mut a3 = DMatrix::zeros(3, 3);
    a3[(0, 0)] = 1.0;
    let b0 = DVector::from_row_slice(&[0.0, h.kappa * h.theta, 0.0]);
    let big_b = DMatrix::from_row_slice(
        3,
        3,
        &[0.0, 0.0, -0.5, 0.0, -h.kappa, 0.0, 0.0, 1.0, 0.0],
    );
    let params = AffineParams {
        d: 3,
        a: vec![zero.clone(), zero, a2, a3],
        b0,
        big_b,
        state_space: StateSpace::LiftedHestonSpace,
    };
    let kernel = KernelSpec::DiagonalMatrix {
        entries: vec![
            KernelSpec::Constant { c: 1.0 },
            KernelSpec::Constant { c: 1.0 },
            k_tilde.clone(),
        ],
    };
    Ok((params, kernel))
}
