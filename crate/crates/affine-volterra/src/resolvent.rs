//! Resolvents of convolution kernels and the drift-adjusted pair (R_B, E_B).
//!
//! For a kernel K, the resolvent of the second kind R and the resolvent of
//! the first kind L are defined by
//!
//! ```text
//! K ∗ R = R ∗ K = K − R,          K ∗ L = L ∗ K ≡ id,
//! ```
//!
//! where R is a function and L is in general a measure (it carries an atom at
//! 0 whenever K(0+) is finite). For a drift matrix B the pair
//!
//! ```text
//! R_B = resolvent of the second kind of −K·B,     E_B = K − R_B ∗ K
//! ```
//!
//! turns the linear Volterra equation X = F + (K·B)∗X + K∗dZ into the
//! variation-of-constants form X = F − R_B∗F + E_B∗dZ, and E_B replaces e^{tB}
//! everywhere a classical affine model would use the matrix exponential.
//!
//! # Discretization
//!
//! All quantities live on a uniform grid. Convolutions against K use exact
//! kernel cell integrals (never pointwise values near the singularity at 0).
//! The second-kind solve works with the smooth part S := K∗R, which obeys
//! S = K∗K − K∗S; that equation is discretized by product integration with a
//! piecewise-linear interpolant of S, giving an implicit lower-triangular
//! system whose diagonal blocks are I + w₀ with w₀ a first-cell weight. The
//! node values R = K − S and the cell integrals of R (recovered from the
//! companion solve for G := 1∗R, which satisfies G = (1∗K) − K∗G) then feed
//! every downstream convolution. Kernels singular at 0 have no finite value
//! at the first node; for them the stored node-0 value of R, R_B, E_B is the
//! first-cell average (cell integral divided by Δt), and no algorithm in this
//! crate reads the node-0 value of a singular function into a quadrature.

// Convolution sums are written with explicit indices (the reflected index
// m = i - j - 1 is the whole point); iterator forms would obscure them.
#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernel::{
    cell_weights, conv_kernels_at_nodes, eval_kernel, kernel_moments, kernel_value_at_zero,
    KernelMoments, KernelSpec,
};
use crate::quad::{try_integrate, try_integrate_with_left_power, QuadOptions};
use crate::special::{gamma_fn, lower_reg_gamma};
use nalgebra::DMatrix;

/// A function sampled at the nodes of a uniform grid.
///
/// For functions with an integrable singularity at 0 (kernels, resolvents of
/// singular kernels) the value stored at node 0 is the first-cell average;
/// see the module documentation.
#[derive(Debug, Clone)]
pub struct SampledFunction<T> {
    pub grid: TimeGrid,
    pub values: Vec<T>,
}

impl<T> SampledFunction<T> {
    pub fn new(grid: TimeGrid, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::invalid(format!(
                "sampled function needs {} values (one per node), got {}",
                grid.n_nodes(),
                values.len()
            )));
        }
        Ok(SampledFunction { grid, values })
    }
}

/// Resolvent of the first kind L(ds) = atom0·δ₀(ds) + ℓ(s)ds, stored per
/// diagonal component with a piecewise-constant density on grid cells.
///
/// The density values are cell averages of the exact masses, so
/// `density[c][l] · Δt` is the exact measure of cell l whenever a closed form
/// exists (constant, exponential, fractional, gamma kernels).
#[derive(Debug, Clone)]
pub struct MeasureRepr {
    pub grid: TimeGrid,
    /// Mass at t = 0, one entry per diagonal component.
    pub atom0: Vec<f64>,
    /// Piecewise-constant density per component per cell (d × n_steps).
    pub density: Vec<Vec<f64>>,
}

impl MeasureRepr {
    pub fn dim(&self) -> usize {
        self.atom0.len()
    }

    /// Mass of cell l for component c.
    pub(crate) fn mass(&self, c: usize, l: usize) -> f64 {
        self.density[c][l] * self.grid.dt()
    }
}

/// Second-kind resolvent of a scalar or diagonal kernel: node values, exact
/// cell integrals, and the cell-averaged residual of K∗R + R − K.
#[derive(Debug, Clone)]
pub struct SecondKindResolvent {
    pub grid: TimeGrid,
    /// R at the nodes, per diagonal component (d × n_nodes).
    pub values: Vec<Vec<f64>>,
    /// ∫_{t_l}^{t_{l+1}} R per component (d × n_steps).
    pub cells: Vec<Vec<f64>>,
    /// |cell_l(K∗R) + cell_l(R) − cell_l(K)| / Δt per component
    /// (d × n_steps); entry l is attributed to node t_{l+1}.
    pub residual: Vec<Vec<f64>>,
}

/// The pair (R_B, E_B) of Lemma-style drift adjustment, with node values,
/// cell integrals, and the running integrals G = 1∗R_B and H = 1∗E_B.
#[derive(Debug, Clone)]
pub struct ResolventPairB {
    pub grid: TimeGrid,
    /// R_B at the nodes (matrix-valued).
    pub r_b: Vec<DMatrix<f64>>,
    /// ∫_{cell l} R_B.
    pub r_b_cells: Vec<DMatrix<f64>>,
    /// E_B = K − R_B∗K at the nodes.
    pub e_b: Vec<DMatrix<f64>>,
    /// ∫_{cell l} E_B.
    pub e_b_cells: Vec<DMatrix<f64>>,
    /// G(t_i) = ∫_0^{t_i} R_B.
    pub big_g: Vec<DMatrix<f64>>,
    /// H(t_i) = ∫_0^{t_i} E_B.
    pub big_h: Vec<DMatrix<f64>>,
}

impl ResolventPairB {
    pub fn dim(&self) -> usize {
        self.r_b[0].nrows()
    }
}

// ---------------------------------------------------------------------------
// Piecewise-linear product-integration engine.
//
// For ∫_0^{t_i} κ(t_i − s) G(s) ds with G piecewise linear on the grid, the
// substitution u = t_i − s maps grid cell j onto grid cell m = i − j − 1 and
// gives the exact weights
//     Σ_j [ m1_m · G_j + w2_m · (G_{j+1} − G_j) ],
//     w2_m = (t_{m+1}·m1_m − mt_m)/Δt,
// where m1_m = ∫_{cell m} κ and mt_m = ∫_{cell m} u·κ(u) du.
// ---------------------------------------------------------------------------

/// Matrix-valued convolution weights for a (possibly matrix-valued) kernel κ.
struct PlWeights {
    m1: Vec<DMatrix<f64>>,
    w2: Vec<DMatrix<f64>>,
}

impl PlWeights {
    fn from_cells(m1: Vec<DMatrix<f64>>, mt: Vec<DMatrix<f64>>, g: TimeGrid) -> Self {
        let dt = g.dt();
        let w2 = m1
            .iter()
            .zip(mt.iter())
            .enumerate()
            .map(|(m, (m1m, mtm))| (m1m * g.node(m + 1) - mtm) / dt)
            .collect();
        PlWeights { m1, w2 }
    }
}

/// Solves U(t_i) + (κ∗U)(t_i) = rhs(t_i), U(0) = rhs(0) = 0, with the
/// piecewise-linear rule above; the implicit diagonal block is I + w2_0.
fn solve_pl_volterra(w: &PlWeights, rhs: &[DMatrix<f64>], d: usize) -> Result<Vec<DMatrix<f64>>> {
    let n = w.m1.len();
    debug_assert_eq!(rhs.len(), n + 1);
    let eye = DMatrix::<f64>::identity(d, d);
    let block = &eye + &w.w2[0];
    let lu = block.clone().lu();
    let mut u: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    u.push(DMatrix::zeros(d, d));
    for i in 1..=n {
        // Accumulate Σ_{j<i} m1_{i-j-1}·U_j + Σ_{j<i-1} w2_{i-j-1}·(U_{j+1}-U_j),
        // then move the unknown w2_0·U_i to the left-hand side.
        let mut acc = DMatrix::<f64>::zeros(d, d);
        for j in 0..i {
            let m = i - j - 1;
            acc += &w.m1[m] * &u[j];
            if m > 0 {
                acc += &w.w2[m] * (&u[j + 1] - &u[j]);
            } else {
                acc -= &w.w2[0] * &u[i - 1];
            }
        }
        let b = &rhs[i] - &acc;
        let mut x = DMatrix::zeros(d, d);
        for c in 0..d {
            let col = lu.solve(&b.column(c).into_owned()).ok_or_else(|| {
                Error::numerical(
                    "second-kind resolvent: singular diagonal block I + w2_0 in the triangular solve",
                )
            })?;
            x.set_column(c, &col);
        }
        u.push(x);
    }
    Ok(u)
}

/// (κ ∗ G)(t_i) at every node for piecewise-linear G, with κ's PL weights.
fn pl_convolve(w: &PlWeights, gvals: &[DMatrix<f64>], d: usize) -> Vec<DMatrix<f64>> {
    let n = w.m1.len();
    let mut out = Vec::with_capacity(n + 1);
    out.push(DMatrix::zeros(d, d));
    for i in 1..=n {
        let mut acc = DMatrix::<f64>::zeros(d, d);
        for j in 0..i {
            let m = i - j - 1;
            acc += &w.m1[m] * &gvals[j];
            acc += &w.w2[m] * (&gvals[j + 1] - &gvals[j]);
        }
        out.push(acc);
    }
    out
}

/// Core second-kind solve for a matrix kernel κ given its PL weights, the
/// self-convolution (κ∗κ)(t_i), and its node values (None at node 0 when
/// singular). Returns node values of R (node 0 by the first-cell-average
/// convention when κ(0) is unavailable), cell integrals of R, and G = 1∗R.
struct EngineOutput {
    r_nodes: Vec<DMatrix<f64>>,
    r_cells: Vec<DMatrix<f64>>,
    big_g: Vec<DMatrix<f64>>,
}

fn second_kind_engine(
    w: &PlWeights,
    kk: &[DMatrix<f64>],
    kappa_nodes: &[Option<DMatrix<f64>>],
    d: usize,
) -> Result<EngineOutput> {
    let n = w.m1.len();
    // S := κ∗R solves S + κ∗S = κ∗κ.
    let s = solve_pl_volterra(w, kk, d)?;
    // G := 1∗R solves G + κ∗G = 1∗κ (cumulative cell integrals of κ).
    let mut m1cum = Vec::with_capacity(n + 1);
    m1cum.push(DMatrix::zeros(d, d));
    for m in 0..n {
        let prev = m1cum[m].clone();
        m1cum.push(prev + &w.m1[m]);
    }
    let big_g = solve_pl_volterra(w, &m1cum, d)?;
    let r_cells: Vec<DMatrix<f64>> = (0..n).map(|m| &big_g[m + 1] - &big_g[m]).collect();

    let mut r_nodes = Vec::with_capacity(n + 1);
    for i in 0..=n {
        match &kappa_nodes[i] {
            Some(k) => r_nodes.push(k - &s[i]),
            None => {
                debug_assert_eq!(i, 0, "only node 0 may lack a kernel value");
                r_nodes.push(DMatrix::zeros(d, d)); // patched by patch_node0
            }
        }
    }
    Ok(EngineOutput {
        r_nodes,
        r_cells,
        big_g,
    })
}

/// Node-0 patch: replace a placeholder value with the first-cell average.
fn patch_node0(out: &mut EngineOutput, g: TimeGrid, singular: bool) {
    if singular {
        out.r_nodes[0] = &out.r_cells[0] / g.dt();
    }
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Second-kind resolvent R of a scalar or diagonal kernel, solving
/// K∗R = R∗K = K − R on the grid.
pub fn resolvent_second_kind(k: &KernelSpec, g: TimeGrid) -> Result<SecondKindResolvent> {
    k.validate()?;
    let entries = k.diagonal_entries();
    let mut values = Vec::new();
    let mut cells = Vec::new();
    let mut residual = Vec::new();
    for entry in &entries {
        let (v, c, r) = scalar_second_kind(entry, g)?;
        values.push(v);
        cells.push(c);
        residual.push(r);
    }
    Ok(SecondKindResolvent {
        grid: g,
        values,
        cells,
        residual,
    })
}

fn scalar_second_kind(k: &KernelSpec, g: TimeGrid) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let cw = cell_weights(k, g)?;
    let n = g.n_steps();
    let m1: Vec<DMatrix<f64>> = cw.m1.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect();
    let mt: Vec<DMatrix<f64>> = cw.mt.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect();
    let w = PlWeights::from_cells(m1, mt, g);
    let kk_vals = conv_kernels_at_nodes(k, k, g)?;
    let kk: Vec<DMatrix<f64>> = kk_vals
        .iter()
        .map(|&v| DMatrix::from_element(1, 1, v))
        .collect();
    let k0 = kernel_value_at_zero(k)?;
    let mut kappa_nodes: Vec<Option<DMatrix<f64>>> = Vec::with_capacity(n + 1);
    kappa_nodes.push(k0.map(|v| DMatrix::from_element(1, 1, v)));
    for i in 1..=n {
        kappa_nodes.push(Some(DMatrix::from_element(
            1,
            1,
            eval_kernel(k, g.node(i))?,
        )));
    }
    let mut out = second_kind_engine(&w, &kk, &kappa_nodes, 1)?;
    patch_node0(&mut out, g, k0.is_none());

    // Residual: cell integrals of K∗R from the PL rule applied to G = 1∗R,
    // compared against cell_l(K) − cell_l(R), normalized to a cell average.
    let kg = pl_convolve(&w, &out.big_g, 1);
    let dt = g.dt();
    let mut resid = Vec::with_capacity(n);
    for l in 0..n {
        let cell_kr = kg[l + 1][(0, 0)] - kg[l][(0, 0)];
        resid.push((cell_kr + out.r_cells[l][(0, 0)] - cw.m1[l]).abs() / dt);
    }
    Ok((
        out.r_nodes.iter().map(|m| m[(0, 0)]).collect(),
        out.r_cells.iter().map(|m| m[(0, 0)]).collect(),
        resid,
    ))
}

/// Second-kind resolvent of a scalar function given by finite node samples
/// (trapezoid cell weights; the function must be bounded on [0, t_end]).
pub fn resolvent_second_kind_sampled(
    f: &SampledFunction<f64>,
    g: TimeGrid,
) -> Result<SecondKindResolvent> {
    if f.values.len() != g.n_nodes() {
        return Err(Error::invalid(
            "sampled kernel and grid disagree on node count",
        ));
    }
    if f.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("sampled kernel values must be finite"));
    }
    let n = g.n_steps();
    let dt = g.dt();
    let mut m1 = Vec::with_capacity(n);
    let mut mt = Vec::with_capacity(n);
    for m in 0..n {
        let (f0, f1) = (f.values[m], f.values[m + 1]);
        m1.push(DMatrix::from_element(1, 1, 0.5 * dt * (f0 + f1)));
        mt.push(DMatrix::from_element(
            1,
            1,
            0.5 * dt * (g.node(m) * f0 + g.node(m + 1) * f1),
        ));
    }
    let w = PlWeights::from_cells(m1.clone(), mt, g);
    // Self-convolution of the piecewise-linear interpolant, by the same rule.
    let fmat: Vec<DMatrix<f64>> = f
        .values
        .iter()
        .map(|&v| DMatrix::from_element(1, 1, v))
        .collect();
    let kk = pl_convolve(&w, &fmat, 1);
    let kappa_nodes: Vec<Option<DMatrix<f64>>> = fmat.iter().map(|m| Some(m.clone())).collect();
    let mut out = second_kind_engine(&w, &kk, &kappa_nodes, 1)?;
    patch_node0(&mut out, g, false);

    let kg = pl_convolve(&w, &out.big_g, 1);
    let mut resid = Vec::with_capacity(n);
    for l in 0..n {
        let cell_kr = kg[l + 1][(0, 0)] - kg[l][(0, 0)];
        resid.push((cell_kr + out.r_cells[l][(0, 0)] - w.m1[l][(0, 0)]).abs() / dt);
    }
    Ok(SecondKindResolvent {
        grid: g,
        values: vec![out.r_nodes.iter().map(|m| m[(0, 0)]).collect()],
        cells: vec![out.r_cells.iter().map(|m| m[(0, 0)]).collect()],
        residual: vec![resid],
    })
}

/// First-kind resolvent L with K∗L ≡ id, per diagonal component.
///
/// Closed forms cover the four base families; `Sum` kernels fall back to a
/// forward triangular solve of the discrete identity (K∗L)(t_i) = 1. All
/// kernels representable by [`KernelSpec`] are nonnegative and non-increasing
/// (c > 0, α ≤ 1, λ ≥ 0), so the existence precondition holds by
/// construction.
pub fn resolvent_first_kind(k: &KernelSpec, g: TimeGrid) -> Result<MeasureRepr> {
    k.validate()?;
    let entries = k.diagonal_entries();
    let mut atom0 = Vec::new();
    let mut density = Vec::new();
    for entry in &entries {
        let (a, d) = scalar_first_kind(entry, g)?;
        atom0.push(a);
        density.push(d);
    }
    Ok(MeasureRepr {
        grid: g,
        atom0,
        density,
    })
}

fn scalar_first_kind(k: &KernelSpec, g: TimeGrid) -> Result<(f64, Vec<f64>)> {
    let n = g.n_steps();
    let dt = g.dt();
    match k {
        KernelSpec::Constant { c } => Ok((1.0 / c, vec![0.0; n])),
        KernelSpec::Exponential { c, lambda } => Ok((1.0 / c, vec![lambda / c; n])),
        KernelSpec::Fractional { c, alpha } if *alpha == 1.0 => Ok((1.0 / c, vec![0.0; n])),
        KernelSpec::Fractional { c, alpha } => {
            // L(dt) = c⁻¹ t^{-α}/Γ(1-α) dt; exact cell masses via the
            // antiderivative t^{1-α}/Γ(2-α).
            let a = *alpha;
            let mut density = Vec::with_capacity(n);
            for l in 0..n {
                let mass = (g.node(l + 1).powf(1.0 - a) - g.node(l).powf(1.0 - a))
                    / (c * gamma_fn(2.0 - a));
                density.push(mass / dt);
            }
            Ok((0.0, density))
        }
        KernelSpec::GammaKernel { c, alpha, lambda } if *alpha == 1.0 || *lambda == 0.0 => {
            // Degenerate rows: exponential (α = 1) or fractional (λ = 0).
            let reduced = if *alpha == 1.0 {
                KernelSpec::Exponential {
                    c: *c,
                    lambda: *lambda,
                }
            } else {
                KernelSpec::Fractional {
                    c: *c,
                    alpha: *alpha,
                }
            };
            scalar_first_kind(&reduced, g)
        }
        KernelSpec::GammaKernel { c, alpha, lambda } => {
            // ℓ(t) = c⁻¹ [ t^{-α} e^{-λt} / Γ(1-α) + λ^α · P(1-α, λt) ] with P
            // the regularized lower incomplete gamma function. The first term
            // is integrated per cell (power substitution in the first cell);
            // the second has the exact antiderivative
            // ∫_0^t P(a, λs) ds = t·P(a, λt) − (a/λ)·P(a+1, λt).
            let (a, lam) = (*alpha, *lambda);
            let q = 1.0 - a;
            let opt = QuadOptions::with_rel_tol(1e-12);
            let p_anti = |t: f64| {
                if t == 0.0 {
                    0.0
                } else {
                    t * lower_reg_gamma(q, lam * t) - q / lam * lower_reg_gamma(q + 1.0, lam * t)
                }
            };
            let mut density = Vec::with_capacity(n);
            for l in 0..n {
                let (t0, t1) = (g.node(l), g.node(l + 1));
                let sing = if l == 0 {
                    try_integrate_with_left_power(|t| (-lam * t).exp(), q, t1, &opt)
                } else {
                    try_integrate(|t| t.powf(-a) * (-lam * t).exp(), t0, t1, &opt)
                }
                .map_err(|e| Error::numerical(format!("first-kind density cell {l}: {e}")))?
                    / gamma_fn(q);
                let poly = lam.powf(a) * (p_anti(t1) - p_anti(t0));
                density.push((sing + poly) / (c * dt));
            }
            Ok((0.0, density))
        }
        KernelSpec::Sum { .. } => first_kind_triangular(k, g),
        KernelSpec::DiagonalMatrix { .. } => unreachable!("handled per component"),
    }
}

/// Numeric first kind: atom0 = 1/K(0+) when finite (else 0), densities from
/// the forward solve of atom0·K(t_i) + Σ_{l<i} mass_l·m1_{i-l-1}/Δt = 1.
fn first_kind_triangular(k: &KernelSpec, g: TimeGrid) -> Result<(f64, Vec<f64>)> {
    let n = g.n_steps();
    let dt = g.dt();
    let m = kernel_moments(k, g)?;
    let atom0 = match kernel_value_at_zero(k)? {
        Some(v) => 1.0 / v,
        None => 0.0,
    };
    if m.m1[0] <= 0.0 {
        return Err(Error::numerical(
            "first-kind resolvent: vanishing first cell integral in the triangular solve",
        ));
    }
    let mut mass = vec![0.0; n];
    for i in 1..=n {
        let mut acc = atom0 * eval_kernel(k, g.node(i))?;
        for l in 0..i - 1 {
            acc += mass[l] * m.m1[i - l - 1] / dt;
        }
        mass[i - 1] = (1.0 - acc) * dt / m.m1[0];
    }
    Ok((atom0, mass.iter().map(|v| v / dt).collect()))
}

/// The drift-adjusted resolvent pair: R_B (resolvent of −K·B) and
/// E_B = K − R_B∗K, for a scalar or diagonal kernel and any real B.
pub fn resolvent_pair_b(k: &KernelSpec, b: &DMatrix<f64>, g: TimeGrid) -> Result<ResolventPairB> {
    k.validate()?;
    let d = k.dim();
    if b.nrows() != d || b.ncols() != d {
        return Err(Error::invalid(format!(
            "drift matrix B must be {d}×{d} to match the kernel, got {}×{}",
            b.nrows(),
            b.ncols()
        )));
    }
    let entries = k.diagonal_entries();
    let n = g.n_steps();
    let dt = g.dt();

    // Per-component kernel data.
    let mut comp_weights = Vec::with_capacity(d);
    for entry in &entries {
        comp_weights.push(cell_weights(entry, g)?);
    }
    let mut k_nodes: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut k_zero: Vec<Option<f64>> = Vec::with_capacity(d);
    for entry in &entries {
        let mut vals = vec![0.0; n + 1];
        for (i, v) in vals.iter_mut().enumerate().skip(1) {
            *v = eval_kernel(entry, g.node(i))?;
        }
        k_nodes.push(vals);
        k_zero.push(kernel_value_at_zero(entry)?);
    }

    if b.iter().all(|&x| x == 0.0) {
        // R_B ≡ 0, E_B = K exactly.
        let zeros = vec![DMatrix::<f64>::zeros(d, d); n + 1];
        let zero_cells = vec![DMatrix::<f64>::zeros(d, d); n];
        let mut e_b = Vec::with_capacity(n + 1);
        let mut e_b_cells = Vec::with_capacity(n);
        let mut big_h = Vec::with_capacity(n + 1);
        big_h.push(DMatrix::zeros(d, d));
        for l in 0..n {
            let mut cell = DMatrix::zeros(d, d);
            for c in 0..d {
                cell[(c, c)] = comp_weights[c].m1[l];
            }
            let prev = big_h[l].clone();
            big_h.push(prev + &cell);
            e_b_cells.push(cell);
        }
        for i in 0..=n {
            let mut v = DMatrix::zeros(d, d);
            for c in 0..d {
                v[(c, c)] = if i == 0 {
                    match k_zero[c] {
                        Some(x) => x,
                        None => e_b_cells[0][(c, c)] / dt,
                    }
                } else {
                    k_nodes[c][i]
                };
            }
            e_b.push(v);
        }
        return Ok(ResolventPairB {
            grid: g,
            r_b: zeros.clone(),
            r_b_cells: zero_cells,
            e_b,
            e_b_cells,
            big_g: zeros,
            big_h,
        });
    }

    // κ = −K·B: weights are diag(m1K)·(−B), values −diag(K(t))·B.
    let neg_b = -b;
    let make_diag_times = |diag: &dyn Fn(usize) -> f64| -> DMatrix<f64> {
        let mut m = DMatrix::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                m[(r, c)] = diag(r) * neg_b[(r, c)];
            }
        }
        m
    };
    let m1k: Vec<DMatrix<f64>> = (0..n)
        .map(|l| make_diag_times(&|r| comp_weights[r].m1[l]))
        .collect();
    let mtk: Vec<DMatrix<f64>> = (0..n)
        .map(|l| make_diag_times(&|r| comp_weights[r].mt[l]))
        .collect();
    let w = PlWeights::from_cells(m1k, mtk, g);

    // (κ∗κ)(t) = M(t)·B with M_rc(t) = B_rc·(K_r ∗ K_c)(t).
    let mut pair_conv: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); d]; d];
    for r in 0..d {
        for c in 0..d {
            if b[(r, c)] == 0.0 {
                continue;
            }
            pair_conv[r][c] = if c < r && !pair_conv[c][r].is_empty() {
                pair_conv[c][r].clone()
            } else {
                conv_kernels_at_nodes(&entries[r], &entries[c], g)?
            };
        }
    }
    let mut kk: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let mut m = DMatrix::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                if b[(r, c)] != 0.0 {
                    m[(r, c)] = b[(r, c)] * pair_conv[r][c][i];
                }
            }
        }
        kk.push(m * b);
    }

    let singular = k_zero.iter().any(|z| z.is_none());
    let mut kappa_nodes: Vec<Option<DMatrix<f64>>> = Vec::with_capacity(n + 1);
    for i in 0..=n {
        if i == 0 && singular {
            kappa_nodes.push(None);
        } else {
            kappa_nodes.push(Some(make_diag_times(&|r| {
                if i == 0 {
                    k_zero[r].expect("checked above")
                } else {
                    k_nodes[r][i]
                }
            })));
        }
    }
    let mut out = second_kind_engine(&w, &kk, &kappa_nodes, d)?;
    if singular {
        // Node-0 values row by row: row r of R_B(0) equals −K_r(0)·B(r,·)
        // when K_r is bounded (S(0) = 0); singular rows store the
        // first-cell average.
        for r in 0..d {
            match k_zero[r] {
                Some(k0) => {
                    for c in 0..d {
                        out.r_nodes[0][(r, c)] = k0 * neg_b[(r, c)];
                    }
                }
                None => {
                    for c in 0..d {
                        out.r_nodes[0][(r, c)] = out.r_cells[0][(r, c)] / dt;
                    }
                }
            }
        }
    }

    // E_B node values: K(t_i) − (R_B∗K)(t_i), the latter with R_B as
    // piecewise-constant cell averages against exact K cell integrals.
    let mut e_b = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let mut conv = DMatrix::<f64>::zeros(d, d);
        for l in 0..i {
            let mk = i - l - 1;
            for r in 0..d {
                for c in 0..d {
                    conv[(r, c)] += out.r_cells[l][(r, c)] * comp_weights[c].m1[mk] / dt;
                }
            }
        }
        let mut v = -conv;
        for c in 0..d {
            v[(c, c)] += if i == 0 {
                // E_B(0+) is diag(K(0+)); singular entries get the
                // first-cell average patched in below, off-diagonals the
                // exact limit 0.
                k_zero[c].unwrap_or(0.0)
            } else {
                k_nodes[c][i]
            };
        }
        e_b.push(v);
    }

    // H = 1∗E_B = 1∗K − G∗K, with G∗K by PL weights on the K side.
    let mut kweights_per_comp: Vec<PlWeights> = Vec::with_capacity(d);
    for cw in &comp_weights {
        let m1: Vec<DMatrix<f64>> = cw.m1.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect();
        let mt: Vec<DMatrix<f64>> = cw.mt.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect();
        kweights_per_comp.push(PlWeights::from_cells(m1, mt, g));
    }
    let mut big_h = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let mut h = DMatrix::<f64>::zeros(d, d);
        for c in 0..d {
            let wc = &kweights_per_comp[c];
            // (G∗K_c)(t_i) column c: Σ_j m1K_c[m]·G_{rc}(t_j) + w2K_c[m]·ΔG.
            for r in 0..d {
                let mut acc = 0.0;
                for j in 0..i {
                    let m = i - j - 1;
                    acc += wc.m1[m][(0, 0)] * out.big_g[j][(r, c)]
                        + wc.w2[m][(0, 0)] * (out.big_g[j + 1][(r, c)] - out.big_g[j][(r, c)]);
                }
                h[(r, c)] = -acc;
            }
            // + (1∗K)(t_i) on the diagonal.
            let mut m1cum = 0.0;
            for m in 0..i {
                m1cum += comp_weights[c].m1[m];
            }
            h[(c, c)] += m1cum;
        }
        big_h.push(h);
    }
    let e_b_cells: Vec<DMatrix<f64>> = (0..n).map(|l| &big_h[l + 1] - &big_h[l]).collect();
    if singular {
        for c in 0..d {
            if k_zero[c].is_none() {
                e_b[0][(c, c)] = e_b_cells[0][(c, c)] / dt;
            }
        }
    }

    Ok(ResolventPairB {
        grid: g,
        r_b: out.r_nodes,
        r_b_cells: out.r_cells,
        e_b,
        e_b_cells,
        big_g: out.big_g,
        big_h,
    })
}

// ---------------------------------------------------------------------------
// Discrete convolution
// ---------------------------------------------------------------------------

/// Left factor of [`convolve`].
pub enum ConvInput<'a> {
    /// A kernel through its exact cell integrals.
    Moments(&'a KernelMoments),
    /// A measure (first-kind resolvent); must be scalar (one component).
    Measure(&'a MeasureRepr),
    /// A bounded sampled function (left-endpoint rectangle masses Δt·f).
    Sampled(&'a SampledFunction<f64>),
}

/// Discrete convolution (a ∗ b)(t_i) of a kernel-like left factor with a
/// sampled function:
///
/// - `Moments`:  Σ_{l<i} m1_l · b(t_{i-l-1})  (left-endpoint rectangle with
///   exact kernel cell integrals),
/// - `Measure`:  atom0·b(t_i) + Σ_{l<i} mass_l · b(t_{i-l-1}),
/// - `Sampled`:  Σ_{l<i} Δt·a(t_l) · b(t_{i-l-1}).
pub fn convolve(a: ConvInput<'_>, b: &SampledFunction<f64>) -> Result<SampledFunction<f64>> {
    let g = b.grid;
    let n = g.n_steps();
    let check_grid = |other: TimeGrid| -> Result<()> {
        if other != g {
            return Err(Error::invalid("convolve: factors live on different grids"));
        }
        Ok(())
    };
    let mut values = vec![0.0; n + 1];
    match a {
        ConvInput::Moments(m) => {
            check_grid(m.grid)?;
            for (i, v) in values.iter_mut().enumerate().skip(1) {
                let mut acc = 0.0;
                for l in 0..i {
                    acc += m.m1[l] * b.values[i - l - 1];
                }
                *v = acc;
            }
        }
        ConvInput::Measure(l) => {
            check_grid(l.grid)?;
            if l.dim() != 1 {
                return Err(Error::invalid(
                    "convolve: measure must be scalar (one component)",
                ));
            }
            for i in 0..=n {
                let mut acc = l.atom0[0] * b.values[i];
                for m in 0..i {
                    acc += l.mass(0, m) * b.values[i - m - 1];
                }
                values[i] = acc;
            }
        }
        ConvInput::Sampled(f) => {
            check_grid(f.grid)?;
            let dt = g.dt();
            for (i, v) in values.iter_mut().enumerate().skip(1) {
                let mut acc = 0.0;
                for l in 0..i {
                    acc += dt * f.values[l] * b.values[i - l - 1];
                }
                *v = acc;
            }
        }
    }
    SampledFunction::new(g, values)
}

/// Symmetric convolution of two kernel-like factors given by their exact cell
/// integrals: (A∗B)(t_i) ≈ Σ_l cellA_l · cellB_{i-l-1} / Δt. Exactly
/// symmetric in its arguments, which is what makes the discrete commutation
/// identity K∗R = R∗K hold to rounding.
pub fn convolve_cells(a_cells: &[f64], b_cells: &[f64], dt: f64) -> Vec<f64> {
    let n = a_cells.len();
    debug_assert_eq!(b_cells.len(), n);
    let mut out = vec![0.0; n + 1];
    for (i, v) in out.iter_mut().enumerate().skip(1) {
        let mut acc = 0.0;
        for l in 0..i {
            acc += a_cells[l] * b_cells[i - l - 1];
        }
        *v = acc / dt;
    }
    out
}

/// Values of the shifted first-kind identity (Δ_h K ∗ L)(t_i) for a scalar
/// kernel and its first-kind resolvent, where (Δ_h K)(t) = K(t + h) and
/// h = `h_steps`·Δt:
///
/// ```text
/// (Δ_h K ∗ L)(t_i) = atom0·K(t_i + h) + Σ_{l<i} mass_l·(∫_{cell i+k-l-1} K)/Δt,
/// ```
///
/// returned for i = 0..=n−k. For nonnegative non-increasing kernels the
/// continuum function is [0, 1]-valued and nondecreasing in t — the mechanism
/// behind orthant invariance and the conditional-mean adjustments.
pub fn shifted_first_kind_identity(
    k: &KernelSpec,
    l: &MeasureRepr,
    g: TimeGrid,
    h_steps: usize,
) -> Result<Vec<f64>> {
    if l.dim() != 1 {
        return Err(Error::invalid("delta_h: scalar kernels only"));
    }
    let n = g.n_steps();
    if h_steps > n {
        return Err(Error::invalid("delta_h: shift exceeds the grid horizon"));
    }
    let m = kernel_moments(k, g)?;
    let dt = g.dt();
    let mut out = Vec::with_capacity(n - h_steps + 1);
    for i in 0..=(n - h_steps) {
        let t_shift = g.node(i + h_steps);
        let mut acc = if i + h_steps == 0 {
            // h = 0, t = 0: the atom sees K(0+); only bounded kernels get here
            // with a nonzero atom (fractional kernels have atom0 = 0).
            match kernel_value_at_zero(k)? {
                Some(v) => l.atom0[0] * v,
                None => 0.0,
            }
        } else {
            l.atom0[0] * eval_kernel(k, t_shift)?
        };
        for cell in 0..i {
            acc += l.mass(0, cell) * m.m1[i + h_steps - cell - 1] / dt;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Per-node defect of the discrete first-kind identity:
/// |(K∗L)(t_i) − 1| for i = 1..=n, per component (entry l ↔ node t_{l+1}).
///
/// Exactly zero (to rounding) for constant and exponential kernels. For
/// kernels with a fractional atom the defect near t = 0 is a fixed constant
/// of the quadrature rule (the product of the aligned singularities is
/// scale-invariant), while at any fixed t > 0 it decays like
/// Δt^{min(α, 1−α)}; consumers should judge it at the horizon, not at the
/// first node.
pub fn first_kind_residual(k: &KernelSpec, l: &MeasureRepr, g: TimeGrid) -> Result<Vec<Vec<f64>>> {
    let entries = k.diagonal_entries();
    if entries.len() != l.dim() {
        return Err(Error::invalid(
            "first_kind_residual: kernel and measure dimensions differ",
        ));
    }
    let n = g.n_steps();
    let dt = g.dt();
    let mut out = Vec::with_capacity(entries.len());
    for (c, entry) in entries.iter().enumerate() {
        let m = kernel_moments(entry, g)?;
        let mut defect = Vec::with_capacity(n);
        for i in 1..=n {
            let mut acc = l.atom0[c] * eval_kernel(entry, g.node(i))?;
            for cell in 0..i {
                acc += l.mass(c, cell) * m.m1[i - cell - 1] / dt;
            }
            defect.push((acc - 1.0).abs());
        }
        out.push(defect);
    }
    Ok(out)
}
