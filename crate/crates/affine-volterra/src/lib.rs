//! Affine Volterra processes: kernel calculus, resolvents, Riccati–Volterra
//! equations, exponential-affine transforms, Monte Carlo simulation, and
//! Fourier option pricing.
//!
//! The processes treated here solve stochastic convolution equations
//!
//! ```text
//! X_t = X_0 + ∫_0^t K(t-s) b(X_s) ds + ∫_0^t K(t-s) σ(X_s) dW_s
//! ```
//!
//! with affine drift b(x) = b⁰ + Bx and affine diffusion square
//! a(x) = σ(x)σ(x)ᵀ = A⁰ + Σᵢ xᵢ Aⁱ. The memory kernel K may blow up at the
//! origin (fractional, gamma), which puts X outside the Markov/semimartingale
//! toolbox; everything here works instead with the kernel itself, its
//! resolvents of the first and second kind, and deterministic Riccati–Volterra
//! equations whose solutions give E[exp(u·X_T + ∫ f·X)] in exponential-affine
//! form.
//!
//! Module map:
//! - [`kernel`]: kernel families, validation, grid moments, convolution grids
//! - [`resolvent`]: sampled functions, measures, discrete convolution,
//!   resolvents of both kinds, the drift resolvent pair (R_B, E_B)
//! - [`model`]: affine parameter sets, state spaces, Heston-style mappings
//! - [`riccati`]: Riccati–Volterra solver (predictor–corrector), sign checks
//! - [`transform`]: exponential-affine transform assembly, means, adjustments
//! - [`simulate`]: Euler scheme for Volterra SDEs, exact Gaussian sampling,
//!   Monte Carlo functionals
//! - [`pricing`]: Fourier call/put pricing, Black–Scholes, implied vol
//! - [`cli`]: configuration parsing and the `avl` command-line interface

pub mod cli;
pub mod error;
pub mod grid;
pub mod kernel;
pub mod model;
pub mod pricing;
pub mod quad;
pub mod resolvent;
pub mod riccati;
pub mod simulate;
pub mod special;
pub mod transform;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use kernel::{
    eval_kernel, holder_exponent_estimate, kernel_moments, KernelMoments, KernelSpec,
};
pub use model::{
    evaluate_affine, heston_model_kernel, heston_to_affine, lifted_heston_to_affine,
    quadratic_form, AffineParams, HestonParams, StateSpace,
};
pub use riccati::{
    check_sign_conditions, convergence_order_probe, solve_riccati, solve_riccati_eb_form,
    solve_riccati_heston, solve_riccati_heston_with, solve_riccati_with, FInput, RiccatiSolution,
    SolveStatus, SolverOptions, TransformInputs,
};
pub use transform::{
    adjustment_pi, adjustment_pi_from_psi, conditional_mean_from_path, fractional_integral,
    transform_at_zero, unconditional_mean, y_zero, ConditionalMeanKit, PiAdjustment,
    PiRowAdjustment,
};
pub use resolvent::{
    convolve, convolve_cells, first_kind_residual, resolvent_first_kind, resolvent_pair_b,
    resolvent_second_kind, resolvent_second_kind_sampled, shifted_first_kind_identity, ConvInput,
    MeasureRepr, ResolventPairB, SampledFunction, SecondKindResolvent,
};
pub use special::mittag_leffler;




