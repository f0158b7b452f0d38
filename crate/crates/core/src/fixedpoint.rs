//! The order-parameter map `T(p, q) = (G, F)` and its contraction solver.
//!
//! With `y = √q·β·x + h` and `e = D + β²(p - q)/2`, the integrands below are the
//! single-spin moments of [`crate::kernel`]; `G = E[φ(X)]` and
//! `F = E[ψ(X)²]` for standard Gaussian `X`.

use serde::Serialize;
use thiserror::Error;

use crate::kernel::{local_moments, LocalMoments};
use crate::quadrature::{GaussianRule, QuadratureError};

/// Floor applied to `q` wherever a diagnostic divides by `√q`.
pub const Q_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("spin magnitude S must be at least 1")]
    ZeroSpin,
    #[error("beta must be finite and non-negative, got {0}")]
    Beta(f64),
    #[error("crystal field D must be finite, got {0}")]
    CrystalField(f64),
    #[error("external field h must be finite, got {0}")]
    Field(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("tolerance must be positive and finite, got {0}")]
    Tolerance(f64),
    #[error("damping must lie in (0, 1], got {0}")]
    Damping(f64),
    #[error("max_iter must be at least 1")]
    MaxIter,
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// The quadruple `(S, β, D, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelParams {
    /// Largest spin magnitude `S`; spins take values in `{-S, ..., S}`.
    pub spin_max: u32,
    pub beta: f64,
    /// Crystal field `D`, the weight on `σ²`.
    pub crystal_field: f64,
    /// External field `h`.
    pub field: f64,
}

impl ModelParams {
    pub fn new(spin_max: u32, beta: f64, crystal_field: f64, field: f64) -> Result<Self, ParamError> {
        if spin_max == 0 {
            return Err(ParamError::ZeroSpin);
        }
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(ParamError::Beta(beta));
        }
        if !crystal_field.is_finite() {
            return Err(ParamError::CrystalField(crystal_field));
        }
        if !field.is_finite() {
            return Err(ParamError::Field(field));
        }
        Ok(Self { spin_max, beta, crystal_field, field })
    }

    pub fn s_squared(&self) -> f64 {
        let s = f64::from(self.spin_max);
        s * s
    }

    /// Uniqueness of the fixed point is only claimed for `h ≥ 0`.
    pub fn within_uniqueness_hypothesis(&self) -> bool {
        self.field >= 0.0
    }
}

/// Self-overlap `p` and overlap `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrderParams {
    pub p: f64,
    pub q: f64,
}

impl OrderParams {
    pub fn new(p: f64, q: f64) -> Self {
        Self { p, q }
    }

    pub fn clamp_to_box(self, s_squared: f64) -> Self {
        Self {
            p: self.p.clamp(0.0, s_squared),
            q: self.q.clamp(0.0, s_squared),
        }
    }

    pub fn sup_distance(&self, other: &OrderParams) -> f64 {
        (self.p - other.p).abs().max((self.q - other.q).abs())
    }

    pub fn euclidean_distance(&self, other: &OrderParams) -> f64 {
        (self.p - other.p).hypot(self.q - other.q)
    }
}

fn moments_at(x: f64, params: &ModelParams, op: &OrderParams) -> LocalMoments {
    let b = params.beta;
    let y = op.q.max(0.0).sqrt() * b * x + params.field;
    let e = params.crystal_field + 0.5 * b * b * (op.p - op.q);
    local_moments(params.spin_max, y, e)
}

/// `1 / (1 + Σ_γ 2cosh[γ(√q β x + h)] e^{γ²[D + β²(p-q)/2]})`.
pub fn integrand_f(x: f64, params: &ModelParams, op: &OrderParams) -> f64 {
    moments_at(x, params, op).f
}

pub fn phi(x: f64, params: &ModelParams, op: &OrderParams) -> f64 {
    moments_at(x, params, op).phi
}

pub fn psi(x: f64, params: &ModelParams, op: &OrderParams) -> f64 {
    moments_at(x, params, op).psi
}

pub fn theta(x: f64, params: &ModelParams, op: &OrderParams) -> f64 {
    moments_at(x, params, op).theta
}

pub fn eta(x: f64, params: &ModelParams, op: &OrderParams) -> f64 {
    moments_at(x, params, op).eta
}

/// `G(p, q) = E[φ(X)]`.
pub fn map_g(params: &ModelParams, op: &OrderParams, rule: &GaussianRule) -> Result<f64, QuadratureError> {
    rule.expect(|x| phi(x, params, op))
}

/// `F(p, q) = E[ψ(X)²]`.
pub fn map_f(params: &ModelParams, op: &OrderParams, rule: &GaussianRule) -> Result<f64, QuadratureError> {
    rule.expect(|x| psi(x, params, op).powi(2))
}

/// `T(p, q) = (G, F)` from a single quadrature pass.
pub fn map_t(params: &ModelParams, op: &OrderParams, rule: &GaussianRule) -> Result<OrderParams, QuadratureError> {
    let [g, f] = rule.expect_array(|x| {
        let l = moments_at(x, params, op);
        [l.phi, l.psi * l.psi]
    })?;
    Ok(OrderParams::new(g, f))
}

/// `√165 · S⁴ · β²`; below one, `T` is a contraction on `[0, S²]²`.
pub fn contraction_certificate(params: &ModelParams) -> f64 {
    let s2 = params.s_squared();
    165f64.sqrt() * s2 * s2 * params.beta * params.beta
}

/// `1 / (165^{1/4} · S²)`, the largest β with a contraction certificate below one.
pub fn beta_tilde(spin_max: u32) -> f64 {
    let s = f64::from(spin_max);
    1.0 / (165f64.powf(0.25) * s * s)
}

/// Partial derivatives of `G` and `F` at `(p, q)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Jacobian {
    pub dg_dp: f64,
    pub dg_dq: f64,
    pub df_dp: f64,
    pub df_dq: f64,
}

impl Jacobian {
    pub fn frobenius_norm(&self) -> f64 {
        (self.dg_dp.powi(2) + self.dg_dq.powi(2) + self.df_dp.powi(2) + self.df_dq.powi(2)).sqrt()
    }
}

/// Analytic Jacobian of `T`. The `q` derivatives go through Gaussian
/// integration by parts; their `1/√q` prefactor is evaluated with `q`
/// floored at [`Q_FLOOR`].
pub fn jacobian(params: &ModelParams, op: &OrderParams, rule: &GaussianRule) -> Result<Jacobian, QuadratureError> {
    let b = params.beta;
    let sq = op.q.max(Q_FLOOR).sqrt();
    let [e_theta_phi2, e_dphi_q, e_psi_eta_psiphi, e_dpsi2_q] = rule.expect_array(|x| {
        let LocalMoments { psi, phi, eta, theta, .. } = moments_at(x, params, op);
        // X-derivatives of φ, ψ, η.
        let dphi = sq * b * (eta - phi * psi);
        let dpsi = sq * b * (phi - psi * psi);
        let deta = sq * b * (theta - eta * psi);
        let dphi_q = b / (2.0 * sq) * (deta - dpsi * phi - psi * dphi) + 0.5 * b * b * (phi * phi - theta);
        let dpsi2_q = b / sq * (dpsi * phi + psi * dphi - 3.0 * psi * psi * dpsi) + b * b * psi * (psi * phi - eta);
        [theta - phi * phi, dphi_q, psi * (eta - psi * phi), dpsi2_q]
    })?;
    Ok(Jacobian {
        dg_dp: 0.5 * b * b * e_theta_phi2,
        dg_dq: e_dphi_q,
        df_dp: b * b * e_psi_eta_psiphi,
        df_dq: e_dpsi2_q,
    })
}

/// Entrywise bounds `(L₁, L₂, L₃, L₄) = (1, 4, 2, 12)·S⁴β²` on
/// `(∂G/∂p, ∂G/∂q, ∂F/∂p, ∂F/∂q)`; their Euclidean norm is the certificate.
pub fn derivative_bounds(params: &ModelParams) -> [f64; 4] {
    let s2 = params.s_squared();
    let base = s2 * s2 * params.beta * params.beta;
    [base, 4.0 * base, 2.0 * base, 12.0 * base]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation weight on `T(p, q)`; 1 is plain Picard iteration.
    pub damping: f64,
    /// Starting point; `(S², 0)` when absent.
    pub initial: Option<OrderParams>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 10_000, damping: 1.0, initial: None }
    }
}

/// Damping used once the step norm has grown twice in a row.
pub const FALLBACK_DAMPING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveReport {
    pub solution: OrderParams,
    pub iterations: usize,
    pub final_step_norm: f64,
    /// `‖T(p*, q*) - (p*, q*)‖∞` at the returned point.
    pub residual: f64,
    pub contraction_certificate: f64,
    pub converged: bool,
    /// Damping in effect when the iteration stopped.
    pub damping: f64,
    /// Set when `h < 0`, where uniqueness has not been established.
    pub outside_hypothesis: bool,
}

/// Relaxed fixed-point iteration `u ← (1-ω)u + ω T(u)`, clamped to `[0, S²]²`.
///
/// Running out of iterations is not an error: the report carries
/// `converged = false` and the last iterate.
pub fn solve(params: &ModelParams, rule: &GaussianRule, opts: &SolveOptions) -> Result<SolveReport, SolveError> {
    if !(opts.tol > 0.0 && opts.tol.is_finite()) {
        return Err(SolveError::Tolerance(opts.tol));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(SolveError::Damping(opts.damping));
    }
    if opts.max_iter == 0 {
        return Err(SolveError::MaxIter);
    }

    let s2 = params.s_squared();
    let mut current = opts.initial.unwrap_or(OrderParams::new(s2, 0.0)).clamp_to_box(s2);
    let mut damping = opts.damping;
    let mut step_norm = f64::INFINITY;
    let mut growth_streak = 0;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        iterations += 1;
        let image = map_t(params, &current, rule)?;
        let next = OrderParams::new(
            (1.0 - damping) * current.p + damping * image.p,
            (1.0 - damping) * current.q + damping * image.q,
        )
        .clamp_to_box(s2);
        let step = next.sup_distance(&current);
        current = next;

        if step > step_norm {
            growth_streak += 1;
            if growth_streak >= 2 && damping > FALLBACK_DAMPING {
                damping = FALLBACK_DAMPING;
                growth_streak = 0;
            }
        } else {
            growth_streak = 0;
        }
        step_norm = step;
        if step <= opts.tol {
            converged = true;
            break;
        }
    }

    let residual = map_t(params, &current, rule)?.sup_distance(&current);
    Ok(SolveReport {
        solution: current,
        iterations,
        final_step_norm: step_norm,
        residual,
        contraction_certificate: contraction_certificate(params),
        converged,
        damping,
        outside_hypothesis: !params.within_uniqueness_hypothesis(),
    })
}
