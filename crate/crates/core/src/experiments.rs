//! Disorder-averaged checks of the finite-N Gibbs measure against the
//! mean-field predictions.
//!
//! Every experiment draws `n_disorder` coupling matrices with seeds
//! `derive_seed(master_seed, i)`, computes thermal averages for each (exact
//! enumeration or heat-bath MCMC, chains seeded from the disorder seed), and
//! averages a per-sample statistic. Samples run in parallel; their results are
//! collected in index order and reduced sequentially, so the output does not
//! depend on the number of worker threads.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fixedpoint::{ModelParams, OrderParams};
use crate::gibbs::{
    enumerate, mcmc_run, state_count, DisorderSample, EnumerateOptions, GibbsError, GibbsStats, McmcOptions, StatsMode,
    DEFAULT_BATCHES, DEFAULT_ENUMERATION_CAP,
};
use crate::kernel::local_moments;
use crate::seeding::derive_seed;

pub const DEFAULT_DISORDER_EXACT: usize = 200;
pub const DEFAULT_DISORDER_MCMC: usize = 50;

/// Right-hand side of the overlap-condition inequalities below.
pub const CONDITION_THRESHOLD: f64 = 15.0 / 16.0;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Gibbs(#[from] GibbsError),
    #[error("site {site} is out of range for N = {n}")]
    SiteOutOfRange { site: usize, n: usize },
    #[error("statistics cover {got} sites but the disorder has {expected}")]
    StatsMismatch { expected: usize, got: usize },
    #[error("n_disorder must be at least 1")]
    NoDisorder,
    #[error("the physicists' TAP form is only defined for S = 1 and h = 0")]
    PhysicsDomain,
    #[error("n_grid must be strictly increasing with at least 3 entries")]
    Grid,
    #[error("log-log fit needs positive values, got {0}")]
    NonPositive(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SitePolicy {
    /// The last site only.
    #[serde(rename = "site_N")]
    SiteN,
    /// Mean over all sites.
    #[serde(rename = "site_averaged")]
    SiteAveraged,
}

impl SitePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            SitePolicy::SiteN => "site_N",
            SitePolicy::SiteAveraged => "site_averaged",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    TapM,
    TapP,
    ConcR12,
    ConcR11,
}

impl Observable {
    pub fn as_str(self) -> &'static str {
        match self {
            Observable::TapM => "tap_m",
            Observable::TapP => "tap_p",
            Observable::ConcR12 => "conc_r12",
            Observable::ConcR11 => "conc_r11",
        }
    }
}

/// Sampling settings shared by all experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExperimentSetup {
    pub n_disorder: usize,
    pub mode: StatsMode,
    pub master_seed: u64,
    pub site_policy: SitePolicy,
    pub sweeps: u64,
    pub burn_in: u64,
    pub replicas: u32,
    pub cap: u64,
}

impl ExperimentSetup {
    pub fn exact(master_seed: u64) -> Self {
        Self {
            n_disorder: DEFAULT_DISORDER_EXACT,
            mode: StatsMode::Exact,
            master_seed,
            site_policy: SitePolicy::SiteAveraged,
            sweeps: McmcOptions::default().sweeps,
            burn_in: McmcOptions::default().burn_in,
            replicas: McmcOptions::default().replicas,
            cap: DEFAULT_ENUMERATION_CAP,
        }
    }

    pub fn mcmc(master_seed: u64) -> Self {
        Self { n_disorder: DEFAULT_DISORDER_MCMC, mode: StatsMode::Mcmc, ..Self::exact(master_seed) }
    }

    pub fn disorder_seed(&self, index: usize) -> u64 {
        derive_seed(self.master_seed, index as u64)
    }

    fn stats(&self, disorder: &DisorderSample, params: &ModelParams, reference: Option<OrderParams>) -> Result<GibbsStats, GibbsError> {
        match self.mode {
            StatsMode::Exact => enumerate(disorder, params, &EnumerateOptions { cap: self.cap, overlap_reference: reference }),
            StatsMode::Mcmc => mcmc_run(
                disorder,
                params,
                &McmcOptions {
                    sweeps: self.sweeps,
                    burn_in: self.burn_in,
                    replicas: self.replicas,
                    rng_seed: disorder.seed(),
                    batches: DEFAULT_BATCHES.min(self.sweeps),
                    overlap_reference: reference,
                },
            ),
        }
    }

    fn check(&self, n: usize, params: &ModelParams) -> Result<(), ExperimentError> {
        if self.n_disorder == 0 {
            return Err(ExperimentError::NoDisorder);
        }
        if n == 0 {
            return Err(GibbsError::EmptySystem.into());
        }
        if self.mode == StatsMode::Exact {
            let states = state_count(n, params.spin_max);
            if states > u128::from(self.cap) {
                return Err(GibbsError::CapExceeded { states, cap: self.cap }.into());
            }
        }
        Ok(())
    }

    /// Runs `per_sample` on every disorder sample, in parallel, keeping index order.
    fn run_samples<T, F>(&self, n: usize, per_sample: F) -> Result<Vec<(u64, T)>, ExperimentError>
    where
        T: Send,
        F: Fn(&DisorderSample) -> Result<T, ExperimentError> + Sync,
    {
        (0..self.n_disorder)
            .into_par_iter()
            .map(|i| {
                let disorder = DisorderSample::generate(n, self.disorder_seed(i));
                per_sample(&disorder).map(|v| (disorder.seed(), v))
            })
            .collect()
    }
}

/// Single-spin magnetization and second moment for field `β·ξ + h` and
/// crystal exponent `Δ`.
pub fn tap_rhs(local_field: f64, delta: f64, params: &ModelParams) -> (f64, f64) {
    let l = local_moments(params.spin_max, params.beta * local_field + params.field, delta);
    (l.psi, l.phi)
}

/// Cavity field `ξ` and shifted crystal field `Δ` at `site`:
/// `ξ = N^{-1/2} Σ_{i≠site} g_{i,site}⟨σ_i⟩ - β(p-q)⟨σ_site⟩`,
/// `Δ = D + β²(p-q)/2`.
pub fn cavity_field(
    disorder: &DisorderSample,
    stats: &GibbsStats,
    params: &ModelParams,
    op: &OrderParams,
    site: usize,
) -> Result<(f64, f64), ExperimentError> {
    let n = disorder.n();
    if stats.n() != n {
        return Err(ExperimentError::StatsMismatch { expected: n, got: stats.n() });
    }
    if site >= n {
        return Err(ExperimentError::SiteOutOfRange { site, n });
    }
    let m = &stats.magnetizations;
    let coupled: f64 = (0..n).filter(|&i| i != site).map(|i| disorder.coupling(i, site) * m[i]).sum();
    let b = params.beta;
    let xi = coupled / (n as f64).sqrt() - b * (op.p - op.q) * m[site];
    let delta = params.crystal_field + 0.5 * b * b * (op.p - op.q);
    Ok((xi, delta))
}

/// Squared TAP residuals at every site of one sample, `(m, p)` pairs.
fn tap_site_residuals(
    disorder: &DisorderSample,
    stats: &GibbsStats,
    params: &ModelParams,
    op: &OrderParams,
) -> Result<Vec<(f64, f64)>, ExperimentError> {
    (0..disorder.n())
        .map(|site| {
            let (xi, delta) = cavity_field(disorder, stats, params, op, site)?;
            let (m, p) = tap_rhs(xi, delta, params);
            Ok(((stats.magnetizations[site] - m).powi(2), (stats.second_moments[site] - p).powi(2)))
        })
        .collect()
}

/// The coupled TAP system for `S = 1`, `h = 0`, evaluated with the measured
/// `m_j = ⟨σ_j⟩` and `p_j = ⟨σ_j²⟩`. With `c_i = N⁻¹ Σ_{j≠i} g_ij² (p_j - m_j²)`,
/// the field is `β[N^{-1/2} Σ_{j≠i} g_ij m_j - β m_i c_i]` and the crystal
/// exponent is `D + β² c_i / 2`.
fn physics_site_residuals(disorder: &DisorderSample, stats: &GibbsStats, params: &ModelParams) -> Vec<(f64, f64)> {
    let n = disorder.n();
    let nf = n as f64;
    let b = params.beta;
    let m = &stats.magnetizations;
    let p = &stats.second_moments;
    (0..n)
        .map(|i| {
            let (mut field, mut c) = (0.0, 0.0);
            for j in (0..n).filter(|&j| j != i) {
                let g = disorder.coupling(i, j);
                field += g * m[j];
                c += g * g * (p[j] - m[j] * m[j]);
            }
            c /= nf;
            let xi = field / nf.sqrt() - b * m[i] * c;
            let l = local_moments(1, b * xi, params.crystal_field + 0.5 * b * b * c);
            ((m[i] - l.psi).powi(2), (p[i] - l.phi).powi(2))
        })
        .collect()
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// One disorder sample's contribution to an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleValue {
    pub seed: u64,
    pub first: f64,
    pub second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TapResidualReport {
    pub n: usize,
    pub params: ModelParams,
    pub order_params: OrderParams,
    pub n_disorder: usize,
    pub mode: StatsMode,
    pub mean_sq_m_residual: f64,
    pub mean_sq_p_residual: f64,
    pub site_policy: SitePolicy,
    /// Standard errors of the two means, `[m, p]`.
    pub std_errors: [f64; 2],
    /// Per-sample `(m, p)` squared residuals.
    pub samples: Vec<SampleValue>,
}

fn tap_reports(
    params: &ModelParams,
    op: &OrderParams,
    n: usize,
    setup: &ExperimentSetup,
    per_sample: &[(u64, Vec<(f64, f64)>)],
) -> [TapResidualReport; 2] {
    let build = |policy: SitePolicy| {
        let samples: Vec<SampleValue> = per_sample
            .iter()
            .map(|(seed, sites)| {
                let (first, second) = match policy {
                    SitePolicy::SiteN => *sites.last().expect("non-empty system"),
                    SitePolicy::SiteAveraged => {
                        let k = sites.len() as f64;
                        let (a, b) = sites.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
                        (a / k, b / k)
                    }
                };
                SampleValue { seed: *seed, first, second }
            })
            .collect();
        let (mm, me) = mean_and_se(&samples.iter().map(|s| s.first).collect::<Vec<_>>());
        let (pm, pe) = mean_and_se(&samples.iter().map(|s| s.second).collect::<Vec<_>>());
        TapResidualReport {
            n,
            params: *params,
            order_params: *op,
            n_disorder: setup.n_disorder,
            mode: setup.mode,
            mean_sq_m_residual: mm,
            mean_sq_p_residual: pm,
            site_policy: policy,
            std_errors: [me, pe],
            samples,
        }
    };
    [build(SitePolicy::SiteN), build(SitePolicy::SiteAveraged)]
}

/// TAP residuals under both site policies, `[site_N, site_averaged]`.
pub fn tap_residuals(
    params: &ModelParams,
    op: &OrderParams,
    n: usize,
    setup: &ExperimentSetup,
) -> Result<[TapResidualReport; 2], ExperimentError> {
    setup.check(n, params)?;
    let per_sample = setup.run_samples(n, |disorder| {
        let stats = setup.stats(disorder, params, None)?;
        tap_site_residuals(disorder, &stats, params, op)
    })?;
    Ok(tap_reports(params, op, n, setup, &per_sample))
}

/// TAP residuals under `setup.site_policy`.
pub fn tap_residual_experiment(
    params: &ModelParams,
    op: &OrderParams,
    n: usize,
    setup: &ExperimentSetup,
) -> Result<TapResidualReport, ExperimentError> {
    let [site_n, averaged] = tap_residuals(params, op, n, setup)?;
    Ok(match setup.site_policy {
        SitePolicy::SiteN => site_n,
        SitePolicy::SiteAveraged => averaged,
    })
}

fn physics_domain(params: &ModelParams) -> Result<(), ExperimentError> {
    if params.spin_max != 1 || params.field != 0.0 {
        return Err(ExperimentError::PhysicsDomain);
    }
    Ok(())
}

/// Residuals of the coupled physicists' TAP system, both site policies.
pub fn physicist_tap_residuals(
    params: &ModelParams,
    op: &OrderParams,
    n: usize,
    setup: &ExperimentSetup,
) -> Result<[TapResidualReport; 2], ExperimentError> {
    physics_domain(params)?;
    setup.check(n, params)?;
    let per_sample = setup.run_samples(n, |disorder| {
        let stats = setup.stats(disorder, params, None)?;
        Ok(physics_site_residuals(disorder, &stats, params))
    })?;
    Ok(tap_reports(params, op, n, setup, &per_sample))
}

pub fn physicist_tap_residual(
    params: &ModelParams,
    op: &OrderParams,
    n: usize,
    setup: &ExperimentSetup,
) -> Result<TapResidualReport, ExperimentError> {
    let [site_n, averaged] = physicist_tap_residuals(params, op, n, setup)?;
    Ok(match setup.site_policy {
        SitePolicy::SiteN => site_n,
        SitePolicy::SiteAveraged => averaged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub n: usize,
    pub params: ModelParams,
    pub order_params: OrderParams,
    pub n_disorder: usize,
    pub mode: StatsMode,
    /// `E⟨(R₁₂ - q)²⟩`
    pub est_r12_sq: f64,
    /// `E⟨(R₁₁ - p)²⟩`
    pub est_r11_sq: f64,
    /// `16 S² / N`
    pub bound_r12: f64,
    /// `16 S⁴ / N`
    pub bound_r11: f64,
    /// `[r12, r11]`
    pub std_errors: [f64; 2],
    pub samples: Vec<SampleValue>,
}

pub fn concentration_experiment(
    params: &ModelParams,
    op: &OrderParams,
    n: usize,
    setup: &ExperimentSetup,
) -> Result<ConcentrationReport, ExperimentError> {
    setup.check(n, params)?;
    let per_sample = setup.run_samples(n, |disorder| {
        let stats = setup.stats(disorder, params, Some(*op))?;
        let om = stats.overlap_moments.expect("reference supplied");
        Ok((om.r12_sq, om.r11_sq))
    })?;
    let samples: Vec<SampleValue> =
        per_sample.iter().map(|&(seed, (first, second))| SampleValue { seed, first, second }).collect();
    let (r12, e12) = mean_and_se(&samples.iter().map(|s| s.first).collect::<Vec<_>>());
    let (r11, e11) = mean_and_se(&samples.iter().map(|s| s.second).collect::<Vec<_>>());
    let s2 = params.s_squared();
    let nf = n as f64;
    Ok(ConcentrationReport {
        n,
        params: *params,
        order_params: *op,
        n_disorder: setup.n_disorder,
        mode: setup.mode,
        est_r12_sq: r12,
        est_r11_sq: r11,
        bound_r12: 16.0 * s2 / nf,
        bound_r11: 16.0 * s2 * s2 / nf,
        std_errors: [e12, e11],
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub which: Observable,
    pub params: ModelParams,
    pub order_params: OrderParams,
    pub mode: StatsMode,
    pub site_policy: SitePolicy,
    pub n_disorder: usize,
    pub n_grid: Vec<usize>,
    pub residuals: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Least-squares slope of `ln residual` against `ln N`.
    pub fitted_slope: f64,
    pub fitted_intercept: f64,
}

/// Least-squares line through `(ln x, ln y)`, returned as `(slope, intercept)`.
pub fn fit_log_log(xs: &[f64], ys: &[f64]) -> Result<(f64, f64), ExperimentError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(ExperimentError::Grid);
    }
    if let Some(&bad) = xs.iter().chain(ys).find(|v| !(**v > 0.0)) {
        return Err(ExperimentError::NonPositive(bad));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

pub fn scaling_study(
    params: &ModelParams,
    op: &OrderParams,
    n_grid: &[usize],
    which: Observable,
    setup: &ExperimentSetup,
) -> Result<ScalingReport, ExperimentError> {
    if n_grid.len() < 3 || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ExperimentError::Grid);
    }
    let mut residuals = Vec::with_capacity(n_grid.len());
    let mut std_errors = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let (v, e) = match which {
            Observable::TapM | Observable::TapP => {
                let r = tap_residual_experiment(params, op, n, setup)?;
                if which == Observable::TapM {
                    (r.mean_sq_m_residual, r.std_errors[0])
                } else {
                    (r.mean_sq_p_residual, r.std_errors[1])
                }
            }
            Observable::ConcR12 | Observable::ConcR11 => {
                let r = concentration_experiment(params, op, n, setup)?;
                if which == Observable::ConcR12 {
                    (r.est_r12_sq, r.std_errors[0])
                } else {
                    (r.est_r11_sq, r.std_errors[1])
                }
            }
        };
        residuals.push(v);
        std_errors.push(e);
    }
    let xs: Vec<f64> = n_grid.iter().map(|&n| n as f64).collect();
    let (fitted_slope, fitted_intercept) = fit_log_log(&xs, &residuals)?;
    Ok(ScalingReport {
        which,
        params: *params,
        order_params: *op,
        mode: setup.mode,
        site_policy: setup.site_policy,
        n_disorder: setup.n_disorder,
        n_grid: n_grid.to_vec(),
        residuals,
        std_errors,
        fitted_slope,
        fitted_intercept,
    })
}

/// `12 β² S⁴ (2 + 1/N) exp(24 β² S⁴)`; at most [`CONDITION_THRESHOLD`] makes
/// the `R₁₂` recursion close.
pub fn overlap_condition_r12(beta: f64, spin_max: u32, n: usize) -> f64 {
    let a = beta * beta * f64::from(spin_max).powi(4);
    12.0 * a * (2.0 + 1.0 / n as f64) * (24.0 * a).exp()
}

/// `4 β² S⁴ (5 + 3/N) exp(24 β² S⁴)`, the `R₁₁` counterpart.
pub fn overlap_condition_r11(beta: f64, spin_max: u32, n: usize) -> f64 {
    let a = beta * beta * f64::from(spin_max).powi(4);
    4.0 * a * (5.0 + 3.0 / n as f64) * (24.0 * a).exp()
}

/// Largest β satisfying both overlap conditions at `(S, N)`, by bisection.
pub fn concentration_beta_limit(spin_max: u32, n: usize) -> f64 {
    let ok = |b: f64| {
        overlap_condition_r12(b, spin_max, n) <= CONDITION_THRESHOLD
            && overlap_condition_r11(b, spin_max, n) <= CONDITION_THRESHOLD
    };
    let (mut lo, mut hi) = (0.0, 1.0 / f64::from(spin_max * spin_max));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}
