//! The finite-N Hamiltonian and its Gibbs averages.
//!
//! The Gibbs weight is `exp(H(σ))` with
//! `H(σ) = (β/√N) Σ_{i<j} g_ij σ_i σ_j + D Σ σ_i² + h Σ σ_i`; β is part of
//! `H`, there is no separate `-β` in the exponent.

mod disorder;
mod enumerate;
mod mcmc;

use serde::Serialize;
use thiserror::Error;

use crate::fixedpoint::{ModelParams, OrderParams};

pub use disorder::{DisorderSample, FORMAT_VERSION};
pub use enumerate::{enumerate, state_count, EnumerateOptions, DEFAULT_ENUMERATION_CAP};
pub use mcmc::{mcmc_run, McmcOptions, DEFAULT_BATCHES};

#[derive(Debug, Error)]
pub enum GibbsError {
    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("spin {value} at site {index} exceeds the magnitude bound {spin_max}")]
    SpinOutOfRange { index: usize, value: i32, spin_max: u32 },
    #[error("{states} states exceed the enumeration cap {cap}")]
    CapExceeded { states: u128, cap: u64 },
    #[error("sweep count must be positive")]
    InvalidSweeps,
    #[error("batch count {batches} must lie in 2..=sweeps ({sweeps})")]
    InvalidBatches { batches: u64, sweeps: u64 },
    #[error("at least one replica is required")]
    NoReplicas,
    #[error("overlap moments need at least two replicas, got {0}")]
    OverlapNeedsReplicas(u32),
    #[error("system size must be at least 1")]
    EmptySystem,
    #[error("malformed disorder file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A configuration `σ ∈ {-S, ..., S}^N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpinConfig {
    spins: Vec<i32>,
}

impl SpinConfig {
    pub fn new(spins: Vec<i32>, spin_max: u32) -> Result<Self, GibbsError> {
        if let Some((index, &value)) = spins.iter().enumerate().find(|(_, s)| s.unsigned_abs() > spin_max) {
            return Err(GibbsError::SpinOutOfRange { index, value, spin_max });
        }
        Ok(Self { spins })
    }

    pub fn filled(n: usize, value: i32) -> Self {
        Self { spins: vec![value; n] }
    }

    pub fn spins(&self) -> &[i32] {
        &self.spins
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }
}

pub fn hamiltonian(config: &SpinConfig, disorder: &DisorderSample, params: &ModelParams) -> Result<f64, GibbsError> {
    let n = disorder.n();
    if config.len() != n {
        return Err(GibbsError::SizeMismatch { expected: n, got: config.len() });
    }
    let s = config.spins();
    if let Some((index, &value)) = s.iter().enumerate().find(|(_, v)| v.unsigned_abs() > params.spin_max) {
        return Err(GibbsError::SpinOutOfRange { index, value, spin_max: params.spin_max });
    }
    let mut pair = 0.0;
    for i in 0..n {
        if s[i] == 0 {
            continue;
        }
        for j in i + 1..n {
            pair += disorder.coupling(i, j) * f64::from(s[i] * s[j]);
        }
    }
    let sq: i64 = s.iter().map(|&v| i64::from(v * v)).sum();
    let lin: i64 = s.iter().map(|&v| i64::from(v)).sum();
    Ok(params.beta / (n as f64).sqrt() * pair + params.crystal_field * sq as f64 + params.field * lin as f64)
}

/// `R₁₂ = (1/N) Σ σ¹_i σ²_i`.
pub fn overlap(a: &SpinConfig, b: &SpinConfig) -> Result<f64, GibbsError> {
    if a.len() != b.len() {
        return Err(GibbsError::SizeMismatch { expected: a.len(), got: b.len() });
    }
    if a.is_empty() {
        return Err(GibbsError::EmptySystem);
    }
    let dot: i64 = a.spins().iter().zip(b.spins()).map(|(&x, &y)| i64::from(x * y)).sum();
    Ok(dot as f64 / a.len() as f64)
}

/// `R₁₁ = (1/N) Σ σ_i²`.
pub fn self_overlap(a: &SpinConfig) -> Result<f64, GibbsError> {
    overlap(a, a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsMode {
    Exact,
    Mcmc,
}

/// `⟨(R₁₂ - q)²⟩` and `⟨(R₁₁ - p)²⟩` for a reference `(p, q)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverlapMoments {
    pub reference: OrderParams,
    pub r12_sq: f64,
    pub r11_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McmcStdErrors {
    pub magnetizations: Vec<f64>,
    pub second_moments: Vec<f64>,
    pub r12_sq: Option<f64>,
    pub r11_sq: Option<f64>,
}

/// Thermal averages for one disorder sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GibbsStats {
    pub mode: StatsMode,
    /// `⟨σ_i⟩`
    pub magnetizations: Vec<f64>,
    /// `⟨σ_i²⟩`
    pub second_moments: Vec<f64>,
    /// `log Z_N`; only available from exact enumeration.
    pub log_partition: Option<f64>,
    pub overlap_moments: Option<OverlapMoments>,
    pub mcmc_std_errors: Option<McmcStdErrors>,
}

impl GibbsStats {
    pub fn n(&self) -> usize {
        self.magnetizations.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn params(s: u32, b: f64, d: f64, h: f64) -> ModelParams {
        ModelParams::new(s, b, d, h).unwrap()
    }

    #[test]
    fn zero_config_has_zero_energy() {
        let d = DisorderSample::generate(7, 1);
        let e = hamiltonian(&SpinConfig::filled(7, 0), &d, &params(2, 0.8, 1.3, -0.4)).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn two_spin_hand_value() {
        let d = DisorderSample::from_couplings(2, 0, vec![1.0]).unwrap();
        let e = hamiltonian(&SpinConfig::filled(2, 1), &d, &params(1, 1.0, 0.5, 0.25)).unwrap();
        assert_abs_diff_eq!(e, 1.0 / 2f64.sqrt() + 1.0 + 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(e, 2.207_107, epsilon = 1e-6);
    }

    #[test]
    fn hamiltonian_errors() {
        let d = DisorderSample::generate(3, 1);
        let pr = params(1, 0.5, 0.0, 0.0);
        assert!(matches!(hamiltonian(&SpinConfig::filled(4, 0), &d, &pr), Err(GibbsError::SizeMismatch { .. })));
        let big = SpinConfig::new(vec![0, 2, 0], 2).unwrap();
        assert!(matches!(hamiltonian(&big, &d, &pr), Err(GibbsError::SpinOutOfRange { index: 1, .. })));
        assert!(SpinConfig::new(vec![3], 2).is_err());
    }

    #[test]
    fn overlap_examples() {
        let full = SpinConfig::filled(5, 3);
        assert_eq!(overlap(&full, &full).unwrap(), 9.0);
        assert_eq!(self_overlap(&full).unwrap(), 9.0);
        let zero = SpinConfig::filled(5, 0);
        assert_eq!(overlap(&zero, &full).unwrap(), 0.0);
        assert_eq!(self_overlap(&zero).unwrap(), 0.0);
        let a = SpinConfig::new(vec![1, -1, 0, 1], 1).unwrap();
        let b = SpinConfig::new(vec![1, 1, 0, -1], 1).unwrap();
        assert_eq!(overlap(&a, &b).unwrap(), -0.25);
        assert!(overlap(&a, &zero).is_err());
    }

    fn config_strategy() -> impl Strategy<Value = (u32, Vec<i32>, Vec<i32>)> {
        (1u32..4, 1usize..12).prop_flat_map(|(s, n)| {
            let s_i = s as i32;
            (Just(s), prop::collection::vec(-s_i..=s_i, n), prop::collection::vec(-s_i..=s_i, n))
        })
    }

    proptest! {
        #[test]
        fn overlap_bounds((s, a, b) in config_strategy()) {
            let a = SpinConfig::new(a, s).unwrap();
            let b = SpinConfig::new(b, s).unwrap();
            let s2 = f64::from(s * s);
            prop_assert!(overlap(&a, &b).unwrap().abs() <= s2);
            let r11 = self_overlap(&a).unwrap();
            prop_assert!((0.0..=s2).contains(&r11));
        }

        #[test]
        fn global_flip_symmetry_at_zero_field((s, a, _) in config_strategy(), seed in 0u64..100, beta in 0.0f64..2.0, d in -3.0f64..3.0) {
            let n = a.len();
            let disorder = DisorderSample::generate(n, seed);
            let pr = params(s, beta, d, 0.0);
            let flipped: Vec<i32> = a.iter().map(|v| -v).collect();
            let e1 = hamiltonian(&SpinConfig::new(a, s).unwrap(), &disorder, &pr).unwrap();
            let e2 = hamiltonian(&SpinConfig::new(flipped, s).unwrap(), &disorder, &pr).unwrap();
            prop_assert_eq!(e1, e2);
        }
    }
}
