//! Single-spin Boltzmann moments.
//!
//! For a spin `s ∈ {-S, ..., S}` with log-weight `s·y + s²·e`, every quantity
//! used by the order-parameter map, the TAP right-hand sides and the
//! one-site closed forms is a ratio of sums over `γ = 1..=S` of
//! `2 cosh(γ y) e^{γ² e}` or `2 sinh(γ y) e^{γ² e}` against
//! `1 + Σ 2 cosh(γ y) e^{γ² e}`. Those sums are evaluated with the largest
//! exponent factored out, so `e` in the thousands is harmless.

/// Normalized single-spin moments for field `y` and crystal exponent `e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMoments {
    /// Probability of the empty state `s = 0`.
    pub f: f64,
    /// `⟨s⟩`.
    pub psi: f64,
    /// `⟨s²⟩`.
    pub phi: f64,
    /// `⟨s³⟩`.
    pub eta: f64,
    /// `⟨s⁴⟩`.
    pub theta: f64,
}

pub fn local_moments(spin_max: u32, y: f64, e: f64) -> LocalMoments {
    let ay = y.abs();
    let sign = if y < 0.0 { -1.0 } else { 1.0 };
    let shift = (1..=spin_max)
        .map(|g| {
            let g = f64::from(g);
            g * g * e + g * ay
        })
        .fold(0.0_f64, f64::max);

    let empty = (-shift).exp();
    let mut den = empty;
    let (mut m1, mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0, 0.0);
    for g in 1..=spin_max {
        let g = f64::from(g);
        let lead = (g * g * e + g * ay - shift).exp();
        let tail = -2.0 * g * ay;
        // 2cosh(γy)e^{γ²e - shift} and 2sinh(γy)e^{γ²e - shift}
        let ch = lead * (1.0 + tail.exp());
        let sh = sign * lead * -tail.exp_m1();
        den += ch;
        m1 += g * sh;
        m2 += g * g * ch;
        m3 += g * g * g * sh;
        m4 += g * g * g * g * ch;
    }
    LocalMoments {
        f: empty / den,
        psi: m1 / den,
        phi: m2 / den,
        eta: m3 / den,
        theta: m4 / den,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn naive(spin_max: i32, y: f64, e: f64) -> [f64; 5] {
        let mut z = 0.0;
        let mut m = [0.0; 4];
        for s in -spin_max..=spin_max {
            let w = (f64::from(s) * y + f64::from(s * s) * e).exp();
            z += w;
            for (k, mk) in m.iter_mut().enumerate() {
                *mk += w * f64::from(s).powi(k as i32 + 1);
            }
        }
        [1.0 / z, m[0] / z, m[1] / z, m[2] / z, m[3] / z]
    }

    #[test]
    fn free_spin_one() {
        let m = local_moments(1, 0.0, 0.0);
        assert_abs_diff_eq!(m.f, 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.phi, 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(m.psi, 0.0);
        assert_eq!(m.eta, 0.0);
    }

    #[test]
    fn extreme_crystal_fields() {
        let empty = local_moments(3, 0.4, -2000.0);
        assert_abs_diff_eq!(empty.f, 1.0, epsilon = 1e-15);
        assert_eq!(empty.phi, 0.0);
        let full = local_moments(2, 0.0, 2000.0);
        assert!(full.f.is_finite() && full.f >= 0.0);
        assert_abs_diff_eq!(full.phi, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(full.theta, 16.0, epsilon = 1e-12);
        let saturated = local_moments(2, 800.0, 0.0);
        assert_abs_diff_eq!(saturated.psi, 2.0, epsilon = 1e-12);
        let negative = local_moments(2, -800.0, 0.0);
        assert_abs_diff_eq!(negative.psi, -2.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn matches_direct_sum(spin_max in 1i32..4, y in -5.0f64..5.0, e in -5.0f64..5.0) {
            let m = local_moments(spin_max as u32, y, e);
            let r = naive(spin_max, y, e);
            for (got, want) in [m.f, m.psi, m.phi, m.eta, m.theta].iter().zip(r) {
                prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }

        #[test]
        fn moment_ordering(spin_max in 1u32..5, y in -50.0f64..50.0, e in -50.0f64..50.0) {
            let m = local_moments(spin_max, y, e);
            let s = f64::from(spin_max);
            prop_assert!(m.psi.abs() <= s + 1e-12);
            prop_assert!(m.phi >= -1e-15 && m.phi <= s * s + 1e-12);
            prop_assert!(m.psi * m.psi <= m.phi + 1e-12);
            prop_assert!(m.theta <= s.powi(4) + 1e-9);
            prop_assert!(m.eta.abs() <= s.powi(3) + 1e-9);
        }
    }
}
