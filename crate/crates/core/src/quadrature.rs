//! Gauss-Hermite quadrature in standard-Gaussian coordinates.
//!
//! A [`GaussianRule`] of order `n` approximates `E[g(X)]` for `X ~ N(0, 1)` and
//! is exact for polynomials of degree `2n - 1`. Nodes are roots of the
//! orthonormal Hermite recurrence (weight `e^{-x^2}`), bracketed by a sign scan
//! and polished with safeguarded Newton, then rescaled, so callers never see the physicists' convention.

use std::f64::consts::{PI, SQRT_2};

use thiserror::Error;

/// Largest supported order. Beyond roughly 350 nodes the outermost weights
/// underflow `f64`, so the cap leaves some headroom.
pub const MAX_ORDER: usize = 300;

/// Order used by every fixed-point solve unless the caller overrides it.
pub const DEFAULT_ORDER: usize = 61;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("quadrature order must be at least 1")]
    ZeroOrder,
    #[error("quadrature order {0} exceeds the supported maximum {MAX_ORDER}")]
    OrderTooLarge(usize),
    #[error("root {index} of the order-{order} Hermite polynomial was not located")]
    NodeNotConverged { order: usize, index: usize },
    #[error("integrand returned a non-finite value {value} at node {node}")]
    NonFinite { node: f64, value: f64 },
}

/// Nodes and probability weights for `E[g(X)]`, `X` standard Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussianRule {
    pub fn new(order: usize) -> Result<Self, QuadratureError> {
        build_rule(order)
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Strictly increasing abscissae.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Positive weights summing to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn expect<G>(&self, g: G) -> Result<f64, QuadratureError>
    where
        G: Fn(f64) -> f64,
    {
        let [v] = self.expect_array(|x| [g(x)])?;
        Ok(v)
    }

    /// Several expectations from a single pass over the nodes.
    ///
    /// Mirrored nodes are summed in pairs, smallest weights first, so an
    /// integrand that is odd in floating point integrates to exactly zero.
    pub fn expect_array<const K: usize, G>(&self, g: G) -> Result<[f64; K], QuadratureError>
    where
        G: Fn(f64) -> [f64; K],
    {
        let n = self.nodes.len();
        let eval = |i: usize| -> Result<[f64; K], QuadratureError> {
            let x = self.nodes[i];
            let v = g(x);
            match v.iter().find(|v| !v.is_finite()) {
                Some(&bad) => Err(QuadratureError::NonFinite { node: x, value: bad }),
                None => Ok(v),
            }
        };

        let mut acc = [0.0; K];
        for i in 0..n / 2 {
            let lo = eval(i)?;
            let hi = eval(n - 1 - i)?;
            let w = self.weights[i];
            for k in 0..K {
                acc[k] += w * (lo[k] + hi[k]);
            }
        }
        if n % 2 == 1 {
            let mid = eval(n / 2)?;
            let w = self.weights[n / 2];
            for k in 0..K {
                acc[k] += w * mid[k];
            }
        }
        Ok(acc)
    }
}

/// Builds the `order`-point rule. Orders `1..=MAX_ORDER` are accepted.
pub fn build_rule(order: usize) -> Result<GaussianRule, QuadratureError> {
    if order == 0 {
        return Err(QuadratureError::ZeroOrder);
    }
    if order > MAX_ORDER {
        return Err(QuadratureError::OrderTooLarge(order));
    }

    let n = order;
    let half = n.div_ceil(2);
    let positive = n / 2;
    // Positive roots of H_n (weight e^{-x^2}), bracketed by a sign scan whose
    // step is well below the smallest root spacing π/√(2n+1), then refined.
    let upper = (2.0 * n as f64 + 1.0).sqrt() + 1.0;
    let step = 0.02;
    let mut roots = Vec::with_capacity(half);
    let mut a = if n % 2 == 1 { 0.05 } else { 0.0 };
    let mut pa = hermite_orthonormal(n, a).0;
    while a < upper && roots.len() < positive {
        let b = a + step;
        let pb = hermite_orthonormal(n, b).0;
        if pa == 0.0 || pa.signum() != pb.signum() {
            let root = refine_root(n, a, b).ok_or(QuadratureError::NodeNotConverged { order: n, index: roots.len() })?;
            roots.push(root);
        }
        a = b;
        pa = pb;
    }
    if roots.len() != positive {
        return Err(QuadratureError::NodeNotConverged { order: n, index: roots.len() });
    }
    roots.reverse();
    if n % 2 == 1 {
        roots.push(0.0);
    }
    let hweights: Vec<f64> = roots
        .iter()
        .map(|&z| {
            let (_, dp) = hermite_orthonormal(n, z);
            2.0 / (dp * dp)
        })
        .collect();

    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n / 2 {
        nodes.push(-SQRT_2 * roots[i]);
        weights.push(hweights[i] / PI.sqrt());
    }
    if n % 2 == 1 {
        nodes.push(0.0);
        weights.push(hweights[half - 1] / PI.sqrt());
    }
    for i in (0..n / 2).rev() {
        nodes.push(SQRT_2 * roots[i]);
        weights.push(hweights[i] / PI.sqrt());
    }

    if weights.iter().any(|&w| !(w >= f64::MIN_POSITIVE) || !w.is_finite()) {
        return Err(QuadratureError::OrderTooLarge(order));
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(GaussianRule { nodes, weights })
}

/// Safeguarded Newton on a sign-change bracket `[lo, hi]`.
fn refine_root(n: usize, mut lo: f64, mut hi: f64) -> Option<f64> {
    let p_lo = hermite_orthonormal(n, lo).0;
    if p_lo == 0.0 {
        return Some(lo);
    }
    let rising = p_lo < 0.0;
    let mut z = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (p, dp) = hermite_orthonormal(n, z);
        if p == 0.0 {
            return Some(z);
        }
        if (p < 0.0) == rising {
            lo = z;
        } else {
            hi = z;
        }
        let newton = z - p / dp;
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - z).abs() <= 1e-15 * z.abs().max(1.0) {
            return Some(next);
        }
        z = next;
    }
    None
}

/// Orthonormal Hermite polynomial value at `z` and its derivative.
fn hermite_orthonormal(n: usize, z: f64) -> (f64, f64) {
    let mut p1 = PI.powf(-0.25);
    let mut p2 = 0.0;
    for j in 1..=n {
        let jf = j as f64;
        let p3 = p2;
        p2 = p1;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, (2.0 * n as f64).sqrt() * p2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn double_factorial(k: u32) -> f64 {
        (1..=k).rev().step_by(2).map(f64::from).product()
    }

    fn gaussian_moment(k: u32) -> f64 {
        if k % 2 == 1 {
            0.0
        } else if k == 0 {
            1.0
        } else {
            double_factorial(k - 1)
        }
    }

    #[test]
    fn order_one_is_degenerate() {
        let rule = build_rule(1).unwrap();
        assert_eq!(rule.nodes(), &[0.0]);
        assert_eq!(rule.weights(), &[1.0]);
        assert_eq!(rule.expect(|_| 1.0).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_orders() {
        assert_eq!(build_rule(0), Err(QuadratureError::ZeroOrder));
        assert_eq!(build_rule(MAX_ORDER + 1), Err(QuadratureError::OrderTooLarge(MAX_ORDER + 1)));
        assert!(build_rule(200).is_ok());
        assert!(build_rule(MAX_ORDER).is_ok());
    }

    #[test]
    fn second_moment_order_ten() {
        let rule = build_rule(10).unwrap();
        assert_abs_diff_eq!(rule.expect(|x| x * x).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cosh_moment_generating_function() {
        let rule = build_rule(40).unwrap();
        let a: f64 = 0.7;
        let v = rule.expect(|x| (a * x).cosh()).unwrap();
        assert_abs_diff_eq!(v, (a * a / 2.0).exp(), epsilon = 1e-10);
        assert_abs_diff_eq!(v, 1.277_621_313_204_886_6, epsilon = 1e-10);
    }

    #[test]
    fn constant_and_odd_integrands() {
        let rule = build_rule(17).unwrap();
        assert_abs_diff_eq!(rule.expect(|_| 2.5).unwrap(), 2.5, epsilon = 1e-14);
        for order in [1, 2, 3, 8, 61, 120] {
            let rule = build_rule(order).unwrap();
            assert!(rule.expect(|x| x).unwrap().abs() <= 1e-14);
            assert!(rule.expect(|x| x.powi(7) + x.sinh()).unwrap().abs() <= 1e-12);
        }
    }

    #[test]
    fn fourth_moment_matches_trapezoid() {
        // Trapezoid on [-12, 12] is spectrally accurate for Gaussian-decaying integrands.
        let steps = 24_000;
        let hstep = 24.0 / steps as f64;
        let dens = |x: f64| (-x * x / 2.0).exp() / (2.0 * PI).sqrt();
        let trapezoid: f64 = (0..=steps)
            .map(|i| {
                let x = -12.0 + i as f64 * hstep;
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                w * x.powi(4) * dens(x)
            })
            .sum::<f64>()
            * hstep;
        assert_abs_diff_eq!(trapezoid, 3.0, epsilon = 1e-12);
        for order in [3, 4, 10, 61] {
            let rule = build_rule(order).unwrap();
            assert_abs_diff_eq!(rule.expect(|x| x.powi(4)).unwrap(), trapezoid, epsilon = 1e-12);
        }
    }

    #[test]
    fn nonfinite_integrand_is_reported() {
        let rule = build_rule(5).unwrap();
        let err = rule.expect(|x| if x > 1.0 { f64::NAN } else { x }).unwrap_err();
        assert!(matches!(err, QuadratureError::NonFinite { .. }));
    }

    #[test]
    fn weights_and_nodes_invariants() {
        for order in [1, 2, 5, 20, 61, 120, 200, MAX_ORDER] {
            let rule = build_rule(order).unwrap();
            let total: f64 = rule.weights().iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
            assert!(rule.weights().iter().all(|&w| w > 0.0));
            assert!(rule.nodes().windows(2).all(|w| w[0] < w[1]));
            let n = rule.order();
            for i in 0..n {
                assert_abs_diff_eq!(rule.nodes()[i], -rule.nodes()[n - 1 - i], epsilon = 1e-12);
                assert_abs_diff_eq!(rule.weights()[i], rule.weights()[n - 1 - i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn exact_up_to_degree_2n_minus_1() {
        for order in [1, 2, 3, 5, 9, 20, 61] {
            let rule = build_rule(order).unwrap();
            for k in 0..(2 * order as u32) {
                let exact = gaussian_moment(k);
                let got = rule.expect(|x| x.powi(k as i32)).unwrap();
                let scale = exact.abs().max(1.0);
                assert!(
                    (got - exact).abs() <= 1e-10 * scale,
                    "order {order}, k {k}: {got} vs {exact}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn odd_functions_vanish(a in -3.0f64..3.0, b in -2.0f64..2.0, order in 1usize..150) {
            let rule = build_rule(order).unwrap();
            let v = rule.expect(|x| a * x + (b * x).sin() + (b * x).tanh()).unwrap();
            prop_assert!(v.abs() <= 1e-12);
        }
    }
}
