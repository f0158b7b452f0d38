//! Exact Gibbs averages by summing over all `(2S+1)^N` configurations.
//!
//! The state space is split into blocks by the value of spin 0. Inside a block
//! the middle spins run through an odometer with incrementally updated local
//! fields, and the last spin is summed in closed form given the others. Each
//! block accumulates weights relative to its own running log-shift; blocks are
//! merged in a fixed order, so the result does not depend on the thread count.

use rayon::prelude::*;

use super::{DisorderSample, GibbsError, GibbsStats, OverlapMoments, StatsMode};
use crate::fixedpoint::{ModelParams, OrderParams};

pub const DEFAULT_ENUMERATION_CAP: u64 = 20_000_000;

/// Allowed growth of a weight above the current shift before rescaling.
const RESHIFT_MARGIN: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnumerateOptions {
    /// Largest admissible `(2S+1)^N`.
    pub cap: u64,
    /// When set, pair correlations are accumulated and overlap moments
    /// around this `(p, q)` are returned.
    pub overlap_reference: Option<OrderParams>,
}

impl Default for EnumerateOptions {
    fn default() -> Self {
        Self { cap: DEFAULT_ENUMERATION_CAP, overlap_reference: None }
    }
}

/// `(2S+1)^N`, saturating.
pub fn state_count(n: usize, spin_max: u32) -> u128 {
    let base = 2 * u128::from(spin_max) + 1;
    let mut total: u128 = 1;
    for _ in 0..n {
        total = total.saturating_mul(base);
    }
    total
}

struct Accum {
    shift: f64,
    z: f64,
    m: Vec<f64>,
    sq: Vec<f64>,
    /// Upper triangle (including diagonal) of `Σ w σ_i σ_j`, stored `n × n`.
    pair: Option<Vec<f64>>,
    r11: f64,
    r11_sq: f64,
}

/// Per-outer-configuration sums over the last spin, already scaled.
struct LastSpinSums {
    w0: f64,
    w1: f64,
    w2: f64,
    w4: f64,
}

impl Accum {
    fn new(n: usize, pairs: bool) -> Self {
        Self {
            shift: f64::NEG_INFINITY,
            z: 0.0,
            m: vec![0.0; n],
            sq: vec![0.0; n],
            pair: pairs.then(|| vec![0.0; n * n]),
            r11: 0.0,
            r11_sq: 0.0,
        }
    }

    fn scale(&mut self, factor: f64) {
        self.z *= factor;
        self.r11 *= factor;
        self.r11_sq *= factor;
        self.m.iter_mut().for_each(|v| *v *= factor);
        self.sq.iter_mut().for_each(|v| *v *= factor);
        if let Some(p) = self.pair.as_mut() {
            p.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Returns the multiplier for a contribution whose log-weight is `log_w`.
    fn factor_for(&mut self, log_w: f64) -> f64 {
        if self.shift == f64::NEG_INFINITY {
            self.shift = log_w;
        } else if log_w > self.shift + RESHIFT_MARGIN {
            self.scale((self.shift - log_w).exp());
            self.shift = log_w;
        }
        (log_w - self.shift).exp()
    }

    fn rebase(&mut self, shift: f64) {
        if self.shift != shift {
            let f = if self.shift == f64::NEG_INFINITY { 0.0 } else { (self.shift - shift).exp() };
            self.scale(f);
            self.shift = shift;
        }
    }

    fn merge(mut self, mut other: Accum) -> Accum {
        let shift = self.shift.max(other.shift);
        self.rebase(shift);
        other.rebase(shift);
        self.z += other.z;
        self.r11 += other.r11;
        self.r11_sq += other.r11_sq;
        self.m.iter_mut().zip(&other.m).for_each(|(a, b)| *a += b);
        self.sq.iter_mut().zip(&other.sq).for_each(|(a, b)| *a += b);
        if let (Some(a), Some(b)) = (self.pair.as_mut(), other.pair.as_ref()) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
        self
    }

    /// Adds the configurations sharing `rest` (spins `0..n-1`) with every
    /// value of the last spin.
    fn add(&mut self, rest: &[f64], sums: &LastSpinSums, n: usize) {
        let last = n - 1;
        let LastSpinSums { w0, w1, w2, w4 } = *sums;
        self.z += w0;
        let mut a = 0.0;
        for (i, &s) in rest.iter().enumerate() {
            self.m[i] += w0 * s;
            self.sq[i] += w0 * s * s;
            a += s * s;
        }
        self.m[last] += w1;
        self.sq[last] += w2;
        let nf = n as f64;
        self.r11 += (w0 * a + w2) / nf;
        self.r11_sq += (w0 * a * a + 2.0 * a * w2 + w4) / (nf * nf);

        if let Some(pair) = self.pair.as_mut() {
            for (i, &si) in rest.iter().enumerate() {
                if si == 0.0 {
                    continue;
                }
                let v = w0 * si;
                let row = &mut pair[i * n..(i + 1) * n];
                for (acc, &sj) in row[i..last].iter_mut().zip(&rest[i..]) {
                    *acc += v * sj;
                }
                row[last] += si * w1;
            }
            pair[last * n + last] += w2;
        }
    }
}

struct Enumerator<'a> {
    n: usize,
    spin_max: i32,
    coupling_scale: f64,
    crystal: f64,
    field: f64,
    g: &'a [f64],
    pairs: bool,
    /// Scratch for the last spin's log-weights.
    levels: Vec<f64>,
}

impl Enumerator<'_> {
    fn last_spin_sums(&self, acc: &mut Accum, base: f64, local: f64, levels: &mut [f64]) -> LastSpinSums {
        let mut top = f64::NEG_INFINITY;
        for (k, slot) in levels.iter_mut().enumerate() {
            let s = (k as i32 - self.spin_max) as f64;
            *slot = base + s * local + self.crystal * s * s;
            top = top.max(*slot);
        }
        let factor = acc.factor_for(top);
        let mut sums = LastSpinSums { w0: 0.0, w1: 0.0, w2: 0.0, w4: 0.0 };
        for (k, &l) in levels.iter().enumerate() {
            let s = (k as i32 - self.spin_max) as f64;
            let w = (l - top).exp();
            let s2 = s * s;
            sums.w0 += w;
            sums.w1 += w * s;
            sums.w2 += w * s2;
            sums.w4 += w * s2 * s2;
        }
        sums.w0 *= factor;
        sums.w1 *= factor;
        sums.w2 *= factor;
        sums.w4 *= factor;
        sums
    }

    /// Sums every configuration with spin 0 fixed to `lead`.
    fn block(&self, lead: i32) -> Accum {
        let n = self.n;
        let last = n - 1;
        let s_max = self.spin_max;
        let mut acc = Accum::new(n, self.pairs);
        let mut levels = self.levels.clone();

        let mut spins = vec![-s_max; last];
        spins[0] = lead;
        let mut rest: Vec<f64> = spins.iter().map(|&s| f64::from(s)).collect();

        // fields[j] = Σ_{i < last, i != j} g_ij σ_i
        let mut fields = vec![0.0; n];
        for (i, &si) in rest.iter().enumerate() {
            for (j, f) in fields.iter_mut().enumerate() {
                *f += self.g[i * n + j] * si;
            }
        }
        let mut base = 0.0;
        for i in 0..last {
            for j in i + 1..last {
                base += self.coupling_scale * self.g[i * n + j] * rest[i] * rest[j];
            }
            base += self.crystal * rest[i] * rest[i] + self.field * rest[i];
        }

        loop {
            let local = self.coupling_scale * fields[last] + self.field;
            let sums = self.last_spin_sums(&mut acc, base, local, &mut levels);
            acc.add(&rest, &sums, n);

            // Odometer over spins 1..last; spin 0 is fixed for the block.
            let mut digit = 1;
            loop {
                if digit >= last {
                    return acc;
                }
                let old = spins[digit];
                let new = if old < s_max { old + 1 } else { -s_max };
                let delta = f64::from(new - old);
                let newf = f64::from(new);
                base += self.coupling_scale * delta * fields[digit]
                    + self.crystal * (newf * newf - rest[digit] * rest[digit])
                    + self.field * delta;
                let row = &self.g[digit * n..(digit + 1) * n];
                for (f, &gij) in fields.iter_mut().zip(row) {
                    *f += gij * delta;
                }
                spins[digit] = new;
                rest[digit] = newf;
                if new != -s_max {
                    break;
                }
                digit += 1;
            }
        }
    }

    fn single_site(&self) -> Accum {
        let mut acc = Accum::new(1, self.pairs);
        let mut levels = self.levels.clone();
        let sums = self.last_spin_sums(&mut acc, 0.0, self.field, &mut levels);
        acc.add(&[], &sums, 1);
        acc
    }
}

/// Exact `⟨σ_i⟩`, `⟨σ_i²⟩`, `log Z_N` and optionally the two-replica overlap
/// moments, the latter from `⟨(R₁₂-q)²⟩ = N⁻² Σ_ij ⟨σ_iσ_j⟩² - 2qN⁻¹ Σ_i ⟨σ_i⟩² + q²`.
pub fn enumerate(disorder: &DisorderSample, params: &ModelParams, opts: &EnumerateOptions) -> Result<GibbsStats, GibbsError> {
    let n = disorder.n();
    if n == 0 {
        return Err(GibbsError::EmptySystem);
    }
    let states = state_count(n, params.spin_max);
    if states > u128::from(opts.cap) {
        return Err(GibbsError::CapExceeded { states, cap: opts.cap });
    }

    let g = disorder.dense();
    let spin_max = params.spin_max as i32;
    let en = Enumerator {
        n,
        spin_max,
        coupling_scale: params.beta / (n as f64).sqrt(),
        crystal: params.crystal_field,
        field: params.field,
        g: &g,
        pairs: opts.overlap_reference.is_some(),
        levels: vec![0.0; 2 * params.spin_max as usize + 1],
    };

    let acc = if n == 1 {
        en.single_site()
    } else {
        let blocks: Vec<Accum> = (-spin_max..=spin_max).into_par_iter().map(|lead| en.block(lead)).collect();
        blocks.into_iter().reduce(Accum::merge).expect("at least one block")
    };

    let z = acc.z;
    let magnetizations: Vec<f64> = acc.m.iter().map(|v| v / z).collect();
    let second_moments: Vec<f64> = acc.sq.iter().map(|v| v / z).collect();
    let log_partition = acc.shift + z.ln();

    let overlap_moments = opts.overlap_reference.map(|reference| {
        let pair = acc.pair.as_ref().expect("pairs accumulated when a reference is given");
        let nf = n as f64;
        let mut sum_c2 = 0.0;
        for i in 0..n {
            let cii = pair[i * n + i] / z;
            sum_c2 += cii * cii;
            for j in i + 1..n {
                let cij = pair[i * n + j] / z;
                sum_c2 += 2.0 * cij * cij;
            }
        }
        let sum_m2: f64 = magnetizations.iter().map(|m| m * m).sum();
        let q = reference.q;
        let p = reference.p;
        let r12_sq = sum_c2 / (nf * nf) - 2.0 * q * sum_m2 / nf + q * q;
        let r11_mean = acc.r11 / z;
        let r11_sq = acc.r11_sq / z - 2.0 * p * r11_mean + p * p;
        OverlapMoments { reference, r12_sq: r12_sq.max(0.0), r11_sq: r11_sq.max(0.0) }
    });

    Ok(GibbsStats {
        mode: StatsMode::Exact,
        magnetizations,
        second_moments,
        log_partition: Some(log_partition),
        overlap_moments,
        mcmc_std_errors: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::{hamiltonian, overlap, self_overlap, SpinConfig};
    use crate::kernel::local_moments;
    use approx::assert_abs_diff_eq;

    fn params(s: u32, b: f64, d: f64, h: f64) -> ModelParams {
        ModelParams::new(s, b, d, h).unwrap()
    }

    fn all_configs(n: usize, s: i32) -> Vec<Vec<i32>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|c| {
                    (-s..=s).map(move |v| {
                        let mut c = c.clone();
                        c.push(v);
                        c
                    })
                })
                .collect();
        }
        out
    }

    /// Direct double sum over replica pairs and brute-force single averages.
    fn brute(d: &DisorderSample, pr: &ModelParams, reference: OrderParams) -> (Vec<f64>, Vec<f64>, f64, f64, f64) {
        let n = d.n();
        let configs: Vec<SpinConfig> = all_configs(n, pr.spin_max as i32)
            .into_iter()
            .map(|c| SpinConfig::new(c, pr.spin_max).unwrap())
            .collect();
        let energies: Vec<f64> = configs.iter().map(|c| hamiltonian(c, d, pr).unwrap()).collect();
        let top = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = energies.iter().map(|e| (e - top).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut m = vec![0.0; n];
        let mut sq = vec![0.0; n];
        let mut r11 = 0.0;
        for (c, wc) in configs.iter().zip(&w) {
            for (i, &s) in c.spins().iter().enumerate() {
                m[i] += wc * f64::from(s) / z;
                sq[i] += wc * f64::from(s * s) / z;
            }
            r11 += wc * (self_overlap(c).unwrap() - reference.p).powi(2) / z;
        }
        let mut r12 = 0.0;
        for (a, wa) in configs.iter().zip(&w) {
            for (b, wb) in configs.iter().zip(&w) {
                r12 += wa * wb * (overlap(a, b).unwrap() - reference.q).powi(2);
            }
        }
        (m, sq, top + z.ln(), r12 / (z * z), r11)
    }

    #[test]
    fn single_site_closed_form_grid() {
        let d = DisorderSample::generate(1, 0);
        for s in 1..=3u32 {
            for b in [0.0, 0.5, 2.0] {
                for dd in [-4.0, 0.0, 1.5] {
                    for h in [-1.0, 0.0, 0.7] {
                        let pr = params(s, b, dd, h);
                        let st = enumerate(&d, &pr, &EnumerateOptions::default()).unwrap();
                        let lm = local_moments(s, h, dd);
                        assert_abs_diff_eq!(st.magnetizations[0], lm.psi, epsilon = 1e-12);
                        assert_abs_diff_eq!(st.second_moments[0], lm.phi, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn matches_brute_force_including_overlaps() {
        let reference = OrderParams::new(0.6, 0.2);
        for (n, s, seed) in [(2, 1, 1), (3, 1, 5), (4, 1, 2), (3, 2, 9), (5, 1, 3)] {
            let d = DisorderSample::generate(n, seed);
            let pr = params(s, 0.9, 0.3, 0.2);
            let opts = EnumerateOptions { overlap_reference: Some(reference), ..Default::default() };
            let st = enumerate(&d, &pr, &opts).unwrap();
            let (m, sq, logz, r12, r11) = brute(&d, &pr, reference);
            for i in 0..n {
                assert_abs_diff_eq!(st.magnetizations[i], m[i], epsilon = 1e-12);
                assert_abs_diff_eq!(st.second_moments[i], sq[i], epsilon = 1e-12);
            }
            assert_abs_diff_eq!(st.log_partition.unwrap(), logz, epsilon = 1e-10);
            let om = st.overlap_moments.unwrap();
            assert_abs_diff_eq!(om.r12_sq, r12, epsilon = 1e-12);
            assert_abs_diff_eq!(om.r11_sq, r11, epsilon = 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let d = DisorderSample::generate(6, 17);
        let pr = params(1, 1.5, 0.4, 0.3);
        let logz = enumerate(&d, &pr, &EnumerateOptions::default()).unwrap().log_partition.unwrap();
        let total: f64 = all_configs(6, 1)
            .into_iter()
            .map(|c| (hamiltonian(&SpinConfig::new(c, 1).unwrap(), &d, &pr).unwrap() - logz).exp())
            .sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn zero_field_magnetizations_vanish() {
        for n in 1..=8 {
            let d = DisorderSample::generate(n, n as u64);
            let st = enumerate(&d, &params(1, 0.7, 0.2, 0.0), &EnumerateOptions::default()).unwrap();
            assert!(st.magnetizations.iter().all(|m| m.abs() <= 1e-12), "n={n}");
        }
    }

    #[test]
    fn huge_energies_stay_finite() {
        let d = DisorderSample::generate(6, 4);
        let st = enumerate(&d, &params(2, 40.0, 30.0, 10.0), &EnumerateOptions::default()).unwrap();
        assert!(st.log_partition.unwrap().is_finite());
        for i in 0..6 {
            assert!(st.magnetizations[i].abs() <= 2.0 + 1e-12);
            assert!(st.magnetizations[i].powi(2) <= st.second_moments[i] + 1e-12);
        }
    }

    #[test]
    fn cap_is_enforced() {
        let d = DisorderSample::generate(10, 0);
        let opts = EnumerateOptions { cap: 1000, overlap_reference: None };
        match enumerate(&d, &params(1, 0.1, 0.0, 0.0), &opts) {
            Err(GibbsError::CapExceeded { states, cap }) => {
                assert_eq!(states, 59_049);
                assert_eq!(cap, 1000);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(state_count(40, 3), 7u128.pow(40));
    }

    #[test]
    fn independent_spins_overlap_moment() {
        // At β = 0, h = 0, D = 0 and q = 0: ⟨R₁₂²⟩ = (1/N)(2/3)².
        for n in [3, 6, 9] {
            let d = DisorderSample::generate(n, 1);
            let opts = EnumerateOptions { overlap_reference: Some(OrderParams::new(2.0 / 3.0, 0.0)), ..Default::default() };
            let st = enumerate(&d, &params(1, 0.0, 0.0, 0.0), &opts).unwrap();
            assert_abs_diff_eq!(st.overlap_moments.unwrap().r12_sq, (4.0 / 9.0) / n as f64, epsilon = 1e-14);
        }
    }
}
