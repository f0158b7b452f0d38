//! Heat-bath Monte Carlo on a fixed disorder sample.
//!
//! A sweep visits sites `0..N` in order and redraws each spin from its exact
//! conditional over the `2S+1` values. Replicas share the disorder, advance
//! in lockstep and are measured after every post-burn-in sweep; standard
//! errors come from batch means pooled over replicas.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::{DisorderSample, GibbsError, GibbsStats, McmcStdErrors, OverlapMoments, StatsMode};
use crate::fixedpoint::{ModelParams, OrderParams};
use crate::seeding::{rng_for, Stream};

pub const DEFAULT_BATCHES: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McmcOptions {
    /// Measured sweeps per replica, after burn-in.
    pub sweeps: u64,
    pub burn_in: u64,
    pub replicas: u32,
    /// Chain `r` draws from stream `Chain(r)` of this seed.
    pub rng_seed: u64,
    /// Number of batches per replica for the batch-means error.
    pub batches: u64,
    pub overlap_reference: Option<OrderParams>,
}

impl Default for McmcOptions {
    fn default() -> Self {
        Self {
            sweeps: 20_000,
            burn_in: 2_000,
            replicas: 2,
            rng_seed: 0,
            batches: DEFAULT_BATCHES,
            overlap_reference: None,
        }
    }
}

struct Chain {
    spins: Vec<i32>,
    rng: ChaCha20Rng,
}

struct HeatBath<'a> {
    n: usize,
    spin_max: i32,
    coupling_scale: f64,
    crystal: f64,
    field: f64,
    g: &'a [f64],
    weights: Vec<f64>,
}

impl HeatBath<'_> {
    fn sweep(&mut self, chain: &mut Chain) {
        let n = self.n;
        for i in 0..n {
            let row = &self.g[i * n..(i + 1) * n];
            let sum: f64 = row.iter().zip(&chain.spins).map(|(&gij, &sj)| gij * f64::from(sj)).sum();
            let local = self.coupling_scale * sum + self.field;
            let mut top = f64::NEG_INFINITY;
            for (k, w) in self.weights.iter_mut().enumerate() {
                let s = f64::from(k as i32 - self.spin_max);
                *w = s * local + self.crystal * s * s;
                top = top.max(*w);
            }
            let mut total = 0.0;
            for w in self.weights.iter_mut() {
                *w = (*w - top).exp();
                total += *w;
            }
            let mut u = chain.rng.random::<f64>() * total;
            let mut pick = self.weights.len() - 1;
            for (k, &w) in self.weights.iter().enumerate() {
                if u < w {
                    pick = k;
                    break;
                }
                u -= w;
            }
            chain.spins[i] = pick as i32 - self.spin_max;
        }
    }
}

/// Running sums for one series, split into batches.
struct Batched {
    batch_len: u64,
    batches: u64,
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl Batched {
    fn new(sweeps: u64, batches: u64) -> Self {
        Self {
            batch_len: sweeps / batches,
            batches,
            sums: vec![0.0; batches as usize],
            counts: vec![0; batches as usize],
        }
    }

    fn push(&mut self, t: u64, v: f64) {
        // The last batch absorbs the remainder.
        let b = (t / self.batch_len).min(self.batches - 1) as usize;
        self.sums[b] += v;
        self.counts[b] += 1;
    }
}

/// Mean over all samples and batch-means standard error, pooled over series.
fn pooled(series: &[&Batched]) -> (f64, f64) {
    let total: f64 = series.iter().flat_map(|s| s.sums.iter()).sum();
    let count: u64 = series.iter().flat_map(|s| s.counts.iter()).sum();
    let mean = total / count as f64;
    let batch_means: Vec<f64> = series
        .iter()
        .flat_map(|s| s.sums.iter().zip(&s.counts).map(|(&x, &c)| x / c as f64))
        .collect();
    let k = batch_means.len() as f64;
    let bm = batch_means.iter().sum::<f64>() / k;
    let var = batch_means.iter().map(|x| (x - bm).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

pub fn mcmc_run(disorder: &DisorderSample, params: &ModelParams, opts: &McmcOptions) -> Result<GibbsStats, GibbsError> {
    let n = disorder.n();
    if n == 0 {
        return Err(GibbsError::EmptySystem);
    }
    if opts.sweeps == 0 {
        return Err(GibbsError::InvalidSweeps);
    }
    if opts.batches < 2 || opts.batches > opts.sweeps {
        return Err(GibbsError::InvalidBatches { batches: opts.batches, sweeps: opts.sweeps });
    }
    if opts.replicas == 0 {
        return Err(GibbsError::NoReplicas);
    }
    if opts.overlap_reference.is_some() && opts.replicas < 2 {
        return Err(GibbsError::OverlapNeedsReplicas(opts.replicas));
    }

    let g = disorder.dense();
    let spin_max = params.spin_max as i32;
    let mut bath = HeatBath {
        n,
        spin_max,
        coupling_scale: params.beta / (n as f64).sqrt(),
        crystal: params.crystal_field,
        field: params.field,
        g: &g,
        weights: vec![0.0; 2 * params.spin_max as usize + 1],
    };

    let mut chains: Vec<Chain> = (0..opts.replicas)
        .map(|r| {
            let mut rng = rng_for(opts.rng_seed, Stream::Chain(r));
            let spins = (0..n).map(|_| rng.random_range(-spin_max..=spin_max)).collect();
            Chain { spins, rng }
        })
        .collect();

    for _ in 0..opts.burn_in {
        for chain in chains.iter_mut() {
            bath.sweep(chain);
        }
    }

    let new_series = || Batched::new(opts.sweeps, opts.batches);
    // [replica][site]
    let mut mag: Vec<Vec<Batched>> = (0..opts.replicas).map(|_| (0..n).map(|_| new_series()).collect()).collect();
    let mut sq: Vec<Vec<Batched>> = (0..opts.replicas).map(|_| (0..n).map(|_| new_series()).collect()).collect();
    let mut r12 = new_series();
    let mut r11 = new_series();
    let nf = n as f64;

    for t in 0..opts.sweeps {
        for chain in chains.iter_mut() {
            bath.sweep(chain);
        }
        for (r, chain) in chains.iter().enumerate() {
            for (i, &s) in chain.spins.iter().enumerate() {
                let s = f64::from(s);
                mag[r][i].push(t, s);
                sq[r][i].push(t, s * s);
            }
        }
        if let Some(reference) = opts.overlap_reference {
            let mut acc12 = 0.0;
            let mut pairs = 0;
            for a in 0..chains.len() {
                for b in a + 1..chains.len() {
                    let dot: i64 = chains[a].spins.iter().zip(&chains[b].spins).map(|(&x, &y)| i64::from(x * y)).sum();
                    acc12 += (dot as f64 / nf - reference.q).powi(2);
                    pairs += 1;
                }
            }
            r12.push(t, acc12 / f64::from(pairs));
            let acc11: f64 = chains
                .iter()
                .map(|c| {
                    let s2: i64 = c.spins.iter().map(|&x| i64::from(x * x)).sum();
                    (s2 as f64 / nf - reference.p).powi(2)
                })
                .sum();
            r11.push(t, acc11 / chains.len() as f64);
        }
    }

    let mut magnetizations = Vec::with_capacity(n);
    let mut second_moments = Vec::with_capacity(n);
    let mut se_m = Vec::with_capacity(n);
    let mut se_sq = Vec::with_capacity(n);
    for i in 0..n {
        let (m, e) = pooled(&mag.iter().map(|r| &r[i]).collect::<Vec<_>>());
        magnetizations.push(m);
        se_m.push(e);
        let (m, e) = pooled(&sq.iter().map(|r| &r[i]).collect::<Vec<_>>());
        second_moments.push(m);
        se_sq.push(e);
    }

    let (overlap_moments, se12, se11) = match opts.overlap_reference {
        Some(reference) => {
            let (m12, e12) = pooled(&[&r12]);
            let (m11, e11) = pooled(&[&r11]);
            (Some(OverlapMoments { reference, r12_sq: m12, r11_sq: m11 }), Some(e12), Some(e11))
        }
        None => (None, None, None),
    };

    Ok(GibbsStats {
        mode: StatsMode::Mcmc,
        magnetizations,
        second_moments,
        log_partition: None,
        overlap_moments,
        mcmc_std_errors: Some(McmcStdErrors { magnetizations: se_m, second_moments: se_sq, r12_sq: se12, r11_sq: se11 }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::{enumerate, EnumerateOptions};
    use crate::kernel::local_moments;

    fn params(s: u32, b: f64, d: f64, h: f64) -> ModelParams {
        ModelParams::new(s, b, d, h).unwrap()
    }

    #[test]
    fn rejects_invalid_counts() {
        let d = DisorderSample::generate(4, 0);
        let pr = params(1, 0.1, 0.0, 0.0);
        let base = McmcOptions { sweeps: 1000, burn_in: 10, ..Default::default() };
        assert!(matches!(mcmc_run(&d, &pr, &McmcOptions { sweeps: 0, ..base }), Err(GibbsError::InvalidSweeps)));
        assert!(matches!(mcmc_run(&d, &pr, &McmcOptions { replicas: 0, ..base }), Err(GibbsError::NoReplicas)));
        assert!(matches!(
            mcmc_run(&d, &pr, &McmcOptions { replicas: 1, overlap_reference: Some(OrderParams::new(0.5, 0.1)), ..base }),
            Err(GibbsError::OverlapNeedsReplicas(1))
        ));
        assert!(matches!(mcmc_run(&d, &pr, &McmcOptions { batches: 1, ..base }), Err(GibbsError::InvalidBatches { .. })));
        assert!(matches!(mcmc_run(&d, &pr, &McmcOptions { sweeps: 50, ..base }), Err(GibbsError::InvalidBatches { .. })));
    }

    #[test]
    fn seeded_runs_reproduce() {
        let d = DisorderSample::generate(5, 2);
        let pr = params(2, 0.3, 0.1, 0.2);
        let opts = McmcOptions { sweeps: 2000, burn_in: 100, rng_seed: 77, overlap_reference: Some(OrderParams::new(1.0, 0.2)), ..Default::default() };
        let a = mcmc_run(&d, &pr, &opts).unwrap();
        let b = mcmc_run(&d, &pr, &opts).unwrap();
        assert_eq!(a, b);
        let c = mcmc_run(&d, &pr, &McmcOptions { rng_seed: 78, ..opts }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn independent_spins_second_moment() {
        // β = 0: each site is an independent single spin.
        let d = DisorderSample::generate(5, 8);
        for (s, dd) in [(1u32, 0.0), (1, 0.8), (2, -0.3)] {
            let pr = params(s, 0.0, dd, 0.0);
            let st = mcmc_run(&d, &pr, &McmcOptions { sweeps: 40_000, burn_in: 10, rng_seed: 5, ..Default::default() }).unwrap();
            let exact = local_moments(s, 0.0, dd).phi;
            let se = st.mcmc_std_errors.as_ref().unwrap();
            for i in 0..5 {
                assert!((st.second_moments[i] - exact).abs() <= 3.0 * se.second_moments[i] + 1e-12, "site {i}");
            }
        }
    }

    #[test]
    fn zero_field_magnetization_averages_to_zero() {
        let d = DisorderSample::generate(6, 12);
        let pr = params(1, 0.2, 0.0, 0.0);
        let st = mcmc_run(&d, &pr, &McmcOptions { sweeps: 40_000, burn_in: 100, rng_seed: 3, ..Default::default() }).unwrap();
        let se = st.mcmc_std_errors.unwrap();
        let mean = st.magnetizations.iter().sum::<f64>() / 6.0;
        let se_mean = (se.magnetizations.iter().map(|e| e * e).sum::<f64>()).sqrt() / 6.0;
        assert!(mean.abs() <= 3.0 * se_mean, "{mean} vs {se_mean}");
    }

    #[test]
    fn agrees_with_enumeration_small_spin_two() {
        let d = DisorderSample::generate(4, 21);
        let pr = params(2, 0.3, -0.2, 0.25);
        let reference = OrderParams::new(1.2, 0.3);
        let exact = enumerate(&d, &pr, &EnumerateOptions { overlap_reference: Some(reference), ..Default::default() }).unwrap();
        let st = mcmc_run(&d, &pr, &McmcOptions { sweeps: 60_000, burn_in: 500, replicas: 3, rng_seed: 9, overlap_reference: Some(reference), ..Default::default() }).unwrap();
        let se = st.mcmc_std_errors.as_ref().unwrap();
        let mut within = 0;
        for i in 0..4 {
            within += usize::from((st.magnetizations[i] - exact.magnetizations[i]).abs() <= 3.0 * se.magnetizations[i]);
            within += usize::from((st.second_moments[i] - exact.second_moments[i]).abs() <= 3.0 * se.second_moments[i]);
        }
        assert!(within >= 7, "{within}/8 within 3 SE");
        let om = st.overlap_moments.unwrap();
        let ex = exact.overlap_moments.unwrap();
        assert!((om.r12_sq - ex.r12_sq).abs() <= 4.0 * se.r12_sq.unwrap());
        assert!((om.r11_sq - ex.r11_sq).abs() <= 4.0 * se.r11_sq.unwrap());
    }
}
