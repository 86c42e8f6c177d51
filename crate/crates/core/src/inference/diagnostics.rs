//! Rank-normalised split-R̂ and bulk/tail effective sample sizes.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub rhat: f64,
    pub ess_bulk: f64,
    pub ess_tail: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub params: Vec<ParamDiagnostics>,
    pub divergences: usize,
    pub max_treedepth_hits: usize,
    pub max_rhat: f64,
    pub min_ess_bulk: f64,
}

/// Diagnostics for each column of per-chain draws `chains[c][iter][param]`.
pub fn diagnose(names: &[String], chains: &[Vec<Vec<f64>>]) -> DiagnosticsReport {
    let dim = names.len();
    let mut params = Vec::with_capacity(dim);
    for (j, name) in names.iter().enumerate() {
        let cols: Vec<Vec<f64>> = chains
            .iter()
            .map(|ch| ch.iter().map(|d| d[j]).collect())
            .collect();
        let all: Vec<f64> = cols.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let sd = if n > 1.0 {
            (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        params.push(ParamDiagnostics {
            name: name.clone(),
            mean,
            sd,
            rhat: rhat(&cols),
            ess_bulk: ess_bulk(&cols),
            ess_tail: ess_tail(&cols),
        });
    }
    let max_rhat = params.iter().map(|p| p.rhat).fold(f64::NAN, f64::max);
    let min_ess_bulk = params.iter().map(|p| p.ess_bulk).fold(f64::NAN, f64::min);
    DiagnosticsReport {
        params,
        divergences: 0,
        max_treedepth_hits: 0,
        max_rhat,
        min_ess_bulk,
    }
}

fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        // An odd middle draw is dropped so both halves have equal length.
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Normal scores of the pooled average ranks, in the original shape.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = all.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| all[a].total_cmp(&all[b]));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && all[order[j + 1]] == all[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let mut out = Vec::with_capacity(chains.len());
    let mut k = 0;
    for c in chains {
        let row = (0..c.len())
            .map(|_| {
                let z = normal.inverse_cdf((ranks[k] - 0.375) / (s as f64 + 0.25));
                k += 1;
                z
            })
            .collect();
        out.push(row);
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Classic potential scale reduction of equal-length chains.
fn basic_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    if n < 2.0 || chains.len() < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let b = n * sample_var(&means);
    let var_hat = (n - 1.0) / n * w + b / n;
    if w <= 0.0 {
        return if var_hat <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    (var_hat / w).sqrt()
}

/// Rank-normalised split-R̂: the larger of the bulk and folded-tail values.
pub fn rhat(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    if split.is_empty() || split[0].len() < 2 {
        return f64::NAN;
    }
    let bulk = basic_rhat(&rank_normalize(&split));
    let all: Vec<f64> = split.iter().flatten().copied().collect();
    let med = median(&all);
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|v| (v - med).abs()).collect())
        .collect();
    let tail = basic_rhat(&rank_normalize(&folded));
    bulk.max(tail)
}

fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5)
}

fn quantile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    crate::mspline::quantile_sorted(&s, p)
}

/// Mean-centred copy of a chain, for autocovariances computed lag by lag.
fn centred(x: &[f64]) -> Vec<f64> {
    let m = mean(x);
    x.iter().map(|v| v - m).collect()
}

fn autocov_lag(d: &[f64], lag: usize) -> f64 {
    let n = d.len();
    d[..n - lag]
        .iter()
        .zip(&d[lag..])
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / n as f64
}

/// Effective sample size by Geyer's initial monotone sequence over
/// the multi-chain autocorrelation estimate.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let total = (m * n) as f64;
    if n < 4 {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let centred: Vec<Vec<f64>> = chains.iter().map(|c| centred(c)).collect();
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let nf = n as f64;
    let acov_at = |lag: usize| centred.iter().map(|d| autocov_lag(d, lag)).sum::<f64>() / m as f64;
    let mean_var = acov_at(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&chain_means);
    }
    if var_plus <= 0.0 {
        // Constant draws carry no autocorrelation information.
        return total;
    }
    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = 1.0 - (mean_var - acov_at(1)) / var_plus;
    rho[1] = odd;
    let mut t = 1;
    while t < n - 4 && even + odd > 0.0 {
        even = 1.0 - (mean_var - acov_at(t + 1)) / var_plus;
        odd = 1.0 - (mean_var - acov_at(t + 2)) / var_plus;
        if even + odd >= 0.0 {
            rho[t + 1] = even;
            rho[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho[max_t] > 0.0 && max_t + 1 < n {
        rho[max_t + 1] = rho[max_t];
    }
    let mut t = 1;
    while t + 3 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0;
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let tail = if max_t + 1 < n { rho[max_t + 1] } else { 0.0 };
    let tau = (-1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + tail).max(1.0 / total.log10());
    total / tau
}

pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    ess(&rank_normalize(&split_chains(chains)))
}

/// Minimum ESS of the 5% and 95% quantile indicators.
pub fn ess_tail(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    let all: Vec<f64> = split.iter().flatten().copied().collect();
    if all.is_empty() {
        return f64::NAN;
    }
    let ind = |q: f64| -> Vec<Vec<f64>> {
        split
            .iter()
            .map(|c| c.iter().map(|&v| if v <= q { 1.0 } else { 0.0 }).collect())
            .collect()
    };
    let lo = ess(&ind(quantile(&all, 0.05)));
    let hi = ess(&ind(quantile(&all, 0.95)));
    lo.min(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_chains(seed: u64, m: usize, n: usize, shift: f64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|c| {
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z + shift * c as f64
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn constant_chains_are_converged() {
        let chains = vec![vec![1.5; 100]; 4];
        assert_eq!(rhat(&chains), 1.0);
        assert!(!ess_bulk(&chains).is_nan());
    }

    #[test]
    fn independent_draws_have_nominal_ess() {
        let chains = normal_chains(3, 4, 1000, 0.0);
        let e = ess_bulk(&chains);
        assert!((e / 4000.0 - 1.0).abs() < 0.2, "ess {e}");
        assert!(rhat(&chains) < 1.01);
        let t = ess_tail(&chains);
        assert!(t > 2500.0, "tail ess {t}");
    }

    #[test]
    fn shifted_chains_are_flagged() {
        let chains = normal_chains(4, 4, 500, 1.5);
        assert!(rhat(&chains) > 1.2);
    }

    #[test]
    fn autocorrelated_chain_has_reduced_ess() {
        // AR(1) with phi = 0.8: ESS/N = (1 - phi) / (1 + phi) ≈ 0.111.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..5000)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        x = 0.8 * x + z * (1.0f64 - 0.64).sqrt();
                        x
                    })
                    .collect()
            })
            .collect();
        let ratio = ess(&chains) / 20000.0;
        assert!((ratio - 1.0 / 9.0).abs() < 0.03, "{ratio}");
    }
}
