//! Pareto-smoothed importance-sampling leave-one-out cross-validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pareto-k above which the importance-sampling estimate is unreliable.
const K_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LooResult {
    /// `-2 * elpd_loo`.
    pub looic: f64,
    pub elpd_loo: f64,
    /// Effective number of parameters, `lppd - elpd_loo`.
    pub p_loo: f64,
    pub pointwise_elpd: Vec<f64>,
    pub pareto_k: Vec<f64>,
    pub warning: Option<String>,
}

/// LOO information criterion from a `[draws][points]` matrix of pointwise
/// log-likelihoods.
pub fn loo_ic(loglik: &[Vec<f64>]) -> Result<LooResult> {
    let s = loglik.len();
    if s < 2 {
        return Err(Error::config("LOO needs at least two posterior draws"));
    }
    let n = loglik[0].len();
    if loglik.iter().any(|row| row.len() != n) {
        return Err(Error::config("ragged log-likelihood matrix"));
    }
    let mut pointwise = Vec::with_capacity(n);
    let mut ks = Vec::with_capacity(n);
    let mut lppd = 0.0;
    let mut col = vec![0.0; s];
    for i in 0..n {
        for (d, row) in loglik.iter().enumerate() {
            col[d] = row[i];
        }
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                what: "pointwise log-likelihood",
                index: i,
            });
        }
        lppd += log_sum_exp(&col) - (s as f64).ln();
        let log_ratios: Vec<f64> = col.iter().map(|v| -v).collect();
        let (log_w, k) = psis_log_weights(&log_ratios);
        let num: Vec<f64> = log_w.iter().zip(&col).map(|(w, l)| w + l).collect();
        pointwise.push(log_sum_exp(&num) - log_sum_exp(&log_w));
        ks.push(k);
    }
    let elpd: f64 = pointwise.iter().sum();
    let bad = ks.iter().filter(|&&k| k > K_THRESHOLD).count();
    let warning = (bad > 0).then(|| {
        format!(
            "{bad} of {n} observations have Pareto k > {K_THRESHOLD}; LOO estimate may be unreliable"
        )
    });
    Ok(LooResult {
        looic: -2.0 * elpd,
        elpd_loo: elpd,
        p_loo: lppd - elpd,
        pointwise_elpd: pointwise,
        pareto_k: ks,
        warning,
    })
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Smoothed (unnormalised) log importance weights and the Pareto shape
/// estimate of the upper tail.
fn psis_log_weights(log_ratios: &[f64]) -> (Vec<f64>, f64) {
    let s = log_ratios.len();
    let max_lr = log_ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|v| v - max_lr).collect();
    let tail_len = ((0.2 * s as f64).ceil()).min((3.0 * (s as f64).sqrt()).ceil()) as usize;
    if tail_len < 5 || tail_len >= s {
        return (lw, f64::INFINITY);
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
    let cutoff = lw[order[s - tail_len - 1]];
    let tail_idx = &order[s - tail_len..];
    let exp_cut = cutoff.exp();
    let tail: Vec<f64> = tail_idx.iter().map(|&i| lw[i].exp() - exp_cut).collect();
    if tail[tail_len - 1] <= 1e-12 {
        // Flat upper tail: weights are already (close to) uniform.
        return (lw, 0.0);
    }
    let (k, sigma) = gpd_fit(&tail);
    if k.is_finite() && sigma.is_finite() && sigma > 0.0 {
        let m = tail_len as f64;
        for (r, &i) in tail_idx.iter().enumerate() {
            let p = (r as f64 + 0.5) / m;
            let q = gpd_quantile(p, k, sigma) + exp_cut;
            // Smoothed weights never exceed the largest raw weight (0 after shift).
            lw[i] = q.ln().min(0.0);
        }
    }
    (lw, k)
}

fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (-p).ln_1p()
    } else {
        sigma * ((-k * (-p).ln_1p()).exp_m1()) / k
    }
}

/// Generalised Pareto fit of sorted positive exceedances by the
/// empirical-Bayes profile method of Zhang and Stephens, with the
/// weakly informative shrinkage of k towards 0.5.
fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let prior = 3.0;
    let m = 30 + (n as f64).sqrt() as usize;
    let quart = x[((n as f64) / 4.0 + 0.5).floor() as usize - 1];
    let xmax = x[n - 1];
    let thetas: Vec<f64> = (1..=m)
        .map(|j| 1.0 / xmax + (1.0 - ((m as f64) / (j as f64 - 0.5)).sqrt()) / (prior * quart))
        .collect();
    let log_lik: Vec<f64> = thetas
        .iter()
        .map(|&th| {
            let k = x.iter().map(|&xi| (-th * xi).ln_1p()).sum::<f64>() / n as f64;
            n as f64 * ((-th / k).ln() - k - 1.0)
        })
        .collect();
    let weights: Vec<f64> = (0..m)
        .map(|j| 1.0 / log_lik.iter().map(|l| (l - log_lik[j]).exp()).sum::<f64>())
        .collect();
    let wsum: f64 = weights.iter().filter(|w| w.is_finite()).sum();
    let theta_hat: f64 = thetas
        .iter()
        .zip(&weights)
        .filter(|(_, w)| w.is_finite())
        .map(|(t, w)| t * w / wsum)
        .sum();
    let k = x.iter().map(|&xi| (-theta_hat * xi).ln_1p()).sum::<f64>() / n as f64;
    let sigma = -k / theta_hat;
    let k_adj = (k * n as f64 + 10.0 * 0.5) / (n as f64 + 10.0);
    (k_adj, sigma)
}
