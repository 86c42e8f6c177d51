//! Likelihoods, priors and the log posterior with its exact gradient.

mod loo;

pub use loo::{loo_ic, LooResult};

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::model::{dot, EffectMode, ParamLayout, ParameterVector, SurvivalModelSpec};
use crate::mspline::softmax;

/// One trial participant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpdRecord {
    /// Follow-up time in years.
    pub time: f64,
    pub event: bool,
    /// 0 = control, 1 = active.
    pub arm: u8,
    /// Age at baseline in years.
    pub age: f64,
}

/// Survivor counts over one interval of an aggregate external cohort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExternalRecord {
    pub start: f64,
    pub stop: f64,
    pub n_at_risk: u64,
    pub n_survivors: u64,
    pub arm: u8,
    /// Expected background survival of the cohort at `start` and `stop`;
    /// only their ratio is used, and only in relative-survival mode.
    pub backsurv_start: f64,
    pub backsurv_stop: f64,
}

impl ExternalRecord {
    pub fn new(start: f64, stop: f64, n_at_risk: u64, n_survivors: u64, arm: u8) -> Self {
        Self {
            start,
            stop,
            n_at_risk,
            n_survivors,
            arm,
            backsurv_start: 1.0,
            backsurv_stop: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub ipd: Vec<IpdRecord>,
    pub external: Vec<ExternalRecord>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.ipd.iter().enumerate() {
            if !(r.time.is_finite() && r.time >= 0.0) {
                return Err(Error::config(format!(
                    "ipd record {i}: time must be finite and >= 0"
                )));
            }
            if r.arm > 1 {
                return Err(Error::config(format!("ipd record {i}: arm must be 0 or 1")));
            }
            if !r.age.is_finite() {
                return Err(Error::config(format!("ipd record {i}: age must be finite")));
            }
        }
        for (i, r) in self.external.iter().enumerate() {
            if !(r.start >= 0.0 && r.start < r.stop && r.stop.is_finite()) {
                return Err(Error::config(format!(
                    "external record {i}: need 0 <= start < stop"
                )));
            }
            if r.n_survivors > r.n_at_risk {
                return Err(Error::config(format!(
                    "external record {i}: survivors exceed number at risk"
                )));
            }
            if r.arm > 1 {
                return Err(Error::config(format!(
                    "external record {i}: arm must be 0 or 1"
                )));
            }
            let bs_ok = |v: f64| v > 0.0 && v <= 1.0;
            if !bs_ok(r.backsurv_start)
                || !bs_ok(r.backsurv_stop)
                || r.backsurv_stop > r.backsurv_start
            {
                return Err(Error::config(format!(
                    "external record {i}: background survival must satisfy 0 < stop <= start <= 1"
                )));
            }
        }
        Ok(())
    }

    /// Records of one arm; external data is kept only for the control arm.
    pub fn arm_subset(&self, arm: u8) -> Dataset {
        Dataset {
            ipd: self.ipd.iter().filter(|r| r.arm == arm).copied().collect(),
            external: self
                .external
                .iter()
                .filter(|r| r.arm == arm)
                .copied()
                .collect(),
        }
    }

    pub fn event_times(&self) -> Vec<f64> {
        self.ipd
            .iter()
            .filter(|r| r.event)
            .map(|r| r.time)
            .collect()
    }

    /// Concatenation of two datasets.
    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut out = self.clone();
        out.ipd.extend_from_slice(&other.ipd);
        out.external.extend_from_slice(&other.external);
        out
    }
}

/// A differentiable log density on an unconstrained space.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// Returns the log density at `theta` and writes its gradient.
    fn log_density_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64;

    fn log_density(&self, theta: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.log_density_grad(theta, &mut g)
    }
}

#[derive(Debug, Clone)]
struct IpdRow {
    event: bool,
    arm: usize,
    basis: Vec<f64>,
    integral: Vec<f64>,
    back_rate: f64,
    back_cum: f64,
}

#[derive(Debug, Clone)]
struct ExternalRow {
    arm: usize,
    /// Integrated basis over (start, stop).
    integral: Vec<f64>,
    log_back_ratio: f64,
    n: f64,
    r: f64,
    log_binom: f64,
}

/// Log posterior of a fitted configuration, with all parameter-free
/// quantities (basis values at the data, background offsets) precomputed.
#[derive(Debug, Clone)]
pub struct LogPosterior {
    spec: SurvivalModelSpec,
    layout: ParamLayout,
    arm_x: [Vec<f64>; 2],
    ipd: Vec<IpdRow>,
    external: Vec<ExternalRow>,
    include_prior: bool,
}

/// Per-arm accumulators of d(loglik)/d(log scale) and d(loglik)/d(logit).
struct ArmGrad {
    d_log_scale: f64,
    d_logits: Vec<f64>,
}

impl LogPosterior {
    pub fn new(spec: &SurvivalModelSpec, data: &Dataset) -> Result<Self> {
        if spec.effect_mode == EffectMode::SeparateArms {
            return Err(Error::Unsupported(
                "separate-arms models are fitted as two single-arm posteriors".into(),
            ));
        }
        data.validate()?;
        let n = spec.n_basis();
        let basis = &spec.basis;
        let ipd = data
            .ipd
            .iter()
            .map(|r| IpdRow {
                event: r.event,
                arm: r.arm as usize,
                basis: basis.eval(r.time),
                integral: basis.eval_integral(r.time),
                back_rate: spec.background_hazard(r.age, r.time),
                back_cum: spec.background_cumulative_hazard(r.age, r.time),
            })
            .collect();
        let external = data
            .external
            .iter()
            .map(|r| {
                let a = basis.eval_integral(r.start);
                let b = basis.eval_integral(r.stop);
                let log_back_ratio = if spec.relative_survival {
                    (r.backsurv_stop / r.backsurv_start).ln()
                } else {
                    0.0
                };
                ExternalRow {
                    arm: r.arm as usize,
                    integral: (0..n).map(|i| b[i] - a[i]).collect(),
                    log_back_ratio,
                    n: r.n_at_risk as f64,
                    r: r.n_survivors as f64,
                    log_binom: ln_binomial(r.n_at_risk, r.n_survivors),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layout: spec.layout(),
            arm_x: [spec.covariates_for_arm(0), spec.covariates_for_arm(1)],
            ipd,
            external,
            include_prior: true,
        })
    }

    /// Likelihood only (flat improper prior on the unconstrained scale).
    pub fn without_prior(mut self) -> Self {
        self.include_prior = false;
        self
    }

    pub fn spec(&self) -> &SurvivalModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn n_ipd(&self) -> usize {
        self.ipd.len()
    }

    fn arm_logits(&self, params: &ParameterVector, arm: usize) -> (f64, Vec<f64>) {
        let x = &self.arm_x[arm];
        let gamma = crate::model::logits(&self.spec, params, x);
        (params.log_eta + dot(&params.beta, x), gamma)
    }

    /// Individual-level log-likelihood contributions, including the
    /// background cumulative hazard.
    pub fn pointwise_loglik(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let params = ParameterVector::from_unconstrained(&self.layout, theta)?;
        let arms: Vec<(f64, Vec<f64>)> = (0..2)
            .map(|a| {
                let (ls, g) = self.arm_logits(&params, a);
                (ls.exp(), softmax(&g))
            })
            .collect();
        self.ipd
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let (scale, p) = &arms[row.arm];
                let haz = scale * dot(p, &row.basis);
                let cum = scale * dot(p, &row.integral);
                let mut ll = -cum - row.back_cum;
                if row.event {
                    ll += (row.back_rate + haz).ln();
                }
                if ll.is_finite() {
                    Ok(ll)
                } else {
                    Err(Error::Numerical {
                        what: "individual log-likelihood",
                        index: i,
                    })
                }
            })
            .collect()
    }

    /// Sum of external-data log-likelihood contributions.
    pub fn external_loglik(&self, theta: &[f64]) -> Result<f64> {
        let params = ParameterVector::from_unconstrained(&self.layout, theta)?;
        let mut grads = self.empty_arm_grads();
        Ok(self.accumulate_external(&params, &mut grads, false))
    }

    fn empty_arm_grads(&self) -> [ArmGrad; 2] {
        let n = self.spec.n_basis();
        [
            ArmGrad {
                d_log_scale: 0.0,
                d_logits: vec![0.0; n],
            },
            ArmGrad {
                d_log_scale: 0.0,
                d_logits: vec![0.0; n],
            },
        ]
    }

    fn accumulate_ipd(
        &self,
        params: &ParameterVector,
        grads: &mut [ArmGrad; 2],
        with_grad: bool,
    ) -> f64 {
        let arms: Vec<(f64, Vec<f64>)> = (0..2)
            .map(|a| {
                let (ls, g) = self.arm_logits(params, a);
                (ls.exp(), softmax(&g))
            })
            .collect();
        let mut total = 0.0;
        for row in &self.ipd {
            let (scale, p) = &arms[row.arm];
            let gb = dot(p, &row.basis);
            let gi = dot(p, &row.integral);
            let haz = scale * gb;
            let all = row.back_rate + haz;
            total -= scale * gi + row.back_cum;
            if row.event {
                total += all.ln();
            }
            if with_grad {
                let g = &mut grads[row.arm];
                let ev = if row.event { 1.0 } else { 0.0 };
                let w_haz = if row.event { scale / all } else { 0.0 };
                g.d_log_scale += ev * haz / all.max(f64::MIN_POSITIVE) - scale * gi;
                for j in 0..p.len() {
                    g.d_logits[j] +=
                        p[j] * (w_haz * (row.basis[j] - gb) - scale * (row.integral[j] - gi));
                }
            }
        }
        total
    }

    fn accumulate_external(
        &self,
        params: &ParameterVector,
        grads: &mut [ArmGrad; 2],
        with_grad: bool,
    ) -> f64 {
        if self.external.is_empty() {
            return 0.0;
        }
        let arms: Vec<(f64, Vec<f64>)> = (0..2)
            .map(|a| {
                let (ls, g) = self.arm_logits(params, a);
                (ls.exp(), softmax(&g))
            })
            .collect();
        let mut total = 0.0;
        for row in &self.external {
            let (scale, p) = &arms[row.arm];
            let di = dot(p, &row.integral);
            let log_q = -scale * di + row.log_back_ratio;
            let deaths = row.n - row.r;
            // log(1 - q), stable near q = 1.
            let log_1mq = if deaths > 0.0 {
                (-log_q.exp_m1()).ln()
            } else {
                0.0
            };
            let ll =
                row.log_binom + row.r * log_q + if deaths > 0.0 { deaths * log_1mq } else { 0.0 };
            total += ll;
            if with_grad {
                // d ll / d log_q = r - (n - r) q / (1 - q)
                let dlq = if deaths > 0.0 {
                    row.r - deaths * (log_q - log_1mq).exp()
                } else {
                    row.r
                };
                let g = &mut grads[row.arm];
                g.d_log_scale += dlq * (-scale * di);
                for j in 0..p.len() {
                    g.d_logits[j] += dlq * (-scale * p[j] * (row.integral[j] - di));
                }
            }
        }
        total
    }

    /// Log prior on the unconstrained scale, with Jacobians, adding its
    /// gradient into `grad` when given.
    fn log_prior(&self, params: &ParameterVector, grad: Option<&mut [f64]>) -> f64 {
        log_prior_impl(&self.spec, &self.layout, params, grad)
    }

    fn chain_arm_grads(&self, params: &ParameterVector, grads: &[ArmGrad; 2], out: &mut [f64]) {
        let l = &self.layout;
        let sigma = params.sigma();
        let c = l.n_cov;
        for (arm, g) in grads.iter().enumerate() {
            let x = &self.arm_x[arm];
            out[ParamLayout::LOG_ETA] += g.d_log_scale;
            for (s, xs) in x.iter().enumerate() {
                out[l.beta().start + s] += g.d_log_scale * xs;
            }
            for i in 1..l.n_basis {
                let d = g.d_logits[i];
                out[l.eps().start + i - 1] += d * sigma;
                out[l.log_sigma()] += d * sigma * params.eps[i - 1];
                if l.non_ph {
                    for (s, xs) in x.iter().enumerate() {
                        let tau = params.log_tau[s].exp();
                        let zi = (i - 1) * c + s;
                        out[l.z().start + zi] += d * tau * xs;
                        out[l.log_tau().start + s] += d * tau * params.z[zi] * xs;
                    }
                }
            }
        }
    }

    /// Log posterior and gradient; `Err` when the value is NaN.
    pub fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut g = vec![0.0; self.layout.dim()];
        let v = self.log_density_grad(theta, &mut g);
        if v.is_nan() || g.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite {
                snapshot: theta.to_vec(),
            });
        }
        Ok((v, g))
    }
}

impl Target for LogPosterior {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn log_density_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let params = match ParameterVector::from_unconstrained(&self.layout, theta) {
            Ok(p) => p,
            Err(_) => return f64::NAN,
        };
        let mut arm_grads = self.empty_arm_grads();
        let mut lp = self.accumulate_ipd(&params, &mut arm_grads, true);
        lp += self.accumulate_external(&params, &mut arm_grads, true);
        self.chain_arm_grads(&params, &arm_grads, grad);
        if self.include_prior {
            lp += self.log_prior(&params, Some(grad));
        }
        lp
    }
}

/// Logistic log density of `x` with location `loc` and scale `w`.
fn logistic_ln_pdf(x: f64, loc: f64, w: f64) -> f64 {
    let u = (x - loc) / w;
    // -u - 2 log(1 + exp(-u)), symmetric form for stability.
    -u.abs() - 2.0 * (-u.abs()).exp().ln_1p() - w.ln()
}

fn log_prior_impl(
    spec: &SurvivalModelSpec,
    layout: &ParamLayout,
    params: &ParameterVector,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let pr = &spec.priors;
    let mut lp = pr.log_eta.ln_pdf(params.log_eta);
    lp += pr.sigma.ln_pdf_log_scale(params.log_sigma);
    if let Some(g) = grad.as_deref_mut() {
        g[ParamLayout::LOG_ETA] += pr.log_eta.dln_pdf(params.log_eta);
        g[layout.log_sigma()] += pr.sigma.dln_pdf_log_scale(params.log_sigma);
    }

    // Random walk: eps_1 = 0, eps_i ~ Logistic(eps_{i-1}, w_i).
    let mut prev = 0.0;
    for (k, (&e, &w)) in params.eps.iter().zip(&pr.walk_weights).enumerate() {
        lp += logistic_ln_pdf(e, prev, w);
        if let Some(g) = grad.as_deref_mut() {
            let d = -((e - prev) / (2.0 * w)).tanh() / w;
            g[layout.eps().start + k] += d;
            if k > 0 {
                g[layout.eps().start + k - 1] -= d;
            }
        }
        prev = e;
    }

    let beta_prior = crate::model::NormalPrior {
        mean: 0.0,
        sd: pr.beta_sd,
    };
    for (s, &b) in params.beta.iter().enumerate() {
        lp += beta_prior.ln_pdf(b);
        if let Some(g) = grad.as_deref_mut() {
            g[layout.beta().start + s] += beta_prior.dln_pdf(b);
        }
    }
    if layout.non_ph {
        let std_normal = crate::model::NormalPrior { mean: 0.0, sd: 1.0 };
        for (k, &z) in params.z.iter().enumerate() {
            lp += std_normal.ln_pdf(z);
            if let Some(g) = grad.as_deref_mut() {
                g[layout.z().start + k] -= z;
            }
        }
        for (s, &lt) in params.log_tau.iter().enumerate() {
            lp += pr.tau.ln_pdf_log_scale(lt);
            if let Some(g) = grad.as_deref_mut() {
                g[layout.log_tau().start + s] += pr.tau.dln_pdf_log_scale(lt);
            }
        }
    }
    lp
}

/// Individual-level log-likelihood: total and per-record contributions.
pub fn loglik_ipd(
    spec: &SurvivalModelSpec,
    params: &ParameterVector,
    ipd: &[IpdRecord],
) -> Result<(f64, Vec<f64>)> {
    let data = Dataset {
        ipd: ipd.to_vec(),
        external: Vec::new(),
    };
    let post = LogPosterior::new(spec, &data)?;
    let pointwise = post.pointwise_loglik(&params.to_unconstrained())?;
    Ok((pointwise.iter().sum(), pointwise))
}

/// Binomial log-likelihood of external survivor counts. A zero survival
/// probability with survivors present gives `-inf`.
pub fn loglik_external(
    spec: &SurvivalModelSpec,
    params: &ParameterVector,
    external: &[ExternalRecord],
) -> Result<f64> {
    let data = Dataset {
        ipd: Vec::new(),
        external: external.to_vec(),
    };
    LogPosterior::new(spec, &data)?.external_loglik(&params.to_unconstrained())
}

pub fn logprior(spec: &SurvivalModelSpec, params: &ParameterVector) -> f64 {
    log_prior_impl(spec, &spec.layout(), params, None)
}

pub fn logpost_and_grad(
    spec: &SurvivalModelSpec,
    params: &ParameterVector,
    data: &Dataset,
) -> Result<(f64, Vec<f64>)> {
    LogPosterior::new(spec, data)?.value_and_grad(&params.to_unconstrained())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::background::Lifetable;
    use crate::model::PriorSettings;
    use crate::mspline::make_knots;
    use rand::{Rng, SeedableRng};

    fn spec(mode: EffectMode, rs: bool) -> SurvivalModelSpec {
        let times: Vec<f64> = (1..=60).map(|i| i as f64 / 12.0).collect();
        let basis = make_knots(&times, 6, &[10.0]).unwrap();
        let table = Lifetable::from_gompertz(4.3e-5, 0.094, 1.0, 120.0).unwrap();
        SurvivalModelSpec::new(basis, mode, rs, &PriorSettings::default(), Some(table)).unwrap()
    }

    fn flat_params(s: &SurvivalModelSpec, hazard: f64) -> ParameterVector {
        let span = s.basis.boundary_knots().1;
        ParameterVector::flat(&s.layout(), (hazard * span).ln())
    }

    fn toy_data(rng: &mut impl Rng) -> Dataset {
        let ipd = (0..40)
            .map(|i| IpdRecord {
                time: rng.random_range(0.05..5.0),
                event: rng.random_bool(0.6),
                arm: (i % 2) as u8,
                age: rng.random_range(45.0..75.0),
            })
            .collect();
        let external = (6..12)
            .map(|y| ExternalRecord {
                start: y as f64,
                stop: y as f64 + 1.0,
                n_at_risk: 100 - 5 * (y - 6),
                n_survivors: 95 - 5 * (y - 6),
                arm: 0,
                backsurv_start: 0.99f64.powi(y as i32 - 6),
                backsurv_stop: 0.99f64.powi(y as i32 - 5),
            })
            .collect();
        Dataset { ipd, external }
    }

    #[test]
    fn empty_dataset_loglik_is_zero() {
        let s = spec(EffectMode::None, false);
        let (ll, pw) = loglik_ipd(&s, &flat_params(&s, 0.2), &[]).unwrap();
        assert_eq!(ll, 0.0);
        assert!(pw.is_empty());
    }

    #[test]
    fn single_record_constant_hazard() {
        let s = spec(EffectMode::None, false);
        let p = flat_params(&s, 0.2);
        let h5 = crate::model::cumulative_hazard(&s, &p, &[], 5.0).unwrap();
        let h = crate::model::hazard(&s, &p, &[], 5.0).unwrap();
        let cens = IpdRecord {
            time: 5.0,
            event: false,
            arm: 0,
            age: 60.0,
        };
        let (ll, _) = loglik_ipd(&s, &p, &[cens]).unwrap();
        assert!((ll + h5).abs() < 1e-12);
        assert!((ll + 1.0).abs() < 0.01);
        let ev = IpdRecord {
            event: true,
            ..cens
        };
        let (ll, _) = loglik_ipd(&s, &p, &[ev]).unwrap();
        assert!((ll - (h.ln() - h5)).abs() < 1e-12);
        assert!((ll - (0.2f64.ln() - 1.0)).abs() < 0.02);
    }

    #[test]
    fn external_trivial_cases() {
        let s = spec(EffectMode::None, false);
        // Negligible hazard: S(stop) = S(start) to machine precision.
        let none = ParameterVector::flat(&s.layout(), -700.0);
        let rec = ExternalRecord::new(6.0, 7.0, 10, 10, 0);
        let ll = loglik_external(&s, &none, &[rec]).unwrap();
        assert!(ll.abs() < 1e-12);
        let p = flat_params(&s, 0.2);
        // q = 0.5 with a single survivor.
        let h = crate::model::hazard(&s, &p, &[], 20.0).unwrap();
        let rec = ExternalRecord::new(20.0, 20.0 + 0.5f64.ln().abs() / h, 1, 1, 0);
        let ll = loglik_external(&s, &p, &[rec]).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn survivors_under_huge_hazard_are_implausible() {
        let s = spec(EffectMode::None, false);
        let p = flat_params(&s, 1e6);
        let rec = ExternalRecord::new(6.0, 7.0, 10, 3, 0);
        let ll = loglik_external(&s, &p, &[rec]).unwrap();
        // log q = -1e6 exactly, with no underflow to -inf.
        assert!((ll + 3.0e6).abs() < 1e3, "{ll}");
    }

    #[test]
    fn likelihood_is_additive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s = spec(EffectMode::ProportionalHazards, true);
        let p = flat_params(&s, 0.15);
        let a = toy_data(&mut rng);
        let b = toy_data(&mut rng);
        let la = logpost_and_grad(&s, &p, &a).unwrap().0 - logprior(&s, &p);
        let lb = logpost_and_grad(&s, &p, &b).unwrap().0 - logprior(&s, &p);
        let lab = logpost_and_grad(&s, &p, &a.concat(&b)).unwrap().0 - logprior(&s, &p);
        assert!((la + lb - lab).abs() < 1e-9);
    }

    #[test]
    fn splitting_an_interval_with_no_deaths() {
        let s = spec(EffectMode::None, false);
        let p = flat_params(&s, 0.2);
        let whole = loglik_external(&s, &p, &[ExternalRecord::new(6.0, 9.0, 50, 50, 0)]).unwrap();
        let parts = loglik_external(
            &s,
            &p,
            &[
                ExternalRecord::new(6.0, 7.5, 50, 50, 0),
                ExternalRecord::new(7.5, 9.0, 50, 50, 0),
            ],
        )
        .unwrap();
        assert!((whole - parts).abs() < 1e-12);
    }

    fn finite_difference(post: &LogPosterior, theta: &[f64]) -> Vec<f64> {
        (0..theta.len())
            .map(|k| {
                let h = 1e-5 * theta[k].abs().max(1.0);
                let at = |d: f64| {
                    let mut t = theta.to_vec();
                    t[k] += d;
                    post.log_density(&t)
                };
                (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for mode in [
            EffectMode::None,
            EffectMode::ProportionalHazards,
            EffectMode::NonProportionalHazards,
        ] {
            for rs in [false, true] {
                let s = spec(mode, rs);
                let data = toy_data(&mut rng);
                let post = LogPosterior::new(&s, &data).unwrap();
                for _ in 0..5 {
                    let mut theta: Vec<f64> = (0..post.dim())
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect();
                    theta[0] = (0.2f64 * 10.0).ln() + rng.random_range(-0.5..0.5);
                    let (_, g) = post.value_and_grad(&theta).unwrap();
                    let fd = finite_difference(&post, &theta);
                    let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                    for (a, b) in g.iter().zip(&fd) {
                        assert!((a - b).abs() / scale < 1e-6, "{mode:?} rs={rs}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn prior_mode_of_logits_is_at_walk_locations() {
        let s = spec(EffectMode::None, false);
        let post = LogPosterior::new(&s, &Dataset::default()).unwrap();
        let m = crate::optim::minimize(
            |x, g| {
                let v = post.log_density_grad(x, g);
                g.iter_mut().for_each(|v| *v = -*v);
                -v
            },
            &vec![0.3; post.dim()],
            &Default::default(),
        );
        let params = ParameterVector::from_unconstrained(&s.layout(), &m.x).unwrap();
        let gamma = crate::model::logits(&s, &params, &[]);
        for (g, mu) in gamma.iter().zip(&s.priors.walk_locations) {
            assert!((g - mu).abs() < 1e-5);
        }
    }

    #[test]
    fn separate_arms_spec_is_rejected() {
        let s = spec(EffectMode::SeparateArms, false);
        assert!(matches!(
            LogPosterior::new(&s, &Dataset::default()),
            Err(Error::Unsupported(_))
        ));
    }
}
