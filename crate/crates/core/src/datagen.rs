//! Simulation data-generating mechanism: a mixture-Weibull disease hazard,
//! age-dependent Gompertz other-cause mortality, time-varying treatment
//! effects, uniform censoring and a biased external registry cohort.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::background::Lifetable;
use crate::bayes::{Dataset, ExternalRecord, IpdRecord};
use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;

/// Upper limit for simulated event times; later times are censored here.
pub const TIME_CAP: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Constant excess hazard ratio of 0.7.
    Constant,
    /// Immediate effect that wanes quickly.
    Waning,
    /// Delayed effect followed by slower waning.
    DelayedWaning,
    /// No treatment effect.
    NoEffect,
}

impl Scenario {
    pub const STUDY: [Scenario; 3] = [
        Scenario::Constant,
        Scenario::Waning,
        Scenario::DelayedWaning,
    ];

    pub fn number(self) -> u8 {
        match self {
            Scenario::Constant => 1,
            Scenario::Waning => 2,
            Scenario::DelayedWaning => 3,
            Scenario::NoEffect => 0,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            0 => Ok(Scenario::NoEffect),
            1 => Ok(Scenario::Constant),
            2 => Ok(Scenario::Waning),
            3 => Ok(Scenario::DelayedWaning),
            _ => Err(Error::config(format!("unknown scenario {n}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgmConfig {
    pub mix_p: f64,
    pub shape1: f64,
    pub scale1: f64,
    pub shape2: f64,
    pub scale2: f64,
    pub gompertz_lambda: f64,
    pub gompertz_gamma: f64,
    /// Multiplier on the Gompertz other-cause hazard.
    pub other_cause_multiplier: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    pub scenario: Scenario,
    pub n_per_arm: usize,
    pub follow_up: f64,
    pub censor_lo: f64,
    pub censor_hi: f64,
    pub external_start: f64,
    pub external_stop: f64,
    pub external_n: usize,
    /// Log of the multiplicative bias on the external cohort's all-cause
    /// cumulative hazard.
    pub bias_v: f64,
}

impl Default for DgmConfig {
    fn default() -> Self {
        Self {
            mix_p: 0.41,
            shape1: 1.53,
            scale1: 0.52,
            shape2: 0.82,
            scale2: 0.13,
            gompertz_lambda: 4.3e-5,
            gompertz_gamma: 0.094,
            other_cause_multiplier: 1.0,
            age_mean: 60.0,
            age_sd: 9.0,
            scenario: Scenario::Constant,
            n_per_arm: 200,
            follow_up: 5.0,
            censor_lo: 3.0,
            censor_hi: 5.0,
            external_start: 6.0,
            external_stop: 25.0,
            external_n: 600,
            bias_v: 0.0,
        }
    }
}

impl DgmConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("shape1", self.shape1),
            ("scale1", self.scale1),
            ("shape2", self.shape2),
            ("scale2", self.scale2),
            ("gompertz_lambda", self.gompertz_lambda),
            ("gompertz_gamma", self.gompertz_gamma),
            ("age_sd", self.age_sd),
            ("follow_up", self.follow_up),
        ];
        for (k, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::ConfigKey {
                    key: k.into(),
                    message: "must be positive".into(),
                });
            }
        }
        if !(self.mix_p > 0.0 && self.mix_p < 1.0) {
            return Err(Error::ConfigKey {
                key: "mix_p".into(),
                message: "must lie in (0, 1)".into(),
            });
        }
        if !(self.other_cause_multiplier >= 0.0) {
            return Err(Error::ConfigKey {
                key: "other_cause_multiplier".into(),
                message: "must be non-negative".into(),
            });
        }
        if !(0.0 <= self.censor_lo && self.censor_lo <= self.censor_hi) {
            return Err(Error::ConfigKey {
                key: "censor_lo".into(),
                message: "need 0 <= censor_lo <= censor_hi".into(),
            });
        }
        if !(0.0 < self.external_start && self.external_start < self.external_stop) {
            return Err(Error::ConfigKey {
                key: "external_start".into(),
                message: "need 0 < external_start < external_stop".into(),
            });
        }
        if self.n_per_arm == 0 {
            return Err(Error::ConfigKey {
                key: "n_per_arm".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    fn weibull_surv(&self, t: f64) -> (f64, f64) {
        (
            (-self.scale1 * t.powf(self.shape1)).exp(),
            (-self.scale2 * t.powf(self.shape2)).exp(),
        )
    }

    /// Control-arm disease-specific survival.
    pub fn disease_survival0(&self, t: f64) -> f64 {
        let (s1, s2) = self.weibull_surv(t);
        self.mix_p * s1 + (1.0 - self.mix_p) * s2
    }

    /// Control-arm disease-specific hazard.
    pub fn baseline_hazard(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return if self.shape1.min(self.shape2) < 1.0 {
                f64::INFINITY
            } else {
                0.0
            };
        }
        let (s1, s2) = self.weibull_surv(t);
        let f1 = self.scale1 * self.shape1 * t.powf(self.shape1 - 1.0) * s1;
        let f2 = self.scale2 * self.shape2 * t.powf(self.shape2 - 1.0) * s2;
        (self.mix_p * f1 + (1.0 - self.mix_p) * f2) / (self.mix_p * s1 + (1.0 - self.mix_p) * s2)
    }

    /// Disease-specific hazard for `arm` (0 control, 1 active).
    pub fn disease_hazard(&self, t: f64, arm: u8) -> f64 {
        let h = self.baseline_hazard(t);
        if arm == 0 {
            h
        } else {
            h * effect_log_hr(self.scenario, t).exp()
        }
    }

    /// Disease-specific cumulative hazard; closed form for the control arm
    /// and the constant-effect scenario, 100-node Gauss-Legendre otherwise.
    pub fn disease_cumulative_hazard(&self, t: f64, arm: u8, gl: &GaussLegendre) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let h0 = -self.disease_survival0(t).ln();
        match (arm, self.scenario) {
            (0, _) | (_, Scenario::NoEffect) => h0,
            (_, Scenario::Constant) => 0.7 * h0,
            _ => gl.integrate(0.0, t, |x| self.disease_hazard(x, arm)),
        }
    }

    fn other_scale(&self) -> f64 {
        self.other_cause_multiplier * self.gompertz_lambda / self.gompertz_gamma
    }

    pub fn other_cause_hazard(&self, t: f64, age: f64) -> f64 {
        self.other_cause_multiplier * self.gompertz_lambda * (self.gompertz_gamma * (age + t)).exp()
    }

    pub fn other_cause_cumulative_hazard(&self, t: f64, age: f64) -> f64 {
        self.other_scale() * (self.gompertz_gamma * age).exp() * (self.gompertz_gamma * t).exp_m1()
    }

    /// Other-cause survival over `t` years from baseline `age`.
    pub fn other_cause_survival(&self, t: f64, age: f64) -> f64 {
        (-self.other_cause_cumulative_hazard(t, age)).exp()
    }

    /// Background lifetable implied by the other-cause hazard.
    pub fn lifetable(&self) -> Result<Lifetable> {
        Lifetable::from_gompertz(
            self.other_cause_multiplier * self.gompertz_lambda,
            self.gompertz_gamma,
            0.25,
            130.0,
        )
    }

    pub fn age_distribution(&self) -> Normal<f64> {
        Normal::new(self.age_mean, self.age_sd).expect("age_sd validated positive")
    }

    /// Conditional all-cause survival `S(t | age)` for one arm.
    pub fn survival(&self, t: f64, age: f64, arm: u8, gl: &GaussLegendre) -> f64 {
        (-self.disease_cumulative_hazard(t, arm, gl) - self.other_cause_cumulative_hazard(t, age))
            .exp()
    }

    /// Marginal all-cause survival over the age distribution.
    pub fn marginal_survival(&self, t: f64, arm: u8) -> f64 {
        let gl = GaussLegendre::new(100);
        let sd = disease_factor(self, t, arm, &gl);
        sd * age_average(self, |a| self.other_cause_survival(t, a))
    }
}

fn disease_factor(cfg: &DgmConfig, t: f64, arm: u8, gl: &GaussLegendre) -> f64 {
    (-cfg.disease_cumulative_hazard(t, arm, gl)).exp()
}

/// Expectation over the normal age distribution by Gauss-Legendre on
/// `mean ± 8 sd`.
fn age_average<F: FnMut(f64) -> f64>(cfg: &DgmConfig, mut f: F) -> f64 {
    let gl = GaussLegendre::new(64);
    let (m, s) = (cfg.age_mean, cfg.age_sd);
    let norm = 1.0 / (s * (2.0 * std::f64::consts::PI).sqrt());
    gl.integrate_composite(m - 8.0 * s, m + 8.0 * s, 8, |a| {
        f(a) * norm * (-0.5 * ((a - m) / s).powi(2)).exp()
    })
}

/// Exponentially modified Gaussian density.
pub fn emg_density(t: f64, mu: f64, sigma: f64, lambda: f64) -> f64 {
    let s2 = sigma * sigma;
    0.5 * lambda
        * (0.5 * lambda * (2.0 * mu + lambda * s2 - 2.0 * t)).exp()
        * erfc((mu + lambda * s2 - t) / (std::f64::consts::SQRT_2 * sigma))
}

/// Log excess hazard ratio `beta(t)` of the active arm.
pub fn effect_log_hr(scenario: Scenario, t: f64) -> f64 {
    match scenario {
        Scenario::Constant => 0.7f64.ln(),
        Scenario::Waning => -0.38 + 0.38 * (0.8 * t - 1.2).tanh(),
        Scenario::DelayedWaning => -2.8 * emg_density(t, 0.8, 0.4, 0.35),
        Scenario::NoEffect => 0.0,
    }
}

/// A simulated individual before conversion to a trial record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimRecord {
    pub time: f64,
    pub event: bool,
    pub arm: u8,
    pub age: f64,
    /// The latent event time exceeded [`TIME_CAP`].
    pub capped: bool,
}

impl From<SimRecord> for IpdRecord {
    fn from(r: SimRecord) -> Self {
        IpdRecord {
            time: r.time,
            event: r.event,
            arm: r.arm,
            age: r.age,
        }
    }
}

/// Solves `H(t) = target` for increasing `H` by geometric bracketing from
/// (0, 1] and bisection to 1e-10 years. Returns `None` past the cap.
fn invert<F: FnMut(f64) -> f64>(mut h: F, target: f64, lo_bound: f64) -> Option<f64> {
    let mut lo = lo_bound;
    let mut hi = lo_bound + 1.0;
    while h(hi) < target {
        lo = hi;
        hi = lo_bound + 2.0 * (hi - lo_bound);
        if hi > TIME_CAP {
            if h(TIME_CAP) < target {
                return None;
            }
            hi = TIME_CAP;
            break;
        }
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if h(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Latent uncensored all-cause event time for one individual.
fn latent_time<R: Rng>(
    cfg: &DgmConfig,
    arm: u8,
    age: f64,
    gl: &GaussLegendre,
    rng: &mut R,
) -> Option<f64> {
    let u: f64 = rng.random();
    let target = -(1.0 - u).ln();
    invert(
        |t| cfg.disease_cumulative_hazard(t, arm, gl) + cfg.other_cause_cumulative_hazard(t, age),
        target,
        0.0,
    )
}

/// Simulates `n` trial participants of `arm` with uniform and
/// administrative censoring.
pub fn simulate_arm<R: Rng>(cfg: &DgmConfig, arm: u8, n: usize, rng: &mut R) -> Vec<SimRecord> {
    let gl = GaussLegendre::new(100);
    let ages = cfg.age_distribution();
    let censor = (cfg.censor_hi > cfg.censor_lo)
        .then(|| Uniform::new(cfg.censor_lo, cfg.censor_hi).unwrap());
    (0..n)
        .map(|_| {
            let age = ages.sample(rng);
            let latent = latent_time(cfg, arm, age, &gl, rng);
            let c = match &censor {
                Some(u) => u.sample(rng),
                None => cfg.censor_hi,
            }
            .min(cfg.follow_up);
            let (t, capped) = match latent {
                Some(t) => (t, false),
                None => (TIME_CAP, true),
            };
            SimRecord {
                time: t.min(c),
                event: !capped && t <= c,
                arm,
                age,
                capped,
            }
        })
        .collect()
}

/// Uncensored latent times (capped at [`TIME_CAP`]) with their ages.
pub fn simulate_uncensored<R: Rng>(
    cfg: &DgmConfig,
    arm: u8,
    n: usize,
    rng: &mut R,
) -> Vec<(f64, f64)> {
    let gl = GaussLegendre::new(100);
    let ages = cfg.age_distribution();
    (0..n)
        .map(|_| {
            let age = ages.sample(rng);
            let t = latent_time(cfg, arm, age, &gl, rng).unwrap_or(TIME_CAP);
            (t, age)
        })
        .collect()
}

/// Two-arm trial dataset.
pub fn simulate_trial<R: Rng>(cfg: &DgmConfig, rng: &mut R) -> Vec<IpdRecord> {
    let mut out: Vec<IpdRecord> = simulate_arm(cfg, 0, cfg.n_per_arm, rng)
        .into_iter()
        .map(Into::into)
        .collect();
    out.extend(
        simulate_arm(cfg, 1, cfg.n_per_arm, rng)
            .into_iter()
            .map(IpdRecord::from),
    );
    out
}

/// External registry cohort: `external_n` control-arm-like individuals
/// alive at `external_start`, with all-cause cumulative hazard scaled by
/// `exp(bias_v)`, followed without censoring and aggregated to annual
/// intervals. Ages are drawn from the age distribution conditional on
/// survival to the cohort start.
pub fn simulate_external<R: Rng>(cfg: &DgmConfig, rng: &mut R) -> Vec<ExternalRecord> {
    let gl = GaussLegendre::new(100);
    let ages = cfg.age_distribution();
    let scale = cfg.bias_v.exp();
    let s0 = cfg.external_start;
    let h = |t: f64, a: f64| {
        scale * (cfg.disease_cumulative_hazard(t, 0, &gl) + cfg.other_cause_cumulative_hazard(t, a))
    };
    let mut cohort = Vec::with_capacity(cfg.external_n);
    let mut guard = 0usize;
    while cohort.len() < cfg.external_n {
        guard += 1;
        assert!(
            guard < 1000 * cfg.external_n.max(1),
            "survival to cohort start is negligible"
        );
        let age = ages.sample(rng);
        let h0 = h(s0, age);
        let u: f64 = rng.random();
        if u >= (-h0).exp() {
            continue;
        }
        let v: f64 = rng.random();
        let target = h0 - (1.0 - v).ln();
        let t = invert(|t| h(t, age), target, s0).unwrap_or(TIME_CAP);
        cohort.push((t, age));
    }
    aggregate_cohort(cfg, &cohort)
}

fn aggregate_cohort(cfg: &DgmConfig, cohort: &[(f64, f64)]) -> Vec<ExternalRecord> {
    let s0 = cfg.external_start;
    let n_years = (cfg.external_stop - s0).ceil() as usize;
    let back = |t: f64| {
        cohort
            .iter()
            .map(|&(_, a)| {
                (-(cfg.other_cause_cumulative_hazard(t, a)
                    - cfg.other_cause_cumulative_hazard(s0, a)))
                .exp()
            })
            .sum::<f64>()
            / cohort.len() as f64
    };
    let mut at_risk = cohort.len() as u64;
    let mut out = Vec::with_capacity(n_years);
    for k in 0..n_years {
        let start = s0 + k as f64;
        let stop = (start + 1.0).min(cfg.external_stop);
        let survivors = cohort.iter().filter(|(t, _)| *t > stop).count() as u64;
        let mut rec = ExternalRecord::new(start, stop, at_risk, survivors, 0);
        rec.backsurv_start = back(start);
        rec.backsurv_stop = back(stop).min(rec.backsurv_start);
        out.push(rec);
        at_risk = survivors;
    }
    out
}

/// A complete simulated dataset: trial IPD plus external counts.
pub fn simulate_dataset<R: Rng>(cfg: &DgmConfig, rng: &mut R) -> Dataset {
    Dataset {
        ipd: simulate_trial(cfg, rng),
        external: simulate_external(cfg, rng),
    }
}

/// Tabulated disease-specific cumulative hazard for fast repeated inversion.
pub(crate) struct HazardTable {
    step: f64,
    cum: Vec<f64>,
}

impl HazardTable {
    pub(crate) fn new(cfg: &DgmConfig, arm: u8, horizon: f64, step: f64) -> Self {
        let n = (horizon / step).ceil() as usize;
        let gl = GaussLegendre::new(20);
        let mut cum = vec![0.0; n + 1];
        let closed = arm == 0 || matches!(cfg.scenario, Scenario::Constant | Scenario::NoEffect);
        for k in 1..=n {
            let t = k as f64 * step;
            cum[k] = if closed {
                cfg.disease_cumulative_hazard(t, arm, &gl)
            } else {
                let a = (k - 1) as f64 * step;
                if k == 1 {
                    // Integrable singularity at 0: substitute x = t u^2.
                    gl.integrate(0.0, 1.0, |u| {
                        2.0 * u * t * cfg.disease_hazard(t * u * u, arm)
                    })
                } else {
                    cum[k - 1] + gl.integrate(a, t, |x| cfg.disease_hazard(x, arm))
                }
            };
        }
        Self { step, cum }
    }

    pub(crate) fn horizon(&self) -> f64 {
        (self.cum.len() - 1) as f64 * self.step
    }

    pub(crate) fn grid(&self) -> &[f64] {
        &self.cum
    }

    pub(crate) fn step(&self) -> f64 {
        self.step
    }
}
