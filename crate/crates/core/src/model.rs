//! Hazard model definition and the parameter transforms.
//!
//! The modelled hazard for covariates `x` is
//! `eta * exp(beta' x) * sum_i p_i(x) b_i(t)`, where the coefficients
//! `p(x)` are a softmax of logits `gamma_i(x) = mu_i + delta_i' x + sigma * eps_i`
//! with `gamma_1 = 0` as the reference. In relative-survival mode this is
//! the excess hazard and background mortality is added on top.
//!
//! Note on naming: "excess hazard" always means the modelled part of the
//! hazard; "logits" always means the coefficient log-ratios `gamma_i`.

use serde::{Deserialize, Serialize};

use crate::background::Lifetable;
use crate::error::{Error, Result};
use crate::mspline::{constant_hazard_coefficients, softmax, SplineBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectMode {
    /// Single population, no treatment covariate.
    None,
    #[serde(alias = "ph")]
    ProportionalHazards,
    #[serde(alias = "non_ph")]
    NonProportionalHazards,
    /// Two independent single-arm fits sharing only configuration.
    SeparateArms,
}

impl EffectMode {
    pub fn tag(self) -> &'static str {
        match self {
            EffectMode::None => "none",
            EffectMode::ProportionalHazards => "ph",
            EffectMode::NonProportionalHazards => "non_ph",
            EffectMode::SeparateArms => "separate_arms",
        }
    }

    pub fn is_two_arm(self) -> bool {
        !matches!(self, EffectMode::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl NormalPrior {
    pub fn ln_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    /// d/dx of `ln_pdf`.
    pub fn dln_pdf(&self, x: f64) -> f64 {
        -(x - self.mean) / (self.sd * self.sd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    /// Log density of `log(x)` where `x ~ Gamma(shape, rate)`, i.e. the
    /// gamma log density plus the log-Jacobian `log x`.
    pub fn ln_pdf_log_scale(&self, log_x: f64) -> f64 {
        let x = log_x.exp();
        self.shape * self.rate.ln() - statrs::function::gamma::ln_gamma(self.shape)
            + self.shape * log_x
            - self.rate * x
    }

    /// d/d(log x) of `ln_pdf_log_scale`.
    pub fn dln_pdf_log_scale(&self, log_x: f64) -> f64 {
        self.shape - self.rate * log_x.exp()
    }
}

/// User-facing prior choices; walk locations and weights are derived from
/// the basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSettings {
    pub log_eta: NormalPrior,
    pub sigma: GammaPrior,
    pub beta_sd: f64,
    pub tau: GammaPrior,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self {
            log_eta: NormalPrior {
                mean: 0.0,
                sd: 20.0,
            },
            sigma: GammaPrior {
                shape: 2.0,
                rate: 1.0,
            },
            beta_sd: 2.5,
            tau: GammaPrior {
                shape: 2.0,
                rate: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub log_eta: NormalPrior,
    pub sigma: GammaPrior,
    pub beta_sd: f64,
    pub tau: GammaPrior,
    /// `mu_i = log(p*_i / p*_1)` for the constant-hazard coefficients `p*`.
    pub walk_locations: Vec<f64>,
    /// Logistic scales `w_i` for `i = 2..n`.
    pub walk_weights: Vec<f64>,
}

impl PriorSpec {
    pub fn for_basis(basis: &SplineBasis, settings: &PriorSettings) -> Result<Self> {
        let valid = settings.log_eta.sd > 0.0
            && settings.sigma.shape > 0.0
            && settings.sigma.rate > 0.0
            && settings.beta_sd > 0.0
            && settings.tau.shape > 0.0
            && settings.tau.rate > 0.0;
        if !valid {
            return Err(Error::config(
                "prior scales, shapes and rates must be positive",
            ));
        }
        let p_const = constant_hazard_coefficients(basis)?;
        let walk_locations = p_const.iter().map(|p| (p / p_const[0]).ln()).collect();
        Ok(Self {
            log_eta: settings.log_eta,
            sigma: settings.sigma,
            beta_sd: settings.beta_sd,
            tau: settings.tau,
            walk_locations,
            walk_weights: basis.walk_weights(),
        })
    }

    pub fn settings(&self) -> PriorSettings {
        PriorSettings {
            log_eta: self.log_eta,
            sigma: self.sigma,
            beta_sd: self.beta_sd,
            tau: self.tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalModelSpec {
    pub basis: SplineBasis,
    pub effect_mode: EffectMode,
    pub covariate_names: Vec<String>,
    pub relative_survival: bool,
    pub priors: PriorSpec,
    pub backhaz: Option<Lifetable>,
}

impl SurvivalModelSpec {
    pub fn new(
        basis: SplineBasis,
        effect_mode: EffectMode,
        relative_survival: bool,
        settings: &PriorSettings,
        backhaz: Option<Lifetable>,
    ) -> Result<Self> {
        if relative_survival && backhaz.is_none() {
            return Err(Error::config(
                "relative survival requires a background-rate table",
            ));
        }
        let priors = PriorSpec::for_basis(&basis, settings)?;
        let covariate_names = match effect_mode {
            EffectMode::ProportionalHazards | EffectMode::NonProportionalHazards => {
                vec!["arm".to_string()]
            }
            EffectMode::None | EffectMode::SeparateArms => Vec::new(),
        };
        Ok(Self {
            basis,
            effect_mode,
            covariate_names,
            relative_survival,
            priors,
            backhaz,
        })
    }

    pub fn n_basis(&self) -> usize {
        self.basis.n_basis()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            n_basis: self.n_basis(),
            n_cov: self.n_covariates(),
            non_ph: self.effect_mode == EffectMode::NonProportionalHazards,
        }
    }

    /// Covariate vector for a record in the given arm.
    pub fn covariates_for_arm(&self, arm: u8) -> Vec<f64> {
        vec![arm as f64; self.n_covariates()]
    }

    /// The single-population model used for each arm of a separate-arms fit.
    pub fn single_arm(&self) -> Self {
        let mut s = self.clone();
        s.effect_mode = EffectMode::None;
        s.covariate_names.clear();
        s
    }

    /// Background hazard at time `t` after baseline `age` (zero when the
    /// model is not a relative-survival model).
    pub fn background_hazard(&self, age: f64, t: f64) -> f64 {
        match (&self.backhaz, self.relative_survival) {
            (Some(table), true) => table.hazard(age, t),
            _ => 0.0,
        }
    }

    pub fn background_cumulative_hazard(&self, age: f64, t: f64) -> f64 {
        match (&self.backhaz, self.relative_survival) {
            (Some(table), true) => table.cumulative_hazard(age, t),
            _ => 0.0,
        }
    }
}

/// Positions of each parameter block in the unconstrained vector:
/// `[log_eta, eps_2..eps_n, log_sigma, beta_1..beta_c, z_(2,1)..z_(n,c), log_tau_1..log_tau_c]`.
/// The last two blocks exist only for non-proportional-hazards models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_basis: usize,
    pub n_cov: usize,
    pub non_ph: bool,
}

impl ParamLayout {
    pub const LOG_ETA: usize = 0;

    pub fn n_eps(&self) -> usize {
        self.n_basis - 1
    }

    pub fn eps(&self) -> std::ops::Range<usize> {
        1..self.n_basis
    }

    pub fn log_sigma(&self) -> usize {
        self.n_basis
    }

    pub fn beta(&self) -> std::ops::Range<usize> {
        let s = self.n_basis + 1;
        s..s + self.n_cov
    }

    pub fn z(&self) -> std::ops::Range<usize> {
        let s = self.beta().end;
        let len = if self.non_ph {
            self.n_eps() * self.n_cov
        } else {
            0
        };
        s..s + len
    }

    pub fn log_tau(&self) -> std::ops::Range<usize> {
        let s = self.z().end;
        let len = if self.non_ph { self.n_cov } else { 0 };
        s..s + len
    }

    pub fn dim(&self) -> usize {
        self.log_tau().end
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["log_eta".to_string()];
        out.extend((2..=self.n_basis).map(|i| format!("eps[{i}]")));
        out.push("log_sigma".into());
        out.extend((1..=self.n_cov).map(|s| format!("beta[{s}]")));
        if self.non_ph {
            for i in 2..=self.n_basis {
                out.extend((1..=self.n_cov).map(|s| format!("z[{i},{s}]")));
            }
            out.extend((1..=self.n_cov).map(|s| format!("log_tau[{s}]")));
        }
        out
    }
}

/// Posterior parameters on the unconstrained scale.
///
/// Coefficient logits and covariate departures are stored in
/// non-centred form: `gamma_i = mu_i + delta_i' x + sigma * eps_i` and
/// `delta_is = tau_s * z_is`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub log_eta: f64,
    pub eps: Vec<f64>,
    pub log_sigma: f64,
    pub beta: Vec<f64>,
    /// Row-major `[basis 2..n][covariate]`.
    pub z: Vec<f64>,
    pub log_tau: Vec<f64>,
}

impl ParameterVector {
    pub fn from_unconstrained(layout: &ParamLayout, theta: &[f64]) -> Result<Self> {
        if theta.len() != layout.dim() {
            return Err(Error::Dimension {
                what: "parameter vector",
                expected: layout.dim(),
                got: theta.len(),
            });
        }
        Ok(Self {
            log_eta: theta[ParamLayout::LOG_ETA],
            eps: theta[layout.eps()].to_vec(),
            log_sigma: theta[layout.log_sigma()],
            beta: theta[layout.beta()].to_vec(),
            z: theta[layout.z()].to_vec(),
            log_tau: theta[layout.log_tau()].to_vec(),
        })
    }

    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(
            3 + self.eps.len() + self.beta.len() + self.z.len() + self.log_tau.len(),
        );
        out.push(self.log_eta);
        out.extend_from_slice(&self.eps);
        out.push(self.log_sigma);
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.z);
        out.extend_from_slice(&self.log_tau);
        out
    }

    /// Parameters giving a flat hazard of total magnitude `eta` with no
    /// covariate effects.
    pub fn flat(layout: &ParamLayout, log_eta: f64) -> Self {
        let mut theta = vec![0.0; layout.dim()];
        theta[ParamLayout::LOG_ETA] = log_eta;
        Self::from_unconstrained(layout, &theta).expect("layout-sized vector")
    }

    pub fn eta(&self) -> f64 {
        self.log_eta.exp()
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn tau(&self) -> Vec<f64> {
        self.log_tau.iter().map(|t| t.exp()).collect()
    }

    fn n_cov(&self) -> usize {
        self.beta.len()
    }

    /// Departure `delta_is` for basis function `i` (0-based, `i >= 1`).
    pub fn delta(&self, i: usize, s: usize) -> f64 {
        if self.z.is_empty() {
            return 0.0;
        }
        self.log_tau[s].exp() * self.z[(i - 1) * self.n_cov() + s]
    }

    pub fn to_natural(&self, priors: &PriorSpec) -> NaturalParameters {
        let n = self.eps.len() + 1;
        let c = self.n_cov();
        let sigma = self.sigma();
        let mut gamma = vec![0.0; n];
        for i in 1..n {
            gamma[i] = priors.walk_locations[i] + sigma * self.eps[i - 1];
        }
        let delta = if self.z.is_empty() {
            Vec::new()
        } else {
            (0..n)
                .map(|i| {
                    (0..c)
                        .map(|s| if i == 0 { 0.0 } else { self.delta(i, s) })
                        .collect()
                })
                .collect()
        };
        NaturalParameters {
            eta: self.eta(),
            gamma,
            sigma,
            beta: self.beta.clone(),
            delta,
            tau: self.tau(),
        }
    }

    pub fn from_natural(nat: &NaturalParameters, priors: &PriorSpec) -> Result<Self> {
        if nat.eta <= 0.0 || nat.sigma <= 0.0 || nat.tau.iter().any(|t| *t <= 0.0) {
            return Err(Error::config("eta, sigma and tau must be positive"));
        }
        let n = nat.gamma.len();
        if n != priors.walk_locations.len() {
            return Err(Error::Dimension {
                what: "coefficient logits",
                expected: priors.walk_locations.len(),
                got: n,
            });
        }
        let eps = (1..n)
            .map(|i| (nat.gamma[i] - priors.walk_locations[i]) / nat.sigma)
            .collect();
        let c = nat.beta.len();
        let mut z = Vec::new();
        if !nat.delta.is_empty() {
            for i in 1..n {
                for s in 0..c {
                    z.push(nat.delta[i][s] / nat.tau[s]);
                }
            }
        }
        Ok(Self {
            log_eta: nat.eta.ln(),
            eps,
            log_sigma: nat.sigma.ln(),
            beta: nat.beta.clone(),
            z,
            log_tau: nat.tau.iter().map(|t| t.ln()).collect(),
        })
    }
}

/// Parameters on their natural scale.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParameters {
    pub eta: f64,
    /// Logits at `x = 0`, `gamma[0] = 0`.
    pub gamma: Vec<f64>,
    pub sigma: f64,
    pub beta: Vec<f64>,
    /// `[basis][covariate]`, row 0 identically zero; empty unless non-PH.
    pub delta: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
}

/// Hazard magnitude and spline coefficients for one covariate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmCoefficients {
    /// `log(eta) + beta' x`.
    pub log_scale: f64,
    pub p: Vec<f64>,
}

impl ArmCoefficients {
    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn hazard_from_basis(&self, b: &[f64]) -> f64 {
        self.scale() * dot(&self.p, b)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_covariates(spec: &SurvivalModelSpec, params: &ParameterVector, x: &[f64]) -> Result<()> {
    if x.len() != spec.n_covariates() {
        return Err(Error::Dimension {
            what: "covariate vector",
            expected: spec.n_covariates(),
            got: x.len(),
        });
    }
    if params.beta.len() != spec.n_covariates() || params.eps.len() + 1 != spec.n_basis() {
        return Err(Error::Dimension {
            what: "parameter vector",
            expected: spec.layout().dim(),
            got: params.to_unconstrained().len(),
        });
    }
    Ok(())
}

/// Logits `gamma_i(x)`, with `gamma_1 = 0`.
pub fn logits(spec: &SurvivalModelSpec, params: &ParameterVector, x: &[f64]) -> Vec<f64> {
    let n = spec.n_basis();
    let sigma = params.sigma();
    let mu = &spec.priors.walk_locations;
    let mut gamma = vec![0.0; n];
    for i in 1..n {
        let mut g = mu[i] + sigma * params.eps[i - 1];
        if !params.z.is_empty() {
            for (s, xs) in x.iter().enumerate() {
                g += params.delta(i, s) * xs;
            }
        }
        gamma[i] = g;
    }
    gamma
}

/// Spline coefficients `p(x)`.
pub fn coefficients(
    spec: &SurvivalModelSpec,
    params: &ParameterVector,
    x: &[f64],
) -> Result<Vec<f64>> {
    check_covariates(spec, params, x)?;
    Ok(softmax(&logits(spec, params, x)))
}

pub fn arm_coefficients(
    spec: &SurvivalModelSpec,
    params: &ParameterVector,
    x: &[f64],
) -> Result<ArmCoefficients> {
    let p = coefficients(spec, params, x)?;
    let log_scale = params.log_eta + dot(&params.beta, x);
    Ok(ArmCoefficients { log_scale, p })
}

/// Modelled hazard at `t` (the excess hazard in relative-survival mode).
pub fn hazard(
    spec: &SurvivalModelSpec,
    params: &ParameterVector,
    x: &[f64],
    t: f64,
) -> Result<f64> {
    let c = arm_coefficients(spec, params, x)?;
    Ok(c.hazard_from_basis(&spec.basis.eval(t)))
}

/// Modelled cumulative hazard, integrated exactly through the basis.
pub fn cumulative_hazard(
    spec: &SurvivalModelSpec,
    params: &ParameterVector,
    x: &[f64],
    t: f64,
) -> Result<f64> {
    let c = arm_coefficients(spec, params, x)?;
    Ok(c.hazard_from_basis(&spec.basis.eval_integral(t)))
}

/// All-cause hazard: modelled hazard plus background mortality at
/// attained age `age + t` in relative-survival mode.
pub fn all_cause_hazard(
    spec: &SurvivalModelSpec,
    params: &ParameterVector,
    x: &[f64],
    age: f64,
    t: f64,
) -> Result<f64> {
    Ok(hazard(spec, params, x, t)? + spec.background_hazard(age, t))
}

pub fn all_cause_cumulative_hazard(
    spec: &SurvivalModelSpec,
    params: &ParameterVector,
    x: &[f64],
    age: f64,
    t: f64,
) -> Result<f64> {
    Ok(cumulative_hazard(spec, params, x, t)? + spec.background_cumulative_hazard(age, t))
}

pub fn survival(
    spec: &SurvivalModelSpec,
    params: &ParameterVector,
    x: &[f64],
    age: f64,
    t: f64,
) -> Result<f64> {
    Ok((-all_cause_cumulative_hazard(spec, params, x, age, t)?).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mspline::make_knots;

    fn spec(mode: EffectMode) -> SurvivalModelSpec {
        let times: Vec<f64> = (1..=60).map(|i| i as f64 / 12.0).collect();
        let basis = make_knots(&times, 6, &[10.0]).unwrap();
        SurvivalModelSpec::new(basis, mode, false, &PriorSettings::default(), None).unwrap()
    }

    fn random_params(spec: &SurvivalModelSpec, seed: u64) -> ParameterVector {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..spec.layout().dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        ParameterVector::from_unconstrained(&spec.layout(), &theta).unwrap()
    }

    #[test]
    fn equal_logits_give_uniform_coefficients() {
        let s = spec(EffectMode::None);
        let mut params = ParameterVector::flat(&s.layout(), 0.0);
        // eps chosen to cancel mu exactly
        let sigma = params.sigma();
        params.eps = s.priors.walk_locations[1..]
            .iter()
            .map(|m| -m / sigma)
            .collect();
        let p = coefficients(&s, &params, &[]).unwrap();
        for v in &p {
            assert!((v - 1.0 / p.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn ph_coefficients_do_not_depend_on_covariates() {
        let s = spec(EffectMode::ProportionalHazards);
        let params = random_params(&s, 3);
        assert_eq!(
            coefficients(&s, &params, &[0.0]).unwrap(),
            coefficients(&s, &params, &[1.0]).unwrap()
        );
        // Hazard ratio constant in t.
        let r: Vec<f64> = [0.5, 2.0, 4.5, 7.0, 30.0]
            .iter()
            .map(|&t| {
                hazard(&s, &params, &[1.0], t).unwrap() / hazard(&s, &params, &[0.0], t).unwrap()
            })
            .collect();
        for v in &r {
            assert!((v / r[0] - 1.0).abs() < 1e-10);
            assert!((v - params.beta[0].exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn departure_increases_coefficient() {
        let s = spec(EffectMode::NonProportionalHazards);
        let mut params = random_params(&s, 5);
        let i = 3;
        let before = coefficients(&s, &params, &[1.0]).unwrap()[i];
        params.z[(i - 1) * 1] += 1e-4;
        let after = coefficients(&s, &params, &[1.0]).unwrap()[i];
        assert!(after > before);
        // No effect on the reference arm.
        let p0 = coefficients(&s, &params, &[0.0]).unwrap();
        params.z[(i - 1) * 1] -= 1e-4;
        assert_eq!(p0, coefficients(&s, &params, &[0.0]).unwrap());
    }

    #[test]
    fn dimension_mismatch() {
        let s = spec(EffectMode::ProportionalHazards);
        let params = random_params(&s, 1);
        assert!(matches!(
            coefficients(&s, &params, &[]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn flat_hazard_from_constant_coefficients() {
        let s = spec(EffectMode::None);
        let span = s.basis.boundary_knots().1;
        // eta is the integral of the hazard over the span.
        let params = ParameterVector::flat(&s.layout(), (0.2 * span).ln());
        for t in [0.1, 1.0, 3.3, 6.0, 9.9] {
            let h = hazard(&s, &params, &[], t).unwrap();
            assert!((h - 0.2).abs() < 0.002, "t={t} h={h}");
        }
        let h5 = cumulative_hazard(&s, &params, &[], 5.0).unwrap();
        assert!((h5 - 1.0).abs() < 0.01);
        assert_eq!(cumulative_hazard(&s, &params, &[], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn cumulative_hazard_derivative_matches_hazard() {
        let s = spec(EffectMode::NonProportionalHazards);
        let params = random_params(&s, 9);
        for t in [0.3, 2.0, 4.4, 8.0, 12.0] {
            let e = 1e-5;
            let fd = (cumulative_hazard(&s, &params, &[1.0], t + e).unwrap()
                - cumulative_hazard(&s, &params, &[1.0], t - e).unwrap())
                / (2.0 * e);
            let h = hazard(&s, &params, &[1.0], t).unwrap();
            assert!((fd / h - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn natural_round_trip() {
        let s = spec(EffectMode::NonProportionalHazards);
        for seed in 0..10 {
            let params = random_params(&s, seed);
            let nat = params.to_natural(&s.priors);
            let back = ParameterVector::from_natural(&nat, &s.priors).unwrap();
            let (a, b) = (params.to_unconstrained(), back.to_unconstrained());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layout_names_match_dim() {
        for mode in [
            EffectMode::None,
            EffectMode::ProportionalHazards,
            EffectMode::NonProportionalHazards,
        ] {
            let l = spec(mode).layout();
            assert_eq!(l.names().len(), l.dim());
        }
    }
}
