//! Posterior computation: Laplace approximation and NUTS.

pub mod diagnostics;
pub mod laplace;
pub mod nuts;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{loo_ic, LooResult};
use crate::bayes::{Dataset, LogPosterior, Target};
use crate::error::{Error, Result};
use crate::model::{
    arm_coefficients, ArmCoefficients, EffectMode, ParameterVector, SurvivalModelSpec,
};

pub use diagnostics::{diagnose, DiagnosticsReport, ParamDiagnostics};
pub use laplace::LaplaceApprox;
pub use nuts::NutsOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Laplace,
    Mcmc,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laplace" => Ok(Method::Laplace),
            "mcmc" => Ok(Method::Mcmc),
            other => Err(Error::config(format!(
                "unknown method `{other}` (expected mcmc or laplace)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub method: Method,
    pub chains: usize,
    pub warmup: usize,
    pub iters: usize,
    /// Number of Gaussian draws for the Laplace approximation.
    pub laplace_draws: usize,
    pub max_treedepth: usize,
    pub target_accept: f64,
    /// Starting points tried before the mode search gives up.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            method: Method::Mcmc,
            chains: 4,
            warmup: 1000,
            iters: 1000,
            laplace_draws: 2000,
            max_treedepth: 10,
            target_accept: 0.8,
            restarts: 20,
            seed: 1,
        }
    }
}

/// Posterior draws on the unconstrained scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub names: Vec<String>,
    pub draws: Vec<Vec<f64>>,
    pub chain_ids: Vec<usize>,
    pub method: Method,
    pub diagnostics: Option<DiagnosticsReport>,
    pub mode: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl PosteriorSample {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    /// Draws of one column.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[j]).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "samples", rename_all = "snake_case")]
pub enum Posterior {
    Joint(PosteriorSample),
    /// Independent control (`[0]`) and active (`[1]`) single-arm fits;
    /// draws are paired by index.
    Separate([PosteriorSample; 2]),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: SurvivalModelSpec,
    pub posterior: Posterior,
}

impl FittedModel {
    pub fn n_draws(&self) -> usize {
        match &self.posterior {
            Posterior::Joint(s) => s.n_draws(),
            Posterior::Separate([a, b]) => a.n_draws().min(b.n_draws()),
        }
    }

    pub fn is_two_arm(&self) -> bool {
        self.spec.effect_mode.is_two_arm()
    }

    pub fn samples(&self) -> Vec<&PosteriorSample> {
        match &self.posterior {
            Posterior::Joint(s) => vec![s],
            Posterior::Separate([a, b]) => vec![a, b],
        }
    }

    /// Hazard scale and spline coefficients of `arm` for every draw.
    pub fn arm_draws(&self, arm: u8) -> Result<Vec<ArmCoefficients>> {
        let (spec, sample, x) = match &self.posterior {
            Posterior::Joint(s) => {
                if arm == 1 && !self.is_two_arm() {
                    return Err(Error::Unsupported(
                        "single-arm fit has no active arm".into(),
                    ));
                }
                (self.spec.clone(), s, self.spec.covariates_for_arm(arm))
            }
            Posterior::Separate(s) => (self.spec.single_arm(), &s[arm as usize], Vec::new()),
        };
        let layout = spec.layout();
        sample.draws[..self.n_draws()]
            .iter()
            .map(|theta| {
                let p = ParameterVector::from_unconstrained(&layout, theta)?;
                arm_coefficients(&spec, &p, &x)
            })
            .collect()
    }

    /// Diagnostics and warnings of every component fit.
    pub fn warnings(&self) -> Vec<String> {
        self.samples()
            .iter()
            .flat_map(|s| s.warnings.clone())
            .collect()
    }

    /// PSIS-LOO over the individual-level data of the fit.
    pub fn loo(&self, data: &Dataset) -> Result<LooResult> {
        let n = self.n_draws();
        let mut rows = vec![Vec::new(); n];
        match &self.posterior {
            Posterior::Joint(s) => {
                let lp = LogPosterior::new(&self.spec, data)?;
                for (row, theta) in rows.iter_mut().zip(&s.draws) {
                    *row = lp.pointwise_loglik(theta)?;
                }
            }
            Posterior::Separate(s) => {
                let single = self.spec.single_arm();
                for arm in 0..2u8 {
                    let lp = LogPosterior::new(&single, &data.arm_subset(arm))?;
                    for (row, theta) in rows.iter_mut().zip(&s[arm as usize].draws) {
                        row.extend(lp.pointwise_loglik(theta)?);
                    }
                }
            }
        }
        loo_ic(&rows)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Crude starting point: a flat hazard at the observed event rate.
fn initial_point(spec: &SurvivalModelSpec, data: &Dataset) -> Vec<f64> {
    let layout = spec.layout();
    let (mut events, mut exposure, mut expected) = (0.0, 0.0, 0.0);
    for r in &data.ipd {
        events += r.event as u8 as f64;
        exposure += r.time;
        expected += spec.background_cumulative_hazard(r.age, r.time);
    }
    for r in &data.external {
        let d = (r.n_at_risk - r.n_survivors) as f64;
        events += d;
        exposure += (r.stop - r.start) * (r.n_survivors as f64 + 0.5 * d);
        if spec.relative_survival {
            expected += -(r.backsurv_stop / r.backsurv_start).ln() * r.n_at_risk as f64;
        }
    }
    let rate = if exposure > 0.0 && events > 0.0 {
        ((events - expected) / exposure).max(0.1 * events / exposure)
    } else {
        0.1
    };
    let (lo, hi) = spec.basis.boundary_knots();
    ParameterVector::flat(&layout, (rate * (hi - lo)).ln()).to_unconstrained()
}

fn starts<R: Rng>(x0: &[f64], n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out = vec![x0.to_vec()];
    for k in 1..n.max(1) {
        // Progressively wider perturbations of the crude start.
        let width = 0.25 * (1 + k / 5) as f64;
        out.push(
            x0.iter()
                .map(|v| v + rng.random_range(-width..width))
                .collect(),
        );
    }
    out
}

fn laplace_sample<T: Target + ?Sized>(
    target: &T,
    names: Vec<String>,
    x0: &[f64],
    opts: &FitOptions,
) -> Result<PosteriorSample> {
    let mut rng = stream_rng(opts.seed, 0);
    let (mode, lp) = laplace::find_mode(target, &starts(x0, opts.restarts, &mut rng))?;
    let approx = LaplaceApprox::new(target, mode, lp)?;
    let draws = approx.sample(opts.laplace_draws, &mut rng);
    if draws.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite Laplace draw".into()));
    }
    Ok(PosteriorSample {
        names,
        chain_ids: vec![0; draws.len()],
        draws,
        method: Method::Laplace,
        diagnostics: None,
        mode: Some(approx.mode),
        warnings: Vec::new(),
    })
}

fn mcmc_sample<T: Target + ?Sized>(
    target: &T,
    names: Vec<String>,
    x0: &[f64],
    opts: &FitOptions,
) -> Result<PosteriorSample> {
    if opts.chains == 0 || opts.iters == 0 {
        return Err(Error::config(
            "MCMC needs at least one chain and one iteration",
        ));
    }
    let nuts_opts = NutsOptions {
        warmup: opts.warmup,
        iters: opts.iters,
        max_treedepth: opts.max_treedepth,
        target_accept: opts.target_accept,
    };
    let outputs: Vec<Result<nuts::ChainOutput>> = (0..opts.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(opts.seed, c as u64 + 1);
            let mut init = None;
            for _ in 0..100 {
                let cand: Vec<f64> = x0.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
                if target.log_density(&cand).is_finite() {
                    init = Some(cand);
                    break;
                }
            }
            let init =
                init.ok_or_else(|| Error::Fit(format!("chain {c}: no finite initial point")))?;
            Ok(nuts::run_chain(target, &init, &nuts_opts, &mut rng))
        })
        .collect();
    let outputs: Vec<nuts::ChainOutput> = outputs.into_iter().collect::<Result<_>>()?;

    let chains: Vec<Vec<Vec<f64>>> = outputs.iter().map(|o| o.draws.clone()).collect();
    let mut report = diagnose(&names, &chains);
    report.divergences = outputs.iter().map(|o| o.divergences).sum();
    report.max_treedepth_hits = outputs.iter().map(|o| o.treedepth_hits).sum();
    let total = (opts.chains * opts.iters) as f64;
    let mut warnings = Vec::new();
    if report.divergences as f64 > 0.01 * total {
        warnings.push(format!(
            "{} divergent transitions after warmup",
            report.divergences
        ));
    }
    if opts.chains > 1 && report.max_rhat > 1.01 {
        warnings.push(format!("max R-hat {:.3} exceeds 1.01", report.max_rhat));
    }
    let mut draws = Vec::with_capacity(total as usize);
    let mut chain_ids = Vec::with_capacity(total as usize);
    for (c, o) in outputs.into_iter().enumerate() {
        chain_ids.extend(std::iter::repeat_n(c, o.draws.len()));
        draws.extend(o.draws);
    }
    if draws.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite MCMC draw".into()));
    }
    Ok(PosteriorSample {
        names,
        draws,
        chain_ids,
        method: Method::Mcmc,
        diagnostics: Some(report),
        mode: None,
        warnings,
    })
}

/// Samples any target with the configured method.
pub fn sample_target<T: Target + ?Sized>(
    target: &T,
    names: Vec<String>,
    x0: &[f64],
    opts: &FitOptions,
) -> Result<PosteriorSample> {
    match opts.method {
        Method::Laplace => laplace_sample(target, names, x0, opts),
        Method::Mcmc => mcmc_sample(target, names, x0, opts),
    }
}

fn fit_single(
    spec: &SurvivalModelSpec,
    data: &Dataset,
    opts: &FitOptions,
) -> Result<PosteriorSample> {
    let target = LogPosterior::new(spec, data)?;
    let x0 = initial_point(spec, data);
    sample_target(&target, spec.layout().names(), &x0, opts)
}

/// Fits the model; separate-arms models are fitted as two independent
/// single-arm models with streams derived from the same seed.
pub fn fit(spec: &SurvivalModelSpec, data: &Dataset, opts: &FitOptions) -> Result<FittedModel> {
    data.validate()?;
    let posterior = if spec.effect_mode == EffectMode::SeparateArms {
        let single = spec.single_arm();
        let control = fit_single(&single, &data.arm_subset(0), opts)?;
        let active_opts = FitOptions {
            seed: opts.seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
            ..opts.clone()
        };
        let active = fit_single(&single, &data.arm_subset(1), &active_opts)?;
        Posterior::Separate([control, active])
    } else {
        if spec.effect_mode == EffectMode::None && data.ipd.iter().any(|r| r.arm == 1) {
            return Err(Error::config("single-arm model given active-arm records"));
        }
        Posterior::Joint(fit_single(spec, data, opts)?)
    };
    Ok(FittedModel {
        spec: spec.clone(),
        posterior,
    })
}

pub fn fit_laplace(spec: &SurvivalModelSpec, data: &Dataset, seed: u64) -> Result<FittedModel> {
    let opts = FitOptions {
        method: Method::Laplace,
        seed,
        ..Default::default()
    };
    fit(spec, data, &opts)
}

pub fn fit_mcmc(
    spec: &SurvivalModelSpec,
    data: &Dataset,
    chains: usize,
    warmup: usize,
    iters: usize,
    seed: u64,
) -> Result<FittedModel> {
    let opts = FitOptions {
        method: Method::Mcmc,
        chains,
        warmup,
        iters,
        seed,
        ..Default::default()
    };
    fit(spec, data, &opts)
}
