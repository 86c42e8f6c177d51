//! Replication harness: true estimands, repeated fitting of simulated
//! datasets and performance summaries with Monte Carlo standard errors.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::Dataset;
use crate::datagen::{self, DgmConfig, HazardTable, Scenario};
use crate::error::{Error, Result};
use crate::inference::{fit, FitOptions, Method};
use crate::model::{EffectMode, GammaPrior, PriorSettings, SurvivalModelSpec};
use crate::mspline::make_knots;
use crate::predict::{rmst_difference_draws, rmst_draws, summarize, WaningSpec, HORIZON};
use crate::quadrature::GaussLegendre;

/// Deterministic 64-bit mixing of a seed with a stream label.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z
            .wrapping_add(p.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(0x632B_E59B_D9B4_E019);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// True marginal estimands at the horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrueValues {
    pub horizon: f64,
    pub control_rmst: f64,
    /// `(scenario, RMST difference)`.
    pub rmstd: Vec<(Scenario, f64)>,
}

impl TrueValues {
    pub fn rmstd_for(&self, s: Scenario) -> Option<f64> {
        self.rmstd.iter().find(|(k, _)| *k == s).map(|(_, v)| *v)
    }
}

/// Large-sample estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub mcse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthEstimate {
    pub n: usize,
    pub horizon: f64,
    pub control_rmst: McEstimate,
    pub rmstd: Vec<(Scenario, McEstimate)>,
}

impl TruthEstimate {
    pub fn values(&self) -> TrueValues {
        TrueValues {
            horizon: self.horizon,
            control_rmst: self.control_rmst.estimate,
            rmstd: self.rmstd.iter().map(|(s, e)| (*s, e.estimate)).collect(),
        }
    }
}

/// Marginal RMST of one arm by quadrature over time and age.
pub fn analytic_rmst(cfg: &DgmConfig, arm: u8, horizon: f64) -> f64 {
    let gl = GaussLegendre::new(64);
    let panels = horizon.ceil().max(1.0) as usize;
    gl.integrate_composite(0.0, horizon, panels, |t| cfg.marginal_survival(t, arm))
}

/// True values by numerical integration (no Monte Carlo error).
pub fn analytic_estimands(cfg: &DgmConfig, scenarios: &[Scenario], horizon: f64) -> TrueValues {
    let control_rmst = analytic_rmst(cfg, 0, horizon);
    let rmstd = scenarios
        .iter()
        .map(|&s| {
            let c = DgmConfig {
                scenario: s,
                ..cfg.clone()
            };
            (s, analytic_rmst(&c, 1, horizon) - control_rmst)
        })
        .collect();
    TrueValues {
        horizon,
        control_rmst,
        rmstd,
    }
}

/// Restricted event time `min(T, horizon)` by inverting the tabulated
/// all-cause cumulative hazard.
struct RestrictedSampler {
    table: HazardTable,
    growth: Vec<f64>,
}

impl RestrictedSampler {
    fn new(cfg: &DgmConfig, arm: u8, horizon: f64) -> Self {
        let table = HazardTable::new(cfg, arm, horizon, 0.005);
        let g = cfg.gompertz_gamma;
        let growth = (0..table.grid().len())
            .map(|k| (g * k as f64 * table.step()).exp_m1())
            .collect();
        Self { table, growth }
    }

    /// `c` is the age-specific Gompertz factor, so `H_o(t) = c (e^{g t} - 1)`.
    fn time(&self, c: f64, target: f64) -> f64 {
        let cum = self.table.grid();
        let total = |k: usize| cum[k] + c * self.growth[k];
        let last = cum.len() - 1;
        if total(last) <= target {
            return self.table.horizon();
        }
        let (mut lo, mut hi) = (0usize, last);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if total(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (a, b) = (total(lo), total(hi));
        let w = if b > a { (target - a) / (b - a) } else { 0.0 };
        (lo as f64 + w) * self.table.step()
    }
}

/// True values by simulating `n` uncensored individuals per arm with
/// common random numbers (shared ages and uniforms across arms).
pub fn true_estimands(
    cfg: &DgmConfig,
    scenarios: &[Scenario],
    n: usize,
    horizon: f64,
    seed: u64,
) -> TruthEstimate {
    let control = RestrictedSampler::new(cfg, 0, horizon);
    let active: Vec<RestrictedSampler> = scenarios
        .iter()
        .map(|&s| {
            let c = DgmConfig {
                scenario: s,
                ..cfg.clone()
            };
            RestrictedSampler::new(&c, 1, horizon)
        })
        .collect();
    let k = scenarios.len();
    const CHUNK: usize = 100_000;
    let n_chunks = n.div_ceil(CHUNK);
    // Per chunk: sums and sums of squares of control times and differences.
    let partial: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64);
            let ages = cfg.age_distribution();
            let m = CHUNK.min(n - chunk * CHUNK);
            let mut acc = vec![0.0; 2 + 2 * k];
            let ocm = cfg.other_cause_multiplier * cfg.gompertz_lambda / cfg.gompertz_gamma;
            for _ in 0..m {
                let age = ages.sample(&mut rng);
                let u: f64 = rng.random();
                let target = -(1.0 - u).ln();
                let c = ocm * (cfg.gompertz_gamma * age).exp();
                let t0 = control.time(c, target);
                acc[0] += t0;
                acc[1] += t0 * t0;
                for (j, s) in active.iter().enumerate() {
                    let d = s.time(c, target) - t0;
                    acc[2 + 2 * j] += d;
                    acc[3 + 2 * j] += d * d;
                }
            }
            acc
        })
        .collect();
    let mut tot = vec![0.0; 2 + 2 * k];
    for p in &partial {
        for (t, v) in tot.iter_mut().zip(p) {
            *t += v;
        }
    }
    let nf = n as f64;
    let est = |s: f64, ss: f64| {
        let mean = s / nf;
        let var = (ss / nf - mean * mean) * nf / (nf - 1.0);
        McEstimate {
            estimate: mean,
            mcse: (var.max(0.0) / nf).sqrt(),
        }
    };
    TruthEstimate {
        n,
        horizon,
        control_rmst: est(tot[0], tot[1]),
        rmstd: scenarios
            .iter()
            .enumerate()
            .map(|(j, &s)| (s, est(tot[2 + 2 * j], tot[3 + 2 * j])))
            .collect(),
    }
}

/// One model configuration of the study grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCell {
    pub tag: String,
    pub effect_mode: EffectMode,
    #[serde(default)]
    pub use_external: bool,
    #[serde(default)]
    pub extra_knots: Vec<f64>,
    #[serde(default = "default_df")]
    pub df: usize,
    #[serde(default = "default_true")]
    pub relative_survival: bool,
    #[serde(default)]
    pub waning: Option<WaningSpec>,
}

fn default_df() -> usize {
    10
}

fn default_true() -> bool {
    true
}

impl ModelCell {
    pub fn new(
        tag: &str,
        effect_mode: EffectMode,
        use_external: bool,
        extra_knots: &[f64],
    ) -> Self {
        Self {
            tag: tag.into(),
            effect_mode,
            use_external,
            extra_knots: extra_knots.to_vec(),
            df: 10,
            relative_survival: true,
            waning: None,
        }
    }

    /// Estimands reported by this cell.
    pub fn estimands(&self) -> Vec<Estimand> {
        if self.effect_mode.is_two_arm() {
            vec![Estimand::ControlRmst, Estimand::Rmstd]
        } else {
            vec![Estimand::ControlRmst]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    ControlRmst,
    Rmstd,
}

impl Estimand {
    pub fn tag(self) -> &'static str {
        match self {
            Estimand::ControlRmst => "control_rmst",
            Estimand::Rmstd => "rmstd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub n_reps: usize,
    pub scenario: Scenario,
    pub bias_levels: Vec<f64>,
    pub models: Vec<ModelCell>,
    pub horizon: f64,
    pub seed: u64,
    pub fit: FitOptions,
    pub dgm: DgmConfig,
    pub prior: PriorSettings,
    /// Failure rate above which a cell is flagged invalid.
    pub max_failure_rate: f64,
}

/// Extra knots of the simulation study.
pub const STUDY_EXTRA_KNOTS: [f64; 3] = [5.0, 10.0, 25.0];

/// The bias levels -20%, -10%, 0, +10%, +20%.
pub fn study_bias_levels() -> Vec<f64> {
    [0.8f64, 0.9, 1.0, 1.1, 1.2]
        .iter()
        .map(|v| v.ln())
        .collect()
}

/// Control-arm and treatment-effect model grids of the study.
pub fn default_models() -> Vec<ModelCell> {
    let k = &STUDY_EXTRA_KNOTS;
    let mut cells = vec![
        ModelCell::new("control_noext_noknots", EffectMode::None, false, &[]),
        ModelCell::new("control_noext_knots", EffectMode::None, false, k),
        ModelCell::new("control_ext_knots", EffectMode::None, true, k),
    ];
    for (mode, name) in [
        (EffectMode::ProportionalHazards, "ph"),
        (EffectMode::NonProportionalHazards, "nonph"),
        (EffectMode::SeparateArms, "separate"),
    ] {
        cells.push(ModelCell::new(
            &format!("{name}_noext_noknots"),
            mode,
            false,
            &[],
        ));
        cells.push(ModelCell::new(
            &format!("{name}_noext_knots"),
            mode,
            false,
            k,
        ));
        cells.push(ModelCell::new(&format!("{name}_ext_knots"), mode, true, k));
    }
    cells
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            n_reps: 1000,
            scenario: Scenario::Constant,
            bias_levels: study_bias_levels(),
            models: default_models(),
            horizon: HORIZON,
            seed: 1,
            fit: FitOptions {
                method: Method::Mcmc,
                ..Default::default()
            },
            dgm: DgmConfig::default(),
            prior: PriorSettings {
                tau: GammaPrior {
                    shape: 2.0,
                    rate: 3.0,
                },
                ..Default::default()
            },
            max_failure_rate: 0.02,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_reps < 2 {
            return Err(Error::ConfigKey {
                key: "n_reps".into(),
                message: "need at least 2 replications".into(),
            });
        }
        if self.models.is_empty() {
            return Err(Error::ConfigKey {
                key: "models".into(),
                message: "empty model grid".into(),
            });
        }
        let mut tags = HashSet::new();
        for m in &self.models {
            if !tags.insert(&m.tag) {
                return Err(Error::ConfigKey {
                    key: "models".into(),
                    message: format!("duplicate model tag `{}`", m.tag),
                });
            }
            if m.waning.is_some()
                && !matches!(
                    m.effect_mode,
                    EffectMode::ProportionalHazards | EffectMode::NonProportionalHazards
                )
            {
                return Err(Error::ConfigKey {
                    key: format!("models.{}.waning", m.tag),
                    message: "waning needs a PH or non-PH two-arm model".into(),
                });
            }
        }
        if self.models.iter().any(|m| m.use_external) && self.bias_levels.is_empty() {
            return Err(Error::ConfigKey {
                key: "bias_levels".into(),
                message: "models use external data but no bias levels are given".into(),
            });
        }
        self.dgm.validate()
    }

    /// `(model index, bias_v)` jobs of one replication. Cells without
    /// external data do not depend on the bias level and run once at 0.
    fn jobs(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for (i, m) in self.models.iter().enumerate() {
            if m.use_external {
                out.extend(self.bias_levels.iter().map(|&v| (i, v)));
            } else {
                out.push((i, 0.0));
            }
        }
        out
    }
}

/// One per-replication result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRow {
    pub scenario: u8,
    pub model_tag: String,
    pub bias_v: f64,
    pub rep: usize,
    pub estimand: String,
    pub estimate: f64,
    pub post_sd: f64,
    pub lo95: f64,
    pub hi95: f64,
}

impl RepRow {
    pub fn failed(&self) -> bool {
        !self.estimate.is_finite()
    }

    fn key(&self) -> (String, String, i64, usize) {
        (
            self.model_tag.clone(),
            self.estimand.clone(),
            bias_key(self.bias_v),
            self.rep,
        )
    }
}

fn bias_key(v: f64) -> i64 {
    (v * 1e9).round() as i64
}

/// Simulated data of one replication at one bias level. The trial part is
/// shared across bias levels.
pub fn replication_data(cfg: &StudyConfig, rep: usize, bias_v: f64) -> Dataset {
    let mut trial_rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &[cfg.scenario.number() as u64, rep as u64],
    ));
    let dgm = DgmConfig {
        scenario: cfg.scenario,
        bias_v,
        ..cfg.dgm.clone()
    };
    let ipd = datagen::simulate_trial(&dgm, &mut trial_rng);
    let mut ext_rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &[
            cfg.scenario.number() as u64,
            rep as u64,
            bias_key(bias_v) as u64,
            1,
        ],
    ));
    let external = datagen::simulate_external(&dgm, &mut ext_rng);
    Dataset { ipd, external }
}

/// Fits one cell to one replication and returns one row per estimand.
pub fn fit_cell(
    cfg: &StudyConfig,
    cell: &ModelCell,
    data: &Dataset,
    rep: usize,
    bias_v: f64,
) -> Result<Vec<RepRow>> {
    let two_arm = cell.effect_mode.is_two_arm();
    let mut used = if two_arm {
        data.clone()
    } else {
        data.arm_subset(0)
    };
    if !cell.use_external {
        used.external.clear();
    } else {
        used.external.retain(|r| r.arm == 0);
    }
    let ages: Vec<f64> = used.ipd.iter().map(|r| r.age).collect();
    let basis = make_knots(&used.event_times(), cell.df, &cell.extra_knots)?;
    let table = if cell.relative_survival {
        Some(cfg.dgm.lifetable()?)
    } else {
        None
    };
    let spec = SurvivalModelSpec::new(
        basis,
        cell.effect_mode,
        cell.relative_survival,
        &cfg.prior,
        table,
    )?;
    let opts = FitOptions {
        seed: derive_seed(
            cfg.seed,
            &[
                cfg.scenario.number() as u64,
                rep as u64,
                bias_key(bias_v) as u64,
                hash_tag(&cell.tag),
            ],
        ),
        ..cfg.fit.clone()
    };
    let fitted = fit(&spec, &used, &opts)?;
    let mut rows = Vec::new();
    for est in cell.estimands() {
        let draws = match est {
            Estimand::ControlRmst => rmst_draws(&fitted, 0, &ages, cfg.horizon, None)?,
            Estimand::Rmstd => rmst_difference_draws(&fitted, &ages, cfg.horizon, cell.waning)?,
        };
        let s = summarize(&draws);
        rows.push(RepRow {
            scenario: cfg.scenario.number(),
            model_tag: cell.tag.clone(),
            bias_v,
            rep,
            estimand: est.tag().into(),
            estimate: s.median,
            post_sd: s.sd,
            lo95: s.lo95,
            hi95: s.hi95,
        });
    }
    Ok(rows)
}

fn hash_tag(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn failed_rows(cfg: &StudyConfig, cell: &ModelCell, rep: usize, bias_v: f64) -> Vec<RepRow> {
    cell.estimands()
        .into_iter()
        .map(|e| RepRow {
            scenario: cfg.scenario.number(),
            model_tag: cell.tag.clone(),
            bias_v,
            rep,
            estimand: e.tag().into(),
            estimate: f64::NAN,
            post_sd: f64::NAN,
            lo95: f64::NAN,
            hi95: f64::NAN,
        })
        .collect()
}

/// Rows of one replication over the whole model grid, in grid order.
/// Fit failures yield NaN rows.
pub fn run_replication(cfg: &StudyConfig, rep: usize) -> Vec<RepRow> {
    let jobs = cfg.jobs();
    let mut data_cache: Vec<(i64, Dataset)> = Vec::new();
    for &(_, v) in &jobs {
        if !data_cache.iter().any(|(k, _)| *k == bias_key(v)) {
            data_cache.push((bias_key(v), replication_data(cfg, rep, v)));
        }
    }
    let results: Vec<Vec<RepRow>> = jobs
        .par_iter()
        .map(|&(i, v)| {
            let cell = &cfg.models[i];
            let data = &data_cache
                .iter()
                .find(|(k, _)| *k == bias_key(v))
                .unwrap()
                .1;
            fit_cell(cfg, cell, data, rep, v).unwrap_or_else(|_| failed_rows(cfg, cell, rep, v))
        })
        .collect();
    results.into_iter().flatten().collect()
}

pub fn read_rows(path: &Path) -> Result<Vec<RepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::predict::csv_io(path, e))?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<RepRow>().enumerate() {
        out.push(row.map_err(|e| Error::Schema {
            path: path.display().to_string(),
            row: i + 2,
            column: String::new(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Runs all replications, appending rows to `results_csv` (if given) as
/// each replication completes. Replications whose rows are already present
/// are skipped, so an interrupted study resumes where it stopped.
pub fn run_study(cfg: &StudyConfig, results_csv: Option<&Path>) -> Result<Vec<RepRow>> {
    cfg.validate()?;
    let mut rows = match results_csv {
        Some(p) if p.exists() => read_rows(p)?
            .into_iter()
            .filter(|r| r.scenario == cfg.scenario.number())
            .collect(),
        _ => Vec::new(),
    };
    let done: HashSet<_> = rows.iter().map(RepRow::key).collect();
    let expected_per_rep: Vec<(String, String, i64)> = cfg
        .jobs()
        .into_iter()
        .flat_map(|(i, v)| {
            let m = &cfg.models[i];
            m.estimands()
                .into_iter()
                .map(move |e| (m.tag.clone(), e.tag().to_string(), bias_key(v)))
        })
        .collect();
    let todo: Vec<usize> = (0..cfg.n_reps)
        .filter(|&rep| {
            expected_per_rep
                .iter()
                .any(|(t, e, v)| !done.contains(&(t.clone(), e.clone(), *v, rep)))
        })
        .collect();
    let mut writer = match results_csv {
        Some(p) => {
            let exists = p.exists() && std::fs::metadata(p).map(|m| m.len() > 0).unwrap_or(false);
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
            Some((
                csv::WriterBuilder::new()
                    .has_headers(!exists)
                    .from_writer(f),
                p.to_path_buf(),
            ))
        }
        None => None,
    };
    // Replications run in parallel batches; rows are written in replication order.
    let batch = rayon::current_num_threads().max(1);
    for chunk in todo.chunks(batch) {
        let results: Vec<Vec<RepRow>> = chunk
            .par_iter()
            .map(|&rep| run_replication(cfg, rep))
            .collect();
        for rep_rows in results {
            let fresh: Vec<RepRow> = rep_rows
                .into_iter()
                .filter(|r| !done.contains(&r.key()))
                .collect();
            if let Some((w, p)) = writer.as_mut() {
                for r in &fresh {
                    w.serialize(r).map_err(|e| crate::predict::csv_io(p, e))?;
                }
                w.flush().map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
            }
            rows.extend(fresh);
        }
    }
    rows.sort_by(|a, b| {
        (a.rep, &a.model_tag, bias_key(a.bias_v), &a.estimand).cmp(&(
            b.rep,
            &b.model_tag,
            bias_key(b.bias_v),
            &b.estimand,
        ))
    });
    Ok(rows)
}

/// Performance of one (model, bias level, estimand) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRow {
    pub scenario: u8,
    pub model_tag: String,
    pub bias_v: f64,
    pub estimand: String,
    pub truth: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub failure_rate: f64,
    pub bias: f64,
    pub bias_mcse: f64,
    pub mse: f64,
    pub mse_mcse: f64,
    pub model_sd: f64,
    pub model_sd_mcse: f64,
    pub emp_se: f64,
    pub emp_se_mcse: f64,
    pub coverage: f64,
    pub coverage_mcse: f64,
    pub flagged: bool,
}

/// Performance measures of a set of replications against `truth`.
pub fn performance(rows: &[&RepRow], truth: f64, max_failure_rate: f64) -> PerformanceRow {
    let ok: Vec<&&RepRow> = rows.iter().filter(|r| !r.failed()).collect();
    let n = ok.len() as f64;
    let n_failed = rows.len() - ok.len();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
    };
    let est: Vec<f64> = ok.iter().map(|r| r.estimate).collect();
    let sq: Vec<f64> = est.iter().map(|e| (e - truth).powi(2)).collect();
    let sds: Vec<f64> = ok.iter().map(|r| r.post_sd).collect();
    let cov: Vec<f64> = ok
        .iter()
        .map(|r| {
            if r.lo95 <= truth && truth <= r.hi95 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let bias = mean(&est) - truth;
    let mse = mean(&sq);
    let emp_se = var(&est).sqrt();
    let coverage = mean(&cov);
    let failure_rate = n_failed as f64 / rows.len().max(1) as f64;
    let first = rows.first();
    PerformanceRow {
        scenario: first.map_or(0, |r| r.scenario),
        model_tag: first.map_or_else(String::new, |r| r.model_tag.clone()),
        bias_v: first.map_or(0.0, |r| r.bias_v),
        estimand: first.map_or_else(String::new, |r| r.estimand.clone()),
        truth,
        n_ok: ok.len(),
        n_failed,
        failure_rate,
        bias,
        bias_mcse: (var(&est) / n).sqrt(),
        mse,
        mse_mcse: (sq.iter().map(|s| (s - mse).powi(2)).sum::<f64>() / (n * (n - 1.0))).sqrt(),
        model_sd: mean(&sds),
        model_sd_mcse: (var(&sds) / n).sqrt(),
        emp_se,
        emp_se_mcse: emp_se / (2.0 * (n - 1.0)).sqrt(),
        coverage,
        coverage_mcse: (coverage * (1.0 - coverage) / n).sqrt(),
        flagged: failure_rate > max_failure_rate || ok.len() < 2,
    }
}

/// Summary table over all cells, in model-grid order.
pub fn summarize_study(
    cfg: &StudyConfig,
    rows: &[RepRow],
    truth: &TrueValues,
) -> Result<Vec<PerformanceRow>> {
    let mut out = Vec::new();
    for (i, v) in cfg.jobs() {
        let cell = &cfg.models[i];
        for est in cell.estimands() {
            let t = match est {
                Estimand::ControlRmst => truth.control_rmst,
                Estimand::Rmstd => truth.rmstd_for(cfg.scenario).ok_or_else(|| {
                    Error::config(format!(
                        "no true RMST difference for scenario {}",
                        cfg.scenario.number()
                    ))
                })?,
            };
            let sel: Vec<&RepRow> = rows
                .iter()
                .filter(|r| {
                    r.model_tag == cell.tag
                        && r.estimand == est.tag()
                        && bias_key(r.bias_v) == bias_key(v)
                })
                .collect();
            if sel.is_empty() {
                continue;
            }
            let mut p = performance(&sel, t, cfg.max_failure_rate);
            p.scenario = cfg.scenario.number();
            out.push(p);
        }
    }
    Ok(out)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::predict::csv_io(path, e))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| crate::predict::csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(rep: usize, est: f64, lo: f64, hi: f64) -> RepRow {
        RepRow {
            scenario: 1,
            model_tag: "m".into(),
            bias_v: 0.0,
            rep,
            estimand: "control_rmst".into(),
            estimate: est,
            post_sd: 0.5,
            lo95: lo,
            hi95: hi,
        }
    }

    #[test]
    fn truth_as_estimate_gives_zero_error() {
        let rows: Vec<RepRow> = (0..10).map(|r| row(r, 6.0, 5.0, 7.0)).collect();
        let refs: Vec<&RepRow> = rows.iter().collect();
        let p = performance(&refs, 6.0, 0.02);
        assert_eq!((p.bias, p.mse, p.coverage), (0.0, 0.0, 1.0));
        assert_eq!(p.model_sd, 0.5);
        assert!(!p.flagged);
    }

    #[test]
    fn performance_formulas() {
        let ests = [5.0, 6.0, 7.0, 8.0];
        let mut rows: Vec<RepRow> = ests
            .iter()
            .enumerate()
            .map(|(i, &e)| row(i, e, e - 0.5, e + 0.5))
            .collect();
        rows.push(row(4, f64::NAN, f64::NAN, f64::NAN));
        let refs: Vec<&RepRow> = rows.iter().collect();
        let p = performance(&refs, 6.0, 0.02);
        assert!((p.bias - 0.5).abs() < 1e-12);
        assert!((p.mse - (1.0 + 0.0 + 1.0 + 4.0) / 4.0).abs() < 1e-12);
        assert!(p.mse >= p.bias * p.bias);
        assert_eq!(p.coverage, 0.25);
        assert!((p.bias_mcse - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!((p.n_ok, p.n_failed), (4, 1));
        assert!(p.flagged);
    }

    #[test]
    fn truth_is_zero_without_effect() {
        let cfg = DgmConfig::default();
        let t = analytic_estimands(&cfg, &[Scenario::NoEffect], 40.0);
        assert!(t.rmstd[0].1.abs() < 1e-12);
        let mc = true_estimands(&cfg, &[Scenario::NoEffect], 20_000, 40.0, 1);
        assert_eq!(mc.rmstd[0].1.estimate, 0.0);
        assert!((mc.control_rmst.estimate - t.control_rmst).abs() < 5.0 * mc.control_rmst.mcse);
    }

    #[test]
    fn monte_carlo_truth_agrees_with_quadrature() {
        let cfg = DgmConfig::default();
        let a = analytic_estimands(&cfg, &Scenario::STUDY, 40.0);
        let mc = true_estimands(&cfg, &Scenario::STUDY, 200_000, 40.0, 7);
        assert!((mc.control_rmst.estimate - a.control_rmst).abs() < 4.0 * mc.control_rmst.mcse);
        for ((_, m), (_, v)) in mc.rmstd.iter().zip(&a.rmstd) {
            assert!(
                (m.estimate - v).abs() < 4.0 * m.mcse + 2e-3,
                "{} vs {v}",
                m.estimate
            );
        }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
    }
}
