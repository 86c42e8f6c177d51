//! Posterior predictions: survival, hazard, RMST, standardised (marginal)
//! quantities and treatment-effect waning.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{FittedModel, Posterior};
use crate::model::{ArmCoefficients, EffectMode, SurvivalModelSpec};
use crate::mspline::quantile_sorted;
use crate::quadrature::GaussLegendre;

/// Default RMST horizon (years).
pub const HORIZON: f64 = 40.0;

const RMST_NODES: usize = 64;

/// Linear waning of the log hazard ratio from its value at `t_min` to zero
/// at `t_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaningSpec {
    pub t_min: f64,
    pub t_max: f64,
}

impl WaningSpec {
    pub fn new(t_min: f64, t_max: f64) -> Result<Self> {
        if !(0.0 <= t_min && t_min < t_max && t_max.is_finite()) {
            return Err(Error::config(format!(
                "waning needs 0 <= t_min < t_max, got ({t_min}, {t_max})"
            )));
        }
        Ok(Self { t_min, t_max })
    }

    /// Weight on the frozen log hazard ratio at time `t` (1 before `t_min`).
    pub fn weight(&self, t: f64) -> f64 {
        ((self.t_max - t) / (self.t_max - self.t_min)).clamp(0.0, 1.0)
    }
}

/// Posterior summary of a scalar quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub mean: f64,
    pub sd: f64,
}

pub fn summarize(draws: &[f64]) -> Summary {
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let sd = if s.len() > 1 {
        (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Summary {
        median: quantile_sorted(&s, 0.5),
        lo95: quantile_sorted(&s, 0.025),
        hi95: quantile_sorted(&s, 0.975),
        mean,
        sd,
    }
}

/// Modelled (excess) hazard of one arm for one posterior draw, optionally
/// with the treatment effect waning towards the control hazard.
#[derive(Debug, Clone)]
pub struct DrawHazard {
    arm: ArmCoefficients,
    waning: Option<(ArmCoefficients, WaningSpec)>,
}

impl DrawHazard {
    pub fn plain(arm: ArmCoefficients) -> Self {
        Self { arm, waning: None }
    }

    fn raw(c: &ArmCoefficients, spec: &SurvivalModelSpec, t: f64) -> f64 {
        c.hazard_from_basis(&spec.basis.eval(t))
    }

    pub fn hazard(&self, spec: &SurvivalModelSpec, t: f64) -> f64 {
        match &self.waning {
            Some((control, w)) if t > w.t_min => {
                let h0 = Self::raw(control, spec, t);
                let log_hr =
                    (Self::raw(&self.arm, spec, w.t_min) / Self::raw(control, spec, w.t_min)).ln();
                h0 * (w.weight(t) * log_hr).exp()
            }
            _ => Self::raw(&self.arm, spec, t),
        }
    }

    /// Cumulative hazard at each of the ascending `times`.
    pub fn cumulative_hazards(&self, spec: &SurvivalModelSpec, times: &[f64]) -> Vec<f64> {
        self.cumulative_on(&PreparedGrid::new(
            spec,
            times,
            self.waning.as_ref().map(|w| w.1),
        ))
    }

    /// Cumulative hazard on a grid whose basis values are precomputed.
    fn cumulative_on(&self, grid: &PreparedGrid) -> Vec<f64> {
        let plain = |k: usize| self.arm.hazard_from_basis(&grid.integrals[k]);
        let Some((control, w)) = &self.waning else {
            return (0..grid.integrals.len()).map(plain).collect();
        };
        debug_assert_eq!(grid.waning, Some(*w));
        let active_tmin = self.arm.hazard_from_basis(&grid.basis_tmin);
        let log_hr = (active_tmin / control.hazard_from_basis(&grid.basis_tmin)).ln();
        let mut acc = self.arm.hazard_from_basis(&grid.integral_tmin);
        let mut out = Vec::with_capacity(grid.integrals.len());
        for (k, inc) in grid.increments.iter().enumerate() {
            match inc {
                None => out.push(plain(k)),
                Some(nodes) => {
                    for (wt, wfac, b) in nodes {
                        acc += wt * control.hazard_from_basis(b) * (wfac * log_hr).exp();
                    }
                    out.push(acc);
                }
            }
        }
        out
    }
}

/// Basis values needed to evaluate cumulative hazards on fixed times for
/// many draws.
struct PreparedGrid {
    integrals: Vec<Vec<f64>>,
    waning: Option<WaningSpec>,
    basis_tmin: Vec<f64>,
    integral_tmin: Vec<f64>,
    /// For times past `t_min`: quadrature nodes `(weight, w(x), b(x))` of the
    /// increment since the previous time (or `t_min`).
    increments: Vec<Option<Vec<(f64, f64, Vec<f64>)>>>,
}

impl PreparedGrid {
    fn new(spec: &SurvivalModelSpec, times: &[f64], waning: Option<WaningSpec>) -> Self {
        let basis = &spec.basis;
        let integrals: Vec<Vec<f64>> = times.iter().map(|&t| basis.eval_integral(t)).collect();
        let Some(w) = waning else {
            return Self {
                integrals,
                waning,
                basis_tmin: Vec::new(),
                integral_tmin: Vec::new(),
                increments: Vec::new(),
            };
        };
        let gl = GaussLegendre::new(8);
        let mut prev = w.t_min;
        let increments = times
            .iter()
            .map(|&t| {
                if t <= w.t_min {
                    return None;
                }
                // Integrate piecewise so the kink at t_max falls on a boundary.
                let mut nodes = Vec::new();
                let mut a = prev;
                for b in [w.t_max, t] {
                    if b > a && b <= t {
                        for (x, wt) in gl.mapped(a, b) {
                            nodes.push((wt, w.weight(x), basis.eval(x)));
                        }
                        a = b;
                    }
                }
                prev = t;
                Some(nodes)
            })
            .collect();
        Self {
            integrals,
            waning,
            basis_tmin: basis.eval(w.t_min),
            integral_tmin: basis.eval_integral(w.t_min),
            increments,
        }
    }
}

/// Per-draw hazards of `arm`, with waning applied to the active arm when
/// requested.
pub fn arm_hazards(
    fit: &FittedModel,
    arm: u8,
    waning: Option<WaningSpec>,
) -> Result<Vec<DrawHazard>> {
    let coefs = fit.arm_draws(arm)?;
    match (arm, waning) {
        (1, Some(w)) => {
            check_waning(fit)?;
            let control = fit.arm_draws(0)?;
            Ok(coefs
                .into_iter()
                .zip(control)
                .map(|(a, c)| DrawHazard {
                    arm: a,
                    waning: Some((c, w)),
                })
                .collect())
        }
        _ => Ok(coefs.into_iter().map(DrawHazard::plain).collect()),
    }
}

fn check_waning(fit: &FittedModel) -> Result<()> {
    match (&fit.posterior, fit.spec.effect_mode) {
        (Posterior::Separate(_), _) | (_, EffectMode::SeparateArms) => Err(Error::Unsupported(
            "waning needs a shared hazard ratio; separate-arms fits have none".into(),
        )),
        (_, EffectMode::None) => Err(Error::Unsupported("waning needs a two-arm model".into())),
        _ => Ok(()),
    }
}

/// Active-arm hazards under waning, one per posterior draw.
pub fn apply_waning(fit: &FittedModel, waning: WaningSpec) -> Result<Vec<DrawHazard>> {
    arm_hazards(fit, 1, Some(waning))
}

/// Background survival averaged over a population, and the matching
/// survival-weighted background hazard.
struct BackgroundAverage<'a> {
    spec: &'a SurvivalModelSpec,
    ages: &'a [f64],
}

impl BackgroundAverage<'_> {
    fn survival(&self, t: f64) -> f64 {
        if !self.spec.relative_survival {
            return 1.0;
        }
        self.ages
            .iter()
            .map(|&a| (-self.spec.background_cumulative_hazard(a, t)).exp())
            .sum::<f64>()
            / self.ages.len() as f64
    }

    fn hazard(&self, t: f64) -> f64 {
        if !self.spec.relative_survival {
            return 0.0;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for &a in self.ages {
            let s = (-self.spec.background_cumulative_hazard(a, t)).exp();
            num += s * self.spec.background_hazard(a, t);
            den += s;
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }
}

fn check_population(ages: &[f64]) -> Result<()> {
    if ages.is_empty() {
        return Err(Error::config("standardisation population is empty"));
    }
    if ages.iter().any(|a| !a.is_finite()) {
        return Err(Error::config(
            "standardisation population has non-finite ages",
        ));
    }
    Ok(())
}

/// Per-draw marginal all-cause survival at each of the ascending `times`.
/// Individuals differ only in age, so the excess part factorises out of
/// the population average.
pub fn marginal_survival_draws(
    fit: &FittedModel,
    arm: u8,
    ages: &[f64],
    times: &[f64],
    waning: Option<WaningSpec>,
) -> Result<Vec<Vec<f64>>> {
    check_population(ages)?;
    check_times(times)?;
    let spec = &fit.spec;
    let bg = BackgroundAverage { spec, ages };
    let back: Vec<f64> = times.iter().map(|&t| bg.survival(t)).collect();
    let hazards = arm_hazards(fit, arm, waning)?;
    let grid = PreparedGrid::new(spec, times, if arm == 1 { waning } else { None });
    Ok(hazards
        .par_iter()
        .map(|h| {
            h.cumulative_on(&grid)
                .iter()
                .zip(&back)
                .map(|(c, b)| b * (-c).exp())
                .collect()
        })
        .collect())
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::config(
            "prediction times must be finite and non-negative",
        ));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::config("prediction times must be ascending"));
    }
    Ok(())
}

fn column_summaries(draws: &[Vec<f64>], n: usize) -> Vec<Summary> {
    (0..n)
        .map(|k| summarize(&draws.iter().map(|d| d[k]).collect::<Vec<_>>()))
        .collect()
}

/// Survival curve of an individual of the given arm and age.
pub fn survival_curve(fit: &FittedModel, arm: u8, age: f64, times: &[f64]) -> Result<Vec<Summary>> {
    let draws = marginal_survival_draws(fit, arm, &[age], times, None)?;
    Ok(column_summaries(&draws, times.len()))
}

/// Standardised survival `mean_i S_i(t)`.
pub fn marginal_survival(
    fit: &FittedModel,
    arm: u8,
    ages: &[f64],
    t: f64,
    waning: Option<WaningSpec>,
) -> Result<Summary> {
    let draws = marginal_survival_draws(fit, arm, ages, &[t], waning)?;
    Ok(summarize(&draws.iter().map(|d| d[0]).collect::<Vec<_>>()))
}

/// Per-draw standardised hazard `sum_i S_i h_i / sum_i S_i`.
pub fn marginal_hazard_draws(
    fit: &FittedModel,
    arm: u8,
    ages: &[f64],
    t: f64,
    waning: Option<WaningSpec>,
) -> Result<Vec<f64>> {
    check_population(ages)?;
    let bg = BackgroundAverage {
        spec: &fit.spec,
        ages,
    };
    let back = bg.hazard(t);
    let hazards = arm_hazards(fit, arm, waning)?;
    Ok(hazards
        .iter()
        .map(|h| h.hazard(&fit.spec, t) + back)
        .collect())
}

pub fn marginal_hazard(
    fit: &FittedModel,
    arm: u8,
    ages: &[f64],
    t: f64,
    waning: Option<WaningSpec>,
) -> Result<Summary> {
    Ok(summarize(&marginal_hazard_draws(
        fit, arm, ages, t, waning,
    )?))
}

/// Composite Gauss-Legendre nodes and weights on `[0, horizon]`, one
/// 64-node panel per year.
fn rmst_rule(horizon: f64) -> (Vec<f64>, Vec<f64>) {
    let gl = GaussLegendre::new(RMST_NODES);
    let panels = horizon.ceil().max(1.0) as usize;
    let width = horizon / panels as f64;
    let mut nodes = Vec::with_capacity(panels * RMST_NODES);
    let mut weights = Vec::with_capacity(panels * RMST_NODES);
    for k in 0..panels {
        let a = k as f64 * width;
        for (x, w) in gl.mapped(a, a + width) {
            nodes.push(x);
            weights.push(w);
        }
    }
    (nodes, weights)
}

/// Per-draw standardised RMST to `horizon`.
pub fn rmst_draws(
    fit: &FittedModel,
    arm: u8,
    ages: &[f64],
    horizon: f64,
    waning: Option<WaningSpec>,
) -> Result<Vec<f64>> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::config("RMST horizon must be positive"));
    }
    let (nodes, weights) = rmst_rule(horizon);
    let surv = marginal_survival_draws(fit, arm, ages, &nodes, waning)?;
    Ok(surv
        .iter()
        .map(|s| s.iter().zip(&weights).map(|(s, w)| s * w).sum())
        .collect())
}

pub fn rmst(
    fit: &FittedModel,
    arm: u8,
    ages: &[f64],
    horizon: f64,
    waning: Option<WaningSpec>,
) -> Result<Summary> {
    Ok(summarize(&rmst_draws(fit, arm, ages, horizon, waning)?))
}

/// Per-draw difference in standardised RMST, active (possibly waned)
/// minus control.
pub fn rmst_difference_draws(
    fit: &FittedModel,
    ages: &[f64],
    horizon: f64,
    waning: Option<WaningSpec>,
) -> Result<Vec<f64>> {
    if !fit.is_two_arm() {
        return Err(Error::Unsupported(
            "RMST difference needs a two-arm model".into(),
        ));
    }
    let active = rmst_draws(fit, 1, ages, horizon, waning)?;
    let control = rmst_draws(fit, 0, ages, horizon, None)?;
    Ok(active.iter().zip(&control).map(|(a, c)| a - c).collect())
}

pub fn rmst_difference(
    fit: &FittedModel,
    ages: &[f64],
    horizon: f64,
    waning: Option<WaningSpec>,
) -> Result<Summary> {
    Ok(summarize(&rmst_difference_draws(
        fit, ages, horizon, waning,
    )?))
}

/// One row of a plot-ready prediction table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub time: f64,
    pub quantity: String,
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub arm: String,
    pub model: String,
}

fn tidy(time: f64, quantity: &str, s: &Summary, arm: &str, model: &str) -> TidyRow {
    TidyRow {
        time,
        quantity: quantity.into(),
        median: s.median,
        lo95: s.lo95,
        hi95: s.hi95,
        arm: arm.into(),
        model: model.into(),
    }
}

/// Standardised survival and hazard on `times` for every arm of the fit,
/// plus RMST at `horizon` and, for two-arm fits, the RMST difference.
pub fn prediction_table(
    fit: &FittedModel,
    ages: &[f64],
    times: &[f64],
    horizon: f64,
    waning: Option<WaningSpec>,
    model_tag: &str,
) -> Result<Vec<TidyRow>> {
    let arms: &[u8] = if fit.is_two_arm() { &[0, 1] } else { &[0] };
    let mut rows = Vec::new();
    for &arm in arms {
        let label = if arm == 0 { "control" } else { "active" };
        let w = if arm == 1 { waning } else { None };
        let surv = marginal_survival_draws(fit, arm, ages, times, w)?;
        let s = column_summaries(&surv, times.len());
        for (k, &t) in times.iter().enumerate() {
            rows.push(tidy(t, "survival", &s[k], label, model_tag));
        }
        for &t in times {
            let h = marginal_hazard(fit, arm, ages, t, w)?;
            rows.push(tidy(t, "hazard", &h, label, model_tag));
        }
        rows.push(tidy(
            horizon,
            "rmst",
            &rmst(fit, arm, ages, horizon, w)?,
            label,
            model_tag,
        ));
    }
    if fit.is_two_arm() {
        let d = rmst_difference(fit, ages, horizon, waning)?;
        rows.push(tidy(
            horizon,
            "rmst_difference",
            &d,
            "active_minus_control",
            model_tag,
        ));
    }
    Ok(rows)
}

pub fn write_table_csv(path: &Path, rows: &[TidyRow]) -> Result<()> {
    let io = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(io)
}

pub fn write_table_json(path: &Path, rows: &[TidyRow]) -> Result<()> {
    let io = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    let s = serde_json::to_string_pretty(rows).map_err(|e| Error::config(e.to_string()))?;
    f.write_all(s.as_bytes()).map_err(io)
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}
