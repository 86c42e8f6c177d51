//! File formats: trial IPD, aggregate external counts and lifetables as
//! CSV, run configuration as TOML.
//!
//! ```text
//! ipd.csv        time,event,arm,age
//! external.csv   start,stop,n_at_risk,n_survivors,arm[,backsurv_start,backsurv_stop]
//! lifetable.csv  age,rate_per_year          (or age,rate_male,rate_female)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::background::Lifetable;
use crate::bayes::{Dataset, ExternalRecord, IpdRecord};
use crate::error::{Error, Result};
use crate::inference::FitOptions;
use crate::model::{EffectMode, PriorSettings, SurvivalModelSpec};
use crate::mspline::make_knots;
use crate::predict::WaningSpec;
use crate::simstudy::StudyConfig;

/// Configuration schema version understood by this build.
pub const SCHEMA_VERSION: u32 = 1;

pub const IPD_HEADER: [&str; 4] = ["time", "event", "arm", "age"];
pub const EXTERNAL_HEADER: [&str; 5] = ["start", "stop", "n_at_risk", "n_survivors", "arm"];
pub const EXTERNAL_HEADER_BACKSURV: [&str; 7] = [
    "start",
    "stop",
    "n_at_risk",
    "n_survivors",
    "arm",
    "backsurv_start",
    "backsurv_stop",
];
pub const LIFETABLE_HEADER: [&str; 2] = ["age", "rate_per_year"];
pub const LIFETABLE_HEADER_SEX: [&str; 3] = ["age", "rate_male", "rate_female"];

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Parsed CSV cells with positions for error reporting.
struct Table {
    path: String,
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let name = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut header = Vec::new();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 1;
            let rec = rec.map_err(|e| Error::Schema {
                path: name.clone(),
                row: line,
                column: String::new(),
                message: e.to_string(),
            })?;
            let cells: Vec<String> = rec.iter().map(str::to_string).collect();
            if cells.iter().all(String::is_empty) {
                continue;
            }
            if header.is_empty() {
                header = cells;
            } else {
                rows.push((line, cells));
            }
        }
        Ok(Self {
            path: name,
            header,
            rows,
        })
    }

    fn err(&self, row: usize, column: &str, message: impl Into<String>) -> Error {
        Error::Schema {
            path: self.path.clone(),
            row,
            column: column.to_string(),
            message: message.into(),
        }
    }

    /// Checks the header against the accepted layouts; returns the index of
    /// the matching one. An empty file matches layout 0 with no rows.
    fn expect_header(&self, layouts: &[&[&str]]) -> Result<usize> {
        if self.header.is_empty() {
            return Ok(0);
        }
        for (k, l) in layouts.iter().enumerate() {
            if self.header.len() == l.len() && self.header.iter().zip(l.iter()).all(|(a, b)| a == b)
            {
                return Ok(k);
            }
        }
        let expected: Vec<String> = layouts.iter().map(|l| l.join(",")).collect();
        Err(self.err(
            1,
            "",
            format!(
                "header `{}` does not match `{}`",
                self.header.join(","),
                expected.join("` or `")
            ),
        ))
    }

    fn cell<'a>(&self, line: usize, cells: &'a [String], k: usize) -> Result<&'a str> {
        if cells.len() != self.header.len() {
            return Err(self.err(
                line,
                "",
                format!(
                    "expected {} fields, found {}",
                    self.header.len(),
                    cells.len()
                ),
            ));
        }
        Ok(&cells[k])
    }

    fn real(&self, line: usize, cells: &[String], k: usize) -> Result<f64> {
        let s = self.cell(line, cells, k)?;
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.err(
                line,
                &self.header[k],
                format!("`{s}` is not a finite number"),
            )),
        }
    }

    fn count(&self, line: usize, cells: &[String], k: usize) -> Result<u64> {
        let s = self.cell(line, cells, k)?;
        s.parse::<u64>().map_err(|_| {
            self.err(
                line,
                &self.header[k],
                format!("`{s}` is not a non-negative integer"),
            )
        })
    }

    fn flag(&self, line: usize, cells: &[String], k: usize) -> Result<u8> {
        match self.cell(line, cells, k)? {
            "0" => Ok(0),
            "1" => Ok(1),
            s => Err(self.err(line, &self.header[k], format!("`{s}` must be 0 or 1"))),
        }
    }
}

pub fn load_ipd(path: &Path) -> Result<Vec<IpdRecord>> {
    let t = Table::read(path)?;
    t.expect_header(&[&IPD_HEADER])?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, cells) in &t.rows {
        let time = t.real(*line, cells, 0)?;
        if time <= 0.0 {
            return Err(t.err(*line, "time", "time must be positive"));
        }
        let event = t.flag(*line, cells, 1)? == 1;
        let arm = t.flag(*line, cells, 2)?;
        let age = t.real(*line, cells, 3)?;
        if age < 0.0 {
            return Err(t.err(*line, "age", "age must be non-negative"));
        }
        out.push(IpdRecord {
            time,
            event,
            arm,
            age,
        });
    }
    Ok(out)
}

pub fn load_external(path: &Path) -> Result<Vec<ExternalRecord>> {
    let t = Table::read(path)?;
    let layout = t.expect_header(&[&EXTERNAL_HEADER, &EXTERNAL_HEADER_BACKSURV])?;
    let mut out: Vec<ExternalRecord> = Vec::with_capacity(t.rows.len());
    for (line, cells) in &t.rows {
        let line = *line;
        let start = t.real(line, cells, 0)?;
        let stop = t.real(line, cells, 1)?;
        if !(start >= 0.0 && stop > start) {
            return Err(t.err(
                line,
                "stop",
                format!("interval ({start}, {stop}] is empty or negative"),
            ));
        }
        let n = t.count(line, cells, 2)?;
        let r = t.count(line, cells, 3)?;
        if r > n {
            return Err(t.err(line, "n_survivors", "more survivors than patients at risk"));
        }
        let arm = t.flag(line, cells, 4)?;
        let mut rec = ExternalRecord::new(start, stop, n, r, arm);
        if layout == 1 {
            rec.backsurv_start = t.real(line, cells, 5)?;
            rec.backsurv_stop = t.real(line, cells, 6)?;
            if !(rec.backsurv_start > 0.0 && rec.backsurv_start <= 1.0) {
                return Err(t.err(line, "backsurv_start", "must lie in (0, 1]"));
            }
            if !(rec.backsurv_stop > 0.0 && rec.backsurv_stop <= rec.backsurv_start) {
                return Err(t.err(line, "backsurv_stop", "must lie in (0, backsurv_start]"));
            }
        }
        if let Some(prev) = out.iter().rev().find(|p| p.arm == arm) {
            if start < prev.stop {
                return Err(t.err(
                    line,
                    "start",
                    format!("interval starting at {start} overlaps or precedes the previous one ending at {}", prev.stop),
                ));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Loads a lifetable of annual death rates by attained age. With separate
/// male and female columns the rates are blended with weight
/// `male_proportion` on the male column.
pub fn load_lifetable(path: &Path, male_proportion: Option<f64>) -> Result<Lifetable> {
    let t = Table::read(path)?;
    if t.header.is_empty() {
        return Err(t.err(1, "", "lifetable is empty"));
    }
    let layout = t.expect_header(&[&LIFETABLE_HEADER, &LIFETABLE_HEADER_SEX])?;
    let w = match (layout, male_proportion) {
        (1, None) => {
            return Err(Error::ConfigKey {
                key: "data.male_proportion".into(),
                message: "required for a lifetable with separate sex columns".into(),
            })
        }
        (_, Some(w)) if !(0.0..=1.0).contains(&w) => {
            return Err(Error::ConfigKey {
                key: "data.male_proportion".into(),
                message: format!("{w} is not in [0, 1]"),
            })
        }
        (_, w) => w.unwrap_or(1.0),
    };
    let mut ages: Vec<f64> = Vec::with_capacity(t.rows.len());
    let mut rates = Vec::with_capacity(t.rows.len());
    for (line, cells) in &t.rows {
        let age = t.real(*line, cells, 0)?;
        if let Some(&prev) = ages.last() {
            if age <= prev {
                return Err(t.err(*line, "age", "ages must be strictly increasing"));
            }
        }
        let rate = if layout == 0 {
            t.real(*line, cells, 1)?
        } else {
            w * t.real(*line, cells, 1)? + (1.0 - w) * t.real(*line, cells, 2)?
        };
        if rate < 0.0 {
            return Err(t.err(*line, &t.header[1], "rates must be non-negative"));
        }
        ages.push(age);
        rates.push(rate);
    }
    Lifetable::new(ages, rates).map_err(|e| t.err(0, "", e.to_string()))
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::predict::csv_io(path, e))?;
    w.write_record(header)
        .map_err(|e| crate::predict::csv_io(path, e))?;
    for r in rows {
        w.write_record(&r)
            .map_err(|e| crate::predict::csv_io(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_ipd(path: &Path, ipd: &[IpdRecord]) -> Result<()> {
    write_rows(
        path,
        &IPD_HEADER,
        ipd.iter().map(|r| {
            vec![
                r.time.to_string(),
                u8::from(r.event).to_string(),
                r.arm.to_string(),
                r.age.to_string(),
            ]
        }),
    )
}

/// Writes the short layout unless some record carries background survival.
pub fn write_external(path: &Path, ext: &[ExternalRecord]) -> Result<()> {
    let full = ext
        .iter()
        .any(|r| r.backsurv_start != 1.0 || r.backsurv_stop != 1.0);
    let header: &[&str] = if full {
        &EXTERNAL_HEADER_BACKSURV
    } else {
        &EXTERNAL_HEADER
    };
    write_rows(
        path,
        header,
        ext.iter().map(|r| {
            let mut v = vec![
                r.start.to_string(),
                r.stop.to_string(),
                r.n_at_risk.to_string(),
                r.n_survivors.to_string(),
                r.arm.to_string(),
            ];
            if full {
                v.push(r.backsurv_start.to_string());
                v.push(r.backsurv_stop.to_string());
            }
            v
        }),
    )
}

pub fn write_lifetable(path: &Path, table: &Lifetable) -> Result<()> {
    write_rows(
        path,
        &LIFETABLE_HEADER,
        table
            .ages()
            .iter()
            .zip(table.rates())
            .map(|(a, r)| vec![a.to_string(), r.to_string()]),
    )
}

/// Input files of a fit. Relative paths are resolved against the directory
/// of the configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ipd: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lifetable: Option<PathBuf>,
    /// Weight of the male column in a two-sex lifetable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub male_proportion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub df: usize,
    pub extra_knots: Vec<f64>,
    pub effect_mode: EffectMode,
    pub relative_survival: bool,
    /// Use the external file when one is given.
    pub use_external: bool,
    pub prior: PriorSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            df: 10,
            extra_knots: Vec::new(),
            effect_mode: EffectMode::None,
            relative_survival: false,
            use_external: true,
            prior: PriorSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Grid of prediction times in years.
    pub times: Vec<f64>,
    pub horizon: f64,
    /// Waning settings evaluated in addition to the unwaned effect.
    pub waning: Vec<WaningSpec>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            times: (0..=40).map(f64::from).collect(),
            horizon: crate::predict::HORIZON,
            waning: Vec::new(),
        }
    }
}

/// Which data enter a case-study cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSources {
    TrialOnly,
    TrialPopulation,
    TrialPopulationRegistry,
}

impl DataSources {
    pub fn relative_survival(self) -> bool {
        !matches!(self, DataSources::TrialOnly)
    }

    pub fn use_external(self) -> bool {
        matches!(self, DataSources::TrialPopulationRegistry)
    }
}

/// One fitted model of a grid of analyses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub tag: String,
    pub effect_mode: EffectMode,
    pub data: DataSources,
    #[serde(default)]
    pub extra_knots: Vec<f64>,
    #[serde(default)]
    pub waning: Vec<WaningSpec>,
}

/// The case-study analysis grid: three effect models by three data
/// combinations, with PH waning rows ending at 6, 10 and 20 years.
pub fn case_study_grid() -> Vec<GridCell> {
    let knots = vec![10.0, 15.0, 25.0];
    let mut out = Vec::new();
    for (mode, name) in [
        (EffectMode::ProportionalHazards, "ph"),
        (EffectMode::NonProportionalHazards, "nonph"),
        (EffectMode::SeparateArms, "separate"),
    ] {
        for (data, dname) in [
            (DataSources::TrialOnly, "trial"),
            (DataSources::TrialPopulation, "trial_pop"),
            (DataSources::TrialPopulationRegistry, "trial_pop_registry"),
        ] {
            let waning = if mode == EffectMode::ProportionalHazards {
                [6.0, 10.0, 20.0]
                    .iter()
                    .map(|&t| WaningSpec {
                        t_min: 5.0,
                        t_max: t,
                    })
                    .collect()
            } else {
                Vec::new()
            };
            out.push(GridCell {
                tag: format!("{name}_{dname}"),
                effect_mode: mode,
                data,
                extra_knots: knots.clone(),
                waning,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub model: ModelConfig,
    /// When non-empty, `fit` runs every cell instead of `model`; cells
    /// inherit `df` and the priors from `model`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grid: Vec<GridCell>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data: DataPaths::default(),
            model: ModelConfig::default(),
            grid: Vec::new(),
            fit: FitOptions::default(),
            predict: PredictConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

impl RunConfig {
    /// Rejects inconsistent settings.
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str, m: String| Error::ConfigKey {
            key: k.into(),
            message: m,
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(key(
                "schema_version",
                format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        if self.model.df < 2 {
            return Err(key("model.df", format!("{} is too small", self.model.df)));
        }
        let waning_ok = |mode: EffectMode| {
            matches!(
                mode,
                EffectMode::ProportionalHazards | EffectMode::NonProportionalHazards
            )
        };
        for w in &self.predict.waning {
            WaningSpec::new(w.t_min, w.t_max).map_err(|e| key("predict.waning", e.to_string()))?;
        }
        if !self.predict.waning.is_empty() && !waning_ok(self.model.effect_mode) {
            return Err(key(
                "predict.waning",
                format!(
                    "waning cannot be combined with effect_mode `{}`",
                    self.model.effect_mode.tag()
                ),
            ));
        }
        for c in &self.grid {
            if !c.waning.is_empty() && !waning_ok(c.effect_mode) {
                return Err(key(
                    &format!("grid.{}.waning", c.tag),
                    format!(
                        "waning cannot be combined with effect_mode `{}`",
                        c.effect_mode.tag()
                    ),
                ));
            }
            for w in &c.waning {
                WaningSpec::new(w.t_min, w.t_max)
                    .map_err(|e| key(&format!("grid.{}.waning", c.tag), e.to_string()))?;
            }
        }
        if self.predict.horizon <= 0.0 || !self.predict.horizon.is_finite() {
            return Err(key("predict.horizon", "must be positive".into()));
        }
        if let Some(t) = self
            .predict
            .times
            .iter()
            .find(|t| !(**t >= 0.0 && t.is_finite()))
        {
            return Err(key("predict.times", format!("{t} is not a valid time")));
        }
        if self.fit.chains == 0 || self.fit.iters == 0 || self.fit.laplace_draws == 0 {
            return Err(key(
                "fit",
                "chains, iters and laplace_draws must be positive".into(),
            ));
        }
        self.study.validate()
    }

    /// Resolves relative data paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.data.ipd,
            &mut self.data.external,
            &mut self.data.lifetable,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Loads the data files named in `data`.
    pub fn load_data(&self) -> Result<(Dataset, Option<Lifetable>)> {
        let ipd_path = self.data.ipd.as_ref().ok_or_else(|| Error::ConfigKey {
            key: "data.ipd".into(),
            message: "no trial data file given".into(),
        })?;
        let ipd = load_ipd(ipd_path)?;
        let external = match &self.data.external {
            Some(p) => load_external(p)?,
            None => Vec::new(),
        };
        let table = match &self.data.lifetable {
            Some(p) => Some(load_lifetable(p, self.data.male_proportion)?),
            None => None,
        };
        let data = Dataset { ipd, external };
        data.validate()?;
        Ok((data, table))
    }
}

/// A model ready to fit: specification, the data it uses and the waning
/// settings to predict under.
#[derive(Debug, Clone)]
pub struct ResolvedModel {
    pub tag: String,
    pub spec: SurvivalModelSpec,
    pub data: Dataset,
    pub waning: Vec<WaningSpec>,
}

impl RunConfig {
    /// Turns `model` (or every `grid` cell) into fit-ready specifications.
    pub fn resolve_models(
        &self,
        data: &Dataset,
        table: Option<&Lifetable>,
    ) -> Result<Vec<ResolvedModel>> {
        let cells: Vec<(String, EffectMode, bool, bool, Vec<f64>, Vec<WaningSpec>)> =
            if self.grid.is_empty() {
                let m = &self.model;
                vec![(
                    "model".into(),
                    m.effect_mode,
                    m.relative_survival,
                    m.use_external,
                    m.extra_knots.clone(),
                    self.predict.waning.clone(),
                )]
            } else {
                self.grid
                    .iter()
                    .map(|c| {
                        (
                            c.tag.clone(),
                            c.effect_mode,
                            c.data.relative_survival(),
                            c.data.use_external(),
                            c.extra_knots.clone(),
                            c.waning.clone(),
                        )
                    })
                    .collect()
            };
        cells
            .into_iter()
            .map(|(tag, mode, rs, ext, knots, waning)| {
                let mut used = if mode.is_two_arm() {
                    data.clone()
                } else {
                    data.arm_subset(0)
                };
                if !ext {
                    used.external.clear();
                }
                let backhaz = match (rs, table) {
                    (true, None) => {
                        return Err(Error::ConfigKey {
                            key: "data.lifetable".into(),
                            message: format!(
                                "model `{tag}` uses relative survival but no lifetable is given"
                            ),
                        })
                    }
                    (true, Some(t)) => Some(t.clone()),
                    (false, _) => None,
                };
                let basis = make_knots(&used.event_times(), self.model.df, &knots)?;
                let spec = SurvivalModelSpec::new(basis, mode, rs, &self.model.prior, backhaz)?;
                Ok(ResolvedModel {
                    tag,
                    spec,
                    data: used,
                    waning,
                })
            })
            .collect()
    }
}

/// Parses a configuration document. Errors name the offending key.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let value: toml::Value = toml::from_str(text).map_err(|e| Error::ConfigKey {
        key: String::new(),
        message: e.to_string(),
    })?;
    match value.get("schema_version") {
        None => {
            return Err(Error::ConfigKey {
                key: "schema_version".into(),
                message: "missing".into(),
            })
        }
        Some(toml::Value::Integer(v)) if *v == i64::from(SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(Error::ConfigKey {
                key: "schema_version".into(),
                message: format!("unsupported value {v} (expected {SCHEMA_VERSION})"),
            })
        }
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| Error::ConfigKey {
        key: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and validates a configuration file, resolving data paths
/// relative to the file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut cfg = parse_config(&text)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

/// Canonical TOML rendering of a configuration with all defaults filled in.
pub fn config_to_string(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::config(format!("cannot serialize configuration: {e}")))
}

pub fn save_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(path, config_to_string(cfg)?).map_err(|e| io_err(path, e))
}
