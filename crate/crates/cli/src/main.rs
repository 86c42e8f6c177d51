use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use extrap_core::datagen::{self, Scenario};
use extrap_core::dataio::{self, RunConfig};
use extrap_core::inference::{self, FittedModel, Method};
use extrap_core::predict::{self, WaningSpec};
use extrap_core::simstudy::{self, PerformanceRow};
use extrap_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "extrap",
    version,
    about = "Bayesian survival extrapolation with M-spline hazards"
)]
struct Cli {
    /// TOML run configuration (schema_version = 1).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(
        long,
        global = true,
        env = "EXTRAP_OUT_DIR",
        default_value = "extrap-out"
    )]
    out_dir: PathBuf,
    /// Fitting method: `mcmc` or `laplace`
    #[arg(long, global = true)]
    method: Option<Method>,
    /// Worker threads (default: all logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the configured model (or every grid cell) to the data files.
    Fit,
    /// Survival, hazard and RMST tables from a saved fit.
    Predict {
        /// `fit.json` written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Comma-separated prediction times; defaults to the configuration.
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        /// Comma-separated waning end times; adds one set of rows per value.
        #[arg(long, value_delimiter = ',')]
        waning: Option<Vec<f64>>,
        /// Start of waning for `--waning`.
        #[arg(long, default_value_t = 5.0)]
        waning_start: f64,
    },
    /// Write one simulated trial and external dataset.
    Simulate {
        /// Effect scenario 0-3
        #[arg(long)]
        scenario: Option<u8>,
        /// Log bias of the external data.
        #[arg(long)]
        bias_v: Option<f64>,
    },
    /// Run the replication study and summarise its performance.
    Simstudy {
        /// Number of replications
        #[arg(long)]
        reps: Option<usize>,
        /// Effect scenario 0-3
        #[arg(long)]
        scenario: Option<u8>,
    },
    /// Compute the true estimands of the data-generating mechanism.
    Truth {
        /// Monte Carlo sample size per arm.
        #[arg(long, default_value_t = 10_000_000)]
        n: usize,
    },
}

/// Saved fit with the hash of its specification.
#[derive(Serialize, Deserialize)]
struct FitArtifact {
    model_tag: String,
    spec_hash: String,
    /// Baseline ages of the trial, used to standardise predictions.
    ages: Vec<f64>,
    waning: Vec<WaningSpec>,
    fit: FittedModel,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config_sha256: String,
    seed: u64,
    extrap_version: String,
    outputs: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)
        .map_err(|e| Error::Fit(format!("serialization failed: {e}")))?;
    fs::write(path, text).map_err(io(path))
}

fn spec_hash(fit: &FittedModel) -> Result<String> {
    let json = serde_json::to_vec(&fit.spec)
        .map_err(|e| Error::Fit(format!("serialization failed: {e}")))?;
    Ok(sha256_hex(&json))
}

struct Run {
    cfg: RunConfig,
    out_dir: PathBuf,
    outputs: Vec<String>,
}

impl Run {
    fn output(&mut self, rel: &str) -> PathBuf {
        self.outputs.push(rel.to_string());
        self.out_dir.join(rel)
    }

    fn finish(&self, command: &str, seed: u64) -> Result<()> {
        let canonical = dataio::config_to_string(&self.cfg)?;
        let m = Manifest {
            command: command.into(),
            config_sha256: sha256_hex(canonical.as_bytes()),
            seed,
            extrap_version: env!("CARGO_PKG_VERSION").into(),
            outputs: self.outputs.clone(),
        };
        write_json(&self.out_dir.join("manifest.json"), &m)
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => dataio::load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.fit.seed = s;
        cfg.study.seed = s;
    }
    if let Some(m) = cli.method {
        cfg.fit.method = m;
        cfg.study.fit.method = m;
    }
    Ok(cfg)
}

fn cmd_fit(run: &mut Run) -> Result<()> {
    let (data, table) = run.cfg.load_data()?;
    let models = run.cfg.resolve_models(&data, table.as_ref())?;
    let ages: Vec<f64> = data.ipd.iter().map(|r| r.age).collect();
    for m in models {
        let fitted = inference::fit(&m.spec, &m.data, &run.cfg.fit)?;
        let dir = if run.cfg.grid.is_empty() {
            String::new()
        } else {
            format!("{}/", m.tag)
        };
        fs::create_dir_all(run.out_dir.join(&dir)).map_err(io(&run.out_dir))?;
        let artifact = FitArtifact {
            model_tag: m.tag.clone(),
            spec_hash: spec_hash(&fitted)?,
            ages: ages.clone(),
            waning: m.waning.clone(),
            fit: fitted,
        };
        let p = run.output(&format!("{dir}fit.json"));
        write_json(&p, &artifact)?;
        let diags: Vec<_> = artifact
            .fit
            .samples()
            .iter()
            .map(|s| s.diagnostics.clone())
            .collect();
        let p = run.output(&format!("{dir}diagnostics.json"));
        write_json(&p, &diags)?;
        for w in artifact.fit.warnings() {
            eprintln!("warning [{}]: {w}", m.tag);
        }
        let rmst = predict::rmst(&artifact.fit, 0, &ages, run.cfg.predict.horizon, None)?;
        let mut line = format!(
            "{}: control RMST({}) = {:.3} ({:.3}, {:.3})",
            m.tag, run.cfg.predict.horizon, rmst.median, rmst.lo95, rmst.hi95
        );
        if !artifact.fit.is_two_arm() {
            let loo = artifact.fit.loo(&m.data)?;
            line.push_str(&format!(", LOOIC = {:.1}", loo.looic));
            let p = run.output(&format!("{dir}loo.json"));
            write_json(&p, &loo)?;
        }
        println!("{line}");
    }
    Ok(())
}

fn cmd_predict(
    run: &mut Run,
    fit_path: &Path,
    times: Option<Vec<f64>>,
    waning: Option<Vec<f64>>,
    start: f64,
) -> Result<()> {
    let text = fs::read_to_string(fit_path).map_err(io(fit_path))?;
    let artifact: FitArtifact = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: fit_path.display().to_string(),
        row: e.line(),
        column: String::new(),
        message: e.to_string(),
    })?;
    if spec_hash(&artifact.fit)? != artifact.spec_hash {
        return Err(Error::ConfigKey {
            key: "spec_hash".into(),
            message: format!(
                "{} does not match its model specification",
                fit_path.display()
            ),
        });
    }
    let times = times.unwrap_or_else(|| run.cfg.predict.times.clone());
    let mut settings: Vec<Option<WaningSpec>> = vec![None];
    match waning {
        Some(ends) => {
            for t in ends {
                settings.push(Some(WaningSpec::new(start, t)?));
            }
        }
        None => settings.extend(artifact.waning.iter().copied().map(Some)),
    }
    let mut rows = Vec::new();
    for w in settings {
        let tag = match w {
            None => artifact.model_tag.clone(),
            Some(w) => format!("{}_waning_{}_{}", artifact.model_tag, w.t_min, w.t_max),
        };
        let r = predict::prediction_table(
            &artifact.fit,
            &artifact.ages,
            &times,
            run.cfg.predict.horizon,
            w,
            &tag,
        )?;
        for row in r.iter().filter(|r| r.quantity.starts_with("rmst")) {
            println!(
                "{tag} {} {}: {:.3} ({:.3}, {:.3})",
                row.quantity, row.arm, row.median, row.lo95, row.hi95
            );
        }
        rows.extend(r);
    }
    let p = run.output("predictions.csv");
    predict::write_table_csv(&p, &rows)
}

fn cmd_simulate(run: &mut Run, scenario: Option<u8>, bias_v: Option<f64>) -> Result<()> {
    let mut dgm = run.cfg.study.dgm.clone();
    if let Some(s) = scenario {
        dgm.scenario = Scenario::from_number(s)?;
    }
    if let Some(v) = bias_v {
        dgm.bias_v = v;
    }
    dgm.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.study.seed);
    let data = datagen::simulate_dataset(&dgm, &mut rng);
    let p = run.output("ipd.csv");
    dataio::write_ipd(&p, &data.ipd)?;
    let p = run.output("external.csv");
    dataio::write_external(&p, &data.external)?;
    let p = run.output("lifetable.csv");
    dataio::write_lifetable(&p, &dgm.lifetable()?)?;
    println!(
        "{} trial records ({} events), {} external intervals",
        data.ipd.len(),
        data.ipd.iter().filter(|r| r.event).count(),
        data.external.len()
    );
    Ok(())
}

fn print_summary(rows: &[PerformanceRow]) {
    println!(
        "{:<28} {:>8} {:>14} {:>7} {:>15} {:>15} {:>15} {:>15} {:>7}",
        "model", "bias_v", "estimand", "truth", "bias", "mse", "model_sd", "coverage", "failed"
    );
    for r in rows {
        println!(
            "{:<28} {:>8.3} {:>14} {:>7.3} {:>7.3} ({:.3}) {:>7.3} ({:.3}) {:>7.3} ({:.3}) {:>7.3} ({:.3}) {:>6.1}%{}",
            r.model_tag,
            r.bias_v,
            r.estimand,
            r.truth,
            r.bias,
            r.bias_mcse,
            r.mse,
            r.mse_mcse,
            r.model_sd,
            r.model_sd_mcse,
            r.coverage,
            r.coverage_mcse,
            100.0 * r.failure_rate,
            if r.flagged { "  FLAGGED" } else { "" }
        );
    }
}

fn cmd_simstudy(run: &mut Run, reps: Option<usize>, scenario: Option<u8>) -> Result<()> {
    if let Some(n) = reps {
        run.cfg.study.n_reps = n;
    }
    if let Some(s) = scenario {
        run.cfg.study.scenario = Scenario::from_number(s)?;
    }
    let study = &run.cfg.study;
    study.validate()?;
    let reps_path = run.out_dir.join("reps.csv");
    let rows = simstudy::run_study(study, Some(&reps_path))?;
    run.outputs.push("reps.csv".into());
    let truth = simstudy::analytic_estimands(&study.dgm, &[study.scenario], study.horizon);
    let summary = simstudy::summarize_study(study, &rows, &truth)?;
    let p = run.output("summary.csv");
    simstudy::write_csv(&p, &summary)?;
    print_summary(&summary);
    Ok(())
}

fn cmd_truth(run: &mut Run, n: usize) -> Result<()> {
    let study = &run.cfg.study;
    let scenarios = Scenario::STUDY;
    let exact = simstudy::analytic_estimands(&study.dgm, &scenarios, study.horizon);
    let mc = simstudy::true_estimands(&study.dgm, &scenarios, n, study.horizon, study.seed);
    println!(
        "control RMST({}): {:.4} (MCSE {:.4}); quadrature {:.4}",
        study.horizon, mc.control_rmst.estimate, mc.control_rmst.mcse, exact.control_rmst
    );
    for ((s, e), (_, q)) in mc.rmstd.iter().zip(&exact.rmstd) {
        println!(
            "scenario {} RMSTD: {:.4} (MCSE {:.4}); quadrature {:.4}",
            s.number(),
            e.estimate,
            e.mcse,
            q
        );
    }
    let p = run.output("truth.json");
    write_json(
        &p,
        &serde_json::json!({ "monte_carlo": mc, "quadrature": exact }),
    )
}

fn real_main(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
    }
    let cfg = load_config(&cli)?;
    fs::create_dir_all(&cli.out_dir).map_err(io(&cli.out_dir))?;
    let mut run = Run {
        cfg,
        out_dir: cli.out_dir.clone(),
        outputs: Vec::new(),
    };
    let (name, seed) = match cli.command {
        Command::Fit => {
            cmd_fit(&mut run)?;
            ("fit", run.cfg.fit.seed)
        }
        Command::Predict {
            fit,
            times,
            waning,
            waning_start,
        } => {
            cmd_predict(&mut run, &fit, times, waning, waning_start)?;
            ("predict", run.cfg.fit.seed)
        }
        Command::Simulate { scenario, bias_v } => {
            cmd_simulate(&mut run, scenario, bias_v)?;
            ("simulate", run.cfg.study.seed)
        }
        Command::Simstudy { reps, scenario } => {
            cmd_simstudy(&mut run, reps, scenario)?;
            ("simstudy", run.cfg.study.seed)
        }
        Command::Truth { n } => {
            cmd_truth(&mut run, n)?;
            ("truth", run.cfg.study.seed)
        }
    };
    run.finish(name, seed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
