//! Acceptance criteria 1-9. Each test prints one `criterion N: PASS|FAIL`
//! line to stderr (bypassing output capture) before asserting.
//!
//! Criterion 8 needs user-supplied case-study files: set
//! `EXTRAP_CASE_STUDY_DIR` to a directory holding `ipd.csv`,
//! `external.csv` and a two-sex `lifetable.csv`. Without it the criterion
//! is reported as skipped.

use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use extrap_core::bayes::{Dataset, LogPosterior, Target};
use extrap_core::datagen::{self, DgmConfig, Scenario};
use extrap_core::dataio;
use extrap_core::inference::{self, FitOptions, Method};
use extrap_core::model::{self, EffectMode, ParameterVector, PriorSettings, SurvivalModelSpec};
use extrap_core::mspline::{make_knots, SplineBasis};
use extrap_core::predict::{rmst, rmst_difference, WaningSpec};
use extrap_core::quadrature::GaussLegendre;
use extrap_core::simstudy::{self, ModelCell, PerformanceRow, StudyConfig, STUDY_EXTRA_KNOTS};

fn report(n: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} | {detail}");
}

fn trial_data(scenario: Scenario, seed: u64) -> Dataset {
    let cfg = DgmConfig {
        scenario,
        ..Default::default()
    };
    datagen::simulate_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn spec_for(data: &Dataset, mode: EffectMode, rs: bool, extra: &[f64]) -> SurvivalModelSpec {
    let basis = make_knots(&data.event_times(), 10, extra).unwrap();
    let table = if rs {
        Some(DgmConfig::default().lifetable().unwrap())
    } else {
        None
    };
    SurvivalModelSpec::new(basis, mode, rs, &PriorSettings::default(), table).unwrap()
}

#[test]
fn criterion_1_spline_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gl = GaussLegendre::new(30);
    let mut worst_mass: f64 = 0.0;
    let mut worst_quad: f64 = 0.0;
    let mut monotone = true;
    let mut worst_tail: f64 = 0.0;
    for _ in 0..50 {
        let n_events = rng.random_range(20..200);
        let events: Vec<f64> = (0..n_events)
            .map(|_| -rng.random::<f64>().ln() * 3.0 + 1e-3)
            .collect();
        let df = rng.random_range(4..12);
        let max_event = events.iter().cloned().fold(0.0, f64::max);
        let extra: Vec<f64> = if rng.random::<bool>() {
            vec![max_event + 2.0, max_event + 10.0]
        } else {
            Vec::new()
        };
        let basis: SplineBasis = make_knots(&events, df, &extra).unwrap();
        let (lo, hi) = basis.boundary_knots();
        let n = basis.n_basis();
        // Mass of each basis function: I-spline at the upper knot, and an
        // independent composite quadrature of the M-spline itself between
        // consecutive knots.
        let iup = basis.eval_integral(hi);
        let mut quad = vec![0.0; n];
        let mut knots: Vec<f64> = vec![lo];
        knots.extend_from_slice(basis.interior_knots());
        knots.push(hi);
        for w in knots.windows(2) {
            for k in 0..n {
                quad[k] += gl.integrate(w[0], w[1], |t| basis.eval(t)[k]);
            }
        }
        for k in 0..n {
            worst_mass = worst_mass.max((iup[k] - 1.0).abs());
            worst_quad = worst_quad.max((quad[k] - 1.0).abs());
        }
        let mut prev = basis.eval_integral(lo);
        for j in 1..=400 {
            let t = lo + (hi - lo) * 1.05 * j as f64 / 400.0;
            let cur = basis.eval_integral(t);
            if cur.iter().zip(&prev).any(|(c, p)| *c < *p - 1e-14) {
                monotone = false;
            }
            prev = cur;
        }
        // Hazard beyond the final knot under random coefficients.
        let spec = SurvivalModelSpec::new(
            basis.clone(),
            EffectMode::None,
            false,
            &PriorSettings::default(),
            None,
        )
        .unwrap();
        let layout = spec.layout();
        let theta: Vec<f64> = (0..layout.dim())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let p = ParameterVector::from_unconstrained(&layout, &theta).unwrap();
        let h_end = model::hazard(&spec, &p, &[], hi).unwrap();
        for t in [hi + 0.1, hi + 5.0, hi * 3.0, hi * 50.0] {
            let h = model::hazard(&spec, &p, &[], t).unwrap();
            worst_tail = worst_tail.max(((h - h_end) / h_end).abs());
        }
    }
    let pass = worst_mass < 1e-6 && worst_quad < 1e-6 && monotone && worst_tail == 0.0;
    report(
        1,
        pass,
        &format!(
            "max |mass-1| {worst_mass:.1e} (I-spline), {worst_quad:.1e} (quadrature); I-spline monotone: {monotone}; max relative hazard change beyond final knot {worst_tail:.1e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_gradient_correctness() {
    let data = trial_data(Scenario::Constant, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    let mut combos = 0;
    for mode in [
        EffectMode::ProportionalHazards,
        EffectMode::NonProportionalHazards,
    ] {
        for ext in [true, false] {
            for rs in [true, false] {
                let mut d = data.clone();
                if !ext {
                    d.external.clear();
                }
                let spec = spec_for(&d, mode, rs, &STUDY_EXTRA_KNOTS);
                let post = LogPosterior::new(&spec, &d).unwrap();
                let layout = spec.layout();
                let base = ParameterVector::flat(&layout, (0.3f64 * 25.0).ln()).to_unconstrained();
                for _ in 0..50 {
                    let theta: Vec<f64> = base
                        .iter()
                        .map(|b| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            b + 0.5 * z
                        })
                        .collect();
                    let mut grad = vec![0.0; theta.len()];
                    post.log_density_grad(&theta, &mut grad);
                    for j in 0..theta.len() {
                        let h = 1e-5 * theta[j].abs().max(1.0);
                        let mut up = theta.clone();
                        up[j] += h;
                        let mut dn = theta.clone();
                        dn[j] -= h;
                        let fd = (post.log_density(&up) - post.log_density(&dn)) / (2.0 * h);
                        let rel = (grad[j] - fd).abs() / fd.abs().max(1.0);
                        worst = worst.max(rel);
                    }
                }
                combos += 1;
            }
        }
    }
    let pass = worst < 1e-5;
    report(
        2,
        pass,
        &format!("{combos} model variants x 50 points; max relative gradient error {worst:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_dgm_oracle() {
    let cfg = DgmConfig::default();
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut times: Vec<f64> = datagen::simulate_uncensored(&cfg, 0, n, &mut rng)
        .into_iter()
        .map(|(t, _)| t)
        .collect();
    times.sort_by(f64::total_cmp);
    // Without censoring the Kaplan-Meier estimate is the empirical survivor function.
    let km = |t: f64| 1.0 - times.partition_point(|&x| x <= t) as f64 / n as f64;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for t in [1.0, 2.0, 5.0, 10.0, 20.0] {
        let a = cfg.marginal_survival(t, 0);
        let e = km(t);
        worst = worst.max((a - e).abs());
        parts.push(format!("S({t})={a:.4}/{e:.4}"));
    }
    // Shape: survival decreasing, disease hazard rising to an early peak then falling.
    let grid: Vec<f64> = (1..=200).map(|k| k as f64 * 0.1).collect();
    let decreasing = grid
        .windows(2)
        .all(|w| cfg.marginal_survival(w[1], 0) < cfg.marginal_survival(w[0], 0));
    let (peak_t, _) = grid
        .iter()
        .map(|&t| (t, cfg.baseline_hazard(t)))
        .fold((0.0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
    let shape = decreasing
        && peak_t > 0.3
        && peak_t < 3.0
        && cfg.baseline_hazard(20.0) < cfg.baseline_hazard(peak_t);
    let pass = worst < 0.005 && shape;
    report(
        3,
        pass,
        &format!(
            "max |KM - analytic| {worst:.4} over {}; hazard peak at t={peak_t:.1}",
            parts.join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_truth_reproduction() {
    let cfg = DgmConfig::default();
    let truth = simstudy::true_estimands(&cfg, &Scenario::STUDY, 10_000_000, 40.0, 41);
    let targets = [6.21, 2.66, 1.52, 2.28];
    let got = [
        truth.control_rmst,
        truth.rmstd[0].1,
        truth.rmstd[1].1,
        truth.rmstd[2].1,
    ];
    let pass = got
        .iter()
        .zip(&targets)
        .all(|(g, t)| (g.estimate - t).abs() <= 0.03);
    let detail: Vec<String> = got
        .iter()
        .zip(&targets)
        .zip(["control RMST", "RMSTD s1", "RMSTD s2", "RMSTD s3"])
        .map(|((g, t), name)| format!("{name} {:.3} (MCSE {:.4}, target {t})", g.estimate, g.mcse))
        .collect();
    report(4, pass, &detail.join("; "));
    assert!(pass);
}

fn study_fit_options() -> FitOptions {
    FitOptions {
        method: Method::Mcmc,
        chains: 2,
        warmup: 300,
        iters: 300,
        seed: 0,
        ..Default::default()
    }
}

fn find<'a>(rows: &'a [PerformanceRow], tag: &str, v: f64, est: &str) -> &'a PerformanceRow {
    rows.iter()
        .find(|r| r.model_tag == tag && (r.bias_v - v).abs() < 1e-9 && r.estimand == est)
        .unwrap()
}

#[test]
fn criterion_5_scaled_control_study() {
    let levels = [0.8f64.ln(), 0.0, 1.2f64.ln()];
    let cfg = StudyConfig {
        n_reps: 100,
        scenario: Scenario::Constant,
        bias_levels: levels.to_vec(),
        models: vec![
            ModelCell::new("noext_noknots", EffectMode::None, false, &[]),
            ModelCell::new("ext_knots", EffectMode::None, true, &STUDY_EXTRA_KNOTS),
        ],
        seed: 2024,
        fit: study_fit_options(),
        ..Default::default()
    };
    let rows = simstudy::run_study(&cfg, None).unwrap();
    let truth = simstudy::analytic_estimands(&cfg.dgm, &[Scenario::Constant], 40.0);
    let perf = simstudy::summarize_study(&cfg, &rows, &truth).unwrap();
    let unb = find(&perf, "ext_knots", 0.0, "control_rmst");
    let naive = find(&perf, "noext_noknots", 0.0, "control_rmst");
    let b: Vec<f64> = levels
        .iter()
        .map(|&v| find(&perf, "ext_knots", v, "control_rmst").bias)
        .collect();
    let a = unb.bias.abs() <= 0.15 && (0.86..=0.99).contains(&unb.coverage);
    let bb = naive.bias < -0.7;
    let c = b[0] > b[1] && b[1] > b[2];
    let failures: usize = perf.iter().map(|p| p.n_failed).sum();
    report(
        5,
        a && bb && c,
        &format!(
            "truth {:.3}; (a) unbiased external: bias {:.3} (MCSE {:.3}), coverage {:.2} [{}]; (b) no external/no knots: bias {:.3} (MCSE {:.3}) [{}]; (c) bias at v=log0.8/0/log1.2: {:.3}/{:.3}/{:.3} [{}]; failed fits {failures}",
            truth.control_rmst,
            unb.bias,
            unb.bias_mcse,
            unb.coverage,
            if a { "ok" } else { "miss" },
            naive.bias,
            naive.bias_mcse,
            if bb { "ok" } else { "miss" },
            b[0],
            b[1],
            b[2],
            if c { "ok" } else { "miss" },
        ),
    );
    assert!(a && bb && c);
}

#[test]
fn criterion_6_scenario_1_effect() {
    let cfg = StudyConfig {
        n_reps: 100,
        scenario: Scenario::Constant,
        bias_levels: vec![0.0],
        models: vec![
            ModelCell::new(
                "ph_ext_knots",
                EffectMode::ProportionalHazards,
                true,
                &STUDY_EXTRA_KNOTS,
            ),
            ModelCell::new(
                "separate_ext_knots",
                EffectMode::SeparateArms,
                true,
                &STUDY_EXTRA_KNOTS,
            ),
        ],
        seed: 2024,
        fit: study_fit_options(),
        ..Default::default()
    };
    let rows = simstudy::run_study(&cfg, None).unwrap();
    let truth = simstudy::analytic_estimands(&cfg.dgm, &[Scenario::Constant], 40.0);
    let perf = simstudy::summarize_study(&cfg, &rows, &truth).unwrap();
    let ph = find(&perf, "ph_ext_knots", 0.0, "rmstd");
    let sep = find(&perf, "separate_ext_knots", 0.0, "rmstd");
    let ph_ok = (ph.bias - -0.15).abs() <= 0.4 && ph.coverage >= 0.85;
    let sep_ok = sep.bias.abs() > ph.bias.abs() + 0.5;
    report(
        6,
        ph_ok && sep_ok,
        &format!(
            "true RMSTD {:.3}; PH bias {:.3} (MCSE {:.3}), coverage {:.2} [{}]; separate arms bias {:.3} (MCSE {:.3}) [{}]",
            truth.rmstd[0].1,
            ph.bias,
            ph.bias_mcse,
            ph.coverage,
            if ph_ok { "ok" } else { "miss" },
            sep.bias,
            sep.bias_mcse,
            if sep_ok { "ok" } else { "miss" },
        ),
    );
    assert!(ph_ok && sep_ok);
}

#[test]
fn criterion_7_waning_ordering() {
    let data = trial_data(Scenario::Constant, 71);
    let spec = spec_for(
        &data,
        EffectMode::ProportionalHazards,
        true,
        &STUDY_EXTRA_KNOTS,
    );
    let opts = FitOptions {
        chains: 2,
        warmup: 500,
        iters: 500,
        seed: 7,
        ..Default::default()
    };
    let fit = inference::fit(&spec, &data, &opts).unwrap();
    let ages: Vec<f64> = data.ipd.iter().map(|r| r.age).collect();
    let settings = [None, Some(20.0), Some(10.0), Some(6.0)];
    let medians: Vec<f64> = settings
        .iter()
        .map(|s| {
            let w = s.map(|t| WaningSpec::new(5.0, t).unwrap());
            rmst_difference(&fit, &ages, 40.0, w).unwrap().median
        })
        .collect();
    let ordered = medians.windows(2).all(|w| w[1] <= w[0]);
    let again = inference::fit(&spec, &data, &opts).unwrap();
    let same_draws = again.samples()[0].draws == fit.samples()[0].draws;
    let repeat = rmst_difference(
        &again,
        &ages,
        40.0,
        Some(WaningSpec::new(5.0, 10.0).unwrap()),
    )
    .unwrap()
    .median;
    let deterministic = same_draws && repeat == medians[2];
    let pass = ordered && deterministic;
    report(
        7,
        pass,
        &format!(
            "RMSTD median none/20y/10y/6y = {:.3}/{:.3}/{:.3}/{:.3}; non-increasing: {ordered}; identical refit: {deterministic}",
            medians[0], medians[1], medians[2], medians[3]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_case_study() {
    let dir = match std::env::var_os("EXTRAP_CASE_STUDY_DIR") {
        Some(d) => PathBuf::from(d),
        None => {
            let _ = writeln!(
                std::io::stderr(),
                "criterion 8: SKIPPED | EXTRAP_CASE_STUDY_DIR not set; case-study files not supplied"
            );
            return;
        }
    };
    let ipd = dataio::load_ipd(&dir.join("ipd.csv")).unwrap();
    let external = dataio::load_external(&dir.join("external.csv")).unwrap();
    let table = dataio::load_lifetable(&dir.join("lifetable.csv"), Some(0.8)).unwrap();
    let all = Dataset { ipd, external };
    let ages: Vec<f64> = all.ipd.iter().map(|r| r.age).collect();
    let opts = FitOptions::default();

    let basis = make_knots(&all.event_times(), 10, &[10.0, 15.0, 25.0]).unwrap();
    let spec = SurvivalModelSpec::new(
        basis,
        EffectMode::ProportionalHazards,
        true,
        &PriorSettings::default(),
        Some(table),
    )
    .unwrap();
    let fit = inference::fit(&spec, &all, &opts).unwrap();
    let r = rmst(&fit, 0, &ages, 40.0, None).unwrap();

    let control = Dataset {
        ipd: all.arm_subset(0).ipd,
        external: Vec::new(),
    };
    let basis = make_knots(&control.event_times(), 10, &[]).unwrap();
    let spec = SurvivalModelSpec::new(
        basis,
        EffectMode::None,
        false,
        &PriorSettings::default(),
        None,
    )
    .unwrap();
    let fit0 = inference::fit(&spec, &control, &opts).unwrap();
    let loo = fit0.loo(&control).unwrap();

    let pass = (r.median - 6.32).abs() <= 0.2 && (loo.looic - 592.6).abs() <= 3.0;
    report(
        8,
        pass,
        &format!(
            "control RMST(40) {:.2} ({:.2}, {:.2}) vs 6.32; LOOIC {:.1} vs 592.6",
            r.median, r.lo95, r.hi95, loo.looic
        ),
    );
    assert!(pass);
}

struct Gaussian {
    prec: [[f64; 2]; 2],
}

impl Target for Gaussian {
    fn dim(&self) -> usize {
        2
    }

    fn log_density_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
        let p = &self.prec;
        g[0] = -(p[0][0] * x[0] + p[0][1] * x[1]);
        g[1] = -(p[1][0] * x[0] + p[1][1] * x[1]);
        0.5 * (x[0] * g[0] + x[1] * g[1])
    }
}

#[test]
fn criterion_9_sampler_sanity() {
    let opts = FitOptions {
        method: Method::Mcmc,
        chains: 4,
        warmup: 1000,
        iters: 1000,
        seed: 91,
        ..Default::default()
    };
    // Independent standard normals.
    let normal = Gaussian {
        prec: [[1.0, 0.0], [0.0, 1.0]],
    };
    let s = inference::sample_target(&normal, vec!["a".into(), "b".into()], &[0.5, -0.5], &opts)
        .unwrap();
    let mut moments_ok = true;
    let mut mom = Vec::new();
    for j in 0..2 {
        let c = s.column(j);
        let m = c.iter().sum::<f64>() / c.len() as f64;
        let sd = (c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (c.len() as f64 - 1.0)).sqrt();
        moments_ok &= m.abs() < 0.05 && (0.95..=1.05).contains(&sd);
        mom.push(format!("mean {m:.3} sd {sd:.3}"));
    }
    // Correlation 0.8.
    let rho: f64 = 0.8;
    let det = 1.0 - rho * rho;
    let corr = Gaussian {
        prec: [[1.0 / det, -rho / det], [-rho / det, 1.0 / det]],
    };
    let s2 =
        inference::sample_target(&corr, vec!["a".into(), "b".into()], &[0.0, 0.0], &opts).unwrap();
    let (a, b) = (s2.column(0), s2.column(1));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / n;
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
    let r = cov / (va * vb).sqrt();
    let corr_ok = (r - rho).abs() < 0.05;

    // Smoke model: simulation-study PH model with extra knots and external data.
    let data = trial_data(Scenario::Constant, 93);
    let spec = spec_for(
        &data,
        EffectMode::ProportionalHazards,
        true,
        &STUDY_EXTRA_KNOTS,
    );
    let fit = inference::fit(&spec, &data, &opts).unwrap();
    let sample = fit.samples()[0];
    let diag = sample.diagnostics.as_ref().unwrap();
    let finite = [&s, &s2, sample]
        .iter()
        .all(|x| x.draws.iter().flatten().all(|v| v.is_finite()));
    let rhat_ok = diag.max_rhat < 1.01;
    let pass = moments_ok && corr_ok && finite && rhat_ok;
    report(
        9,
        pass,
        &format!(
            "standard normal {}; correlation {r:.3} (target 0.8); all draws finite: {finite}; smoke model max R-hat {:.4}, min bulk ESS {:.0}, divergences {}",
            mom.join(", "),
            diag.max_rhat,
            diag.min_ess_bulk,
            diag.divergences
        ),
    );
    assert!(pass);
}
