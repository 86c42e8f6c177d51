use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use extrap_core::bayes::{Dataset, IpdRecord};
use extrap_core::datagen::{self, DgmConfig, Scenario};
use extrap_core::inference::{self, FitOptions, Method};
use extrap_core::model::{self, EffectMode, ParameterVector, PriorSettings, SurvivalModelSpec};
use extrap_core::mspline::make_knots;
use extrap_core::predict::{self, rmst, rmst_difference};

fn exponential_data(n: usize, rate: f64, cens: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ipd = (0..n)
        .map(|_| {
            let t = -rng.random::<f64>().ln() / rate;
            let c = cens * rng.random::<f64>() + 0.5;
            IpdRecord {
                time: t.min(c),
                event: t <= c,
                arm: 0,
                age: 60.0,
            }
        })
        .collect();
    Dataset {
        ipd,
        external: Vec::new(),
    }
}

fn control_spec(data: &Dataset, df: usize) -> SurvivalModelSpec {
    let basis = make_knots(&data.event_times(), df, &[]).unwrap();
    SurvivalModelSpec::new(
        basis,
        EffectMode::None,
        false,
        &PriorSettings::default(),
        None,
    )
    .unwrap()
}

fn laplace(draws: usize, seed: u64) -> FitOptions {
    FitOptions {
        method: Method::Laplace,
        laplace_draws: draws,
        seed,
        ..Default::default()
    }
}

fn sd(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

#[test]
fn mode_recovers_constant_hazard_mle() {
    let rate = 0.4;
    let data = exponential_data(100_000, rate, 4.0, 1);
    let events = data.ipd.iter().filter(|r| r.event).count() as f64;
    let exposure: f64 = data.ipd.iter().map(|r| r.time).sum();
    let mle = events / exposure;
    let spec = control_spec(&data, 5);
    let fit = inference::fit(&spec, &data, &laplace(100, 1)).unwrap();
    let mode = fit.samples()[0].mode.clone().unwrap();
    let p = ParameterVector::from_unconstrained(&spec.layout(), &mode).unwrap();
    for t in [0.5, 1.0, 2.0, 3.0] {
        let h = model::hazard(&spec, &p, &[], t).unwrap();
        assert!((h / mle - 1.0).abs() < 0.02, "t={t}: {h} vs {mle}");
    }
    assert!((mle / rate - 1.0).abs() < 0.02);
}

#[test]
fn laplace_and_mcmc_agree_on_log_eta_spread() {
    let data = exponential_data(300, 0.3, 5.0, 2);
    let spec = control_spec(&data, 6);
    let la = inference::fit(&spec, &data, &laplace(4000, 3)).unwrap();
    let mc = inference::fit_mcmc(&spec, &data, 4, 1000, 1000, 3).unwrap();
    let (sl, sm) = (
        sd(&la.samples()[0].column(0)),
        sd(&mc.samples()[0].column(0)),
    );
    assert!((sl / sm - 1.0).abs() < 0.2, "Laplace {sl} vs MCMC {sm}");
    let ages = vec![60.0];
    let (rl, rm) = (
        rmst(&la, 0, &ages, 5.0, None).unwrap().median,
        rmst(&mc, 0, &ages, 5.0, None).unwrap().median,
    );
    assert!((rl / rm - 1.0).abs() < 0.05, "{rl} vs {rm}");
}

#[test]
fn more_data_contracts_the_posterior() {
    let mut shrinks = Vec::new();
    for seed in 0..10 {
        let small = exponential_data(150, 0.3, 4.0, 100 + seed);
        let large = exponential_data(300, 0.3, 4.0, 100 + seed);
        let sd_of = |d: &Dataset| {
            let spec = control_spec(d, 6);
            let f = inference::fit(&spec, d, &laplace(2000, seed)).unwrap();
            let draws = f.arm_draws(0).unwrap();
            // Hazard scale over the common window, a well-identified summary.
            let v: Vec<f64> = draws.iter().map(|a| a.log_scale).collect();
            sd(&v)
        };
        shrinks.push(sd_of(&large) / sd_of(&small));
    }
    shrinks.sort_by(f64::total_cmp);
    let median = 0.5 * (shrinks[4] + shrinks[5]);
    assert!(median < 1.0, "median sd ratio {median}");
}

#[test]
fn simulate_fit_predict() {
    let cfg = DgmConfig {
        scenario: Scenario::Constant,
        ..Default::default()
    };
    let data = datagen::simulate_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
    let basis = make_knots(&data.event_times(), 10, &[10.0, 25.0]).unwrap();
    let spec = SurvivalModelSpec::new(
        basis,
        EffectMode::ProportionalHazards,
        true,
        &PriorSettings::default(),
        Some(cfg.lifetable().unwrap()),
    )
    .unwrap();
    let fit = inference::fit(&spec, &data, &laplace(500, 9)).unwrap();
    let ages: Vec<f64> = data.ipd.iter().map(|r| r.age).collect();
    let times = [0.0, 1.0, 5.0, 10.0, 20.0];
    let table = predict::prediction_table(&fit, &ages, &times, 40.0, None, "ph").unwrap();
    let s0: Vec<_> = table
        .iter()
        .filter(|r| r.quantity == "survival" && r.time == 0.0)
        .collect();
    assert_eq!(s0.len(), 2);
    assert!(s0.iter().all(|r| r.median == 1.0));
    // Protective effect: active arm lives longer on average.
    let d = rmst_difference(&fit, &ages, 40.0, None).unwrap();
    assert!(d.median > 0.0);
    // Same seed, same draws.
    let again = inference::fit(&spec, &data, &laplace(500, 9)).unwrap();
    assert_eq!(again.samples()[0].draws, fit.samples()[0].draws);
}

#[test]
fn relabelled_arms_flip_the_rmst_difference() {
    let cfg = DgmConfig::default();
    let data = datagen::simulate_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(12));
    let mut flipped = data.clone();
    for r in &mut flipped.ipd {
        r.arm = 1 - r.arm;
    }
    flipped.external.clear();
    let mut plain = data.clone();
    plain.external.clear();
    let ages: Vec<f64> = data.ipd.iter().map(|r| r.age).collect();
    let fit_of = |d: &Dataset| {
        let basis = make_knots(&d.event_times(), 10, &[]).unwrap();
        let spec = SurvivalModelSpec::new(
            basis,
            EffectMode::SeparateArms,
            false,
            &PriorSettings::default(),
            None,
        )
        .unwrap();
        inference::fit(&spec, d, &laplace(1000, 4)).unwrap()
    };
    let plain_fit = fit_of(&plain);
    let a = rmst_difference(&plain_fit, &ages, 10.0, None)
        .unwrap()
        .median;
    let b = rmst_difference(&fit_of(&flipped), &ages, 10.0, None)
        .unwrap()
        .median;
    assert!(a > 0.0);
    // Separate-arm fits survive a JSON round trip.
    let json = serde_json::to_string(&plain_fit).unwrap();
    let back: inference::FittedModel = serde_json::from_str(&json).unwrap();
    let c = rmst_difference(&back, &ages, 10.0, None).unwrap().median;
    assert!((c - a).abs() < 1e-12 * a.abs(), "{c} vs {a}");
    assert!((a + b).abs() < 0.05 * a.abs(), "{a} vs {b}");
}
