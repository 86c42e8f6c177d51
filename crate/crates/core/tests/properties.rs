use proptest::prelude::*;

use extrap_core::background::Lifetable;
use extrap_core::datagen::{effect_log_hr, DgmConfig, Scenario};
use extrap_core::model::{self, EffectMode, ParameterVector, PriorSettings, SurvivalModelSpec};
use extrap_core::mspline::{make_knots, SplineBasis};
use extrap_core::predict::WaningSpec;

fn basis_from(events: &[f64], df: usize, extra: bool) -> SplineBasis {
    let max = events.iter().cloned().fold(0.0, f64::max);
    let extra = if extra {
        vec![max + 3.0, max + 15.0]
    } else {
        Vec::new()
    };
    make_knots(events, df, &extra).unwrap()
}

fn events() -> impl Strategy<Value = Vec<f64>> {
    // Positive gaps keep the times distinct; ties are a documented error.
    prop::collection::vec(0.005f64..0.2, 30..120).prop_map(|gaps| {
        gaps.iter()
            .scan(0.0, |acc, g| {
                *acc += g;
                Some(*acc)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mspline_nonnegative_and_ispline_bounded(ev in events(), df in 4usize..12, extra in any::<bool>(), u in 0.0f64..1.5) {
        let b = basis_from(&ev, df, extra);
        let (_, hi) = b.boundary_knots();
        let t = u * hi;
        prop_assert!(b.eval(t).iter().all(|v| *v >= 0.0 && v.is_finite()));
        // Integrals reach one at the boundary and grow linearly past it.
        let iv = b.eval_integral(t.min(hi));
        prop_assert!(iv.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)), "t={} {:?}", t, iv);
        let beyond = b.eval_integral(t);
        prop_assert!(beyond.iter().zip(&iv).all(|(x, y)| *x >= *y - 1e-12));
    }

    #[test]
    fn ispline_is_monotone(ev in events(), df in 4usize..12, a in 0.0f64..1.2, d in 0.0f64..0.5) {
        let b = basis_from(&ev, df, true);
        let (_, hi) = b.boundary_knots();
        let (lo_v, hi_v) = (b.eval_integral(a * hi), b.eval_integral((a + d) * hi));
        prop_assert!(lo_v.iter().zip(&hi_v).all(|(x, y)| *y >= *x - 1e-12));
    }

    #[test]
    fn coefficients_form_a_probability_vector(ev in events(), seed in prop::collection::vec(-3.0f64..3.0, 40), arm in 0u8..2) {
        let b = basis_from(&ev, 8, true);
        let spec = SurvivalModelSpec::new(b, EffectMode::NonProportionalHazards, false, &PriorSettings::default(), None).unwrap();
        let layout = spec.layout();
        let theta: Vec<f64> = seed.iter().cycle().take(layout.dim()).cloned().collect();
        let p = ParameterVector::from_unconstrained(&layout, &theta).unwrap();
        let c = model::coefficients(&spec, &p, &spec.covariates_for_arm(arm)).unwrap();
        prop_assert!(c.iter().all(|v| *v > 0.0));
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn survival_is_a_survivor_function(ev in events(), seed in prop::collection::vec(-2.0f64..2.0, 40), t in 0.0f64..60.0, dt in 0.0f64..10.0) {
        let b = basis_from(&ev, 8, true);
        let table = DgmConfig::default().lifetable().unwrap();
        let spec = SurvivalModelSpec::new(b, EffectMode::ProportionalHazards, true, &PriorSettings::default(), Some(table)).unwrap();
        let layout = spec.layout();
        let theta: Vec<f64> = seed.iter().cycle().take(layout.dim()).cloned().collect();
        let p = ParameterVector::from_unconstrained(&layout, &theta).unwrap();
        let x = spec.covariates_for_arm(1);
        let s0 = model::survival(&spec, &p, &x, 60.0, t).unwrap();
        let s1 = model::survival(&spec, &p, &x, 60.0, t + dt).unwrap();
        prop_assert!(s0 <= 1.0 && s1 >= 0.0 && s1 <= s0);
    }

    #[test]
    fn natural_scale_round_trip(seed in prop::collection::vec(-5.0f64..5.0, 40)) {
        let ev: Vec<f64> = (1..60).map(|k| k as f64 * 0.08).collect();
        let b = basis_from(&ev, 10, true);
        let spec = SurvivalModelSpec::new(b, EffectMode::NonProportionalHazards, false, &PriorSettings::default(), None).unwrap();
        let layout = spec.layout();
        let theta: Vec<f64> = seed.iter().cycle().take(layout.dim()).cloned().collect();
        let p = ParameterVector::from_unconstrained(&layout, &theta).unwrap();
        let nat = p.to_natural(&spec.priors);
        let back = ParameterVector::from_natural(&nat, &spec.priors).unwrap().to_unconstrained();
        for (a, b) in back.iter().zip(&theta) {
            prop_assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn lifetable_hazard_is_additive(age in 20.0f64..90.0, t1 in 0.0f64..20.0, t2 in 0.0f64..20.0) {
        let table: Lifetable = DgmConfig::default().lifetable().unwrap();
        let whole = table.cumulative_hazard(age, t1 + t2);
        let parts = table.cumulative_hazard(age, t1) + table.cumulative_hazard(age + t1, t2);
        prop_assert!((whole - parts).abs() <= 1e-10 * whole.max(1.0));
    }

    #[test]
    fn waning_weight_is_a_monotone_ramp(t_min in 0.0f64..10.0, len in 0.1f64..20.0, t in 0.0f64..40.0, dt in 0.0f64..5.0) {
        let w = WaningSpec::new(t_min, t_min + len).unwrap();
        let (a, b) = (w.weight(t), w.weight(t + dt));
        prop_assert!((0.0..=1.0).contains(&a) && b <= a);
        prop_assert_eq!(w.weight(t_min), 1.0);
        prop_assert_eq!(w.weight(t_min + len), 0.0);
    }

    #[test]
    fn scenario_effects_are_protective_and_wane(t in 0.0f64..40.0) {
        prop_assert_eq!(effect_log_hr(Scenario::NoEffect, t), 0.0);
        prop_assert!((effect_log_hr(Scenario::Constant, t) - 0.7f64.ln()).abs() < 1e-15);
        for s in [Scenario::Waning, Scenario::DelayedWaning] {
            let b = effect_log_hr(s, t);
            prop_assert!(b <= 0.0 && b > -1.0);
        }
    }
}
