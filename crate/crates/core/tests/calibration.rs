use msm_design::rng::Stream;
use msm_design::scalar::logit;
use msm_design::scenarios::{calibrate_outcome_binary, PropensityMode, Scenario};

const DRAWS: usize = 1_000_000;

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn binary_marginal_contrast_matches_target() {
    for (name, p0) in [("binary_mcm", 0.03), ("binary_sga", 0.10)] {
        let s = Scenario::preset(name).unwrap();
        let sim = s.generate::<f64, _>(DRAWS, &mut Stream::new(101).rng()).unwrap();
        let (m0, _) = mean_var(&sim.y0);
        let (m1, _) = mean_var(&sim.y1);
        let n = DRAWS as f64;
        // delta method on the two independent arm risks
        let se = (1.0 / (n * m1 * (1.0 - m1)) + 1.0 / (n * m0 * (1.0 - m0))).sqrt();
        let contrast = logit(m1) - logit(m0);
        assert!((contrast - 2f64.ln()).abs() < 3.0 * se, "{name}: {contrast} ± {se}");
        let se0 = (p0 * (1.0 - p0) / n).sqrt();
        assert!((m0 - p0).abs() < 3.0 * se0, "{name}: E[Y(0)] = {m0}");
    }
}

#[test]
fn binary_calibration_is_consistent_across_effect_sizes() {
    for delta in [-1.0, 0.0, 0.3, 2f64.ln(), 1.5] {
        let c = calibrate_outcome_binary(0.03, 0.5, delta).unwrap();
        let (r0, r1) = c.residuals(0.03, 0.5, delta);
        assert!(r0.abs() < 1e-8 && r1.abs() < 1e-8);
    }
}

#[test]
fn count_marginal_rate_ratio_is_collapsible() {
    let s = Scenario::preset("count_npe").unwrap();
    let sim = s.generate::<f64, _>(DRAWS, &mut Stream::new(102).rng()).unwrap();
    let (m0, v0) = mean_var(&sim.y0);
    let (m1, v1) = mean_var(&sim.y1);
    let n = DRAWS as f64;
    let log_ratio = (m1 / m0).ln();
    let se = (v1 / (n * m1 * m1) + v0 / (n * m0 * m0)).sqrt();
    assert!((log_ratio - 0.5f64.ln()).abs() < 3.0 * se, "{log_ratio} ± {se}");
}

#[test]
fn count_event_total_matches_conditional_rate() {
    let s = Scenario::preset("count_npe").unwrap();
    let n = 5000;
    let sim = s.generate::<f64, _>(n, &mut Stream::new(7).rng()).unwrap();
    let events: f64 = sim.data.outcomes().iter().sum();
    // given (x, t) the total is Poisson with the summed conditional rate
    let rate: f64 = (0..n)
        .map(|i| 0.008 * (0.3 * sim.data.x_row(i)[0] + 0.5f64.ln() * f64::from(sim.data.t(i))).exp())
        .sum();
    assert!((events - rate).abs() < 3.0 * rate.sqrt(), "{events} vs {rate}");
}

#[test]
fn continuous_error_has_unit_variance() {
    let s = Scenario::preset("continuous_nsclc").unwrap();
    let sim = s.generate::<f64, _>(DRAWS, &mut Stream::new(103).rng()).unwrap();
    // recover the standardized error from the control potential outcome
    let eps: Vec<f64> = (0..DRAWS)
        .map(|i| {
            let x = sim.data.x_row(i);
            let mu = 18_000.0 + 1200.0 * x[0] + 3500.0 * x[1] + 4500.0 * x[2] + 2000.0 * x[3];
            let sigma = 3000.0 * (0.15 * x[0].abs() + 0.10 * x[1] + 0.15 * x[2]).exp();
            (sim.y0[i] - mu) / sigma
        })
        .collect();
    let (m, v) = mean_var(&eps);
    assert!((v - 1.0).abs() < 0.02, "variance {v}");
    assert!(m.abs() < 0.01);
}

#[test]
fn realized_prevalence_for_each_preset() {
    for name in ["binary_sga", "count_npe", "continuous_nsclc"] {
        for mode in [PropensityMode::Confounded, PropensityMode::Constant] {
            let s = Scenario::preset(name).unwrap().with_mode(mode);
            let rho = s.model.rho();
            let n = 100_000;
            let sim = s.generate::<f64, _>(n, &mut Stream::new(31).rng()).unwrap();
            let frac = sim.data.treatments().iter().filter(|&&t| t == 1).count() as f64 / n as f64;
            let se = (rho * (1.0 - rho) / n as f64).sqrt();
            assert!((frac - rho).abs() < 3.0 * se, "{name} {mode:?}: {frac}");
        }
    }
}
