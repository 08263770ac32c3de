use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use msm_design::data::Diagnostics;
use msm_design::powersim::{design_pilot, run_validation_with_progress, ChoiceResult, DesignReplicate, DesignSettings, ValidationSettings};
use msm_design::rng::tag;
use msm_design::sandwich::stacked_fit;
use msm_design::scenarios::{Model, PropensityMode};
use msm_design::{
    rct_sample_size, se_target, Dataset, DesignInputs, Estimand, Link, OutcomeKind, PsSpec, RctParams, Scenario, Stream,
};
use serde::Serialize;

use crate::config::{
    default_link, PropensityTerms, RunConfig, DEFAULT_B, DEFAULT_B_UCB, DEFAULT_GAMMA_UCB, DESIGN_FUNCTIONALS,
    VALIDATE_FUNCTIONALS,
};
use crate::CliError;

const DEFAULT_REPLICATES: usize = 1000;
const DEFAULT_MC_REPS: usize = 2000;

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::user(format!("--{flag} is required")))
}

fn out_dir(cfg: &RunConfig) -> Result<Option<PathBuf>, CliError> {
    match &cfg.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CliError::user(format!("cannot create {}: {e}", dir.display())))?;
            Ok(Some(dir.clone()))
        }
        None => Ok(None),
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::user(format!("cannot write {}: {e}", path.display())))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

/// Resolves the stability choices into `cfg` and returns them as settings.
fn resolve_settings(cfg: &mut RunConfig, defaults: &[&str], delta: f64) -> Result<DesignSettings, CliError> {
    cfg.alpha = Some(cfg.alpha());
    cfg.power = Some(cfg.power());
    let b = *cfg.b.get_or_insert(DEFAULT_B);
    let estimand = *cfg.estimand.get_or_insert(Estimand::Ate);
    let (functionals, ucb) = cfg.stability_choices(defaults)?;
    if !ucb.is_empty() {
        cfg.b_ucb.get_or_insert(DEFAULT_B_UCB);
        cfg.gamma_ucb.get_or_insert(DEFAULT_GAMMA_UCB);
    }
    let settings = DesignSettings { b, functionals, ucb, inputs: DesignInputs::new(delta, cfg.alpha(), cfg.power())?, estimand };
    cfg.functionals = Some(settings.labels());
    Ok(settings)
}

#[derive(Serialize)]
struct BootstrapSummary {
    b: usize,
    failures: usize,
    redraws: usize,
}

#[derive(Serialize)]
struct DesignReport {
    n: usize,
    p: usize,
    kind: OutcomeKind,
    link: Link,
    estimand: Estimand,
    propensity: PropensityTerms,
    delta: f64,
    alpha: f64,
    power: f64,
    se_target: f64,
    v_pilot: f64,
    beta1: f64,
    se_beta1: f64,
    bootstrap: BootstrapSummary,
    choices: Vec<ChoiceResult>,
    diagnostics: Diagnostics,
}

pub fn design(mut cfg: RunConfig) -> Result<(), CliError> {
    let pilot = required(&cfg.pilot, "pilot")?;
    let kind = required(&cfg.kind, "kind")?;
    let delta = required(&cfg.delta, "delta")?;
    let link = *cfg.link.get_or_insert(default_link(kind));
    let terms = *cfg.propensity.get_or_insert(PropensityTerms::All);
    let seed = *cfg.seed.get_or_insert(0);
    let settings = resolve_settings(&mut cfg, &DESIGN_FUNCTIONALS, delta)?;
    let dump_bootstrap = cfg.dump_bootstrap.unwrap_or(false);
    let dump_matrices = cfg.dump_matrices.unwrap_or(false);
    if (dump_bootstrap || dump_matrices) && cfg.out.is_none() {
        return Err(CliError::user("matrix and bootstrap dumps require --out"));
    }

    let data = Dataset::<f64>::load_csv(&pilot, kind)?;
    let diagnostics = data.validate();
    diagnostics.require_both_arms()?;
    let spec = match terms {
        PropensityTerms::All => PsSpec::all(data.p()),
        PropensityTerms::Intercept => PsSpec::intercept_only(),
    };
    let root = Stream::new(seed);
    let d = design_pilot(&data, &spec, link, &settings, root.child(tag::BOOTSTRAP), root.child(tag::UCB))?;
    let report = DesignReport {
        n: data.n(),
        p: data.p(),
        kind,
        link,
        estimand: settings.estimand,
        propensity: terms,
        delta,
        alpha: settings.inputs.alpha,
        power: settings.inputs.power,
        se_target: se_target(&settings.inputs),
        v_pilot: d.v_pilot,
        beta1: d.beta1,
        se_beta1: d.se_beta1,
        bootstrap: BootstrapSummary { b: settings.b, failures: d.bootstrap.failures, redraws: d.bootstrap.redraws },
        choices: d.choices.clone(),
        diagnostics,
    };

    let Some(dir) = out_dir(&cfg)? else {
        print!("{}", json(&report));
        return Ok(());
    };
    write(&dir.join("config.json"), &cfg.to_json())?;
    write(&dir.join("design.json"), &json(&report))?;
    if dump_bootstrap {
        d.bootstrap.write_csv(dir.join("bootstrap.csv"))?;
    }
    if dump_matrices {
        let fit = stacked_fit(&data, &spec, link, settings.estimand)?;
        write(&dir.join("a.csv"), &fit.a.to_csv_string())?;
        write(&dir.join("b.csv"), &fit.b.to_csv_string())?;
        write(&dir.join("sigma.csv"), &fit.sigma.to_csv_string())?;
    }
    for c in &d.choices {
        eprintln!("{:<12} V = {:<14.6} n = {}", c.label, c.v_stable, c.n_prop);
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchmarkReport {
    kind: OutcomeKind,
    delta: f64,
    alpha: f64,
    power: f64,
    v_rct: f64,
    n_rct: u64,
}

pub fn benchmark(mut cfg: RunConfig) -> Result<(), CliError> {
    if let Some(name) = cfg.scenario.clone() {
        let s = Scenario::preset(&name)?;
        let explicit_arm = cfg.p1.is_some() || cfg.lambda1.is_some();
        match &s.model {
            Model::Binary(m) => {
                cfg.kind.get_or_insert(OutcomeKind::Binary);
                cfg.p0.get_or_insert(m.p0);
            }
            Model::Count(m) => {
                cfg.kind.get_or_insert(OutcomeKind::Count);
                cfg.lambda0.get_or_insert(m.lambda0);
            }
            Model::Continuous(_) => {
                cfg.kind.get_or_insert(OutcomeKind::Continuous);
            }
        }
        cfg.rho.get_or_insert(s.model.rho());
        if !explicit_arm {
            cfg.delta.get_or_insert(s.delta());
        }
    }
    let kind = required(&cfg.kind, "kind")?;
    let rho = required(&cfg.rho, "rho")?;
    let params = match kind {
        OutcomeKind::Binary => RctParams::Binary { p0: required(&cfg.p0, "p0")?, p1: cfg.p1, delta: cfg.delta, rho },
        OutcomeKind::Count => {
            RctParams::Count { lambda0: required(&cfg.lambda0, "lambda0")?, lambda1: cfg.lambda1, delta: cfg.delta, rho }
        }
        OutcomeKind::Continuous => {
            RctParams::Continuous { sigma2: required(&cfg.sigma2, "sigma2")?, delta: required(&cfg.delta, "delta")?, rho }
        }
    };
    cfg.alpha = Some(cfg.alpha());
    cfg.power = Some(cfg.power());
    let (v_rct, n_rct) = rct_sample_size(&params, cfg.alpha(), cfg.power())?;
    let report = BenchmarkReport { kind, delta: params.delta()?, alpha: cfg.alpha(), power: cfg.power(), v_rct, n_rct };
    print!("{}", json(&report));
    if let Some(dir) = out_dir(&cfg)? {
        write(&dir.join("config.json"), &cfg.to_json())?;
        write(&dir.join("benchmark.json"), &json(&report))?;
    }
    Ok(())
}

fn scenario_from(cfg: &mut RunConfig) -> Result<Scenario, CliError> {
    let name = required(&cfg.scenario, "scenario")?;
    let mode = *cfg.mode.get_or_insert(PropensityMode::Confounded);
    let s = Scenario::preset(&name)?.with_mode(mode);
    Ok(match cfg.delta {
        Some(d) => s.with_delta(d)?,
        None => s,
    })
}

#[derive(Serialize)]
struct SimulationConstants<'a> {
    scenario: &'a str,
    mode: PropensityMode,
    n: usize,
    seed: u64,
    eta0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    psi: Option<f64>,
    model: &'a Model,
}

pub fn simulate(mut cfg: RunConfig) -> Result<(), CliError> {
    let s = scenario_from(&mut cfg)?;
    let n = *cfg.n.get_or_insert(s.pilot_n);
    let seed = *cfg.seed.get_or_insert(0);
    let dir = out_dir(&cfg)?.ok_or_else(|| CliError::user("--out is required"))?;
    let sim = s.generate::<f64, _>(n, &mut Stream::new(seed).child(tag::SIMULATE).rng())?;
    let cal = s.binary_calibration();
    let constants = SimulationConstants {
        scenario: &s.name,
        mode: s.mode,
        n,
        seed,
        eta0: sim.eta0,
        gamma0: cal.map(|c| c.gamma0),
        psi: cal.map(|c| c.psi),
        model: &s.model,
    };
    write(&dir.join("config.json"), &cfg.to_json())?;
    sim.data.write_csv(dir.join("data.csv"))?;
    write(&dir.join("constants.json"), &json(&constants))?;
    Ok(())
}

fn replicates_csv(replicates: &[DesignReplicate], labels: &[String]) -> String {
    let mut s = String::from("id,pilot_attempts,v_pilot,v_rct,n_rct,bootstrap_failures,bootstrap_redraws");
    for l in labels {
        let _ = write!(s, ",n_{l}");
    }
    s.push('\n');
    for r in replicates {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            r.id, r.pilot_attempts, r.v_pilot, r.v_rct, r.n_rct, r.bootstrap_failures, r.bootstrap_redraws
        );
        for l in labels {
            let _ = write!(s, ",{}", r.n_prop(l).expect("every replicate has every choice"));
        }
        s.push('\n');
    }
    s
}

pub fn validate(mut cfg: RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed.ok_or_else(|| CliError::user("--seed is required for validate"))?;
    let s = scenario_from(&mut cfg)?;
    cfg.delta = Some(s.delta());
    let dir = out_dir(&cfg)?.ok_or_else(|| CliError::user("--out is required"))?;
    let design = resolve_settings(&mut cfg, &VALIDATE_FUNCTIONALS, s.delta())?;
    let settings = ValidationSettings {
        replicates: *cfg.replicates.get_or_insert(DEFAULT_REPLICATES),
        n_pilot: *cfg.n_pilot.get_or_insert(s.pilot_n),
        mc_reps: *cfg.mc_reps.get_or_insert(DEFAULT_MC_REPS),
        target: *cfg.target.get_or_insert(design.inputs.power),
        isotonic: *cfg.isotonic.get_or_insert(false),
        design,
    };
    write(&dir.join("config.json"), &cfg.to_json())?;
    let out = run_validation_with_progress(&s, &settings, seed, |msg| eprintln!("[validate {}] {msg}", s.name))?;
    write(&dir.join("report.csv"), &out.report.to_csv())?;
    write(&dir.join("grid.csv"), &out.grid.to_csv())?;
    write(&dir.join("replicates.csv"), &replicates_csv(&out.replicates, &settings.design.labels()))?;
    eprintln!("[validate {}] wrote {}", s.name, dir.display());
    Ok(())
}
