//! Empirical validation of pilot-based designs.
//!
//! `R` pilots are drawn from a scenario and each goes through the full
//! design procedure. The proposed sample sizes are pooled into a sparse grid,
//! power at each grid size is estimated by Monte Carlo with the stacked
//! sandwich Wald test, and every design is scored by the interpolated power
//! at its own sample size.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::{required_n, DesignInputs};
use crate::error::{Error, Result};
use crate::msm::Link;
use crate::propensity::{Estimand, PsSpec};
use crate::rng::{tag, Stream};
use crate::sandwich::stacked_fit;
use crate::scenarios::{Model, Scenario};
use crate::stabilize::{
    bootstrap_lsvf, nearest_rank, nearest_rank_quantile, ucb, BootstrapDistribution, StabilityFunctional, UcbSpec,
};

/// Pilot draws attempted before a replicate gives up.
pub const MAX_PILOT_ATTEMPTS: usize = 10;
/// Exclusion fraction above which a grid point is flagged.
pub const EXCLUSION_FLAG_RATE: f64 = 0.10;
/// Label of the benchmark row.
pub const BENCHMARK_LABEL: &str = "rct_benchmark";

/// How a pilot is turned into design values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSettings {
    pub b: usize,
    pub functionals: Vec<StabilityFunctional>,
    pub ucb: Vec<UcbSpec>,
    pub inputs: DesignInputs,
    #[serde(default)]
    pub estimand: Estimand,
}

impl DesignSettings {
    pub fn check(&self) -> Result<()> {
        self.inputs.check()?;
        if self.b == 0 {
            return Err(Error::InvalidParameter("bootstrap size B must be positive".into()));
        }
        self.ucb.iter().try_for_each(UcbSpec::check)
    }

    /// Row labels in report order, excluding the benchmark.
    pub fn labels(&self) -> Vec<String> {
        self.functionals.iter().map(|f| f.label()).chain(self.ucb.iter().map(|u| u.label())).collect()
    }
}

/// Design value and sample size for one stability choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceResult {
    pub label: String,
    pub v_stable: f64,
    pub n_prop: u64,
}

/// The design procedure applied to one pilot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PilotDesign {
    pub v_pilot: f64,
    pub beta1: f64,
    pub se_beta1: f64,
    pub n_pilot_fit: u64,
    pub choices: Vec<ChoiceResult>,
    #[serde(skip)]
    pub bootstrap: BootstrapDistribution<f64>,
}

/// Fits the pilot, bootstraps the LSVF and converts every stability choice
/// into a sample size. The bootstrap draws from `stream`, the UCB
/// resampling for choice `k` from `ucb_stream.child(k)`.
pub fn design_pilot(
    pilot: &Dataset<f64>,
    spec: &PsSpec,
    link: Link,
    settings: &DesignSettings,
    stream: Stream,
    ucb_stream: Stream,
) -> Result<PilotDesign> {
    settings.check()?;
    let fit = stacked_fit(pilot, spec, link, settings.estimand)?;
    let dist = bootstrap_lsvf(pilot, spec, link, settings.estimand, settings.b, stream)?;
    let mut choices = Vec::with_capacity(settings.functionals.len() + settings.ucb.len());
    for f in &settings.functionals {
        let v = f.apply(&dist.values)?;
        choices.push(ChoiceResult { label: f.label(), v_stable: v, n_prop: required_n(v, &settings.inputs)? });
    }
    for (k, u) in settings.ucb.iter().enumerate() {
        let v = ucb(&dist, u, &mut ucb_stream.child(k as u64).rng())?;
        choices.push(ChoiceResult { label: u.label(), v_stable: v, n_prop: required_n(v, &settings.inputs)? });
    }
    Ok(PilotDesign {
        v_pilot: fit.lsvf,
        beta1: fit.beta1(),
        se_beta1: fit.se_beta1(),
        n_pilot_fit: pilot.n() as u64,
        choices,
        bootstrap: dist,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignReplicate {
    pub id: usize,
    /// Key of the substream the pilot was drawn from.
    pub pilot_key: u64,
    pub pilot_attempts: usize,
    pub v_pilot: f64,
    pub choices: Vec<ChoiceResult>,
    pub v_rct: f64,
    pub n_rct: u64,
    pub bootstrap_failures: usize,
    pub bootstrap_redraws: usize,
}

impl DesignReplicate {
    pub fn n_prop(&self, label: &str) -> Option<u64> {
        self.choices.iter().find(|c| c.label == label).map(|c| c.n_prop)
    }
}

/// Benchmark `(V_RCT, n_RCT)`; the continuous benchmark uses the pilot's
/// pooled within-arm variance of the outcome.
pub fn benchmark_for(scenario: &Scenario, pilot: &Dataset<f64>, inputs: &DesignInputs) -> Result<(f64, u64)> {
    let sigma2 = match scenario.model {
        Model::Continuous(_) => Some(pilot.pooled_within_arm_variance()?),
        _ => None,
    };
    let params = scenario.rct_params(sigma2)?;
    let (v, delta) = params.resolve()?;
    let inp = DesignInputs { delta, ..*inputs };
    Ok((v, required_n(v, &inp)?))
}

fn one_replicate(scenario: &Scenario, n_pilot: usize, settings: &DesignSettings, seed: u64, r: usize) -> Result<DesignReplicate> {
    let root = Stream::new(seed);
    let pilot_stream = root.child(tag::PILOT).child(r as u64);
    let mut rng = pilot_stream.rng();
    let spec = scenario.ps_spec();
    let mut last_err = None;
    for attempt in 1..=MAX_PILOT_ATTEMPTS {
        let pilot = scenario.generate::<f64, _>(n_pilot, &mut rng)?.data;
        if let Err(e) = stacked_fit(&pilot, &spec, scenario.link(), settings.estimand) {
            last_err = Some(e);
            continue;
        }
        let design = design_pilot(
            &pilot,
            &spec,
            scenario.link(),
            settings,
            root.child(tag::BOOTSTRAP).child(r as u64),
            root.child(tag::UCB).child(r as u64),
        )?;
        let (v_rct, n_rct) = benchmark_for(scenario, &pilot, &settings.inputs)?;
        return Ok(DesignReplicate {
            id: r,
            pilot_key: pilot_stream.key(),
            pilot_attempts: attempt,
            v_pilot: design.v_pilot,
            choices: design.choices,
            v_rct,
            n_rct,
            bootstrap_failures: design.bootstrap.failures,
            bootstrap_redraws: design.bootstrap.redraws,
        });
    }
    Err(last_err.expect("at least one pilot attempt"))
}

/// Runs the design procedure on `r_count` independent pilots. Replicate `r`
/// depends only on `(seed, r)`.
pub fn run_design_replicates(
    scenario: &Scenario,
    r_count: usize,
    n_pilot: usize,
    settings: &DesignSettings,
    seed: u64,
) -> Result<Vec<DesignReplicate>> {
    settings.check()?;
    if r_count == 0 {
        return Err(Error::InvalidParameter("number of replicates R must be positive".into()));
    }
    (0..r_count).into_par_iter().map(|r| one_replicate(scenario, n_pilot, settings, seed, r)).collect()
}

/// Sorted, deduplicated `{min, Q.1, Q.25, Q.5, ⌈mean⌉, Q.75, Q.9, max, n_rct}`
/// of the pooled proposals (nearest-rank quantiles).
pub fn build_grid(pooled: &[u64], n_rct: u64) -> Result<Vec<u64>> {
    if pooled.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    let mut sorted = pooled.to_vec();
    sorted.sort_unstable();
    let b = sorted.len();
    let q = |p: f64| sorted[nearest_rank(p, b) - 1];
    let mean = (pooled.iter().map(|&v| v as f64).sum::<f64>() / b as f64).ceil() as u64;
    let mut grid = vec![sorted[0], q(0.1), q(0.25), q(0.5), mean, q(0.75), q(0.9), sorted[b - 1], n_rct];
    grid.sort_unstable();
    grid.dedup();
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub n: u64,
    pub power: f64,
    pub reps: usize,
    pub rejections: usize,
    pub exclusions: usize,
}

impl PowerPoint {
    pub fn exclusion_rate(&self) -> f64 {
        self.exclusions as f64 / self.reps as f64
    }

    pub fn flagged(&self) -> bool {
        self.exclusion_rate() > EXCLUSION_FLAG_RATE
    }
}

/// Outcome of one Monte Carlo replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McOutcome {
    Reject,
    Accept,
    Excluded,
}

/// One Monte Carlo replicate of the Wald test at size `n`.
pub fn wald_replicate(scenario: &Scenario, n: usize, estimand: Estimand, z_crit: f64, stream: Stream) -> Result<McOutcome> {
    let data = scenario.generate::<f64, _>(n, &mut stream.rng())?.data;
    Ok(match stacked_fit(&data, &scenario.ps_spec(), scenario.link(), estimand) {
        Ok(fit) if fit.var_beta1 > 0.0 && fit.var_beta1.is_finite() => {
            if fit.wald().abs() > z_crit {
                McOutcome::Reject
            } else {
                McOutcome::Accept
            }
        }
        _ => McOutcome::Excluded,
    })
}

/// Monte Carlo power at size `n`; replicate `k` draws from `stream.child(k)`.
/// Non-estimable replicates are excluded from the denominator.
pub fn estimate_power(
    scenario: &Scenario,
    n: u64,
    reps: usize,
    inputs: &DesignInputs,
    estimand: Estimand,
    stream: Stream,
) -> Result<PowerPoint> {
    if n < 4 {
        return Err(Error::InvalidParameter(format!("power evaluation needs n >= 4, got {n}")));
    }
    if reps == 0 {
        return Err(Error::InvalidParameter("Monte Carlo reps must be positive".into()));
    }
    let z = inputs.z_alpha();
    let outcomes: Vec<McOutcome> = (0..reps)
        .into_par_iter()
        .map(|k| wald_replicate(scenario, n as usize, estimand, z, stream.child(k as u64)))
        .collect::<Result<_>>()?;
    let rejections = outcomes.iter().filter(|&&o| o == McOutcome::Reject).count();
    let exclusions = outcomes.iter().filter(|&&o| o == McOutcome::Excluded).count();
    let used = reps - exclusions;
    let power = if used == 0 { 0.0 } else { rejections as f64 / used as f64 };
    Ok(PowerPoint { n, power, reps, rejections, exclusions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerGrid {
    /// Strictly increasing in `n`.
    pub points: Vec<PowerPoint>,
}

impl PowerGrid {
    pub fn new(mut points: Vec<PowerPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        points.sort_by_key(|p| p.n);
        if points.windows(2).any(|w| w[0].n == w[1].n) {
            return Err(Error::InvalidParameter("duplicate grid size".into()));
        }
        Ok(PowerGrid { points })
    }

    pub fn sizes(&self) -> Vec<u64> {
        self.points.iter().map(|p| p.n).collect()
    }

    /// Piecewise-linear in `n`, clamped to the end values outside the grid.
    pub fn interpolate(&self, n: f64) -> f64 {
        let pts = &self.points;
        let first = pts[0];
        let last = pts[pts.len() - 1];
        if n <= first.n as f64 {
            return first.power;
        }
        if n >= last.n as f64 {
            return last.power;
        }
        let i = pts.partition_point(|p| (p.n as f64) <= n);
        let (a, b) = (pts[i - 1], pts[i]);
        let t = (n - a.n as f64) / (b.n as f64 - a.n as f64);
        a.power + t * (b.power - a.power)
    }

    /// Weighted isotonic (nondecreasing) regression of the power values by
    /// pool-adjacent-violators, weights = replicates used.
    pub fn isotonic(&self) -> PowerGrid {
        let mut blocks: Vec<(f64, f64, usize)> = Vec::new(); // (value, weight, count)
        for p in &self.points {
            let w = (p.reps - p.exclusions).max(1) as f64;
            blocks.push((p.power, w, 1));
            while blocks.len() > 1 && blocks[blocks.len() - 2].0 > blocks[blocks.len() - 1].0 {
                let (v2, w2, c2) = blocks.pop().unwrap();
                let (v1, w1, c1) = blocks.pop().unwrap();
                blocks.push(((v1 * w1 + v2 * w2) / (w1 + w2), w1 + w2, c1 + c2));
            }
        }
        let mut points = self.points.clone();
        let mut i = 0;
        for (v, _, c) in blocks {
            for p in &mut points[i..i + c] {
                p.power = v;
            }
            i += c;
        }
        PowerGrid { points }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_csv())
    }

    /// `n,power,reps,exclusions`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,power,reps,exclusions\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{:.6},{},{}", p.n, p.power, p.reps, p.exclusions);
        }
        s
    }
}

/// Power at every grid size; point `n` draws from `stream.child(n)`.
pub fn estimate_power_grid(
    scenario: &Scenario,
    grid: &[u64],
    reps: usize,
    inputs: &DesignInputs,
    estimand: Estimand,
    stream: Stream,
) -> Result<PowerGrid> {
    let points = grid
        .iter()
        .map(|&n| estimate_power(scenario, n, reps, inputs, estimand, stream.child(n)))
        .collect::<Result<Vec<_>>>()?;
    PowerGrid::new(points)
}

/// Fraction of `sizes` whose interpolated power reaches `target`.
pub fn hit_rate(sizes: &[u64], grid: &PowerGrid, target: f64) -> f64 {
    if sizes.is_empty() {
        return 0.0;
    }
    let hits = sizes.iter().filter(|&&n| grid.interpolate(n as f64) >= target).count();
    hits as f64 / sizes.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub stability_choice: String,
    pub n_mean: f64,
    pub n_median: f64,
    pub power_mean: f64,
    pub power_lo95: f64,
    pub power_hi95: f64,
    pub hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub scenario: String,
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str = "scenario,stability_choice,n_mean,n_median,power_mean,power_lo95,power_hi95,hit_rate";

impl ValidationReport {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.stability_choice == label)
    }

    /// Fixed schema: [`REPORT_HEADER`]; sizes with two and one decimals,
    /// power and hit rate as fractions with four.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.2},{:.1},{:.4},{:.4},{:.4},{:.4}",
                self.scenario, r.stability_choice, r.n_mean, r.n_median, r.power_mean, r.power_lo95, r.power_hi95, r.hit_rate
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_csv())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn summary_row(label: String, sizes: &[u64], grid: &PowerGrid, target: f64) -> Result<ReportRow> {
    if sizes.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    let mut n: Vec<f64> = sizes.iter().map(|&v| v as f64).collect();
    n.sort_by(|a, b| a.total_cmp(b));
    let power: Vec<f64> = sizes.iter().map(|&v| grid.interpolate(v as f64)).collect();
    Ok(ReportRow {
        stability_choice: label,
        n_mean: n.iter().sum::<f64>() / n.len() as f64,
        n_median: median(&n),
        power_mean: power.iter().sum::<f64>() / power.len() as f64,
        power_lo95: nearest_rank_quantile(&power, 0.025)?,
        power_hi95: nearest_rank_quantile(&power, 0.975)?,
        hit_rate: hit_rate(sizes, grid, target),
    })
}

/// One row for the benchmark followed by one per stability choice, in
/// `labels` order.
pub fn summarize(
    scenario: &str,
    replicates: &[DesignReplicate],
    labels: &[String],
    grid: &PowerGrid,
    target: f64,
) -> Result<ValidationReport> {
    let mut rows = Vec::with_capacity(labels.len() + 1);
    let rct: Vec<u64> = replicates.iter().map(|r| r.n_rct).collect();
    rows.push(summary_row(BENCHMARK_LABEL.to_string(), &rct, grid, target)?);
    for label in labels {
        let sizes = replicates
            .iter()
            .map(|r| r.n_prop(label).ok_or_else(|| Error::InvalidParameter(format!("replicate {} lacks choice {label}", r.id))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(summary_row(label.clone(), &sizes, grid, target)?);
    }
    Ok(ValidationReport { scenario: scenario.to_string(), rows })
}

/// Everything a validation run needs besides the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSettings {
    pub replicates: usize,
    pub n_pilot: usize,
    pub design: DesignSettings,
    pub mc_reps: usize,
    #[serde(default = "default_target")]
    pub target: f64,
    /// Score designs against the isotonic power curve instead of the raw one.
    #[serde(default)]
    pub isotonic: bool,
}

fn default_target() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationOutput {
    pub replicates: Vec<DesignReplicate>,
    /// Raw Monte Carlo estimates.
    pub grid: PowerGrid,
    pub report: ValidationReport,
}

/// Full pipeline: replicates, grid, power, report.
pub fn run_validation(scenario: &Scenario, settings: &ValidationSettings, seed: u64) -> Result<ValidationOutput> {
    run_validation_with_progress(scenario, settings, seed, |_| {})
}

/// [`run_validation`] reporting each completed stage to `progress`.
pub fn run_validation_with_progress(
    scenario: &Scenario,
    settings: &ValidationSettings,
    seed: u64,
    mut progress: impl FnMut(&str),
) -> Result<ValidationOutput> {
    progress(&format!("designing {} pilots of size {}", settings.replicates, settings.n_pilot));
    let replicates = run_design_replicates(scenario, settings.replicates, settings.n_pilot, &settings.design, seed)?;
    let pooled: Vec<u64> = replicates.iter().flat_map(|r| r.choices.iter().map(|c| c.n_prop)).collect();
    let mean_rct = replicates.iter().map(|r| r.n_rct as f64).sum::<f64>() / replicates.len() as f64;
    let sizes = build_grid(&pooled, mean_rct.ceil() as u64)?;
    progress(&format!("estimating power at {} sizes x {} reps", sizes.len(), settings.mc_reps));
    let grid = estimate_power_grid(
        scenario,
        &sizes,
        settings.mc_reps,
        &settings.design.inputs,
        settings.design.estimand,
        Stream::new(seed).child(tag::POWER),
    )?;
    for p in &grid.points {
        if p.flagged() {
            progress(&format!("warning: {:.1}% of reps excluded at n = {}", 100.0 * p.exclusion_rate(), p.n));
        }
    }
    let scoring = if settings.isotonic { grid.isotonic() } else { grid.clone() };
    let report = summarize(&scenario.name, &replicates, &settings.design.labels(), &scoring, settings.target)?;
    Ok(ValidationOutput { replicates, grid, report })
}
