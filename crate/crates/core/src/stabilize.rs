//! Bootstrap stabilization of the large-sample variance factor.
//!
//! The pilot is resampled `B` times and the full stacked pipeline is refit on
//! each resample, giving a distribution of LSVF values `V*`. A stability
//! functional (a nearest-rank quantile or the mean) collapses it to a single
//! design value. Optionally a second-level bootstrap over the scalar list
//! turns the functional into an upper confidence bound.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::msm::Link;
use crate::propensity::{Estimand, PsSpec};
use crate::rng::Stream;
use crate::sandwich::stacked_fit;
use crate::scalar::Scalar;

/// Resample attempts per bootstrap slot before it counts as a failure.
pub const MAX_ATTEMPTS: usize = 10;
/// Largest tolerated fraction of unrecovered slots.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapDistribution<T> {
    /// `V*(b)` for every recovered slot, in slot order.
    pub values: Vec<T>,
    pub n_pilot: usize,
    pub b_requested: usize,
    /// Slots that stayed degenerate after [`MAX_ATTEMPTS`] resamples.
    pub failures: usize,
    /// Extra resamples drawn to replace degenerate ones.
    pub redraws: usize,
}

impl<T: Scalar> BootstrapDistribution<T> {
    pub fn from_values(values: Vec<T>) -> Self {
        let b = values.len();
        BootstrapDistribution { values, n_pilot: 0, b_requested: b, failures: 0, redraws: 0 }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Writes `b,v_star` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| Error::Io { path: path.display().to_string(), source };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "b,v_star").map_err(io)?;
        for (b, v) in self.values.iter().enumerate() {
            writeln!(f, "{},{}", b + 1, v).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

/// Summary applied to a list of `V*` values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StabilityFunctional {
    Quantile(f64),
    Mean,
}

impl StabilityFunctional {
    /// `q0.5`, `q0.9`, `mean`.
    pub fn label(&self) -> String {
        self.to_string()
    }

    pub fn apply<T: Scalar>(&self, values: &[T]) -> Result<T> {
        match *self {
            StabilityFunctional::Quantile(q) => nearest_rank_quantile(values, q),
            StabilityFunctional::Mean => mean(values),
        }
    }
}

impl fmt::Display for StabilityFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StabilityFunctional::Quantile(q) => write!(f, "q{q}"),
            StabilityFunctional::Mean => f.write_str("mean"),
        }
    }
}

impl FromStr for StabilityFunctional {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("mean") {
            return Ok(StabilityFunctional::Mean);
        }
        let q = s
            .strip_prefix('q')
            .or_else(|| s.strip_prefix('Q'))
            .and_then(|r| r.parse::<f64>().ok())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown stability functional `{s}`")))?;
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidParameter(format!("quantile level {q} outside (0, 1)")));
        }
        Ok(StabilityFunctional::Quantile(q))
    }
}

impl TryFrom<String> for StabilityFunctional {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StabilityFunctional> for String {
    fn from(f: StabilityFunctional) -> String {
        f.to_string()
    }
}

/// Second-level bootstrap upper bound of an inner functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UcbSpec {
    pub phi: StabilityFunctional,
    #[serde(default = "default_b_ucb")]
    pub b_ucb: usize,
    #[serde(default = "default_gamma_ucb")]
    pub gamma_ucb: f64,
}

fn default_b_ucb() -> usize {
    1000
}

fn default_gamma_ucb() -> f64 {
    0.05
}

impl UcbSpec {
    pub fn new(phi: StabilityFunctional) -> Self {
        UcbSpec { phi, b_ucb: default_b_ucb(), gamma_ucb: default_gamma_ucb() }
    }

    /// `ucb_q0.5`, `ucb_mean`.
    pub fn label(&self) -> String {
        format!("ucb_{}", self.phi)
    }

    pub fn check(&self) -> Result<()> {
        if self.b_ucb == 0 {
            return Err(Error::InvalidParameter("b_ucb must be positive".into()));
        }
        if !(self.gamma_ucb > 0.0 && self.gamma_ucb < 1.0) {
            return Err(Error::InvalidParameter(format!("gamma_ucb {} outside (0, 1)", self.gamma_ucb)));
        }
        Ok(())
    }
}

/// One-based nearest rank `⌈qB⌉`, clamped to `[1, B]`. Products that land
/// within rounding error of an integer are snapped to it first.
pub fn nearest_rank(q: f64, b: usize) -> usize {
    let x = q * b as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) { r } else { x.ceil() };
    (k as usize).clamp(1, b)
}

/// Type-1 (inverse empirical CDF) quantile.
pub fn nearest_rank_quantile<T: Scalar>(values: &[T], q: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    let k = nearest_rank(q, values.len());
    let mut buf = values.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite values"));
    Ok(*v)
}

pub fn mean<T: Scalar>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    Ok(values.iter().copied().sum::<T>() / T::from_count(values.len()))
}

fn bootstrap_slot<T: Scalar>(
    pilot: &Dataset<T>,
    spec: &PsSpec,
    link: Link,
    estimand: Estimand,
    stream: Stream,
) -> (Option<T>, usize) {
    let mut rng = stream.rng();
    for attempt in 0..MAX_ATTEMPTS {
        let resample = pilot.resample(&mut rng);
        if let Ok(fit) = stacked_fit(&resample, spec, link, estimand) {
            if fit.lsvf.is_finite() && fit.lsvf >= T::zero() {
                return (Some(fit.lsvf), attempt);
            }
        }
    }
    (None, MAX_ATTEMPTS - 1)
}

/// First-level bootstrap of the LSVF.
///
/// Slot `b` draws from `stream.child(b)`, so the result does not depend on
/// the number of worker threads. Degenerate resamples (an empty arm, a
/// failed fit, a non-estimable mean) are redrawn within their slot.
pub fn bootstrap_lsvf<T: Scalar>(
    pilot: &Dataset<T>,
    spec: &PsSpec,
    link: Link,
    estimand: Estimand,
    b: usize,
    stream: Stream,
) -> Result<BootstrapDistribution<T>> {
    if b == 0 {
        return Err(Error::InvalidParameter("bootstrap size B must be positive".into()));
    }
    pilot.validate().require_both_arms()?;
    let slots: Vec<(Option<T>, usize)> = (0..b)
        .into_par_iter()
        .map(|i| bootstrap_slot(pilot, spec, link, estimand, stream.child(i as u64)))
        .collect();
    let redraws = slots.iter().map(|s| s.1).sum();
    let values: Vec<T> = slots.iter().filter_map(|s| s.0).collect();
    let failures = b - values.len();
    if failures as f64 > MAX_FAILURE_RATE * b as f64 {
        return Err(Error::BootstrapAborted { failures, requested: b });
    }
    Ok(BootstrapDistribution { values, n_pilot: pilot.n(), b_requested: b, failures, redraws })
}

pub fn apply_functional<T: Scalar>(dist: &BootstrapDistribution<T>, f: StabilityFunctional) -> Result<T> {
    f.apply(&dist.values)
}

/// The `B_ucb` second-level values `φ*(k)`, each `φ` of a with-replacement
/// resample of the `V*` list.
pub fn ucb_draws<T: Scalar, R: Rng + ?Sized>(
    dist: &BootstrapDistribution<T>,
    spec: &UcbSpec,
    rng: &mut R,
) -> Result<Vec<T>> {
    spec.check()?;
    let values = &dist.values;
    if values.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    let b = values.len();
    let mut buf = vec![T::zero(); b];
    let mut out = Vec::with_capacity(spec.b_ucb);
    for _ in 0..spec.b_ucb {
        for slot in buf.iter_mut() {
            *slot = values[rng.random_range(0..b)];
        }
        out.push(spec.phi.apply(&buf)?);
    }
    Ok(out)
}

/// Nearest-rank `(1 − γ_ucb)` quantile of the second-level values.
pub fn ucb<T: Scalar, R: Rng + ?Sized>(dist: &BootstrapDistribution<T>, spec: &UcbSpec, rng: &mut R) -> Result<T> {
    let draws = ucb_draws(dist, spec, rng)?;
    nearest_rank_quantile(&draws, 1.0 - spec.gamma_ucb)
}
