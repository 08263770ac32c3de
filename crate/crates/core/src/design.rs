//! Sample size from a design variance, and the RCT-style benchmark.
//!
//! With `z = z_{1−α/2} + z_{power}` the Wald test on `β₁` reaches the target
//! power at `n = ⌈z² V / Δ²⌉`, where `V` is the large-sample variance factor.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};
use crate::scalar::{expit, logit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignInputs {
    /// Effect on the link scale.
    pub delta: f64,
    /// Two-sided significance level.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_power")]
    pub power: f64,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_power() -> f64 {
    0.8
}

impl DesignInputs {
    pub fn new(delta: f64, alpha: f64, power: f64) -> Result<Self> {
        let d = DesignInputs { delta, alpha, power };
        d.check()?;
        Ok(d)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta != 0.0) {
            return Err(Error::InvalidParameter(format!("effect size delta must be finite and nonzero, got {}", self.delta)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.power > 0.0 && self.power < 1.0) {
            return Err(Error::InvalidParameter(format!("power {} outside (0, 1)", self.power)));
        }
        Ok(())
    }

    /// Two-sided critical value `z_{1−α/2}`.
    pub fn z_alpha(&self) -> f64 {
        normal_quantile(1.0 - self.alpha / 2.0)
    }

    /// `z_{1−α/2} + z_{power}`.
    pub fn z_sum(&self) -> f64 {
        self.z_alpha() + normal_quantile(self.power)
    }
}

/// Standard error of `β̂₁` that delivers the target power.
pub fn se_target(inp: &DesignInputs) -> f64 {
    inp.delta.abs() / inp.z_sum()
}

/// `⌈z² V / Δ²⌉`. A product within `1e-9` (relative) of an integer is taken
/// as that integer, so rounding noise cannot push an exact value up by one.
pub fn required_n(v: f64, inp: &DesignInputs) -> Result<u64> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::InvalidParameter(format!("design variance must be positive and finite, got {v}")));
    }
    let z = inp.z_sum();
    let x = z * z * v / (inp.delta * inp.delta);
    let r = x.round();
    let n = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    Ok(n.max(1.0) as u64)
}

/// Outcome-specific benchmark parameters. For binary and count outcomes the
/// treated-arm value may be given directly or through `delta`; when both are
/// present they must agree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RctParams {
    Binary {
        p0: f64,
        #[serde(default)]
        p1: Option<f64>,
        #[serde(default)]
        delta: Option<f64>,
        rho: f64,
    },
    Count {
        lambda0: f64,
        #[serde(default)]
        lambda1: Option<f64>,
        #[serde(default)]
        delta: Option<f64>,
        rho: f64,
    },
    Continuous {
        sigma2: f64,
        delta: f64,
        rho: f64,
    },
}

const AGREEMENT_TOLERANCE: f64 = 1e-8;

fn resolve_pair(base: f64, given: Option<f64>, delta: Option<f64>, forward: impl Fn(f64) -> f64, back: impl Fn(f64) -> f64, what: &str) -> Result<(f64, f64)> {
    match (given, delta) {
        (Some(v), Some(d)) => {
            let implied = back(v);
            if (implied - d).abs() > AGREEMENT_TOLERANCE {
                return Err(Error::InvalidParameter(format!(
                    "{what} implies delta = {implied}, inconsistent with delta = {d}"
                )));
            }
            Ok((v, d))
        }
        (Some(v), None) => Ok((v, back(v))),
        (None, Some(d)) => Ok((forward(d), d)),
        (None, None) => Err(Error::InvalidParameter(format!("either {what} or delta is required (base {base})"))),
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("treated fraction rho {rho} outside (0, 1)")))
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} = {p} outside (0, 1)")))
    }
}

fn check_rate(name: &str, r: f64) -> Result<()> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} = {r} must be positive")))
    }
}

impl RctParams {
    pub fn binary(p0: f64, delta: f64, rho: f64) -> Self {
        RctParams::Binary { p0, p1: None, delta: Some(delta), rho }
    }

    pub fn count(lambda0: f64, delta: f64, rho: f64) -> Self {
        RctParams::Count { lambda0, lambda1: None, delta: Some(delta), rho }
    }

    pub fn continuous(sigma2: f64, delta: f64, rho: f64) -> Self {
        RctParams::Continuous { sigma2, delta, rho }
    }

    /// Effect on the link scale, derived if only the treated-arm value is given.
    pub fn delta(&self) -> Result<f64> {
        Ok(self.resolve()?.1)
    }

    /// `(V_RCT, Δ)`, validating every field.
    pub fn resolve(&self) -> Result<(f64, f64)> {
        match *self {
            RctParams::Binary { p0, p1, delta, rho } => {
                check_rho(rho)?;
                check_probability("p0", p0)?;
                let (p1, d) = resolve_pair(p0, p1, delta, |d| expit(logit(p0) + d), |p| logit(p) - logit(p0), "p1")?;
                check_probability("p1", p1)?;
                Ok((1.0 / (rho * p1 * (1.0 - p1)) + 1.0 / ((1.0 - rho) * p0 * (1.0 - p0)), d))
            }
            RctParams::Count { lambda0, lambda1, delta, rho } => {
                check_rho(rho)?;
                check_rate("lambda0", lambda0)?;
                let (l1, d) = resolve_pair(lambda0, lambda1, delta, |d| lambda0 * d.exp(), |l| (l / lambda0).ln(), "lambda1")?;
                check_rate("lambda1", l1)?;
                Ok((1.0 / (rho * l1) + 1.0 / ((1.0 - rho) * lambda0), d))
            }
            RctParams::Continuous { sigma2, delta, rho } => {
                check_rho(rho)?;
                check_rate("sigma2", sigma2)?;
                Ok((sigma2 / rho + sigma2 / (1.0 - rho), delta))
            }
        }
    }
}

/// Benchmark variance `V_RCT` under independent sampling.
pub fn rct_variance(params: &RctParams) -> Result<f64> {
    Ok(params.resolve()?.0)
}

/// Benchmark `(V_RCT, n_RCT)` at the given significance level and power.
pub fn rct_sample_size(params: &RctParams, alpha: f64, power: f64) -> Result<(f64, u64)> {
    let (v, delta) = params.resolve()?;
    let inp = DesignInputs::new(delta, alpha, power)?;
    Ok((v, required_n(v, &inp)?))
}

/// Inverse standard normal CDF.
///
/// # Panics
/// If `p` is not strictly inside `(0, 1)`.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "normal_quantile requires 0 < p < 1, got {p}");
    // Φ⁻¹(p) = −√2 erfc⁻¹(2p)
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Fallible [`normal_quantile`].
pub fn try_normal_quantile(p: f64) -> Result<f64> {
    if p > 0.0 && p < 1.0 {
        Ok(normal_quantile(p))
    } else {
        Err(Error::InvalidParameter(format!("normal quantile level {p} outside (0, 1)")))
    }
}
