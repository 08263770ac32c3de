//! Synthetic data-generating models for the three case studies.
//!
//! Every model draws i.i.d. rows: covariates first, then the per-dataset
//! propensity intercept that hits the target treated fraction, then
//! treatment and both potential outcomes. The observed outcome is the
//! potential outcome of the realized arm.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OutcomeKind};
use crate::design::RctParams;
use crate::error::{Error, Result};
use crate::msm::Link;
use crate::propensity::PsSpec;
use crate::quadrature::NormalQuadrature;
use crate::scalar::{bisect_increasing, expit, logit, Scalar};

const ETA0_TOLERANCE: f64 = 1e-10;
const OUTCOME_TOLERANCE: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropensityMode {
    #[default]
    Confounded,
    /// `T ~ Bernoulli(ρ)` independent of covariates; analysed with an
    /// intercept-only propensity model.
    Constant,
}

/// Intercept `η₀` solving `(1/n) Σ expit(η₀ + sᵢ) = ρ`, where `sᵢ` is the
/// covariate part of the linear predictor.
pub fn calibrate_eta0(scores: &[f64], rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidParameter(format!("target treated fraction {rho} outside (0, 1)")));
    }
    if scores.is_empty() {
        return Ok(logit(rho));
    }
    let (min, max) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    let base = logit(rho);
    let n = scores.len() as f64;
    let f = |eta0: f64| scores.iter().map(|&s| expit(eta0 + s)).sum::<f64>() / n - rho;
    if max == min {
        return Ok(base - min);
    }
    Ok(bisect_increasing(base - max, base - min, ETA0_TOLERANCE, f))
}

/// Conditional-logit outcome constants for the binary model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryCalibration {
    pub gamma0: f64,
    pub psi: f64,
}

/// `E[expit(a + β Z)]`, `Z ~ N(0, 1)`.
fn marginal_risk(q: &NormalQuadrature<f64>, a: f64, beta_x: f64) -> f64 {
    q.expect(|z| expit(a + beta_x * z))
}

/// Solves `E expit(γ₀ + β_x Z) = p₀` and
/// `logit E expit(γ₀ + β_x Z + ψ) − logit p₀ = Δ` by bisection on 64-node
/// Gauss–Hermite integrals.
pub fn calibrate_outcome_binary(p0: f64, beta_x: f64, delta: f64) -> Result<BinaryCalibration> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::InvalidParameter(format!("p0 = {p0} outside (0, 1)")));
    }
    if !delta.is_finite() || !beta_x.is_finite() {
        return Err(Error::InvalidParameter("beta_x and delta must be finite".into()));
    }
    let q = NormalQuadrature::<f64>::default();
    let width = 40.0 + 10.0 * beta_x.abs();
    let base = logit(p0);
    let gamma0 = bisect_increasing(base - width, base + width, OUTCOME_TOLERANCE, |g| marginal_risk(&q, g, beta_x) - p0);
    let psi = bisect_increasing(delta - width, delta + width, OUTCOME_TOLERANCE, |s| {
        logit(marginal_risk(&q, gamma0 + s, beta_x)) - base - delta
    });
    Ok(BinaryCalibration { gamma0, psi })
}

impl BinaryCalibration {
    /// Residuals of the two defining equations.
    pub fn residuals(&self, p0: f64, beta_x: f64, delta: f64) -> (f64, f64) {
        let q = NormalQuadrature::<f64>::default();
        let r0 = marginal_risk(&q, self.gamma0, beta_x) - p0;
        let r1 = logit(marginal_risk(&q, self.gamma0 + self.psi, beta_x)) - logit(p0) - delta;
        (r0, r1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryModel {
    pub eta1: f64,
    pub rho: f64,
    pub beta_x: f64,
    pub p0: f64,
    /// Marginal log odds ratio.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountModel {
    pub eta1: f64,
    pub rho: f64,
    pub beta_x: f64,
    pub lambda0: f64,
    /// Log rate ratio.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousModel {
    /// Success probabilities of the three binary covariates.
    pub bernoulli: [f64; 3],
    /// Propensity slope on `(X, B₁, B₂, B₃)`.
    pub ps_slope: [f64; 4],
    pub rho: f64,
    pub intercept: f64,
    /// Mean coefficients on `(X, B₁, B₂, B₃)`.
    pub mean_coef: [f64; 4],
    /// Mean difference.
    pub delta: f64,
    pub scale: f64,
    /// Log-scale coefficients on `(|X|, B₁, B₂)`.
    pub scale_coef: [f64; 3],
    /// Degrees of freedom of the standardized t error.
    pub nu: f64,
}

impl Default for ContinuousModel {
    fn default() -> Self {
        ContinuousModel {
            bernoulli: [0.23, 0.11, 0.54],
            ps_slope: [0.6 * 0.7, 0.6 * 0.8, 0.6 * 1.0, 0.6 * 0.5],
            rho: 0.36,
            intercept: 18_000.0,
            mean_coef: [1200.0, 3500.0, 4500.0, 2000.0],
            delta: 1500.0,
            scale: 3000.0,
            scale_coef: [0.15, 0.10, 0.15],
            nu: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Model {
    Binary(BinaryModel),
    Count(CountModel),
    Continuous(ContinuousModel),
}

impl Model {
    pub fn kind(&self) -> OutcomeKind {
        match self {
            Model::Binary(_) => OutcomeKind::Binary,
            Model::Count(_) => OutcomeKind::Count,
            Model::Continuous(_) => OutcomeKind::Continuous,
        }
    }

    pub fn link(&self) -> Link {
        match self {
            Model::Binary(_) => Link::Logit,
            Model::Count(_) => Link::Log,
            Model::Continuous(_) => Link::Identity,
        }
    }

    pub fn rho(&self) -> f64 {
        match self {
            Model::Binary(m) => m.rho,
            Model::Count(m) => m.rho,
            Model::Continuous(m) => m.rho,
        }
    }

    pub fn delta(&self) -> f64 {
        match self {
            Model::Binary(m) => m.delta,
            Model::Count(m) => m.delta,
            Model::Continuous(m) => m.delta,
        }
    }

    pub fn n_covariates(&self) -> usize {
        match self {
            Model::Continuous(_) => 4,
            _ => 1,
        }
    }

    fn set_delta(&mut self, delta: f64) {
        match self {
            Model::Binary(m) => m.delta = delta,
            Model::Count(m) => m.delta = delta,
            Model::Continuous(m) => m.delta = delta,
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        let rho = self.rho();
        if !(rho > 0.0 && rho < 1.0) {
            return bad(format!("rho = {rho} outside (0, 1)"));
        }
        if !self.delta().is_finite() {
            return bad("delta must be finite".into());
        }
        match self {
            Model::Binary(m) if !(m.p0 > 0.0 && m.p0 < 1.0) => bad(format!("p0 = {} outside (0, 1)", m.p0)),
            Model::Count(m) if !(m.lambda0 > 0.0 && m.lambda0.is_finite()) => bad(format!("lambda0 = {} must be positive", m.lambda0)),
            Model::Continuous(m) if m.nu <= 2.0 => bad(format!("nu = {} must exceed 2 for a unit-variance error", m.nu)),
            Model::Continuous(m) if m.bernoulli.iter().any(|&p| !(0.0..=1.0).contains(&p)) => {
                bad("bernoulli probabilities must lie in [0, 1]".into())
            }
            Model::Continuous(m) if !(m.scale > 0.0) => bad("scale must be positive".into()),
            _ => Ok(()),
        }
    }
}

/// A named, calibrated data-generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub mode: PropensityMode,
    pub model: Model,
    /// Pilot size used in the case studies.
    pub pilot_n: usize,
    #[serde(skip)]
    calibration: Option<BinaryCalibration>,
}

/// Names accepted by [`Scenario::preset`].
pub const PRESETS: [&str; 4] = ["binary_mcm", "binary_sga", "count_npe", "continuous_nsclc"];

impl Scenario {
    pub fn new(name: impl Into<String>, mode: PropensityMode, model: Model, pilot_n: usize) -> Result<Self> {
        model.check()?;
        let calibration = match &model {
            Model::Binary(m) => Some(calibrate_outcome_binary(m.p0, m.beta_x, m.delta)?),
            _ => None,
        };
        Ok(Scenario { name: name.into(), mode, model, pilot_n, calibration })
    }

    pub fn preset(name: &str) -> Result<Self> {
        let binary = |p0| {
            Model::Binary(BinaryModel { eta1: 0.8, rho: 0.25, beta_x: 0.5, p0, delta: 2f64.ln() })
        };
        let (model, pilot_n) = match name {
            "binary_mcm" => (binary(0.03), 600),
            "binary_sga" => (binary(0.10), 600),
            "count_npe" => (
                Model::Count(CountModel { eta1: 0.5, rho: 0.67, beta_x: 0.3, lambda0: 0.008, delta: 0.5f64.ln() }),
                5000,
            ),
            "continuous_nsclc" => (Model::Continuous(ContinuousModel::default()), 350),
            other => return Err(Error::UnknownScenario(other.to_string())),
        };
        Scenario::new(name, PropensityMode::Confounded, model, pilot_n)
    }

    pub fn with_mode(mut self, mode: PropensityMode) -> Self {
        self.mode = mode;
        self
    }

    /// Same scenario with a different effect size (e.g. `0` for a null
    /// variant); recalibrates the binary outcome model.
    pub fn with_delta(mut self, delta: f64) -> Result<Self> {
        self.model.set_delta(delta);
        Scenario::new(self.name, self.mode, self.model, self.pilot_n)
    }

    /// Recomputes derived constants after deserialization.
    pub fn calibrated(self) -> Result<Self> {
        Scenario::new(self.name, self.mode, self.model, self.pilot_n)
    }

    pub fn kind(&self) -> OutcomeKind {
        self.model.kind()
    }

    pub fn link(&self) -> Link {
        self.model.link()
    }

    pub fn delta(&self) -> f64 {
        self.model.delta()
    }

    pub fn binary_calibration(&self) -> Option<BinaryCalibration> {
        self.calibration
    }

    /// Propensity model used at analysis.
    pub fn ps_spec(&self) -> PsSpec {
        match self.mode {
            PropensityMode::Confounded => PsSpec::all(self.model.n_covariates()),
            PropensityMode::Constant => PsSpec::intercept_only(),
        }
    }

    /// RCT-style benchmark parameters. The continuous benchmark needs an
    /// outcome variance, taken from `sigma2`.
    pub fn rct_params(&self, sigma2: Option<f64>) -> Result<RctParams> {
        match &self.model {
            Model::Binary(m) => Ok(RctParams::binary(m.p0, m.delta, m.rho)),
            Model::Count(m) => Ok(RctParams::count(m.lambda0, m.delta, m.rho)),
            Model::Continuous(m) => match sigma2 {
                Some(s) => Ok(RctParams::continuous(s, m.delta, m.rho)),
                None => Err(Error::InvalidParameter("continuous benchmark requires an outcome variance".into())),
            },
        }
    }

    fn draw_covariates<R: Rng + ?Sized>(&self, rng: &mut R, row: &mut Vec<f64>) {
        let z: f64 = rng.sample(StandardNormal);
        row.push(z);
        if let Model::Continuous(m) = &self.model {
            for &p in &m.bernoulli {
                row.push(f64::from(u8::from(rng.random::<f64>() < p)));
            }
        }
    }

    fn ps_score(&self, x: &[f64]) -> f64 {
        match &self.model {
            Model::Binary(m) => m.eta1 * x[0],
            Model::Count(m) => m.eta1 * x[0],
            Model::Continuous(m) => m.ps_slope.iter().zip(x).map(|(a, b)| a * b).sum(),
        }
    }

    fn draw_potential<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> [f64; 2] {
        match &self.model {
            Model::Binary(m) => {
                let c = self.calibration.expect("binary scenario is calibrated at construction");
                let lp = c.gamma0 + m.beta_x * x[0];
                let y0 = rng.random::<f64>() < expit(lp);
                let y1 = rng.random::<f64>() < expit(lp + c.psi);
                [f64::from(u8::from(y0)), f64::from(u8::from(y1))]
            }
            Model::Count(m) => {
                let rate = m.lambda0 * (m.beta_x * x[0]).exp();
                [poisson(rate, rng), poisson(rate * m.delta.exp(), rng)]
            }
            Model::Continuous(m) => {
                let mu0 = m.intercept + m.mean_coef.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                let sigma = m.scale * (m.scale_coef[0] * x[0].abs() + m.scale_coef[1] * x[1] + m.scale_coef[2] * x[2]).exp();
                let eps = standardized_t(m.nu, rng);
                [mu0 + sigma * eps, mu0 + m.delta + sigma * eps]
            }
        }
    }

    /// Draws `n` rows.
    pub fn generate<T: Scalar, R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Simulated<T>> {
        let p = self.model.n_covariates();
        let mut x = Vec::with_capacity(n * p);
        for _ in 0..n {
            self.draw_covariates(rng, &mut x);
        }
        let rho = self.model.rho();
        let (eta0, scores) = match self.mode {
            PropensityMode::Confounded => {
                let scores: Vec<f64> = x.chunks_exact(p).map(|r| self.ps_score(r)).collect();
                (calibrate_eta0(&scores, rho)?, scores)
            }
            PropensityMode::Constant => (logit(rho), vec![0.0; n]),
        };
        let mut t = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut y0 = Vec::with_capacity(n);
        let mut y1 = Vec::with_capacity(n);
        for (row, &s) in x.chunks_exact(p).zip(&scores) {
            let ti = u8::from(rng.random::<f64>() < expit(eta0 + s));
            let [a, b] = self.draw_potential(row, rng);
            t.push(ti);
            y.push(T::lit(if ti == 1 { b } else { a }));
            y0.push(T::lit(a));
            y1.push(T::lit(b));
        }
        let x = x.into_iter().map(T::lit).collect();
        let data = Dataset::new(self.kind(), p, x, t, y)?;
        Ok(Simulated { data, eta0, y0, y1 })
    }
}

fn poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    Poisson::new(rate).expect("positive finite Poisson rate").sample(rng)
}

/// `t_ν · √((ν − 2)/ν)`, a unit-variance Student t draw.
fn standardized_t<R: Rng + ?Sized>(nu: f64, rng: &mut R) -> f64 {
    let t: f64 = StudentT::new(nu).expect("nu > 0").sample(rng);
    t * ((nu - 2.0) / nu).sqrt()
}

/// A generated dataset with both potential outcomes retained.
#[derive(Debug, Clone)]
pub struct Simulated<T> {
    pub data: Dataset<T>,
    /// Propensity intercept calibrated on this draw.
    pub eta0: f64,
    pub y0: Vec<T>,
    pub y1: Vec<T>,
}
