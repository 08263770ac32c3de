//! Logistic propensity score model `e(x; η) = expit(η₀ + η_cᵀ x_c)`, fitted
//! by Newton–Raphson (IRLS) with step halving, plus the IPTW weights it
//! induces.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{Lu, Matrix};
use crate::scalar::{expit, softplus, Scalar};

pub const MAX_ITERATIONS: usize = 50;
/// Max-abs mean score accepted as converged.
pub const SCORE_TOLERANCE: f64 = 1e-8;
/// Fitted propensities this close to 0 or 1 are a positivity failure.
pub const BOUNDARY_GUARD: f64 = 1e-12;
/// `‖η‖∞` beyond this is treated as divergence under separation.
pub const DIVERGENCE_NORM: f64 = 1e3;
pub const MAX_WEIGHT: f64 = 1e12;

/// Which covariate columns enter the propensity model. The intercept is
/// always included; an empty list gives the intercept-only model.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PsSpec {
    pub covariates: Vec<usize>,
}

impl PsSpec {
    pub fn intercept_only() -> Self {
        PsSpec { covariates: Vec::new() }
    }

    /// Every covariate column `0..p`.
    pub fn all(p: usize) -> Self {
        PsSpec { covariates: (0..p).collect() }
    }

    /// Number of propensity parameters, `1 + #covariates`.
    pub fn p_eta(&self) -> usize {
        1 + self.covariates.len()
    }

    pub fn check<T: Scalar>(&self, d: &Dataset<T>) -> Result<()> {
        match self.covariates.iter().find(|&&c| c >= d.p()) {
            Some(c) => Err(Error::InvalidParameter(format!(
                "propensity covariate index {c} out of range for p = {}",
                d.p()
            ))),
            None => Ok(()),
        }
    }

    /// Row-major `n × p_η` design matrix `[1, x_c...]`.
    pub fn design<T: Scalar>(&self, d: &Dataset<T>) -> Vec<T> {
        let mut out = Vec::with_capacity(d.n() * self.p_eta());
        for i in 0..d.n() {
            let x = d.x_row(i);
            out.push(T::one());
            out.extend(self.covariates.iter().map(|&c| x[c]));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    #[default]
    Ate,
    Att,
}

/// A fitted propensity model together with the inputs needed to form
/// weights and Jacobian blocks.
#[derive(Debug, Clone)]
pub struct PsFit<T> {
    pub eta: Vec<T>,
    pub fitted: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
    /// Row-major `n × p_η`.
    pub design: Vec<T>,
    pub treatment: Vec<u8>,
}

impl<T: Scalar> PsFit<T> {
    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn p_eta(&self) -> usize {
        self.eta.len()
    }

    #[inline]
    pub fn design_row(&self, i: usize) -> &[T] {
        let k = self.p_eta();
        &self.design[i * k..(i + 1) * k]
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

struct Eval<T> {
    loglik: T,
    score: Vec<T>,
    info: Matrix<T>,
    fitted: Vec<T>,
}

fn evaluate<T: Scalar>(design: &[T], t: &[u8], eta: &[T], with_info: bool) -> Eval<T> {
    let k = eta.len();
    let mut score = vec![T::zero(); k];
    let mut info = Matrix::zeros(k, k);
    let mut fitted = Vec::with_capacity(t.len());
    let mut loglik = T::zero();
    for (row, &ti) in design.chunks_exact(k).zip(t) {
        let lp = dot(row, eta);
        let e = expit(lp);
        let tf = T::from_u8(ti).unwrap();
        loglik += tf * lp - softplus(lp);
        for (s, &x) in score.iter_mut().zip(row) {
            *s += x * (tf - e);
        }
        if with_info {
            info.add_outer(row, row, e * (T::one() - e));
        }
        fitted.push(e);
    }
    Eval { loglik, score, info, fitted }
}

fn loglik<T: Scalar>(design: &[T], t: &[u8], eta: &[T]) -> T {
    let k = eta.len();
    design
        .chunks_exact(k)
        .zip(t)
        .map(|(row, &ti)| {
            let lp = dot(row, eta);
            T::from_u8(ti).unwrap() * lp - softplus(lp)
        })
        .sum()
}

fn max_abs<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

fn near_boundary<T: Scalar>(fitted: &[T]) -> Option<T> {
    let guard = T::lit(BOUNDARY_GUARD);
    fitted.iter().map(|&e| e.min(T::one() - e)).find(|&m| m <= guard)
}

/// Maximum-likelihood fit of the logistic propensity model.
///
/// Convergence requires both the max-abs mean score to fall below
/// [`SCORE_TOLERANCE`] and the next Newton step to be negligible; under
/// separation the score vanishes while the steps stay of order one, and the
/// iterate is then followed until it reaches the boundary or diverges.
pub fn fit_logistic<T: Scalar>(d: &Dataset<T>, spec: &PsSpec) -> Result<PsFit<T>> {
    spec.check(d)?;
    d.validate().require_both_arms()?;
    let n = T::from_count(d.n());
    let design = spec.design(d);
    let t = d.treatments();
    let k = spec.p_eta();
    let tol = T::tol(SCORE_TOLERANCE);
    let step_tol = T::tol(1e-6);
    let divergence = T::lit(DIVERGENCE_NORM);

    let mut eta = vec![T::zero(); k];
    let mut iterations = 0;
    loop {
        let ev = evaluate(&design, t, &eta, true);
        let mean_score = max_abs(&ev.score) / n;
        let lu = match Lu::factor(&ev.info) {
            Ok(lu) => lu,
            Err(_) if near_boundary(&ev.fitted).is_some() => {
                return Err(Error::Separation { norm: max_abs(&eta).to_f64_lossy() });
            }
            Err(_) => return Err(Error::Singular { what: "propensity information matrix", pivot: 0 }),
        };
        let step = lu.solve_vec(&ev.score);
        let step_norm = max_abs(&step);
        let scale = T::one() + max_abs(&eta);

        if mean_score <= tol && step_norm <= step_tol * scale {
            // final polishing step keeps the residual far below tolerance
            let polished: Vec<T> = eta.iter().zip(&step).map(|(&a, &s)| a + s).collect();
            let pe = evaluate(&design, t, &polished, false);
            let (eta, fitted) = if max_abs(&pe.score) <= max_abs(&ev.score) {
                (polished, pe.fitted)
            } else {
                (eta, ev.fitted)
            };
            if let Some(m) = near_boundary(&fitted) {
                return Err(Error::Positivity { value: m.to_f64_lossy() });
            }
            return Ok(PsFit { eta, fitted, converged: true, iterations, design, treatment: t.to_vec() });
        }
        // vanishing score with non-vanishing steps: the likelihood is still
        // increasing toward the boundary
        if mean_score <= tol && near_boundary(&ev.fitted).is_some() {
            return Err(Error::Separation { norm: max_abs(&eta).to_f64_lossy() });
        }
        if iterations >= MAX_ITERATIONS {
            return Err(Error::NonConvergence { iterations, max_score: mean_score.to_f64_lossy() });
        }

        let mut frac = T::one();
        let half = T::lit(0.5);
        let slack = T::epsilon() * T::lit(16.0) * (T::one() + ev.loglik.abs());
        let mut next: Vec<T> = eta.iter().zip(&step).map(|(&a, &s)| a + s).collect();
        for _ in 0..40 {
            if loglik(&design, t, &next) >= ev.loglik - slack {
                break;
            }
            frac *= half;
            next = eta.iter().zip(&step).map(|(&a, &s)| a + frac * s).collect();
        }
        eta = next;
        iterations += 1;
        if max_abs(&eta) > divergence {
            return Err(Error::Separation { norm: max_abs(&eta).to_f64_lossy() });
        }
    }
}

/// Per-subject propensity scores `U_{i,η} = X_i (T_i − e_i)` at an arbitrary
/// `η`, row-major `n × p_η`.
pub fn score_eta<T: Scalar>(design: &[T], t: &[u8], eta: &[T]) -> Vec<T> {
    let k = eta.len();
    let mut out = Vec::with_capacity(design.len());
    for (row, &ti) in design.chunks_exact(k).zip(t) {
        let r = T::from_u8(ti).unwrap() - expit(dot(row, eta));
        out.extend(row.iter().map(|&x| x * r));
    }
    out
}

/// `A_ηη = −(1/n) Σ e_i (1 − e_i) X_i X_iᵀ`.
pub fn jacobian_eta<T: Scalar>(fit: &PsFit<T>) -> Matrix<T> {
    let k = fit.p_eta();
    let mut a = Matrix::zeros(k, k);
    for (i, &e) in fit.fitted.iter().enumerate() {
        let row = fit.design_row(i);
        a.add_outer(row, row, -(e * (T::one() - e)));
    }
    a.scale(T::one() / T::from_count(fit.n()));
    a
}

/// IPTW weight for one subject.
#[inline]
pub fn weight<T: Scalar>(e: T, t: u8, estimand: Estimand) -> T {
    let one = T::one();
    match (estimand, t) {
        (Estimand::Ate, 1) => one / e,
        (Estimand::Ate, _) => one / (one - e),
        (Estimand::Att, 1) => one,
        (Estimand::Att, _) => e / (one - e),
    }
}

/// Scalar `c` with `∂w_i/∂η = c · X_i` (logistic propensity).
#[inline]
pub fn weight_derivative_factor<T: Scalar>(e: T, t: u8, estimand: Estimand) -> T {
    let one = T::one();
    match (estimand, t) {
        (Estimand::Ate, 1) => -(one - e) / e,
        (Estimand::Ate, _) => e / (one - e),
        (Estimand::Att, 1) => T::zero(),
        (Estimand::Att, _) => e / (one - e),
    }
}

pub fn weights<T: Scalar>(fit: &PsFit<T>, estimand: Estimand) -> Result<Vec<T>> {
    let cap = T::lit(MAX_WEIGHT);
    fit.fitted
        .iter()
        .zip(&fit.treatment)
        .map(|(&e, &t)| {
            if !(e > T::zero() && e < T::one()) {
                return Err(Error::Positivity { value: e.to_f64_lossy() });
            }
            let w = weight(e, t, estimand);
            if w > cap || !w.is_finite() {
                Err(Error::WeightOverflow { value: w.to_f64_lossy() })
            } else {
                Ok(w)
            }
        })
        .collect()
}
