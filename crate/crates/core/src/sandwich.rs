//! Stacked M-estimation: the joint propensity + MSM estimating equations,
//! their block lower-triangular Jacobian `A`, the meat `B`, and the sandwich
//! `Σ = A⁻¹ B A⁻ᵀ`.
//!
//! Parameters are ordered `θ = (η, β₀, β₁)`, so `β₁` is the last coordinate.
//! `A` and `B` are per-observation averages, `Σ` is the per-observation
//! asymptotic covariance and `Var(θ̂) ≈ Σ / n`.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{Lu, Matrix};
use crate::msm::{fit_msm, Link, MsmFit};
use crate::propensity::{self, fit_logistic, jacobian_eta, weight, weight_derivative_factor, Estimand, PsFit, PsSpec};
use crate::scalar::{expit, CompensatedSum, Scalar};

/// Relative tolerance of the PSD check on `B`.
pub const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct StackedFit<T> {
    pub ps: PsFit<T>,
    pub msm: MsmFit<T>,
    pub weights: Vec<T>,
    pub estimand: Estimand,
    /// `(η̂, β̂₀, β̂₁)`.
    pub theta: Vec<T>,
    pub a: Matrix<T>,
    pub b: Matrix<T>,
    pub sigma: Matrix<T>,
    /// `Σ[β₁, β₁] / n`.
    pub var_beta1: T,
    /// Large-sample variance factor, `n · var_beta1`.
    pub lsvf: T,
    pub n: usize,
}

impl<T: Scalar> StackedFit<T> {
    pub fn beta1(&self) -> T {
        self.msm.beta[1]
    }

    pub fn se_beta1(&self) -> T {
        self.var_beta1.sqrt()
    }

    /// Wald statistic `β̂₁ / SE(β̂₁)` for `H₀: β₁ = 0`.
    pub fn wald(&self) -> T {
        self.beta1() / self.se_beta1()
    }
}

/// Stacked Jacobian
///
/// ```text
/// A = | A_ηη   0    |
///     | A_βη   A_ββ |
/// ```
///
/// with `A_ββ = −(1/n) Σ w_i μ'_i D_i D_iᵀ` and
/// `A_βη = (1/n) Σ D_i (y_i − μ_i) ∂w_i/∂ηᵀ`. The upper-right block is never
/// written.
pub fn assemble_a<T: Scalar>(d: &Dataset<T>, ps: &PsFit<T>, msm: &MsmFit<T>, w: &[T], estimand: Estimand) -> Matrix<T> {
    let k = ps.p_eta();
    let mut a = Matrix::zeros(k + 2, k + 2);
    let a_eta = jacobian_eta(ps);
    for i in 0..k {
        for j in 0..k {
            a[(i, j)] = a_eta[(i, j)];
        }
    }
    let inv_n = T::one() / T::from_count(d.n());
    let slope = [
        msm.link.mu_derivative(msm.beta[0]),
        msm.link.mu_derivative(msm.beta[0] + msm.beta[1]),
    ];
    for i in 0..d.n() {
        let t = d.t(i);
        let dt = T::from_u8(t).unwrap();
        let resid = d.y(i) - msm.mu(t);
        let c = weight_derivative_factor(ps.fitted[i], t, estimand) * resid * inv_n;
        let x = ps.design_row(i);
        for (j, &xj) in x.iter().enumerate() {
            a[(k, j)] += c * xj;
            a[(k + 1, j)] += dt * c * xj;
        }
        let h = -(w[i] * slope[t as usize]) * inv_n;
        a[(k, k)] += h;
        a[(k, k + 1)] += h * dt;
        a[(k + 1, k)] += h * dt;
        a[(k + 1, k + 1)] += h * dt;
    }
    a
}

/// Per-subject stacked scores at the fitted values, row-major `n × (p_η+2)`.
pub fn stacked_scores<T: Scalar>(d: &Dataset<T>, ps: &PsFit<T>, msm: &MsmFit<T>, w: &[T]) -> Vec<T> {
    let k = ps.p_eta();
    let mut out = Vec::with_capacity(d.n() * (k + 2));
    for i in 0..d.n() {
        let t = d.t(i);
        let r_ps = T::from_u8(t).unwrap() - ps.fitted[i];
        out.extend(ps.design_row(i).iter().map(|&x| x * r_ps));
        let r = w[i] * (d.y(i) - msm.mu(t));
        out.push(r);
        out.push(if t == 1 { r } else { T::zero() });
    }
    out
}

/// Meat `B = (1/n) Σ U_i U_iᵀ`.
pub fn assemble_b<T: Scalar>(d: &Dataset<T>, ps: &PsFit<T>, msm: &MsmFit<T>, w: &[T]) -> Matrix<T> {
    let k = ps.p_eta() + 2;
    let scores = stacked_scores(d, ps, msm, w);
    let mut b = Matrix::zeros(k, k);
    for u in scores.chunks_exact(k) {
        b.add_outer(u, u, T::one());
    }
    b.scale(T::one() / T::from_count(d.n()));
    b
}

/// Mean stacked score `(1/n) Σ U_i(θ)` at an arbitrary `θ = (η, β)`,
/// recomputing propensities, weights and means from scratch.
pub fn mean_stacked_score<T: Scalar>(d: &Dataset<T>, spec: &PsSpec, link: Link, estimand: Estimand, theta: &[T]) -> Vec<T> {
    let k = spec.p_eta();
    assert_eq!(theta.len(), k + 2);
    let design = spec.design(d);
    let (eta, beta) = theta.split_at(k);
    let mu = [link.inverse(beta[0]), link.inverse(beta[0] + beta[1])];
    let mut sum = vec![CompensatedSum::new(); k + 2];
    let ps_scores = propensity::score_eta(&design, d.treatments(), eta);
    for i in 0..d.n() {
        let row = &design[i * k..(i + 1) * k];
        let e = expit(row.iter().zip(eta).map(|(&x, &b)| x * b).sum::<T>());
        let t = d.t(i);
        for j in 0..k {
            sum[j].add(ps_scores[i * k + j]);
        }
        let r = weight(e, t, estimand) * (d.y(i) - mu[t as usize]);
        sum[k].add(r);
        if t == 1 {
            sum[k + 1].add(r);
        }
    }
    let inv_n = T::one() / T::from_count(d.n());
    sum.iter().map(|s| s.value() * inv_n).collect()
}

/// `Σ = A⁻¹ B A⁻ᵀ` by LU solves, symmetrized.
pub fn sandwich<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let lu = Lu::factor(a).map_err(|e| match e {
        Error::Singular { pivot, .. } => Error::Singular { what: "stacked Jacobian", pivot },
        other => other,
    })?;
    let m = lu.solve_matrix(b); // A⁻¹ B
    let s = lu.solve_matrix(&m.transpose()).transpose(); // (A⁻¹ (A⁻¹B)ᵀ)ᵀ
    let mut out = s.clone();
    let half = T::lit(0.5);
    for i in 0..s.rows() {
        for j in 0..s.cols() {
            out[(i, j)] = half * (s[(i, j)] + s[(j, i)]);
        }
    }
    Ok(out)
}

/// Smallest eigenvalue of a symmetric matrix, or `Err` if it is below
/// `−PSD_TOLERANCE · max|m|`.
pub fn check_psd<T: Scalar>(m: &Matrix<T>) -> Result<T> {
    let min = m.symmetric_eigenvalues().first().copied().unwrap_or(T::zero());
    if min < -T::lit(PSD_TOLERANCE) * m.max_abs() {
        return Err(Error::NotPsd { min_eigenvalue: min.to_f64_lossy() });
    }
    Ok(min)
}

/// Full pipeline: propensity fit, weights, MSM, `A`, `B`, `Σ`, LSVF.
pub fn stacked_fit<T: Scalar>(d: &Dataset<T>, spec: &PsSpec, link: Link, estimand: Estimand) -> Result<StackedFit<T>> {
    d.validate().require_both_arms()?;
    let ps = fit_logistic(d, spec)?;
    let w = propensity::weights(&ps, estimand)?;
    let msm = fit_msm(d, &w, link)?;
    let a = assemble_a(d, &ps, &msm, &w, estimand);
    let b = assemble_b(d, &ps, &msm, &w);
    check_psd(&b)?;
    let sigma = sandwich(&a, &b)?;
    let n = d.n();
    let last = sigma.rows() - 1;
    let var_beta1 = sigma[(last, last)].max(T::zero()) / T::from_count(n);
    let lsvf = T::from_count(n) * var_beta1;
    let mut theta = ps.eta.clone();
    theta.extend_from_slice(&msm.beta);
    Ok(StackedFit { ps, msm, weights: w, estimand, theta, a, b, sigma, var_beta1, lsvf, n })
}
