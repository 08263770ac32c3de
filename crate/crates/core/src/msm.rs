//! Weighted marginal structural model `g(E[Y(t)]) = β₀ + β₁ t`.
//!
//! # Closed-form solution
//!
//! With design row `D_i = (1, T_i)ᵀ` and working independence the estimating
//! equations are
//!
//! ```text
//! Σ_i D_i w_i (y_i − μ(T_i; β)) = 0,   μ(t; β) = g⁻¹(β₀ + β₁ t).
//! ```
//!
//! `μ(T_i; β)` takes only two values, `m₀ = g⁻¹(β₀)` for controls and
//! `m₁ = g⁻¹(β₀ + β₁)` for treated subjects. The second coordinate sums over
//! treated subjects only:
//!
//! ```text
//! Σ_{T_i=1} w_i (y_i − m₁) = 0   ⇒   m₁ = Σ_{T_i=1} w_i y_i / Σ_{T_i=1} w_i.
//! ```
//!
//! Subtracting it from the first coordinate leaves the control-only equation,
//! which gives `m₀` as the weighted control mean in the same way. Because
//! `g⁻¹` is strictly monotone, `β₀ = g(m₀)` and `β₁ = g(m₁) − g(m₀)` is the
//! unique root for any link; no iteration is needed. The root exists only
//! when both weighted means lie in the link's domain (strictly inside `(0,1)`
//! for logit, positive for log).

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::{expit, logit, CompensatedSum, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    Log,
    Identity,
}

impl Link {
    pub fn name(self) -> &'static str {
        match self {
            Link::Logit => "logit",
            Link::Log => "log",
            Link::Identity => "identity",
        }
    }

    /// `g(μ)`.
    #[inline]
    pub fn link<T: Scalar>(self, mu: T) -> T {
        match self {
            Link::Logit => logit(mu),
            Link::Log => mu.ln(),
            Link::Identity => mu,
        }
    }

    /// `g⁻¹(η)`.
    #[inline]
    pub fn inverse<T: Scalar>(self, eta: T) -> T {
        match self {
            Link::Logit => expit(eta),
            Link::Log => eta.exp(),
            Link::Identity => eta,
        }
    }

    /// `dμ/dη` at linear predictor `eta`.
    #[inline]
    pub fn mu_derivative<T: Scalar>(self, eta: T) -> T {
        match self {
            Link::Logit => {
                let m = expit(eta);
                m * (T::one() - m)
            }
            Link::Log => eta.exp(),
            Link::Identity => T::one(),
        }
    }

    pub fn in_domain<T: Scalar>(self, mu: T) -> bool {
        mu.is_finite()
            && match self {
                Link::Logit => mu > T::zero() && mu < T::one(),
                Link::Log => mu > T::zero(),
                Link::Identity => true,
            }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsmFit<T> {
    pub link: Link,
    /// `(β₀, β₁)`.
    pub beta: [T; 2],
    pub mu0: T,
    pub mu1: T,
    pub sum_w0: T,
    pub sum_w1: T,
}

impl<T: Scalar> MsmFit<T> {
    /// Fitted mean for treatment `t`.
    #[inline]
    pub fn mu(&self, t: u8) -> T {
        if t == 1 {
            self.mu1
        } else {
            self.mu0
        }
    }
}

pub fn fit_msm<T: Scalar>(d: &Dataset<T>, w: &[T], link: Link) -> Result<MsmFit<T>> {
    assert_eq!(w.len(), d.n(), "one weight per observation");
    let mut sw = [CompensatedSum::new(); 2];
    let mut swy = [CompensatedSum::new(); 2];
    for (i, &wi) in w.iter().enumerate() {
        let arm = d.t(i) as usize;
        sw[arm].add(wi);
        swy[arm].add(wi * d.y(i));
    }
    let sw = [sw[0].value(), sw[1].value()];
    if !(sw[0] > T::zero()) {
        return Err(Error::EmptyArm("control"));
    }
    if !(sw[1] > T::zero()) {
        return Err(Error::EmptyArm("treated"));
    }
    // one refinement pass on the weighted residuals
    let mut mu = [swy[0].value() / sw[0], swy[1].value() / sw[1]];
    let mut resid = [CompensatedSum::new(); 2];
    for (i, &wi) in w.iter().enumerate() {
        let arm = d.t(i) as usize;
        resid[arm].add(wi * (d.y(i) - mu[arm]));
    }
    for arm in 0..2 {
        mu[arm] += resid[arm].value() / sw[arm];
    }
    let [mu0, mu1] = mu;
    for (arm, mu) in [(0u8, mu0), (1, mu1)] {
        if !link.in_domain(mu) {
            return Err(Error::NonEstimable { arm, mean: mu.to_f64_lossy(), link: link.name() });
        }
    }
    let g0 = link.link(mu0);
    let g1 = link.link(mu1);
    Ok(MsmFit { link, beta: [g0, g1 - g0], mu0, mu1, sum_w0: sw[0], sum_w1: sw[1] })
}

/// Per-subject MSM scores `U_{i,β} = D_i w_i (y_i − μ(T_i; β))`.
pub fn score_beta<T: Scalar>(beta: [T; 2], d: &Dataset<T>, w: &[T], link: Link) -> Vec<[T; 2]> {
    let mu = [link.inverse(beta[0]), link.inverse(beta[0] + beta[1])];
    (0..d.n())
        .map(|i| {
            let t = d.t(i);
            let r = w[i] * (d.y(i) - mu[t as usize]);
            [r, if t == 1 { r } else { T::zero() }]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::OutcomeKind;
    use proptest::prelude::*;

    fn continuous(t: Vec<u8>, y: Vec<f64>) -> Dataset<f64> {
        Dataset::new(OutcomeKind::Continuous, 0, vec![], t, y).unwrap()
    }

    #[test]
    fn identity_link_unit_weights() {
        let d = continuous(vec![0, 0, 1, 1], vec![2.0, 4.0, 4.0, 6.0]);
        let fit = fit_msm(&d, &[1.0; 4], Link::Identity).unwrap();
        assert_eq!(fit.beta, [3.0, 2.0]);
    }

    #[test]
    fn logit_link_doubles_odds() {
        // 0.05825 is the arm mean whose odds are twice those of 0.03
        let p1 = 0.05825_f64;
        let beta1 = Link::Logit.link(p1) - Link::Logit.link(0.03);
        assert!((beta1 - 2.0_f64.ln()).abs() < 1e-3);

        let mut t = vec![0u8; 100];
        t.extend(vec![1u8; 100]);
        let mut y = vec![0.0; 200];
        y[0] = 1.0;
        y[1] = 1.0;
        y[2] = 1.0;
        for v in y.iter_mut().skip(100).take(6) {
            *v = 1.0;
        }
        let d = Dataset::new(OutcomeKind::Binary, 0, vec![], t, y).unwrap();
        let fit = fit_msm(&d, &[1.0f64; 200], Link::Logit).unwrap();
        assert!((fit.mu0 - 0.03).abs() < 1e-15 && (fit.mu1 - 0.06).abs() < 1e-15);
        let lor = (0.06f64 / 0.94).ln() - (0.03f64 / 0.97).ln();
        assert!((fit.beta[1] - lor).abs() < 1e-14);
    }

    #[test]
    fn non_estimable_when_no_events() {
        let d = Dataset::new(OutcomeKind::Binary, 0, vec![], vec![0, 0, 1, 1], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let err = fit_msm(&d, &[1.0; 4], Link::Logit).unwrap_err();
        assert!(matches!(err, Error::NonEstimable { arm: 0, .. }));
        assert!(matches!(fit_msm(&d, &[1.0; 4], Link::Log), Err(Error::NonEstimable { arm: 0, .. })));
        let all_events = Dataset::new(OutcomeKind::Binary, 0, vec![], vec![0, 1], vec![1.0, 1.0]).unwrap();
        assert!(matches!(fit_msm(&all_events, &[1.0; 2], Link::Logit), Err(Error::NonEstimable { .. })));
        let one_arm = continuous(vec![1, 1], vec![1.0, 2.0]);
        assert!(matches!(fit_msm(&one_arm, &[1.0; 2], Link::Identity), Err(Error::EmptyArm("control"))));
    }

    #[test]
    fn score_direct_evaluation() {
        let d = Dataset::new(OutcomeKind::Binary, 0, vec![], vec![1], vec![1.0]).unwrap();
        // μ = expit(0) = 0.5
        let s = score_beta([0.0, 0.0], &d, &[2.0], Link::Logit);
        assert_eq!(s, vec![[1.0, 1.0]]);
        let d = continuous(vec![0, 1], vec![3.0, 5.0]);
        let s = score_beta([3.0, 2.0], &d, &[1.0, 1.0], Link::Identity);
        assert_eq!(s, vec![[0.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn link_round_trips() {
        for link in [Link::Logit, Link::Log, Link::Identity] {
            for &mu in &[0.01_f64, 0.3, 0.5, 0.97] {
                assert!((link.inverse(link.link(mu)) - mu).abs() < 1e-12);
                assert!(link.mu_derivative(link.link(mu)) > 0.0);
            }
        }
    }

    #[test]
    fn constant_weights_give_marginal_log_odds_ratio() {
        // 2×2 table: control 30/70, treated 45/55
        let mut t = vec![0u8; 100];
        t.extend(vec![1u8; 100]);
        let y: Vec<f64> = (0..200).map(|i| if (i < 30) || (100..145).contains(&i) { 1.0 } else { 0.0 }).collect();
        let d = Dataset::new(OutcomeKind::Binary, 0, vec![], t, y).unwrap();
        let fit = fit_msm(&d, &[2.5; 200], Link::Logit).unwrap();
        let table_lor = ((45.0 * 70.0) / (55.0_f64 * 30.0)).ln();
        assert!((fit.beta[1] - table_lor).abs() < 1e-13);
    }

    fn arb_data() -> impl Strategy<Value = (Vec<u8>, Vec<f64>, Vec<f64>)> {
        (4usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..=1, n),
                proptest::collection::vec(-50.0f64..50.0, n),
                proptest::collection::vec(0.1f64..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn root_solves_estimating_equations((mut t, y, w) in arb_data()) {
            t[0] = 0;
            t[1] = 1;
            let d = continuous(t, y);
            let fit = fit_msm(&d, &w, Link::Identity).unwrap();
            let s = score_beta(fit.beta, &d, &w, Link::Identity);
            let (a, b) = s.iter().fold((0.0, 0.0), |acc, u| (acc.0 + u[0], acc.1 + u[1]));
            prop_assert!(a.abs() <= 1e-8 && b.abs() <= 1e-8);
            prop_assert!((Link::Identity.link(fit.mu0) - fit.beta[0]).abs() <= 1e-10);
        }

        #[test]
        fn weight_and_outcome_scaling((mut t, y, w) in arb_data(), k in -4i32..5) {
            t[0] = 0;
            t[1] = 1;
            let d = continuous(t.clone(), y.clone());
            let base = fit_msm(&d, &w, Link::Identity).unwrap();
            // powers of two scale exactly in binary floating point
            let c = 2f64.powi(k);
            let scaled_w: Vec<f64> = w.iter().map(|v| v * c).collect();
            prop_assert_eq!(fit_msm(&d, &scaled_w, Link::Identity).unwrap().beta, base.beta);
            let dy = continuous(t, y.iter().map(|v| v * c).collect());
            prop_assert_eq!(fit_msm(&dy, &w, Link::Identity).unwrap().beta[1], base.beta[1] * c);
        }

        #[test]
        fn invariant_to_row_permutation((mut t, y, w) in arb_data(), rot in 0usize..60) {
            t[0] = 0;
            t[1] = 1;
            let n = t.len();
            let d = continuous(t, y);
            let base = fit_msm(&d, &w, Link::Identity).unwrap();
            let idx: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let pw: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
            let other = fit_msm(&d.select(&idx), &pw, Link::Identity).unwrap();
            prop_assert!((other.beta[1] - base.beta[1]).abs() <= 1e-10 * (1.0 + base.beta[1].abs()));
        }
    }
}
