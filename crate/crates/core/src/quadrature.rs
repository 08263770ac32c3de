//! Gauss–Hermite quadrature for expectations under a standard normal.

use std::f64::consts::PI;

use crate::scalar::Scalar;

/// Node count used by the outcome calibration routines.
pub const DEFAULT_NODES: usize = 64;

/// Nodes and weights rescaled so that `Σ wᵢ f(xᵢ) ≈ E[f(Z)]`, `Z ~ N(0, 1)`.
#[derive(Debug, Clone)]
pub struct NormalQuadrature<T> {
    nodes: Vec<T>,
    weights: Vec<T>,
}

impl<T: Scalar> NormalQuadrature<T> {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature needs at least one node");
        let (x, w) = hermite_rule(n);
        let root2 = 2.0_f64.sqrt();
        let inv_sqrt_pi = 1.0 / PI.sqrt();
        NormalQuadrature {
            nodes: x.iter().map(|&xi| T::lit(root2 * xi)).collect(),
            weights: w.iter().map(|&wi| T::lit(wi * inv_sqrt_pi)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect(&self, f: impl Fn(T) -> T) -> T {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

impl<T: Scalar> Default for NormalQuadrature<T> {
    fn default() -> Self {
        Self::new(DEFAULT_NODES)
    }
}

/// Physicists' Gauss–Hermite rule (weight `e^{-x²}`) by Newton iteration on
/// the orthonormal Hermite recurrence. Computed in `f64` regardless of the
/// target scalar.
fn hermite_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let m = n.div_ceil(2);
    let mut z = 0.0_f64;
    for i in 1..=m {
        z = match i {
            1 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            2 => z - 1.14 * nf.powf(0.426) / z,
            3 => 1.86 * z - 0.86 * x[0],
            4 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 3],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let jf = j as f64;
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * (1.0 + z.abs()) {
                break;
            }
        }
        x[i - 1] = z;
        x[n - i] = -z;
        w[i - 1] = 2.0 / (pp * pp);
        w[n - i] = w[i - 1];
    }
    (x, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_moments_are_exact() {
        let q = NormalQuadrature::<f64>::new(64);
        assert!((q.expect(|_| 1.0) - 1.0).abs() < 1e-13);
        assert!(q.expect(|x| x).abs() < 1e-13);
        assert!((q.expect(|x| x * x) - 1.0).abs() < 1e-12);
        assert!((q.expect(|x| x.powi(4)) - 3.0).abs() < 1e-11);
        assert!((q.expect(|x| x.powi(6)) - 15.0).abs() < 1e-10);
    }

    #[test]
    fn lognormal_mean() {
        let q = NormalQuadrature::<f64>::new(64);
        for s in [0.3, 0.5, 1.0] {
            let want = (s * s / 2.0_f64).exp();
            assert!((q.expect(|x| (s * x).exp()) - want).abs() < 1e-12 * want);
        }
    }

    #[test]
    fn small_rules_match_tables() {
        // two-point rule: nodes ±1/√2, weights √π/2
        let (x, w) = hermite_rule(2);
        assert!((x[0] - 0.5_f64.sqrt()).abs() < 1e-14);
        assert!((w[0] - PI.sqrt() / 2.0).abs() < 1e-14);
        let q = NormalQuadrature::<f32>::new(16);
        assert!((q.expect(|x| x * x) - 1.0).abs() < 1e-5);
    }
}
