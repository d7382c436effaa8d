//! Gauss–Hermite quadrature, rescaled to integrate against the standard
//! normal density: ∫ f(q) dΦ(q) ≈ Σ w_i f(q_i).

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Nodes and weights for marginalizing the household random effect.
///
/// The rule is stored after the change of variables q = √2 x, w = w_GH/√π,
/// so weights sum to one and the rule is exact for polynomials of degree
/// ≤ 2·order−1 under the standard normal measure.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    order: usize,
}

impl QuadratureRule {
    /// Builds the Gauss–Hermite rule of the given order via Golub–Welsch:
    /// the nodes are eigenvalues of the symmetric tridiagonal Jacobi matrix
    /// with off-diagonal entries √(k/2), the weights come from the first
    /// components of the eigenvectors.
    pub fn gauss_hermite(order: usize) -> Result<Self> {
        if order < 1 {
            return Err(Error::Config("quadrature order must be >= 1".into()));
        }
        let mut jacobi = DMatrix::<f64>::zeros(order, order);
        for k in 0..order - 1 {
            let off = ((k as f64 + 1.0) * 0.5).sqrt();
            jacobi[(k, k + 1)] = off;
            jacobi[(k + 1, k)] = off;
        }
        let eigen = jacobi.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = eigen
            .eigenvalues
            .iter()
            .zip(eigen.eigenvectors.row(0).iter())
            .map(|(&lambda, &v0)| {
                // Physicists' node lambda, normalized weight v0^2 (the raw
                // GH weight is v0^2 √π; dividing by √π cancels it).
                ((2.0f64).sqrt() * lambda, v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (nodes, weights) = pairs.into_iter().unzip();
        Ok(Self { nodes, weights, order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Approximates E[f(Q)] for Q ~ N(0,1).
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&q, &w)| w * f(q))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rejects_order_zero() {
        assert!(QuadratureRule::gauss_hermite(0).is_err());
    }

    #[test]
    fn weights_sum_to_one() {
        for order in [1, 2, 8, 30, 64] {
            let rule = QuadratureRule::gauss_hermite(order).unwrap();
            let total: f64 = rule.weights().iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn normal_moments_are_exact() {
        let rule = QuadratureRule::gauss_hermite(10).unwrap();
        assert_abs_diff_eq!(rule.integrate(|q| q), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rule.integrate(|q| q * q), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rule.integrate(|q| q.powi(4)), 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(rule.integrate(|q| q.powi(6)), 15.0, epsilon = 1e-9);
    }

    #[test]
    fn degree_three_nodes_match_reference() {
        let rule = QuadratureRule::gauss_hermite(3).unwrap();
        // √2 · {−√(3/2), 0, √(3/2)} = {−√3, 0, √3}
        assert_abs_diff_eq!(rule.nodes()[0], -(3.0f64).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(rule.nodes()[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rule.nodes()[2], (3.0f64).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(rule.weights()[1], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn lognormal_mean_converges() {
        // E[exp(Q)] = e^{1/2}; the integrand is entire so convergence is fast.
        let rule = QuadratureRule::gauss_hermite(20).unwrap();
        assert_abs_diff_eq!(rule.integrate(f64::exp), (0.5f64).exp(), epsilon = 1e-12);
    }
}
