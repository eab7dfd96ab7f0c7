//! Gauss–Hermite rules for expectations under a univariate Gaussian.

use nalgebra::{DMatrix, SymmetricEigen};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Nodes and weights of an `order`-point Gauss–Hermite rule, stored in the
/// probabilists' normalization: `E[f(u)] ≈ Σ w_j f(mean + sqrt(2 var) t_j)`
/// with `Σ w_j = 1`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch: eigen-decomposition of the Jacobi matrix of the physicists'
    /// Hermite recurrence.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let mut jacobi = DMatrix::<f64>::zeros(order, order);
        for i in 1..order {
            let off = (i as f64 / 2.0).sqrt();
            jacobi[(i, i - 1)] = off;
            jacobi[(i - 1, i)] = off;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|j| {
                let v0 = eig.eigenvectors[(0, j)];
                (eig.eigenvalues[j], v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Enforce exact symmetry of the rule.
        for j in 0..order / 2 {
            let k = order - 1 - j;
            let node = 0.5 * (pairs[k].0 - pairs[j].0);
            let weight = 0.5 * (pairs[k].1 + pairs[j].1);
            pairs[j] = (-node, weight);
            pairs[k] = (node, weight);
        }
        if order % 2 == 1 {
            pairs[order / 2].0 = 0.0;
        }
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// `E[f(u)]` for `u ~ N(mean, var)`.
    pub fn expect<F: Fn(f64) -> f64>(&self, mean: f64, var: f64, f: F) -> f64 {
        let scale = (2.0 * var).sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(mean + scale * t))
            .sum()
    }
}

/// Shared, lazily built rule of the given order.
pub fn rule(order: usize) -> Arc<GaussHermite> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    guard
        .entry(order)
        .or_insert_with(|| Arc::new(GaussHermite::new(order)))
        .clone()
}
