//! Tensor-product quadrature over boxes.
//!
//! Midpoint is the default: for integrands supported strictly inside the
//! box all Euler-Maclaurin boundary terms vanish, so it converges at the
//! full smoothness-limited rate. Accumulation uses pairwise summation so
//! results are reproducible to ~1e-14 independent of chunking.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::fields::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuadRule {
    Midpoint,
    GaussLegendre,
}

/// Box, per-axis node count, and rule.
#[derive(Clone, Debug)]
pub struct QuadratureSpec {
    pub bounds: Vec<(f64, f64)>,
    pub nodes_per_axis: usize,
    pub rule: QuadRule,
}

impl QuadratureSpec {
    pub fn midpoint(bounds: Vec<(f64, f64)>, nodes_per_axis: usize) -> Self {
        QuadratureSpec {
            bounds,
            nodes_per_axis,
            rule: QuadRule::Midpoint,
        }
    }

    pub fn gauss_legendre(bounds: Vec<(f64, f64)>, nodes_per_axis: usize) -> Self {
        QuadratureSpec {
            bounds,
            nodes_per_axis,
            rule: QuadRule::GaussLegendre,
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn total_nodes(&self) -> usize {
        self.nodes_per_axis.pow(self.dim() as u32)
    }

    /// Nodes and weights along one axis.
    pub fn axis_rule(&self, axis: usize) -> (Vec<f64>, Vec<f64>) {
        let (lo, hi) = self.bounds[axis];
        let n = self.nodes_per_axis;
        match self.rule {
            QuadRule::Midpoint => {
                let h = (hi - lo) / n as f64;
                let nodes = (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect();
                let weights = vec![h; n];
                (nodes, weights)
            }
            QuadRule::GaussLegendre => {
                let (xs, ws) = gauss_legendre_reference(n);
                let c = 0.5 * (hi - lo);
                let m = 0.5 * (hi + lo);
                (
                    xs.iter().map(|&x| m + c * x).collect(),
                    ws.iter().map(|&w| c * w).collect(),
                )
            }
        }
    }

    /// Integrate a function over the box. Evaluation is parallel over the
    /// leading axis; accumulation order is fixed.
    pub fn integrate<F>(&self, f: F) -> f64
    where
        F: Fn(&Point) -> f64 + Sync,
    {
        let dim = self.dim();
        let rules: Vec<(Vec<f64>, Vec<f64>)> = (0..dim).map(|a| self.axis_rule(a)).collect();
        let n = self.nodes_per_axis;
        let slabs: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i0| {
                let mut values = Vec::with_capacity(n.pow((dim - 1) as u32));
                let mut idx = vec![0usize; dim];
                idx[0] = i0;
                let mut x = DVector::zeros(dim);
                loop {
                    let mut w = 1.0;
                    for a in 0..dim {
                        x[a] = rules[a].0[idx[a]];
                        w *= rules[a].1[idx[a]];
                    }
                    values.push(w * f(&x));
                    // Advance the trailing indices (axis 0 fixed to i0).
                    let mut a = dim - 1;
                    loop {
                        if a == 0 {
                            return pairwise_sum(&values);
                        }
                        idx[a] += 1;
                        if idx[a] < n {
                            break;
                        }
                        idx[a] = 0;
                        a -= 1;
                    }
                }
            })
            .collect();
        pairwise_sum(&slabs)
    }
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Gauss-Legendre nodes/weights on [-1, 1] by Newton iteration on P_n.
fn gauss_legendre_reference(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        xs[i] = -x;
        xs[n - 1 - i] = x;
        ws[i] = w;
        ws[n - 1 - i] = w;
    }
    (xs, ws)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}
