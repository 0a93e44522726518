use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::domain::{Point, TorusDomain};

/// Gauss-Legendre nodes and weights on `[-1, 1]`, ascending.
///
/// Newton iteration on the three-term recurrence, started from the
/// Chebyshev-like guess `cos(pi (i - 1/4) / (n + 1/2))`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-16 * x.abs().max(1.0) {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d.is_finite() {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Tensor-product Gauss-Legendre rule on a torus domain.
///
/// In 2D the node index is `q = q0 * n + q1` (first axis slowest).
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub nodes: Vec<Point>,
    pub weights: Vec<f64>,
    pub points_per_axis: usize,
    pub dim: usize,
}

impl QuadratureRule {
    pub fn gauss_legendre(domain: &TorusDomain, points_per_axis: usize) -> Result<Self> {
        if points_per_axis < 2 {
            return Err(Error::param(
                "points_per_axis",
                format!("need at least 2, got {points_per_axis}"),
            ));
        }
        let (x, w) = gauss_legendre(points_per_axis);
        let axis = |j: usize| -> Vec<(f64, f64)> {
            let (lo, len) = (domain.lower(j), domain.length(j));
            x.iter()
                .zip(&w)
                .map(|(&xi, &wi)| (lo + 0.5 * len * (xi + 1.0), 0.5 * len * wi))
                .collect()
        };
        let (nodes, weights) = match domain.dim() {
            1 => axis(0).into_iter().map(|(x, w)| ([x, 0.0], w)).unzip(),
            _ => {
                let (a0, a1) = (axis(0), axis(1));
                a0.iter()
                    .flat_map(|&(x0, w0)| a1.iter().map(move |&(x1, w1)| ([x0, x1], w0 * w1)))
                    .unzip()
            }
        };
        Ok(Self {
            nodes,
            weights,
            points_per_axis,
            dim: domain.dim(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Quadrature of nodal values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }
}

/// Points per axis that make the Gauss-Legendre Gram matrix of the
/// degree-`modes` Fourier basis exact to roughly machine precision.
///
/// Gauss-Legendre is not a periodic rule, so `2l + 1` points are far from
/// enough; `6l + 6` keeps the error below 1e-12 for every `l` we use.
pub fn recommended_points(modes: usize) -> usize {
    6 * modes + 6
}
