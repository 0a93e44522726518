use std::f64::consts::PI;

use nalgebra::DVector;

use crate::error::{Error, Result};

use super::domain::{Point, TorusDomain};
use super::quadrature::QuadratureRule;

/// Kind of a one-dimensional Fourier factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode1d {
    Constant,
    Cos(usize),
    Sin(usize),
}

impl Mode1d {
    /// 1D index ordering: constant, cos1, sin1, cos2, sin2, ...
    pub fn from_index(f: usize) -> Self {
        match f {
            0 => Mode1d::Constant,
            f if f % 2 == 1 => Mode1d::Cos(f.div_ceil(2)),
            f => Mode1d::Sin(f / 2),
        }
    }

    pub fn wavenumber(self) -> usize {
        match self {
            Mode1d::Constant => 0,
            Mode1d::Cos(k) | Mode1d::Sin(k) => k,
        }
    }
}

/// Real orthonormal Fourier basis on a 1D or 2D torus.
///
/// 1D index `f` runs over `2l + 1` functions; in 2D the index is
/// `f0 * (2l + 1) + f1`, a lexicographic tensor product.
#[derive(Clone, Debug)]
pub struct SpectralBasis {
    domain: TorusDomain,
    modes: usize,
    per_axis: usize,
    size: usize,
}

impl SpectralBasis {
    pub fn new(domain: TorusDomain, modes_per_axis: usize) -> Result<Self> {
        if modes_per_axis < 1 {
            return Err(Error::param("modes_per_axis", "must be at least 1"));
        }
        let per_axis = 2 * modes_per_axis + 1;
        let size = per_axis.pow(domain.dim() as u32);
        Ok(Self {
            domain,
            modes: modes_per_axis,
            per_axis,
            size,
        })
    }

    pub fn domain(&self) -> &TorusDomain {
        &self.domain
    }

    pub fn modes_per_axis(&self) -> usize {
        self.modes
    }

    /// Total number of basis functions L.
    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Per-axis factor indices of basis function `idx`.
    pub fn factors(&self, idx: usize) -> [usize; 2] {
        match self.dim() {
            1 => [idx, 0],
            _ => [idx / self.per_axis, idx % self.per_axis],
        }
    }

    pub fn describe(&self, idx: usize) -> Vec<Mode1d> {
        let f = self.factors(idx);
        (0..self.dim()).map(|j| Mode1d::from_index(f[j])).collect()
    }

    fn omega(&self, axis: usize) -> f64 {
        2.0 * PI / self.domain.length(axis)
    }

    /// Values and derivatives of all 1D factors along `axis` at coordinate `x`.
    fn axis_values(&self, axis: usize, x: f64, val: &mut [f64], der: &mut [f64]) {
        let len = self.domain.length(axis);
        let c0 = 1.0 / len.sqrt();
        let c = (2.0 / len).sqrt();
        let w = self.omega(axis);
        val[0] = c0;
        der[0] = 0.0;
        for k in 1..=self.modes {
            let kw = k as f64 * w;
            let (s, co) = (kw * x).sin_cos();
            val[2 * k - 1] = c * co;
            val[2 * k] = c * s;
            der[2 * k - 1] = -c * kw * s;
            der[2 * k] = c * kw * co;
        }
    }

    /// Fills `values[i] = psi_i(x)` and `grads[i] = grad psi_i(x)`.
    pub fn eval_all(&self, x: &Point, values: &mut [f64], grads: &mut [Point]) {
        let n = self.per_axis;
        let mut v0 = vec![0.0; n];
        let mut d0 = vec![0.0; n];
        self.axis_values(0, x[0], &mut v0, &mut d0);
        if self.dim() == 1 {
            for f in 0..n {
                values[f] = v0[f];
                grads[f] = [d0[f], 0.0];
            }
            return;
        }
        let mut v1 = vec![0.0; n];
        let mut d1 = vec![0.0; n];
        self.axis_values(1, x[1], &mut v1, &mut d1);
        for f0 in 0..n {
            for f1 in 0..n {
                let i = f0 * n + f1;
                values[i] = v0[f0] * v1[f1];
                grads[i] = [d0[f0] * v1[f1], v0[f0] * d1[f1]];
            }
        }
    }

    pub fn values_at(&self, x: &Point) -> Vec<f64> {
        let mut v = vec![0.0; self.size];
        let mut g = vec![[0.0; 2]; self.size];
        self.eval_all(x, &mut v, &mut g);
        v
    }

    pub fn eval(&self, idx: usize, x: &Point) -> f64 {
        self.values_at(x)[idx]
    }

    /// Truncated series `sum_n a_n psi_n(x)` at each point.
    pub fn evaluate_density(&self, coeffs: &DVector<f64>, grid: &[Point]) -> Result<Vec<f64>> {
        self.check_len(coeffs)?;
        let mut v = vec![0.0; self.size];
        let mut g = vec![[0.0; 2]; self.size];
        Ok(grid
            .iter()
            .map(|x| {
                self.eval_all(x, &mut v, &mut g);
                v.iter().zip(coeffs.iter()).map(|(p, a)| p * a).sum()
            })
            .collect())
    }

    /// Density on the uniform grid of [`TorusDomain::uniform_grid`], evaluated
    /// axis by axis.
    pub fn density_on_uniform_grid(&self, coeffs: &DVector<f64>, n: usize) -> Result<Vec<f64>> {
        self.check_len(coeffs)?;
        let p = self.per_axis;
        let table = |axis: usize| {
            let mut t = nalgebra::DMatrix::zeros(n, p);
            let mut v = vec![0.0; p];
            let mut d = vec![0.0; p];
            let (lo, len) = (self.domain.lower(axis), self.domain.length(axis));
            for i in 0..n {
                self.axis_values(axis, lo + len * i as f64 / n as f64, &mut v, &mut d);
                for f in 0..p {
                    t[(i, f)] = v[f];
                }
            }
            t
        };
        let t0 = table(0);
        if self.dim() == 1 {
            return Ok((&t0 * coeffs).iter().copied().collect());
        }
        let t1 = table(1);
        // coefficient matrix with rows f0, columns f1
        let a = nalgebra::DMatrix::from_row_slice(p, p, coeffs.as_slice());
        let r = &t0 * a * t1.transpose();
        Ok((0..n)
            .flat_map(|i| (0..n).map(move |k| (i, k)))
            .map(|(i, k)| r[(i, k)])
            .collect())
    }

    /// L2 projection `a_n = int f psi_n` of nodal values.
    pub fn project_function(&self, values: &[f64], quad: &QuadratureRule) -> Result<DVector<f64>> {
        if values.len() != quad.len() {
            return Err(Error::dims("project_function", quad.len(), values.len()));
        }
        if let Some(q) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "projected function at node {:?}",
                quad.nodes[q]
            )));
        }
        let mut a = DVector::zeros(self.size);
        let mut v = vec![0.0; self.size];
        let mut g = vec![[0.0; 2]; self.size];
        for ((x, &w), &f) in quad.nodes.iter().zip(&quad.weights).zip(values) {
            self.eval_all(x, &mut v, &mut g);
            for (ai, vi) in a.iter_mut().zip(&v) {
                *ai += w * f * vi;
            }
        }
        Ok(a)
    }

    /// Coefficients of the uniform probability density `1/|Omega|`.
    pub fn uniform_density(&self) -> DVector<f64> {
        let mut a = DVector::zeros(self.size);
        a[0] = 1.0 / self.domain.volume().sqrt();
        a
    }

    /// Coefficients of `x -> rho(x - shift)`.
    ///
    /// A shift rotates each (cos k, sin k) coefficient pair by `k w s`.
    pub fn translate(&self, coeffs: &DVector<f64>, shift: &Point) -> DVector<f64> {
        let mut out = coeffs.clone();
        let n = self.per_axis;
        for axis in 0..self.dim() {
            let w = self.omega(axis);
            let stride_pairs: Vec<(usize, usize)> = match (self.dim(), axis) {
                (1, _) => vec![(0, 1)],
                (_, 0) => (0..n).map(|f1| (f1, n)).collect(),
                _ => (0..n).map(|f0| (f0 * n, 1)).collect(),
            };
            for k in 1..=self.modes {
                let (s, c) = (k as f64 * w * shift[axis]).sin_cos();
                for &(base, stride) in &stride_pairs {
                    let ic = base + (2 * k - 1) * stride;
                    let is = base + 2 * k * stride;
                    let (a, b) = (out[ic], out[is]);
                    out[ic] = a * c - b * s;
                    out[is] = a * s + b * c;
                }
            }
        }
        out
    }

    pub(crate) fn check_len(&self, coeffs: &DVector<f64>) -> Result<()> {
        if coeffs.len() != self.size {
            return Err(Error::dims("coefficient vector", self.size, coeffs.len()));
        }
        Ok(())
    }
}
