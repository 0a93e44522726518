use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point on the torus. One-dimensional problems only use the first slot.
pub type Point = [f64; 2];

/// Axis-aligned periodic box in one or two dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusDomain {
    dim: usize,
    lower: [f64; 2],
    upper: [f64; 2],
}

impl TorusDomain {
    pub fn new(bounds: &[(f64, f64)]) -> Result<Self> {
        if bounds.is_empty() || bounds.len() > 2 {
            return Err(Error::InvalidDomain(format!(
                "dimension must be 1 or 2, got {}",
                bounds.len()
            )));
        }
        let mut lower = [0.0; 2];
        let mut upper = [0.0; 2];
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::InvalidDomain(format!(
                    "axis {j} has bounds [{lo}, {hi}]"
                )));
            }
            lower[j] = lo;
            upper[j] = hi;
        }
        Ok(Self {
            dim: bounds.len(),
            lower,
            upper,
        })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(&[(lo, hi)])
    }

    /// The square `[lo, hi]^2`.
    pub fn square(lo: f64, hi: f64) -> Result<Self> {
        Self::new(&[(lo, hi), (lo, hi)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self, axis: usize) -> f64 {
        self.lower[axis]
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.upper[axis]
    }

    pub fn length(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    /// Lebesgue measure |Ω|.
    pub fn volume(&self) -> f64 {
        (0..self.dim).map(|j| self.length(j)).product()
    }

    /// Maps a displacement along `axis` to the representative in `[-len/2, len/2)`.
    pub fn wrap_displacement(&self, axis: usize, z: f64) -> f64 {
        let len = self.length(axis);
        z - len * (z / len + 0.5).floor()
    }

    /// Uniform grid of `n` points per axis (left endpoints), row-major in 2D.
    pub fn uniform_grid(&self, n: usize) -> Vec<Point> {
        let coord = |j: usize, i: usize| self.lower[j] + self.length(j) * i as f64 / n as f64;
        match self.dim {
            1 => (0..n).map(|i| [coord(0, i), 0.0]).collect(),
            _ => (0..n)
                .flat_map(|i| (0..n).map(move |k| (i, k)))
                .map(|(i, k)| [coord(0, i), coord(1, k)])
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn rejects_bad_bounds() {
        assert!(TorusDomain::new(&[]).is_err());
        assert!(TorusDomain::new(&[(0.0, 1.0); 3]).is_err());
        assert!(TorusDomain::interval(1.0, 1.0).is_err());
        assert!(TorusDomain::interval(0.0, f64::NAN).is_err());
    }

    #[test]
    fn volume_and_wrap() {
        let d = TorusDomain::square(-PI, PI).unwrap();
        assert!((d.volume() - 4.0 * PI * PI).abs() < 1e-12);
        let d = TorusDomain::interval(0.0, 1.0).unwrap();
        assert!((d.wrap_displacement(0, 0.75) + 0.25).abs() < 1e-15);
        assert!((d.wrap_displacement(0, -0.75) - 0.25).abs() < 1e-15);
        assert_eq!(d.wrap_displacement(0, 0.5), -0.5);
        assert_eq!(d.uniform_grid(4).len(), 4);
    }
}
