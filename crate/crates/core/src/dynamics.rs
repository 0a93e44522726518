//! Fixed-step RK4 evolution of the Galerkin coefficients.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::spectral::{GalerkinOperators, SpectralBasis};

/// Norm beyond which a state is considered to have blown up.
pub const BLOW_UP_NORM: f64 = 1e8;

/// Piecewise-constant control: `values[k]` (an `L x d` array, column j = `u_j`)
/// is held on `[times[k], times[k + 1])`, the last value from `times[K]` on.
#[derive(Clone, Debug)]
pub struct ControlSignal {
    pub times: Vec<f64>,
    pub values: Vec<DMatrix<f64>>,
}

impl ControlSignal {
    pub fn new(times: Vec<f64>, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::dims("control signal", times.len(), values.len()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("times", "must be strictly increasing"));
        }
        if values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("control values".into()));
        }
        Ok(Self { times, values })
    }

    pub fn zero(times: Vec<f64>, size: usize, dim: usize) -> Self {
        let values = vec![DMatrix::zeros(size, dim); times.len()];
        Self { times, values }
    }

    pub fn value_at(&self, t: f64) -> &DMatrix<f64> {
        // index of the last grid point <= t, with a little slack for round-off
        let k = self
            .times
            .partition_point(|&s| s <= t + 1e-12 * t.abs().max(1.0));
        &self.values[k.saturating_sub(1)]
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            times: self.times.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }
}

/// Stored solution of the evolution.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn last(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory is never empty")
    }

    /// `zeta' a(t)` at each stored time.
    pub fn masses(&self, ops: &GalerkinOperators) -> Vec<f64> {
        self.states.iter().map(|a| ops.integrals.dot(a)).collect()
    }

    /// `max_t |zeta' a(t) - 1|`.
    pub fn mass_drift(&self, ops: &GalerkinOperators) -> f64 {
        self.masses(ops)
            .iter()
            .map(|m| (m - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// L2 distance of the density to a target, `sqrt((a - t)' M (a - t))`.
    pub fn distances(&self, ops: &GalerkinOperators, target: &DVector<f64>) -> Vec<f64> {
        self.states.iter().map(|a| l2_distance(ops, a, target)).collect()
    }

    pub fn min_densities(&self, basis: &SpectralBasis, mesh: usize) -> Result<Vec<f64>> {
        self.states
            .iter()
            .map(|a| {
                Ok(basis
                    .density_on_uniform_grid(a, mesh)?
                    .into_iter()
                    .fold(f64::INFINITY, f64::min))
            })
            .collect()
    }
}

pub fn l2_distance(ops: &GalerkinOperators, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let e = a - b;
    e.dot(&(&ops.mass * &e)).max(0.0).sqrt()
}

/// Right-hand side of the semi-discrete evolution.
pub fn drift(ops: &GalerkinOperators, a: &DVector<f64>, u: Option<&DMatrix<f64>>) -> DVector<f64> {
    ops.drift(a, u)
}

/// One classical RK4 step with the control held fixed.
pub fn rk4_step(
    ops: &GalerkinOperators,
    a: &DVector<f64>,
    u: Option<&DMatrix<f64>>,
    h: f64,
) -> DVector<f64> {
    let k1 = ops.drift(a, u);
    let k2 = ops.drift(&(a + &k1 * (0.5 * h)), u);
    let k3 = ops.drift(&(a + &k2 * (0.5 * h)), u);
    let k4 = ops.drift(&(a + &k3 * h), u);
    a + (k1 + k4) * (h / 6.0) + (k2 + k3) * (h / 3.0)
}

/// Reverse-mode derivative of [`rk4_step`]: given `mu = dJ/da_next`, returns
/// `(dJ/da, dJ/du)`.
pub fn rk4_step_vjp(
    ops: &GalerkinOperators,
    a: &DVector<f64>,
    u: Option<&DMatrix<f64>>,
    h: f64,
    mu: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let k1 = ops.drift(a, u);
    let y2 = a + &k1 * (0.5 * h);
    let k2 = ops.drift(&y2, u);
    let y3 = a + &k2 * (0.5 * h);
    let k3 = ops.drift(&y3, u);
    let y4 = a + &k3 * h;

    let mut abar = mu.clone();
    let g4 = mu * (h / 6.0);
    let (y4b, mut ubar) = ops.drift_vjp(&y4, u, &g4);
    abar += &y4b;
    let g3 = mu * (h / 3.0) + &y4b * h;
    let (y3b, u3) = ops.drift_vjp(&y3, u, &g3);
    abar += &y3b;
    ubar += u3;
    let g2 = mu * (h / 3.0) + &y3b * (0.5 * h);
    let (y2b, u2) = ops.drift_vjp(&y2, u, &g2);
    abar += &y2b;
    ubar += u2;
    let g1 = mu * (h / 6.0) + &y2b * (0.5 * h);
    let (y1b, u1) = ops.drift_vjp(a, u, &g1);
    abar += y1b;
    ubar += u1;
    (abar, ubar)
}

/// Number of fixed steps covering `span` with step at most `dt`.
pub fn step_count(span: f64, dt: f64) -> usize {
    ((span / dt) - 1e-9).ceil().max(1.0) as usize
}

/// Classical RK4 with a fixed step over `t_span`; the control is sampled at
/// the start of each step. On blow-up the step is halved and the run retried
/// once before giving up.
pub fn integrate_forward(
    a0: &DVector<f64>,
    control: Option<&ControlSignal>,
    t_span: (f64, f64),
    dt: f64,
    ops: &GalerkinOperators,
) -> Result<Trajectory> {
    if !(dt > 0.0) || !(t_span.1 > t_span.0) {
        return Err(Error::param("dt", "need dt > 0 and a non-empty time span"));
    }
    if a0.len() != ops.len() {
        return Err(Error::dims("initial state", ops.len(), a0.len()));
    }
    match integrate_fixed(a0, control, t_span, dt, ops) {
        Err(Error::BlowUp { .. }) => integrate_fixed(a0, control, t_span, 0.5 * dt, ops),
        other => other,
    }
}

fn integrate_fixed(
    a0: &DVector<f64>,
    control: Option<&ControlSignal>,
    (t0, t1): (f64, f64),
    dt: f64,
    ops: &GalerkinOperators,
) -> Result<Trajectory> {
    let n = step_count(t1 - t0, dt);
    let h = (t1 - t0) / n as f64;
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    times.push(t0);
    states.push(a0.clone());
    for k in 0..n {
        let t = t0 + k as f64 * h;
        let u = control.map(|c| c.value_at(t));
        let next = rk4_step(ops, &states[k], u, h);
        let norm = next.norm();
        if !(norm <= BLOW_UP_NORM) {
            return Err(Error::BlowUp {
                time: t + h,
                norm,
            });
        }
        times.push(t0 + (k + 1) as f64 * h);
        states.push(next);
    }
    Ok(Trajectory { times, states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{HkbParams, Model};
    use crate::spectral::{assemble_operators, QuadratureRule, TorusDomain};
    use std::f64::consts::PI;

    fn free_ops(beta_inv: f64) -> (SpectralBasis, GalerkinOperators) {
        let d = TorusDomain::interval(0.0, 2.0 * PI).unwrap();
        let b = SpectralBasis::new(d.clone(), 3).unwrap();
        let q = QuadratureRule::gauss_legendre(&d, 24).unwrap();
        let ops = assemble_operators(&b, &q, &Model::free(d), beta_inv).unwrap();
        (b, ops)
    }

    #[test]
    fn heat_mode_decays_at_stiffness_rate() {
        let (b, ops) = free_ops(0.5);
        let mut a = b.uniform_density();
        a[3] = 0.01; // cos 2x, stiffness eigenvalue 4
        let d = ops.drift(&a, None);
        assert!((d[3] + 0.5 * 4.0 * 0.01).abs() < 1e-13);
        let tr = integrate_forward(&a, None, (0.0, 1.0), 0.01, &ops).unwrap();
        let want = 0.01 * (-2.0f64).exp();
        assert!((tr.last()[3] - want).abs() < 1e-9);
        assert!(tr.mass_drift(&ops) < 1e-14);
    }

    #[test]
    fn drift_is_bilinear_in_control() {
        let model = Model::hkb(HkbParams::symmetric(-1.0, 2.0));
        let b = SpectralBasis::new(model.domain.clone(), 3).unwrap();
        let q = QuadratureRule::gauss_legendre(&model.domain, 24).unwrap();
        let ops = assemble_operators(&b, &q, &model, 1.0).unwrap();
        let a = DVector::from_fn(7, |i, _| 0.1 * (i as f64 + 1.0).sin());
        let u = DMatrix::from_fn(7, 1, |i, _| (i as f64).cos());
        let u2 = &u * 2.0;
        let d0 = ops.drift(&a, None);
        let lhs = ops.drift(&a, Some(&u2)) - &d0;
        let rhs = (ops.drift(&a, Some(&u)) - &d0) * 2.0;
        assert!((lhs - rhs).amax() < 1e-13);
    }

    #[test]
    fn control_signal_lookup() {
        let c = ControlSignal::new(
            vec![0.0, 0.5, 1.0],
            vec![
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 2.0),
                DMatrix::from_element(1, 1, 3.0),
            ],
        )
        .unwrap();
        assert_eq!(c.value_at(0.0)[(0, 0)], 1.0);
        assert_eq!(c.value_at(0.49)[(0, 0)], 1.0);
        assert_eq!(c.value_at(0.5)[(0, 0)], 2.0);
        assert_eq!(c.value_at(7.0)[(0, 0)], 3.0);
        assert!(ControlSignal::new(vec![0.0, 0.0], vec![DMatrix::zeros(1, 1); 2]).is_err());
    }

    #[test]
    fn rk4_vjp_matches_finite_differences() {
        let model = Model::hkb(HkbParams::symmetric(-1.0, 3.0));
        let b = SpectralBasis::new(model.domain.clone(), 2).unwrap();
        let q = QuadratureRule::gauss_legendre(&model.domain, 20).unwrap();
        let ops = assemble_operators(&b, &q, &model, 0.8).unwrap();
        let l = ops.len();
        let a = DVector::from_fn(l, |i, _| 0.2 + 0.1 * (3.0 * i as f64).sin());
        let u = DMatrix::from_fn(l, 1, |i, _| 0.3 * (i as f64).cos());
        let mu = DVector::from_fn(l, |i, _| (1.7 * i as f64).sin());
        let h = 0.1;
        let (ab, ub) = rk4_step_vjp(&ops, &a, Some(&u), h, &mu);
        let e = 1e-6;
        for c in 0..l {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[c] += e;
            am[c] -= e;
            let fd = mu.dot(&(rk4_step(&ops, &ap, Some(&u), h) - rk4_step(&ops, &am, Some(&u), h)))
                / (2.0 * e);
            assert!((fd - ab[c]).abs() < 1e-8);
            let mut up = u.clone();
            let mut um = u.clone();
            up[(c, 0)] += e;
            um[(c, 0)] -= e;
            let fd = mu.dot(&(rk4_step(&ops, &a, Some(&up), h) - rk4_step(&ops, &a, Some(&um), h)))
                / (2.0 * e);
            assert!((fd - ub[(c, 0)]).abs() < 1e-8);
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let (b, ops) = free_ops(1.0);
        let a = b.uniform_density();
        // anti-diffusion is impossible here, so fake an exploding start instead
        let big = a * 1e9;
        let err = integrate_forward(&big, None, (0.0, 1.0), 0.1, &ops).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }));
    }

    #[test]
    fn rejects_bad_arguments() {
        let (b, ops) = free_ops(1.0);
        let a = b.uniform_density();
        assert!(integrate_forward(&a, None, (0.0, 1.0), 0.0, &ops).is_err());
        assert!(integrate_forward(&a, None, (1.0, 1.0), 0.1, &ops).is_err());
        assert!(integrate_forward(&DVector::zeros(2), None, (0.0, 1.0), 0.1, &ops).is_err());
    }
}
