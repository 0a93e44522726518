use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use mvsteady::control::{mpc_loop, mpc_loop_with, solve_open_loop, MpcConfig, OcpConfig};
use mvsteady::deflation::{deflation_loop, DeflationConfig, NewtonConfig, NonlinearSystem};
use mvsteady::models::{Model, VonMisesParams};
use mvsteady::spectral::{
    assemble_operators, recommended_points, GalerkinOperators, QuadratureRule, SpectralBasis,
};

/// Von Mises on the 2D torus below the critical temperature, where the
/// uniform state is an unstable steady state.
fn von_mises(l: usize) -> (SpectralBasis, QuadratureRule, GalerkinOperators) {
    let model = Model::von_mises(VonMisesParams::new(1.0));
    let basis = SpectralBasis::new(model.domain.clone(), l).unwrap();
    let quad = QuadratureRule::gauss_legendre(&model.domain, recommended_points(l)).unwrap();
    let ops = assemble_operators(&basis, &quad, &model, 0.3701).unwrap();
    (basis, quad, ops)
}

fn ocp() -> OcpConfig {
    OcpConfig {
        gamma: 0.001,
        terminal_weight: 1000.0,
        dt: 0.01,
        max_iter: 10,
        tol: 1e-14,
        ..Default::default()
    }
}

fn perturbed(basis: &SpectralBasis, eps: f64) -> DVector<f64> {
    let mut a = basis.uniform_density();
    a[1] += eps;
    a[2] -= 0.5 * eps;
    a
}

#[test]
fn mpc_at_target_stays_put() {
    let (basis, _, ops) = von_mises(2);
    let target = basis.uniform_density();
    let mpc = MpcConfig {
        window: 0.1,
        n_steps: 10,
        span: 0.5,
    };
    let res = mpc_loop(&target, &target, &mpc, &ocp(), &ops).unwrap();
    for u in &res.applied {
        assert!(u.amax() < 1e-6, "applied {}", u.amax());
    }
    for a in &res.states {
        assert!((a - &target).amax() < 1e-6);
    }
}

#[test]
fn mpc_reacts_to_a_mid_run_kick() {
    let (basis, _, ops) = von_mises(2);
    let target = basis.uniform_density();
    let start = perturbed(&basis, 0.02);
    let mpc = MpcConfig {
        window: 0.1,
        n_steps: 30,
        span: 0.6,
    };
    let kick_at = 10;
    let kick = |step: usize, _t: f64, a: &mut DVector<f64>| {
        if step == kick_at {
            a[3] += 1e-3;
        }
    };
    let calm = mpc_loop(&start, &target, &mpc, &ocp(), &ops).unwrap();
    let kicked = mpc_loop_with(&start, &target, &mpc, &ocp(), &ops, kick).unwrap();

    // identical up to and including the kicked step, different afterwards
    for h in 0..=kick_at {
        assert_eq!(calm.applied[h], kicked.applied[h]);
    }
    let response: f64 = (kick_at + 1..mpc.n_steps)
        .map(|h| (&calm.applied[h] - &kicked.applied[h]).amax())
        .fold(0.0, f64::max);
    assert!(response > 1e-8, "no response to the kick: {response:e}");

    // the distance recovers to below its pre-kick level within five windows
    let d = kicked.trajectory().distances(&ops, &target);
    let before = d[kick_at];
    let bound = kick_at + 1 + 5 * (mpc.window / mpc.sampling()).round() as usize;
    let recovered = (kick_at + 1..=bound.min(mpc.n_steps)).any(|h| d[h] < before);
    assert!(recovered, "pre-kick {before:e}, after {:?}", &d[kick_at + 1..]);
}

#[test]
fn larger_penalty_gives_smaller_control() {
    let (basis, _, ops) = von_mises(2);
    let target = basis.uniform_density();
    let a0 = perturbed(&basis, 0.02);
    let norm = |gamma: f64| {
        let cfg = OcpConfig {
            horizon: 0.2,
            gamma,
            terminal_weight: 10.0,
            dt: 0.01,
            max_iter: 200,
            tol: 1e-20,
            ..Default::default()
        };
        let sol = solve_open_loop(&a0, &target, &cfg, &ops, None).unwrap();
        sol.control.values.iter().map(DMatrix::norm_squared).sum::<f64>().sqrt()
    };
    let norms: Vec<f64> = [0.01, 0.1, 1.0].iter().map(|&g| norm(g)).collect();
    assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
}

/// `F_i(x) = x' Q_i x + P_i x + c_i` on `R^3`.
#[derive(Debug)]
struct Quadratic3 {
    q: [[[f64; 3]; 3]; 3],
    p: [[f64; 3]; 3],
    c: [f64; 3],
}

impl NonlinearSystem for Quadratic3 {
    fn unknowns(&self) -> usize {
        3
    }
    fn residual(&self, a: &DVector<f64>) -> mvsteady::Result<DVector<f64>> {
        Ok(DVector::from_fn(3, |i, _| {
            let mut f = self.c[i];
            for j in 0..3 {
                f += self.p[i][j] * a[j];
                for k in 0..3 {
                    f += self.q[i][j][k] * a[j] * a[k];
                }
            }
            f
        }))
    }
    fn jacobian(&self, a: &DVector<f64>) -> mvsteady::Result<DMatrix<f64>> {
        Ok(DMatrix::from_fn(3, 3, |i, j| {
            self.p[i][j] + (0..3).map(|k| (self.q[i][j][k] + self.q[i][k][j]) * a[k]).sum::<f64>()
        }))
    }
}

fn quadratic3() -> impl Strategy<Value = Quadratic3> {
    let coef = || -1.0f64..1.0;
    (
        prop::array::uniform3(prop::array::uniform3(prop::array::uniform3(coef()))),
        prop::array::uniform3(prop::array::uniform3(coef())),
        prop::array::uniform3(coef()),
    )
        .prop_map(|(q, p, c)| Quadratic3 { q, p, c })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // Whatever deflation returns is a genuine root, and never the same one twice.
    #[test]
    fn deflation_returns_distinct_true_roots(sys in quadratic3(), start in prop::array::uniform3(-1.0f64..1.0)) {
        let dcfg = DeflationConfig { power: 2.0, shift: 1.0, max_roots: 16, ..Default::default() };
        let ncfg = NewtonConfig { max_iter: 200, ..Default::default() };
        let run = deflation_loop(&sys, &DVector::from_column_slice(&start), &dcfg, &ncfg, 1e-9).unwrap();
        for (i, r) in run.roots.iter().enumerate() {
            prop_assert!(sys.residual(&r.coeffs).unwrap().norm() <= 1e-9);
            for other in &run.roots[..i] {
                prop_assert!((&r.coeffs - &other.coeffs).amax() > 1e-8);
            }
        }
    }
}
