//! Adjoint-based open-loop optimal control and receding-horizon (MPC) feedback.
//!
//! Everything is discretise-then-optimise: the cost is the trapezoidal sum of
//! the running cost on the RK4 grid plus the terminal penalty, and the
//! gradient is the exact reverse-mode derivative of that sum through the RK4
//! steps. The control value at grid point k is held over `[t_k, t_{k+1})`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{rk4_step, rk4_step_vjp, step_count, ControlSignal, Trajectory, BLOW_UP_NORM};
use crate::error::{Error, Result};
use crate::spectral::GalerkinOperators;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OcpConfig {
    /// Horizon T.
    pub horizon: f64,
    /// Control penalty gamma.
    pub gamma: f64,
    /// Terminal weight eta.
    pub terminal_weight: f64,
    /// Initial gradient step delta.
    pub step_size: f64,
    /// Stop when the squared L2(0,T) size of the control update falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub dt: f64,
    /// Step halvings allowed per line search.
    pub max_halvings: usize,
    pub step_rule: StepRule,
    /// Smoothing weight c of the Riesz map `(M + c A)^-1` that turns the
    /// gradient into a descent direction; 0 gives the plain L2 gradient.
    /// Larger values damp the high wavenumbers, whose sensitivities grow
    /// like k^2 because the control acts through `div(rho grad u)`.
    pub smoothing: f64,
}

/// How the first trial step of each line search after the first is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Twice the last accepted step, capped at `step_size`.
    Doubling,
    /// Barzilai-Borwein length `<s,s>/<s,y>` from the last two iterates.
    #[default]
    BarzilaiBorwein,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            gamma: 0.01,
            terminal_weight: 1.0,
            step_size: 1.0,
            tol: 1e-10,
            max_iter: 50,
            dt: 0.01,
            max_halvings: 30,
            step_rule: StepRule::default(),
            smoothing: 0.0,
        }
    }
}

impl OcpConfig {
    fn validate(&self) -> Result<()> {
        let checks = [
            ("horizon", self.horizon > 0.0),
            ("gamma", self.gamma > 0.0),
            ("terminal_weight", self.terminal_weight >= 0.0),
            ("step_size", self.step_size > 0.0),
            ("tol", self.tol > 0.0),
            ("dt", self.dt > 0.0),
            ("smoothing", self.smoothing >= 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::param(name, "out of range"));
            }
        }
        Ok(())
    }

    /// Number of RK4 steps and their size.
    pub fn grid(&self) -> (usize, f64) {
        let n = step_count(self.horizon, self.dt);
        (n, self.horizon / n as f64)
    }
}

/// Trapezoidal weights `h/2, h, ..., h, h/2` for `n` steps.
fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    (0..=n)
        .map(|k| if k == 0 || k == n { 0.5 * h } else { h })
        .collect()
}

fn mass_quadratic(ops: &GalerkinOperators, v: &DVector<f64>) -> f64 {
    v.dot(&(&ops.mass * v))
}

fn control_quadratic(ops: &GalerkinOperators, u: &DMatrix<f64>) -> f64 {
    u.column_iter()
        .map(|c| c.dot(&(&ops.mass * c)))
        .sum()
}

/// `sum_k w_k (1/2 e_k' M e_k + gamma/2 sum_j u_kj' M u_kj) + eta e_N' M e_N`.
pub fn total_cost(
    traj: &Trajectory,
    control: &ControlSignal,
    target: &DVector<f64>,
    ocp: &OcpConfig,
    ops: &GalerkinOperators,
) -> Result<f64> {
    let n = traj.states.len();
    if control.values.len() != n {
        return Err(Error::dims("control grid", n, control.values.len()));
    }
    if n < 2 {
        return Err(Error::dims("trajectory length", 2, n));
    }
    let w = trapezoid_weights(n - 1, traj.times[1] - traj.times[0]);
    let mut cost = 0.0;
    for k in 0..n {
        let e = &traj.states[k] - target;
        cost += w[k] * 0.5 * (mass_quadratic(ops, &e) + ocp.gamma * control_quadratic(ops, &control.values[k]));
    }
    let e = traj.last() - target;
    Ok(cost + ocp.terminal_weight * mass_quadratic(ops, &e))
}

/// Forward RK4 solve on the control grid of `ocp`.
pub fn solve_state(
    a0: &DVector<f64>,
    control: &[DMatrix<f64>],
    ocp: &OcpConfig,
    ops: &GalerkinOperators,
) -> Result<Trajectory> {
    let (n, h) = ocp.grid();
    if control.len() != n + 1 {
        return Err(Error::dims("control values", n + 1, control.len()));
    }
    let mut states = Vec::with_capacity(n + 1);
    states.push(a0.clone());
    for k in 0..n {
        let next = rk4_step(ops, &states[k], Some(&control[k]), h);
        let norm = next.norm();
        if !(norm <= BLOW_UP_NORM) {
            return Err(Error::BlowUp {
                time: (k + 1) as f64 * h,
                norm,
            });
        }
        states.push(next);
    }
    Ok(Trajectory {
        times: (0..=n).map(|k| k as f64 * h).collect(),
        states,
    })
}

/// Discrete adjoint states and control sensitivities.
#[derive(Clone, Debug)]
pub struct AdjointTrajectory {
    pub times: Vec<f64>,
    /// `p_k = Phi_a' mu_{k+1}` for k < N and `p_N = 2 eta M (a_N - target)`,
    /// where `mu_k` is the derivative of the cost with respect to `a_k`.
    pub p: Vec<DVector<f64>>,
    /// `Phi_u' mu_{k+1}`: sensitivity of the cost to the control held on step k.
    pub control_sensitivity: Vec<DMatrix<f64>>,
}

/// Backward sweep through the RK4 steps.
pub fn integrate_adjoint(
    state: &Trajectory,
    control: &ControlSignal,
    target: &DVector<f64>,
    ocp: &OcpConfig,
    ops: &GalerkinOperators,
) -> Result<AdjointTrajectory> {
    let n = state.states.len() - 1;
    if control.values.len() != n + 1 {
        return Err(Error::dims("control grid", n + 1, control.values.len()));
    }
    let l = ops.len();
    let d = ops.dim;
    let h = state.times[1] - state.times[0];
    let w = trapezoid_weights(n, h);
    let mut p = vec![DVector::zeros(l); n + 1];
    let mut sens = vec![DMatrix::zeros(l, d); n + 1];
    let e_n = &state.states[n] - target;
    let me_n = &ops.mass * &e_n;
    p[n] = &me_n * (2.0 * ocp.terminal_weight);
    let mut mu = &p[n] + &me_n * w[n];
    for k in (0..n).rev() {
        let (abar, ubar) = rk4_step_vjp(ops, &state.states[k], Some(&control.values[k]), h, &mu);
        if !abar.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("adjoint at step {k}")));
        }
        let e = &state.states[k] - target;
        mu = &abar + (&ops.mass * e) * w[k];
        p[k] = abar;
        sens[k] = ubar;
    }
    Ok(AdjointTrajectory {
        times: state.times.clone(),
        p,
        control_sensitivity: sens,
    })
}

/// Gradient of [`total_cost`] with respect to every control value:
/// `w_k gamma M u_k + Phi_u' mu_{k+1}`.
pub fn reduced_gradient(
    state: &Trajectory,
    adjoint: &AdjointTrajectory,
    control: &ControlSignal,
    ocp: &OcpConfig,
    ops: &GalerkinOperators,
) -> Vec<DMatrix<f64>> {
    let n = state.states.len() - 1;
    let h = state.times[1] - state.times[0];
    let w = trapezoid_weights(n, h);
    (0..=n)
        .map(|k| &ops.mass * &control.values[k] * (w[k] * ocp.gamma) + &adjoint.control_sensitivity[k])
        .collect()
}

#[derive(Clone, Debug)]
pub struct OpenLoopSolution {
    pub control: ControlSignal,
    pub state: Trajectory,
    pub adjoint: AdjointTrajectory,
    pub cost_history: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// L2(0,T) norm of the Riesz gradient at the returned control.
    pub gradient_norm: f64,
    /// Last accepted step length.
    pub last_step: f64,
}

struct Evaluation {
    traj: Trajectory,
    cost: f64,
}

fn evaluate(
    a0: &DVector<f64>,
    u: &[DMatrix<f64>],
    target: &DVector<f64>,
    ocp: &OcpConfig,
    ops: &GalerkinOperators,
    times: &[f64],
) -> Result<Evaluation> {
    let traj = solve_state(a0, u, ocp, ops)?;
    let sig = ControlSignal {
        times: times.to_vec(),
        values: u.to_vec(),
    };
    let cost = total_cost(&traj, &sig, target, ocp, ops)?;
    if !cost.is_finite() {
        return Err(Error::NonFinite("cost".into()));
    }
    Ok(Evaluation { traj, cost })
}

/// Gradient descent on the reduced cost with step-halving backtracking.
///
/// The descent direction is the L2(0,T) Riesz representative of the
/// gradient, `M^-1 grad_k / w_k`. The first trial step is `step_size`; later
/// trial steps follow [`StepRule`]. A trial is accepted as soon as the cost
/// does not increase.
pub fn solve_open_loop(
    a0: &DVector<f64>,
    target: &DVector<f64>,
    ocp: &OcpConfig,
    ops: &GalerkinOperators,
    u_init: Option<&ControlSignal>,
) -> Result<OpenLoopSolution> {
    ocp.validate()?;
    let (n, h) = ocp.grid();
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * h).collect();
    let w = trapezoid_weights(n, h);
    let mut u: Vec<DMatrix<f64>> = match u_init {
        Some(c) if c.values.len() == n + 1 => c.values.clone(),
        Some(c) => return Err(Error::dims("initial control", n + 1, c.values.len())),
        None => vec![DMatrix::zeros(ops.len(), ops.dim); n + 1],
    };
    let mut current = evaluate(a0, &u, target, ocp, ops, &times)?;
    let mut history = vec![current.cost];
    let signal = |u: &[DMatrix<f64>]| ControlSignal {
        times: times.clone(),
        values: u.to_vec(),
    };
    let metric = &ops.mass + &ops.stiffness * ocp.smoothing;
    let riesz = RieszMap::new(&metric)?;
    // weighted inner product on controls induced by the metric
    let inner = |x: &[DMatrix<f64>], y: &[DMatrix<f64>]| -> f64 {
        x.iter()
            .zip(y)
            .zip(&w)
            .map(|((a, b), &wk)| wk * (&metric * a).dot(b))
            .sum()
    };
    let mut trial = ocp.step_size;
    let mut step = ocp.step_size;
    let mut converged = false;
    let mut iterations = 0;
    let mut previous: Option<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> = None;
    let (mut adjoint, mut grad_norm);
    loop {
        let sig = signal(&u);
        adjoint = integrate_adjoint(&current.traj, &sig, target, ocp, ops)?;
        let grad = reduced_gradient(&current.traj, &adjoint, &sig, ocp, ops);
        let dir: Vec<DMatrix<f64>> = grad
            .iter()
            .zip(&w)
            .map(|(g, &wk)| riesz.apply(g) / wk)
            .collect();
        grad_norm = inner(&dir, &dir).max(0.0).sqrt();
        if converged || iterations >= ocp.max_iter {
            break;
        }
        if grad_norm == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        if let Some((u_old, d_old)) = &previous {
            trial = match ocp.step_rule {
                StepRule::Doubling => (2.0 * step).min(ocp.step_size),
                StepRule::BarzilaiBorwein => {
                    let ds: Vec<DMatrix<f64>> = u.iter().zip(u_old).map(|(a, b)| a - b).collect();
                    let dy: Vec<DMatrix<f64>> = dir.iter().zip(d_old).map(|(a, b)| a - b).collect();
                    let sy = inner(&ds, &dy);
                    if sy > 0.0 {
                        inner(&ds, &ds) / sy
                    } else {
                        2.0 * step
                    }
                }
            };
        }
        let mut accepted = None;
        let mut s = trial;
        for _ in 0..=ocp.max_halvings {
            let cand: Vec<DMatrix<f64>> = u.iter().zip(&dir).map(|(uk, dk)| uk - dk * s).collect();
            // a blown-up trial is just a rejected one
            if let Ok(ev) = evaluate(a0, &cand, target, ocp, ops, &times) {
                if ev.cost <= current.cost {
                    accepted = Some((cand, ev));
                    break;
                }
            }
            s *= 0.5;
        }
        let Some((cand, ev)) = accepted else {
            // no decrease at any tried step: stationary to working precision
            converged = grad_norm * grad_norm * s < ocp.tol;
            break;
        };
        step = s;
        let change: Vec<DMatrix<f64>> = cand.iter().zip(&u).map(|(c, o)| c - o).collect();
        converged = inner(&change, &change) < ocp.tol;
        previous = Some((std::mem::replace(&mut u, cand), dir));
        current = ev;
        history.push(current.cost);
    }
    Ok(OpenLoopSolution {
        control: signal(&u),
        state: current.traj,
        adjoint,
        cost_history: history,
        converged,
        iterations,
        gradient_norm: grad_norm,
        last_step: step,
    })
}

struct RieszMap {
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl RieszMap {
    fn new(metric: &DMatrix<f64>) -> Result<Self> {
        let n = metric.nrows();
        if (metric - DMatrix::<f64>::identity(n, n)).amax() <= 1e-10 {
            return Ok(Self { chol: None });
        }
        let chol = metric
            .clone()
            .cholesky()
            .ok_or_else(|| Error::param("smoothing", "control metric is not positive definite"))?;
        Ok(Self { chol: Some(chol) })
    }

    fn apply(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.chol {
            Some(c) => c.solve(g),
            None => g.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Prediction window T'.
    pub window: f64,
    /// Number of feedback updates over the span.
    pub n_steps: usize,
    /// Total controlled time.
    pub span: f64,
}

impl MpcConfig {
    /// Time between feedback updates.
    pub fn sampling(&self) -> f64 {
        self.span / self.n_steps as f64
    }
}

#[derive(Clone, Debug)]
pub struct MpcResult {
    /// Times `h * sampling`, h = 0..=n_steps.
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Control applied on `[times[h], times[h + 1])`.
    pub applied: Vec<DMatrix<f64>>,
    pub open_loop_iterations: Vec<usize>,
    pub open_loop_converged: Vec<bool>,
    pub open_loop_costs: Vec<f64>,
}

impl MpcResult {
    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            times: self.times.clone(),
            states: self.states.clone(),
        }
    }
}

/// Receding-horizon loop without disturbances.
pub fn mpc_loop(
    a0: &DVector<f64>,
    target: &DVector<f64>,
    mpc: &MpcConfig,
    ocp: &OcpConfig,
    ops: &GalerkinOperators,
) -> Result<MpcResult> {
    mpc_loop_with(a0, target, mpc, ocp, ops, |_, _, _| {})
}

/// Receding-horizon loop. At every update the open-loop problem on the window
/// is solved from the current state, its first control value is held for one
/// sampling interval, and the previous solution, shifted by that interval and
/// padded with its last value, warm-starts the next solve. `disturb(h, t, a)`
/// may modify the true state after each interval.
pub fn mpc_loop_with(
    a0: &DVector<f64>,
    target: &DVector<f64>,
    mpc: &MpcConfig,
    ocp: &OcpConfig,
    ops: &GalerkinOperators,
    mut disturb: impl FnMut(usize, f64, &mut DVector<f64>),
) -> Result<MpcResult> {
    if !(mpc.window > 0.0 && mpc.span > 0.0 && mpc.n_steps > 0) {
        return Err(Error::param("mpc", "window, span and n_steps must be positive"));
    }
    let window_ocp = OcpConfig {
        horizon: mpc.window,
        ..ocp.clone()
    };
    let (n, h) = window_ocp.grid();
    let delta = mpc.sampling();
    let sub = step_count(delta, ocp.dt);
    let sub_h = delta / sub as f64;
    let shift = ((delta / h).round() as usize).max(1);

    let mut a = a0.clone();
    let mut warm: Option<ControlSignal> = None;
    let mut out = MpcResult {
        times: vec![0.0],
        states: vec![a.clone()],
        applied: Vec::new(),
        open_loop_iterations: Vec::new(),
        open_loop_converged: Vec::new(),
        open_loop_costs: Vec::new(),
    };
    for step in 0..mpc.n_steps {
        let sol = solve_open_loop(&a, target, &window_ocp, ops, warm.as_ref())?;
        if !sol.converged {
            log::debug!("MPC step {step}: open-loop solve stopped after {} iterations", sol.iterations);
        }
        let u0 = sol.control.values[0].clone();
        for _ in 0..sub {
            a = rk4_step(ops, &a, Some(&u0), sub_h);
        }
        let norm = a.norm();
        if !(norm <= BLOW_UP_NORM) {
            return Err(Error::BlowUp {
                time: (step + 1) as f64 * delta,
                norm,
            });
        }
        let t = (step + 1) as f64 * delta;
        disturb(step, t, &mut a);
        let vals = &sol.control.values;
        let shifted: Vec<DMatrix<f64>> = (0..=n)
            .map(|k| vals[(k + shift).min(n)].clone())
            .collect();
        warm = Some(ControlSignal {
            times: sol.control.times.clone(),
            values: shifted,
        });
        out.times.push(t);
        out.states.push(a.clone());
        out.applied.push(u0);
        out.open_loop_iterations.push(sol.iterations);
        out.open_loop_converged.push(sol.converged);
        out.open_loop_costs.push(*sol.cost_history.last().expect("non-empty"));
    }
    if out.open_loop_converged.iter().any(|c| !c) {
        warn!(
            "{} of {} open-loop solves hit the iteration limit",
            out.open_loop_converged.iter().filter(|c| !**c).count(),
            mpc.n_steps
        );
    }
    Ok(out)
}
