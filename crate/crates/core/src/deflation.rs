//! Deflated Newton iteration: find every root of the constrained stationary
//! system reachable from one initial guess.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::{OrderParameter, Stability};
use crate::error::Result;
use crate::spectral::{GalerkinOperators, SpectralBasis};

/// A square or overdetermined system F: R^n -> R^m with m >= n.
pub trait NonlinearSystem {
    fn unknowns(&self) -> usize;
    fn residual(&self, a: &DVector<f64>) -> Result<DVector<f64>>;
    fn jacobian(&self, a: &DVector<f64>) -> Result<DMatrix<f64>>;
}

impl NonlinearSystem for GalerkinOperators {
    fn unknowns(&self) -> usize {
        self.len()
    }
    fn residual(&self, a: &DVector<f64>) -> Result<DVector<f64>> {
        GalerkinOperators::residual(self, a)
    }
    fn jacobian(&self, a: &DVector<f64>) -> Result<DMatrix<f64>> {
        GalerkinOperators::jacobian(self, a)
    }
}

/// Norm used in the deflation factor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeflationNorm {
    /// Euclidean norm of the coefficient difference (the L2 norm of the
    /// density difference for an orthonormal basis).
    #[default]
    Euclidean,
    /// `sqrt(d' M d)` for a symmetric positive definite weight matrix.
    Weighted(#[serde(skip)] DMatrix<f64>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeflationConfig {
    /// Exponent p > 0.
    pub power: f64,
    /// Shift xi >= 0.
    pub shift: f64,
    #[serde(skip)]
    pub norm: DeflationNorm,
    pub max_roots: usize,
    pub divergence_cap: f64,
}

impl Default for DeflationConfig {
    fn default() -> Self {
        Self {
            power: 2.0,
            shift: 1.0,
            norm: DeflationNorm::Euclidean,
            max_roots: 32,
            divergence_cap: 1e8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NewtonConfig {
    pub step_tol: f64,
    pub max_iter: usize,
    /// Singular values below `rcond * sigma_max` are discarded in the
    /// least-squares step.
    pub rcond: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            step_tol: 1e-10,
            max_iter: 1000,
            rcond: 1e-12,
        }
    }
}

/// The shifted deflation factor `s(a) = 1/eta(a) + xi`, with
/// `eta(a) = prod_i ||a - r_i||^p`.
#[derive(Clone, Debug)]
pub struct Deflation<'a> {
    cfg: &'a DeflationConfig,
    roots: Vec<DVector<f64>>,
}

impl<'a> Deflation<'a> {
    pub fn new(cfg: &'a DeflationConfig) -> Self {
        Self {
            cfg,
            roots: Vec::new(),
        }
    }

    pub fn with_roots(cfg: &'a DeflationConfig, roots: Vec<DVector<f64>>) -> Self {
        Self { cfg, roots }
    }

    pub fn push(&mut self, root: DVector<f64>) {
        self.roots.push(root);
    }

    pub fn roots(&self) -> &[DVector<f64>] {
        &self.roots
    }

    fn norm_and_dual(&self, d: &DVector<f64>) -> (f64, DVector<f64>) {
        match &self.cfg.norm {
            DeflationNorm::Euclidean => (d.norm(), d.clone()),
            DeflationNorm::Weighted(m) => {
                let md = m * d;
                (d.dot(&md).max(0.0).sqrt(), md)
            }
        }
    }

    /// Returns `(s, grad s)`, or `None` when `a` coincides with a known root.
    pub fn factor(&self, a: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let p = self.cfg.power;
        let mut log_eta = 0.0;
        let mut dlog = DVector::zeros(a.len());
        for r in &self.roots {
            let d = a - r;
            let (n, dual) = self.norm_and_dual(&d);
            if n <= f64::MIN_POSITIVE {
                return None;
            }
            log_eta += p * n.ln();
            dlog += dual * (p / (n * n));
        }
        let inv_eta = (-log_eta).exp();
        if !inv_eta.is_finite() {
            return None;
        }
        // grad(1/eta) = -(1/eta) grad(log eta)
        Some((inv_eta + self.cfg.shift, dlog * (-inv_eta)))
    }

    /// Deflated residual `G = s F`.
    pub fn residual<S: NonlinearSystem + ?Sized>(
        &self,
        sys: &S,
        a: &DVector<f64>,
    ) -> Result<Option<DVector<f64>>> {
        let f = sys.residual(a)?;
        Ok(self.factor(a).map(|(s, _)| f * s))
    }

    /// Deflated residual and its Jacobian `G' = s F' + F (grad s)'`.
    pub fn residual_and_jacobian<S: NonlinearSystem + ?Sized>(
        &self,
        sys: &S,
        a: &DVector<f64>,
    ) -> Result<Option<(DVector<f64>, DMatrix<f64>)>> {
        let Some((s, ds)) = self.factor(a) else {
            return Ok(None);
        };
        let f = sys.residual(a)?;
        let mut j = sys.jacobian(a)? * s;
        j.ger(1.0, &f, &ds, 1.0);
        Ok(Some((f * s, j)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NewtonStatus {
    Converged,
    MaxIterations,
    Diverged,
    /// Linear solve failed or the iterate hit a deflated root.
    Singular,
    NonFinite,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NewtonRecord {
    pub step_norm: f64,
    pub residual_norm: f64,
}

#[derive(Clone, Debug)]
pub struct NewtonOutcome {
    pub status: NewtonStatus,
    pub point: DVector<f64>,
    pub iterations: usize,
    pub history: Vec<NewtonRecord>,
}

/// Minimum-norm least-squares solution of `j x = rhs`.
pub fn least_squares(j: DMatrix<f64>, rhs: &DVector<f64>, rcond: f64) -> Option<DVector<f64>> {
    let svd = j.svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) || !smax.is_finite() {
        return None;
    }
    svd.solve(rhs, rcond * smax).ok()
}

/// Newton iteration on the deflated system from `a0`.
pub fn newton_solve<S: NonlinearSystem + ?Sized>(
    a0: &DVector<f64>,
    sys: &S,
    deflation: &Deflation<'_>,
    ncfg: &NewtonConfig,
) -> Result<NewtonOutcome> {
    let mut a = a0.clone();
    let mut history = Vec::new();
    let finish = |status, a: DVector<f64>, history: Vec<NewtonRecord>| NewtonOutcome {
        status,
        point: a,
        iterations: history.len(),
        history,
    };
    for _ in 0..ncfg.max_iter {
        let Some((g, jac)) = deflation.residual_and_jacobian(sys, &a)? else {
            return Ok(finish(NewtonStatus::Singular, a, history));
        };
        if g.iter().any(|x| !x.is_finite()) || jac.iter().any(|x| !x.is_finite()) {
            return Ok(finish(NewtonStatus::NonFinite, a, history));
        }
        let Some(step) = least_squares(jac, &g, ncfg.rcond) else {
            return Ok(finish(NewtonStatus::Singular, a, history));
        };
        a -= &step;
        let step_norm = step.norm();
        history.push(NewtonRecord {
            step_norm,
            residual_norm: g.norm(),
        });
        if !a.iter().all(|x| x.is_finite()) {
            return Ok(finish(NewtonStatus::NonFinite, a, history));
        }
        if a.norm() > deflation.cfg.divergence_cap {
            return Ok(finish(NewtonStatus::Diverged, a, history));
        }
        if step_norm <= ncfg.step_tol {
            return Ok(finish(NewtonStatus::Converged, a, history));
        }
    }
    Ok(finish(NewtonStatus::MaxIterations, a, history))
}

/// One root found by the deflation loop.
#[derive(Clone, Debug)]
pub struct FoundRoot {
    pub coeffs: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Why the deflation loop stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// Newton failed from the initial guess (the normal way to finish).
    SolverFailed(NewtonStatus),
    /// Newton converged to a point whose undeflated residual is too large.
    Rejected { residual_norm: f64 },
    MaxRoots,
}

#[derive(Clone, Debug)]
pub struct DeflationRun {
    pub roots: Vec<FoundRoot>,
    pub termination: Termination,
}

/// Repeated deflated solves from the same initial guess until a solve fails.
///
/// Converged points are polished with a few undeflated Newton steps and
/// accepted when `||F|| <= accept_tol`.
pub fn deflation_loop<S: NonlinearSystem + ?Sized>(
    sys: &S,
    a0: &DVector<f64>,
    dcfg: &DeflationConfig,
    ncfg: &NewtonConfig,
    accept_tol: f64,
) -> Result<DeflationRun> {
    let mut deflation = Deflation::new(dcfg);
    let mut roots = Vec::new();
    let termination = loop {
        if roots.len() >= dcfg.max_roots {
            break Termination::MaxRoots;
        }
        let out = newton_solve(a0, sys, &deflation, ncfg)?;
        if out.status != NewtonStatus::Converged {
            break Termination::SolverFailed(out.status);
        }
        let (coeffs, residual_norm) = polish(sys, out.point, ncfg)?;
        if !(residual_norm <= accept_tol) {
            break Termination::Rejected { residual_norm };
        }
        deflation.push(coeffs.clone());
        roots.push(FoundRoot {
            coeffs,
            residual_norm,
            iterations: out.iterations,
        });
    };
    Ok(DeflationRun { roots, termination })
}

fn polish<S: NonlinearSystem + ?Sized>(
    sys: &S,
    mut a: DVector<f64>,
    ncfg: &NewtonConfig,
) -> Result<(DVector<f64>, f64)> {
    let mut r = sys.residual(&a)?.norm();
    for _ in 0..3 {
        let f = sys.residual(&a)?;
        let Some(step) = least_squares(sys.jacobian(&a)?, &f, ncfg.rcond) else {
            break;
        };
        let cand = &a - step;
        let rc = sys.residual(&cand)?.norm();
        if rc < r {
            a = cand;
            r = rc;
        } else {
            break;
        }
    }
    Ok((a, r))
}

/// Post-processing thresholds for [`find_all_steady_states`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub accept_tol: f64,
    pub dedup_tol: f64,
    pub pos_tol: f64,
    /// Positivity mesh points per axis.
    pub mesh: usize,
    /// L2 distance below which two roots count as translates of each other.
    pub translation_tol: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            accept_tol: 1e-9,
            dedup_tol: 1e-6,
            pos_tol: 1e-8,
            mesh: 512,
            translation_tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteadyState {
    pub coeffs: Vec<f64>,
    pub residual_norm: f64,
    pub min_density: f64,
    pub positive: bool,
    pub newton_iterations: usize,
    pub free_energy: Option<f64>,
    pub stability: Stability,
    pub order_params: Option<OrderParameter>,
    /// Index of an earlier entry this one is a translate of.
    pub translation_of: Option<usize>,
}

impl SteadyState {
    pub fn coefficients(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.coeffs)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteadyStateSet {
    pub entries: Vec<SteadyState>,
    pub termination: Termination,
}

impl SteadyStateSet {
    pub fn positive(&self) -> impl Iterator<Item = &SteadyState> {
        self.entries.iter().filter(|e| e.positive)
    }

    pub fn positive_count(&self) -> usize {
        self.positive().count()
    }
}

/// Deflation loop followed by positivity flagging, deduplication and
/// translation tagging.
pub fn find_all_steady_states(
    ops: &GalerkinOperators,
    basis: &SpectralBasis,
    a0: &DVector<f64>,
    dcfg: &DeflationConfig,
    ncfg: &NewtonConfig,
    fcfg: &FilterConfig,
) -> Result<SteadyStateSet> {
    basis.check_len(a0)?;
    let run = deflation_loop(ops, a0, dcfg, ncfg, fcfg.accept_tol)?;
    let mut entries: Vec<SteadyState> = Vec::new();
    let mut kept: Vec<DVector<f64>> = Vec::new();
    for root in run.roots {
        if kept
            .iter()
            .any(|k| (k - &root.coeffs).amax() <= fcfg.dedup_tol)
        {
            continue;
        }
        let grid = basis.density_on_uniform_grid(&root.coeffs, fcfg.mesh)?;
        let min_density = grid.iter().copied().fold(f64::INFINITY, f64::min);
        let translation_of = kept
            .iter()
            .position(|k| translation_distance(basis, k, &root.coeffs).0 <= fcfg.translation_tol);
        entries.push(SteadyState {
            coeffs: root.coeffs.iter().copied().collect(),
            residual_norm: root.residual_norm,
            min_density,
            positive: min_density >= -fcfg.pos_tol,
            newton_iterations: root.iterations,
            free_energy: None,
            stability: Stability::Unknown,
            order_params: None,
            translation_of,
        });
        kept.push(root.coeffs);
    }
    Ok(SteadyStateSet {
        entries,
        termination: run.termination,
    })
}

/// Smallest L2 distance between `b` and a translate of `a`, with the shift
/// achieving it. Coarse scan over shifts followed by local zooming.
pub fn translation_distance(
    basis: &SpectralBasis,
    a: &DVector<f64>,
    b: &DVector<f64>,
) -> (f64, [f64; 2]) {
    let d = basis.domain();
    let dim = d.dim();
    let coarse = if dim == 1 { 256 } else { 48 };
    let dist = |s: [f64; 2]| (basis.translate(a, &s) - b).norm();
    let mut best = (f64::INFINITY, [0.0; 2]);
    let mut center = [0.0; 2];
    let mut width = [d.length(0), if dim == 2 { d.length(1) } else { 0.0 }];
    let mut n = coarse;
    for _ in 0..6 {
        let h = [width[0] / n as f64, width[1] / n as f64];
        let n1 = if dim == 2 { n } else { 1 };
        for i in 0..n {
            for k in 0..n1 {
                let s = [
                    center[0] - 0.5 * width[0] + (i as f64 + 0.5) * h[0],
                    center[1] - 0.5 * width[1] + (k as f64 + 0.5) * h[1],
                ];
                let v = dist(s);
                if v < best.0 {
                    best = (v, s);
                }
            }
        }
        center = best.1;
        width = [4.0 * h[0], 4.0 * h[1]];
        n = 16;
    }
    best
}
