//! Independent checks on steady states: free energy, the Kirkwood-Monroe
//! fixed-point map, the HKB self-consistency map, log-density regressions and
//! stability classification.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deflation::{least_squares, SteadyStateSet};
use crate::dynamics::{l2_distance, rk4_step, step_count};
use crate::error::{Error, Result};
use crate::models::{HkbParams, Model};
use crate::spectral::{GalerkinOperators, NodalBasis, Point, QuadratureRule, SpectralBasis};

/// Floor applied to densities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Model data tabulated on a quadrature rule.
#[derive(Clone, Debug)]
pub struct NodalModel {
    pub weights: DVector<f64>,
    pub nodes: Vec<Point>,
    /// Basis values, `Nq x L`.
    pub psi: DMatrix<f64>,
    /// V at the nodes.
    pub confinement: DVector<f64>,
    /// `W(x_q, x_r)`, `Nq x Nq`.
    pub kernel: DMatrix<f64>,
}

impl NodalModel {
    pub fn new(model: &Model, basis: &SpectralBasis, quad: &QuadratureRule) -> Result<Self> {
        let nq = quad.len();
        let psi = NodalBasis::new(basis, quad).values;
        let confinement = DVector::from_iterator(nq, quad.nodes.iter().map(|x| model.confinement(x)));
        let kernel = DMatrix::from_fn(nq, nq, |q, r| model.interaction(&quad.nodes[q], &quad.nodes[r]));
        if confinement.iter().chain(kernel.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("potentials on quadrature nodes".into()));
        }
        Ok(Self {
            weights: DVector::from_column_slice(&quad.weights),
            nodes: quad.nodes.clone(),
            psi,
            confinement,
            kernel,
        })
    }

    pub fn density(&self, a: &DVector<f64>) -> DVector<f64> {
        &self.psi * a
    }

    /// `(W * rho)(x_q)` by quadrature.
    pub fn convolve(&self, rho: &DVector<f64>) -> DVector<f64> {
        &self.kernel * rho.component_mul(&self.weights)
    }

    pub fn integrate(&self, f: &DVector<f64>) -> f64 {
        f.dot(&self.weights)
    }

    fn l2_norm(&self, f: &DVector<f64>) -> f64 {
        self.integrate(&f.component_mul(f)).max(0.0).sqrt()
    }
}

/// Entropy, confinement and interaction contributions to the free energy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FreeEnergyReport {
    pub entropy: f64,
    pub confinement: f64,
    pub interaction: f64,
    pub total: f64,
    /// Fraction of nodes where the density was raised to [`LOG_FLOOR`].
    pub clamped_fraction: f64,
    /// More than 1% of the nodes were clamped.
    pub heavy_clamping: bool,
}

/// `beta_inv int rho log rho + int V rho + 1/2 int int W rho rho`.
pub fn free_energy(a: &DVector<f64>, nodal: &NodalModel, beta_inv: f64) -> FreeEnergyReport {
    let rho = nodal.density(a);
    free_energy_of_density(&rho, nodal, beta_inv)
}

pub fn free_energy_of_density(rho: &DVector<f64>, nodal: &NodalModel, beta_inv: f64) -> FreeEnergyReport {
    let mut clamped = 0usize;
    let ent = rho.map(|r| {
        if r < LOG_FLOOR {
            clamped += 1;
        }
        let r = r.max(LOG_FLOOR);
        r * r.ln()
    });
    let entropy = beta_inv * nodal.integrate(&ent);
    let confinement = nodal.integrate(&nodal.confinement.component_mul(rho));
    let interaction = 0.5 * nodal.integrate(&nodal.convolve(rho).component_mul(rho));
    let clamped_fraction = clamped as f64 / rho.len() as f64;
    FreeEnergyReport {
        entropy,
        confinement,
        interaction,
        total: entropy + confinement + interaction,
        clamped_fraction,
        heavy_clamping: clamped_fraction > 0.01,
    }
}

/// `Z^-1 exp(-beta (V + W * rho))` on the nodes.
pub fn kirkwood_monroe_map(rho: &DVector<f64>, nodal: &NodalModel, beta_inv: f64) -> Result<DVector<f64>> {
    let expo = -(&nodal.confinement + nodal.convolve(rho)) / beta_inv;
    let top = expo.max();
    if !top.is_finite() {
        return Err(Error::Overflow {
            context: "Kirkwood-Monroe exponent".into(),
            max_exponent: top,
        });
    }
    let e = expo.map(|x| (x - top).exp());
    let z = nodal.integrate(&e);
    Ok(e / z)
}

/// `||rho - KM(rho)||_L2` for the density with coefficients `a`.
pub fn kirkwood_monroe_residual(a: &DVector<f64>, nodal: &NodalModel, beta_inv: f64) -> Result<f64> {
    let rho = nodal.density(a);
    let hat = kirkwood_monroe_map(&rho, nodal, beta_inv)?;
    Ok(nodal.l2_norm(&(rho - hat)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedPointConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation weight in `(0, 1]`; 1 is the plain iteration.
    pub damping: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 2000,
            damping: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FixedPointResult {
    pub density: DVector<f64>,
    pub iterations: usize,
    pub increment: f64,
    pub converged: bool,
}

/// Iterates `rho <- KM(rho)` on the quadrature nodes.
pub fn fixed_point_iterate(
    rho0: &DVector<f64>,
    nodal: &NodalModel,
    beta_inv: f64,
    cfg: &FixedPointConfig,
) -> Result<FixedPointResult> {
    if rho0.len() != nodal.weights.len() {
        return Err(Error::dims("initial density", nodal.weights.len(), rho0.len()));
    }
    let mut rho = rho0.clone();
    let mut increment = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        let next = kirkwood_monroe_map(&rho, nodal, beta_inv)?;
        let next = &rho * (1.0 - cfg.damping) + next * cfg.damping;
        increment = nodal.l2_norm(&(&next - &rho));
        rho = next;
        if increment <= cfg.tol {
            return Ok(FixedPointResult {
                density: rho,
                iterations: it,
                increment,
                converged: true,
            });
        }
    }
    Ok(FixedPointResult {
        density: rho,
        iterations: cfg.max_iter,
        increment,
        converged: false,
    })
}

/// HKB order parameter and regression intercept.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderParameter {
    pub m1: f64,
    pub m2: f64,
    /// Regression intercept, `-log Z`.
    pub neg_log_z: f64,
}

/// `R(m) = (int cos x rho_m, int sin x rho_m)` with
/// `rho_m ~ exp(-beta (V - kappa m.(cos, sin)))` normalised by quadrature.
/// `quad` must be a 1D rule on `[0, 2 pi]`.
pub fn self_consistency_map(m: [f64; 2], params: &HkbParams, beta_inv: f64, quad: &QuadratureRule) -> [f64; 2] {
    let beta = 1.0 / beta_inv;
    let ex: Vec<f64> = quad
        .nodes
        .iter()
        .map(|x| params.stationary_exponent(beta, x[0], m))
        .collect();
    let top = ex.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut c, mut s) = (0.0, 0.0, 0.0);
    for ((x, w), e) in quad.nodes.iter().zip(&quad.weights).zip(&ex) {
        let r = w * (e - top).exp();
        z += r;
        c += r * x[0].cos();
        s += r * x[0].sin();
    }
    [c / z, s / z]
}

/// Fixed points of `m1 -> R1(m1, 0)` on `[-2, 2]`, located by sign changes on
/// a uniform grid and refined by bisection.
pub fn symmetric_fixed_points(params: &HkbParams, beta_inv: f64, quad: &QuadratureRule, grid: usize) -> Vec<f64> {
    let g = |m: f64| self_consistency_map([m, 0.0], params, beta_inv, quad)[0] - m;
    let xs: Vec<f64> = (0..=grid).map(|i| -2.0 + 4.0 * i as f64 / grid as f64).collect();
    let mut roots = Vec::new();
    for w in xs.windows(2) {
        let (mut lo, mut hi) = (w[0], w[1]);
        let (mut flo, fhi) = (g(lo), g(hi));
        if flo == 0.0 {
            roots.push(lo);
            continue;
        }
        if flo * fhi > 0.0 {
            continue;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let fm = g(mid);
            if fm == 0.0 || hi - lo < 1e-15 {
                lo = mid;
                hi = mid;
                break;
            }
            if flo * fm < 0.0 {
                hi = mid;
            } else {
                lo = mid;
                flo = fm;
            }
        }
        roots.push(0.5 * (lo + hi));
    }
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    roots
}

/// Least-squares fit of `log rho` (plus an optional offset) against feature
/// functions on the uniform grid with `mesh` points per axis. The first fitted
/// coefficient is the intercept.
pub fn log_density_regression(
    a: &DVector<f64>,
    basis: &SpectralBasis,
    offset: &dyn Fn(&Point) -> f64,
    features: &[&dyn Fn(&Point) -> f64],
    mesh: usize,
) -> Result<Vec<f64>> {
    let rho = basis.density_on_uniform_grid(a, mesh)?;
    let min = rho.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-8 {
        return Err(Error::NonPositiveDensity { min });
    }
    let grid = basis.domain().uniform_grid(mesh);
    let n = grid.len();
    let mut design = DMatrix::zeros(n, features.len() + 1);
    let mut y = DVector::zeros(n);
    for (i, x) in grid.iter().enumerate() {
        design[(i, 0)] = 1.0;
        for (j, f) in features.iter().enumerate() {
            design[(i, j + 1)] = f(x);
        }
        y[i] = rho[i].max(LOG_FLOOR).ln() + offset(x);
    }
    let coef = least_squares(design, &y, 1e-12)
        .ok_or_else(|| Error::NonFinite("log-density regression".into()))?;
    Ok(coef.iter().copied().collect())
}

/// LSS estimate of the HKB order parameter: regress `log rho + beta V` on
/// `[1, beta kappa cos x, beta kappa sin x]` over 512 uniform points.
pub fn estimate_order_parameters(
    a: &DVector<f64>,
    basis: &SpectralBasis,
    params: &HkbParams,
    beta_inv: f64,
) -> Result<OrderParameter> {
    let beta = 1.0 / beta_inv;
    let bk = beta * params.kappa;
    let cosf = move |x: &Point| bk * x[0].cos();
    let sinf = move |x: &Point| bk * x[0].sin();
    let off = move |x: &Point| beta * params.confinement(x[0]);
    let c = log_density_regression(a, basis, &off, &[&cosf, &sinf], 512)?;
    Ok(OrderParameter {
        m1: c[1],
        m2: c[2],
        neg_log_z: c[0],
    })
}

/// Exponent of the O(2) stationary profile: slope of `log rho` against
/// `cos 2 pi x` (domain `[0, 1]`).
pub fn o2_exponent(a: &DVector<f64>, basis: &SpectralBasis) -> Result<f64> {
    let cosf = |x: &Point| (2.0 * PI * x[0]).cos();
    let c = log_density_regression(a, basis, &|_| 0.0, &[&cosf], 512)?;
    Ok(c[1])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stability {
    Stable,
    Unstable,
    #[default]
    Unknown,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityConfig {
    /// Evolution horizon of the perturbation test.
    pub horizon: f64,
    pub dt: f64,
    /// L2 size of the initial perturbation.
    pub perturbation: f64,
    /// Growth (or decay) factor that settles the classification.
    pub factor: f64,
    /// Relative tolerance for "equal to the lowest free energy".
    pub energy_tol: f64,
    pub seed: u64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            horizon: 40.0,
            dt: 0.05,
            perturbation: 1e-3,
            factor: 10.0,
            energy_tol: 1e-8,
            seed: 0,
        }
    }
}

/// Outcome of evolving a perturbed steady state.
#[derive(Clone, Debug)]
pub struct PerturbationTest {
    pub initial: f64,
    pub max: f64,
    pub last: f64,
    pub stability: Stability,
}

/// Random mass-preserving perturbation of L2 size `eps`, orthogonal to the
/// constant mode and to the infinitesimal translations of `a`.
pub fn perturbation_direction(a: &DVector<f64>, basis: &SpectralBasis, eps: f64, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = a.len();
    let mut v = DVector::from_fn(l, |i, _| if i == 0 { 0.0 } else { rng.random_range(-1.0..1.0) });
    let mut dirs: Vec<DVector<f64>> = Vec::new();
    let h = 1e-6;
    for j in 0..basis.dim() {
        let mut s = [0.0; 2];
        s[j] = h;
        let mut sm = [0.0; 2];
        sm[j] = -h;
        let t = (basis.translate(a, &s) - basis.translate(a, &sm)) / (2.0 * h);
        // Gram-Schmidt against the previous generators
        let mut t = t;
        for d in &dirs {
            t -= d * d.dot(&t);
        }
        if t.norm() > 1e-10 {
            dirs.push(t.normalize());
        }
    }
    for d in &dirs {
        v -= d * d.dot(&v);
    }
    v[0] = 0.0;
    v.normalize() * eps
}

/// Evolves `a + delta` without control and compares the distance to `a`.
pub fn perturbation_test(
    a: &DVector<f64>,
    ops: &GalerkinOperators,
    basis: &SpectralBasis,
    cfg: &StabilityConfig,
) -> Result<PerturbationTest> {
    let delta = perturbation_direction(a, basis, cfg.perturbation, cfg.seed);
    let mut x = a + &delta;
    let initial = l2_distance(ops, &x, a);
    let n = step_count(cfg.horizon, cfg.dt);
    let h = cfg.horizon / n as f64;
    let mut max: f64 = initial;
    let mut last = initial;
    for _ in 0..n {
        x = rk4_step(ops, &x, None, h);
        last = l2_distance(ops, &x, a);
        if !last.is_finite() {
            break;
        }
        max = max.max(last);
        if max > cfg.factor * initial {
            break;
        }
    }
    let stability = if !last.is_finite() || max > cfg.factor * initial {
        Stability::Unstable
    } else if last < initial / cfg.factor {
        Stability::Stable
    } else {
        Stability::Unknown
    };
    Ok(PerturbationTest {
        initial,
        max,
        last,
        stability,
    })
}

/// Classifies entry `index` of `set`. Entries whose free energy equals the
/// lowest among the positive entries are stable; everything else is decided
/// by [`perturbation_test`]. Free energies must already be filled in.
pub fn classify_stability(
    index: usize,
    set: &SteadyStateSet,
    ops: &GalerkinOperators,
    basis: &SpectralBasis,
    cfg: &StabilityConfig,
) -> Result<Stability> {
    let entry = &set.entries[index];
    if !entry.positive {
        return Ok(Stability::Unknown);
    }
    let lowest = set
        .positive()
        .filter_map(|e| e.free_energy)
        .fold(f64::INFINITY, f64::min);
    if let Some(f) = entry.free_energy {
        if f <= lowest + cfg.energy_tol * lowest.abs().max(1.0) {
            return Ok(Stability::Stable);
        }
    }
    Ok(perturbation_test(&entry.coefficients(), ops, basis, cfg)?.stability)
}

/// Fills in free energies, HKB order parameters and stability classes for
/// every positive entry. Free energies are computed first because the
/// classification ranks by them.
pub fn annotate_steady_states(
    set: &mut SteadyStateSet,
    model: &Model,
    ops: &GalerkinOperators,
    basis: &SpectralBasis,
    quad: &QuadratureRule,
    cfg: &StabilityConfig,
) -> Result<()> {
    let nodal = NodalModel::new(model, basis, quad)?;
    for e in set.entries.iter_mut().filter(|e| e.positive) {
        let a = e.coefficients();
        e.free_energy = Some(free_energy(&a, &nodal, ops.beta_inv).total);
        if let Some(p) = model.hkb_params() {
            e.order_params = estimate_order_parameters(&a, basis, p, ops.beta_inv).ok();
        }
    }
    for i in 0..set.entries.len() {
        let s = classify_stability(i, set, ops, basis, cfg)?;
        set.entries[i].stability = s;
    }
    Ok(())
}

/// The three characterisations of a steady state evaluated side by side.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StationarityReport {
    pub residual_norm: f64,
    pub kirkwood_monroe_residual: f64,
    /// Largest |dF/ds| over random mass-preserving directions.
    pub free_energy_slope: f64,
}

/// Residual, Kirkwood-Monroe residual and free-energy directional derivatives
/// (central differences, step 1e-5) along `directions` random unit directions.
pub fn stationarity_report(
    a: &DVector<f64>,
    ops: &GalerkinOperators,
    nodal: &NodalModel,
    directions: usize,
    seed: u64,
) -> Result<StationarityReport> {
    let beta_inv = ops.beta_inv;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut slope: f64 = 0.0;
    for _ in 0..directions {
        let mut v = DVector::from_fn(a.len(), |i, _| if i == 0 { 0.0 } else { rng.random_range(-1.0..1.0) });
        // keep zeta' v = 0 exactly
        let z = &ops.integrals;
        v -= z * (z.dot(&v) / z.dot(z));
        let v = v.normalize();
        let fp = free_energy(&(a + &v * h), nodal, beta_inv).total;
        let fm = free_energy(&(a - &v * h), nodal, beta_inv).total;
        slope = slope.max(((fp - fm) / (2.0 * h)).abs());
    }
    Ok(StationarityReport {
        residual_norm: ops.residual(a)?.norm(),
        kirkwood_monroe_residual: kirkwood_monroe_residual(a, nodal, beta_inv)?,
        free_energy_slope: slope,
    })
}
