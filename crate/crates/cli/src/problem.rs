use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mvsteady::analysis::{fixed_point_iterate, NodalModel, OrderParameter, Stability};
use mvsteady::deflation::Termination;
use mvsteady::models::{make_model, Model};
use mvsteady::spectral::cache::load_or_assemble;
use mvsteady::spectral::{
    assemble_operators, recommended_points, GalerkinOperators, QuadratureRule, SpectralBasis, TorusDomain,
};

use crate::config::{DensitySpec, InitialGuess, RunConfig, TargetSelector};

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad config, missing input or unwritable output (exit 1).
    Input(String),
    /// No steady state survived (exit 2).
    NoRoots(String),
    /// Solver blow-up, non-finite values or failed verification (exit 3).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::NoRoots(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::NoRoots(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<mvsteady::Error> for CliError {
    fn from(e: mvsteady::Error) -> Self {
        use mvsteady::Error as E;
        match e {
            E::BlowUp { .. } | E::NonFinite(_) | E::Overflow { .. } | E::NonPositiveDensity { .. } => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub struct Problem {
    pub model: Model,
    pub basis: SpectralBasis,
    pub quad: QuadratureRule,
    pub ops: GalerkinOperators,
}

impl Problem {
    /// Model, basis, quadrature and operators at `beta_inv`, with the Gauss
    /// point count multiplied by `refine`.
    pub fn build(cfg: &RunConfig, beta_inv: f64, refine: usize) -> CliResult<Self> {
        let model = make_model(&cfg.model.name, &cfg.model.params)?;
        let d = &cfg.discretization;
        let basis = SpectralBasis::new(model.domain.clone(), d.modes_per_axis)?;
        let points = d.quadrature_points.unwrap_or_else(|| recommended_points(d.modes_per_axis)) * refine;
        let quad = QuadratureRule::gauss_legendre(&model.domain, points)?;
        let ops = match &d.cache_dir {
            Some(dir) => load_or_assemble(dir, &basis, &quad, &model, beta_inv)?,
            None => assemble_operators(&basis, &quad, &model, beta_inv)?,
        };
        Ok(Self {
            model,
            basis,
            quad,
            ops,
        })
    }

    pub fn domain(&self) -> &TorusDomain {
        &self.model.domain
    }

    /// Coefficients of a density spec.
    pub fn coefficients(&self, spec: &DensitySpec, out_dir: &Path) -> CliResult<DVector<f64>> {
        match spec {
            DensitySpec::Uniform => Ok(self.basis.uniform_density()),
            DensitySpec::SteadyState { file, index } => {
                let path = file.clone().unwrap_or_else(|| out_dir.join("steadystates.json"));
                self.stored_state(&path, *index)
            }
            _ => {
                let values = self.nodal_values(spec, out_dir)?;
                Ok(self.basis.project_function(values.as_slice(), &self.quad)?)
            }
        }
    }

    /// Density spec at the quadrature nodes, normalised to unit mass.
    pub fn nodal_values(&self, spec: &DensitySpec, out_dir: &Path) -> CliResult<DVector<f64>> {
        let dom = self.domain();
        let dim = dom.dim();
        let nodes = &self.quad.nodes;
        let values: Vec<f64> = match spec {
            DensitySpec::Uniform => vec![1.0; nodes.len()],
            DensitySpec::Fourier { terms } => {
                if let Some(t) = terms.iter().find(|t| t.k.len() != dim) {
                    return Err(CliError::Input(format!(
                        "fourier term k = {:?} needs {dim} wavenumbers",
                        t.k
                    )));
                }
                nodes
                    .iter()
                    .map(|x| {
                        1.0 + terms
                            .iter()
                            .map(|t| {
                                let arg: f64 = (0..dim)
                                    .map(|j| {
                                        t.k[j] as f64 * 2.0 * PI * (x[j] - dom.lower(j)) / dom.length(j)
                                    })
                                    .sum();
                                t.amplitude * (arg + t.phase).cos()
                            })
                            .sum::<f64>()
                    })
                    .collect()
            }
            DensitySpec::Bumps { centers, width } => {
                if !(*width > 0.0) || centers.is_empty() || centers.iter().any(|c| c.len() != dim) {
                    return Err(CliError::Input(format!(
                        "bumps need a positive width and centers with {dim} coordinates"
                    )));
                }
                nodes
                    .iter()
                    .map(|x| {
                        centers
                            .iter()
                            .map(|c| {
                                let r2: f64 = (0..dim)
                                    .map(|j| dom.wrap_displacement(j, x[j] - c[j]).powi(2))
                                    .sum();
                                (-r2 / (2.0 * width * width)).exp()
                            })
                            .sum()
                    })
                    .collect()
            }
            DensitySpec::SteadyState { .. } => {
                let a = self.coefficients(spec, out_dir)?;
                self.basis.evaluate_density(&a, nodes)?
            }
        };
        let mass = self.quad.integrate(&values);
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(CliError::Input(format!("density spec has mass {mass}")));
        }
        Ok(DVector::from_vec(values) / mass)
    }

    pub fn initial_guess(&self, guess: &InitialGuess, seed: u64, out_dir: &Path) -> CliResult<DVector<f64>> {
        let l = self.basis.len();
        match guess {
            InitialGuess::Zero => Ok(DVector::zeros(l)),
            InitialGuess::RandomNormalized => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = DVector::from_fn(l, |_, _| rng.random_range(0.0..1.0));
                let mass = self.ops.integrals.dot(&a);
                Ok(a / mass)
            }
            InitialGuess::FixedPoint { start, iteration } => {
                let rho0 = self.nodal_values(start, out_dir)?;
                let nodal = NodalModel::new(&self.model, &self.basis, &self.quad)?;
                let fp = fixed_point_iterate(&rho0, &nodal, self.ops.beta_inv, iteration)?;
                if !fp.converged {
                    log::warn!(
                        "fixed-point iteration stopped after {} steps (increment {:.3e})",
                        fp.iterations,
                        fp.increment
                    );
                }
                Ok(self.basis.project_function(fp.density.as_slice(), &self.quad)?)
            }
            InitialGuess::Density { density } => self.coefficients(density, out_dir),
            InitialGuess::File { path, index } => self.stored_state(path, *index),
        }
    }

    pub fn resolve_target(&self, sel: &TargetSelector, out_dir: &Path) -> CliResult<DVector<f64>> {
        match sel {
            TargetSelector::Uniform => Ok(self.basis.uniform_density()),
            TargetSelector::SteadyState {
                file,
                run,
                index,
                peaks,
                stability,
            } => {
                let path = file.clone().unwrap_or_else(|| out_dir.join("steadystates.json"));
                let states = SteadyStatesFile::read(&path)?;
                let r = states.runs.get(*run).ok_or_else(|| {
                    CliError::Input(format!("{}: no run {run}", path.display()))
                })?;
                let hits: Vec<&RootRecord> = r
                    .roots
                    .iter()
                    .filter(|e| e.positive && e.translation_of.is_none())
                    .filter(|e| index.is_none_or(|i| e.index == i))
                    .filter(|e| peaks.is_none_or(|p| e.peaks == p))
                    .filter(|e| stability.is_none_or(|s| e.stability == s))
                    .collect();
                match hits.as_slice() {
                    [one] => {
                        self.check_len(&one.coefficients, &path)?;
                        Ok(DVector::from_vec(one.coefficients.clone()))
                    }
                    _ => Err(CliError::Input(format!(
                        "target selector matches {} steady states in {} (need exactly one)",
                        hits.len(),
                        path.display()
                    ))),
                }
            }
        }
    }

    fn stored_state(&self, path: &PathBuf, index: usize) -> CliResult<DVector<f64>> {
        let file = SteadyStatesFile::read(path)?;
        let root = file.root(index, path)?;
        self.check_len(&root.coefficients, path)?;
        Ok(DVector::from_vec(root.coefficients.clone()))
    }

    fn check_len(&self, coeffs: &[f64], path: &Path) -> CliResult<()> {
        if coeffs.len() == self.basis.len() {
            Ok(())
        } else {
            Err(CliError::Input(format!(
                "{}: state has {} coefficients, the configured basis {}",
                path.display(),
                coeffs.len(),
                self.basis.len()
            )))
        }
    }

    pub fn density_grid(&self, cfg: &RunConfig, a: &DVector<f64>) -> CliResult<(Vec<[f64; 2]>, Vec<f64>)> {
        let n = cfg.grid_points(self.domain().dim());
        Ok((self.domain().uniform_grid(n), self.basis.density_on_uniform_grid(a, n)?))
    }
}

/// Local maxima above 1.5 times the mean, on a periodic uniform grid.
pub fn count_peaks(values: &[f64], n: usize, dim: usize) -> usize {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let at = |i: isize, k: isize| {
        let (i, k) = (i.rem_euclid(n as isize) as usize, k.rem_euclid(n as isize) as usize);
        values[i * if dim == 1 { 1 } else { n } + if dim == 1 { 0 } else { k }]
    };
    let mut count = 0;
    let rows = n as isize;
    let cols = if dim == 1 { 1 } else { n as isize };
    for i in 0..rows {
        for k in 0..cols {
            let v = at(i, k);
            if v <= 1.5 * mean {
                continue;
            }
            let mut is_max = true;
            for di in -1..=1isize {
                for dk in if dim == 1 { 0..=0 } else { -1..=1isize } {
                    if (di, dk) == (0, 0) {
                        continue;
                    }
                    let w = at(i + di, k + dk);
                    // ties broken towards the earlier grid point
                    let earlier = (di, dk) < (0, 0);
                    if w > v || (w == v && earlier) {
                        is_max = false;
                    }
                }
            }
            if is_max {
                count += 1;
            }
        }
    }
    count
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteadyStatesFile {
    pub schema_version: u32,
    pub config: RunConfig,
    pub runs: Vec<RunRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub beta_inv: f64,
    pub termination: Termination,
    pub roots: Vec<RootRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RootRecord {
    /// Numbering shared by all runs of the file and the density files.
    pub index: usize,
    pub coefficients: Vec<f64>,
    pub residual_norm: f64,
    pub kirkwood_monroe_residual: Option<f64>,
    pub free_energy: Option<f64>,
    pub stability: Stability,
    pub order_parameters: Option<OrderParameter>,
    pub min_density: f64,
    pub positive: bool,
    /// Index of the root this one is a translate of.
    pub translation_of: Option<usize>,
    pub newton_iterations: usize,
    pub peaks: usize,
    pub density_file: String,
}

impl SteadyStatesFile {
    pub fn read(path: &PathBuf) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn root(&self, index: usize, path: &Path) -> CliResult<&RootRecord> {
        self.runs
            .iter()
            .flat_map(|r| &r.roots)
            .find(|r| r.index == index)
            .ok_or_else(|| CliError::Input(format!("{}: no root with index {index}", path.display())))
    }
}
