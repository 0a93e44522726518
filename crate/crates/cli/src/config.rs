use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mvsteady::analysis::{FixedPointConfig, Stability, StabilityConfig};
use mvsteady::control::StepRule;
use mvsteady::deflation::FilterConfig;

/// Named configurations shipped with the binary.
pub const PRESETS: &[(&str, &str)] = &[
    ("hkb-k1", include_str!("../presets/hkb-k1.toml")),
    ("hkb-k3", include_str!("../presets/hkb-k3.toml")),
    ("hkb-asym-k2", include_str!("../presets/hkb-asym-k2.toml")),
    ("hkb-asym-k4", include_str!("../presets/hkb-asym-k4.toml")),
    ("hkb-asym-k5", include_str!("../presets/hkb-asym-k5.toml")),
    ("o2-sweep", include_str!("../presets/o2-sweep.toml")),
    ("hk", include_str!("../presets/hk.toml")),
    ("hk-full", include_str!("../presets/hk-full.toml")),
    ("von-mises", include_str!("../presets/von-mises.toml")),
];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub discretization: Discretization,
    #[serde(default)]
    pub deflation: DeflationSection,
    #[serde(default)]
    pub newton: NewtonSection,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub stability: StabilityConfig,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub evolve: Option<EvolveSection>,
    #[serde(default)]
    pub control: Option<ControlSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretization {
    pub modes_per_axis: usize,
    /// Gauss points per axis; defaults to the recommended count for the modes.
    #[serde(default)]
    pub quadrature_points: Option<usize>,
    pub beta_inv: f64,
    /// Further temperatures for `steady-states`; one run per value, after `beta_inv`.
    #[serde(default)]
    pub sweep: Vec<f64>,
    /// Directory for cached operators; assembled afresh when absent.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeflationSection {
    pub power: f64,
    pub shift: f64,
    pub max_roots: usize,
    pub seed: u64,
    pub initial_guess: InitialGuess,
}

impl Default for DeflationSection {
    fn default() -> Self {
        Self {
            power: 2.0,
            shift: 1.0,
            max_roots: 32,
            seed: 0,
            initial_guess: InitialGuess::Zero,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialGuess {
    Zero,
    /// Uniform random entries in [0, 1), scaled to unit mass.
    RandomNormalized,
    /// Fixed-point iterate of the self-consistency map started from `start`.
    FixedPoint {
        start: DensitySpec,
        #[serde(default)]
        iteration: FixedPointConfig,
    },
    Density { density: DensitySpec },
    /// Coefficients of a root in an earlier `steadystates.json`.
    File { path: PathBuf, index: usize },
}

/// A probability density, either written down directly or taken from a
/// previous run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensitySpec {
    Uniform,
    /// `(1 + sum_j amplitude_j cos(k_j . y + phase_j)) / |Omega|`, with `y`
    /// the coordinates rescaled to period 2 pi.
    Fourier { terms: Vec<FourierTerm> },
    /// Sum of periodic Gaussians, normalised.
    Bumps { centers: Vec<Vec<f64>>, width: f64 },
    SteadyState {
        #[serde(default)]
        file: Option<PathBuf>,
        index: usize,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierTerm {
    pub k: Vec<i64>,
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonSection {
    pub step_tol: f64,
    pub max_iter: usize,
    pub rcond: f64,
}

impl Default for NewtonSection {
    fn default() -> Self {
        let d = mvsteady::deflation::NewtonConfig::default();
        Self {
            step_tol: d.step_tol,
            max_iter: d.max_iter,
            rcond: d.rcond,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Defaults to `steadystates.json` in the output directory.
    pub input: Option<PathBuf>,
    /// Quadrature refinement factor for the independent residual check.
    pub refine: usize,
    pub residual_tol: f64,
    pub kirkwood_monroe_tol: f64,
    pub order_tol: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            input: None,
            refine: 2,
            residual_tol: 1e-8,
            kirkwood_monroe_tol: 1e-6,
            order_tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveSection {
    pub span: f64,
    pub dt: f64,
    pub start: DensitySpec,
    /// Distances in `trajectory.csv` are measured to this state.
    #[serde(default)]
    pub reference: Option<TargetSelector>,
    #[serde(default = "default_stride")]
    pub snapshot_stride: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub gamma: f64,
    pub terminal_weight: f64,
    pub window: f64,
    pub span: f64,
    pub n_steps: usize,
    pub dt: f64,
    #[serde(default = "one")]
    pub step_size: f64,
    #[serde(default = "default_control_tol")]
    pub tol: f64,
    #[serde(default = "default_control_iter")]
    pub max_iter: usize,
    #[serde(default = "default_halvings")]
    pub max_halvings: usize,
    #[serde(default)]
    pub step_rule: StepRule,
    #[serde(default)]
    pub smoothing: f64,
    pub target: TargetSelector,
    pub start: DensitySpec,
    /// Snapshot every this many feedback updates.
    #[serde(default = "default_stride")]
    pub snapshot_stride: usize,
}

/// Picks one steady state. Filters apply to the distinct (non-translate)
/// positive roots of a previous `steady-states` run and must leave exactly one.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetSelector {
    Uniform,
    SteadyState {
        #[serde(default)]
        file: Option<PathBuf>,
        /// Run of a sweep; 0 is `beta_inv` itself.
        #[serde(default)]
        run: usize,
        #[serde(default)]
        index: Option<usize>,
        /// Number of density peaks above 1.5 times the mean.
        #[serde(default)]
        peaks: Option<usize>,
        #[serde(default)]
        stability: Option<Stability>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Density grid points per axis; 512 in 1D and 128 in 2D when unset.
    pub grid_points: Option<usize>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            grid_points: None,
        }
    }
}

fn default_stride() -> usize {
    10
}
fn one() -> f64 {
    1.0
}
fn default_control_tol() -> f64 {
    1e-10
}
fn default_control_iter() -> usize {
    50
}
fn default_halvings() -> usize {
    30
}

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table, ConfigError> {
    text.parse::<toml::Table>()
        .map_err(|e| ConfigError(format!("{origin}: {e}")))
}

/// Recursively overlays `top` on `base`; tables merge, everything else is replaced.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Reads the preset and/or the config file, the file taking precedence.
pub fn load(config: Option<&Path>, preset_name: Option<&str>) -> Result<RunConfig, ConfigError> {
    let user = match config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
            Some((text, p.display().to_string()))
        }
        None => None,
    };
    let cfg = match (preset_name, user) {
        (None, None) => return Err(ConfigError("give --config or --preset".into())),
        // parse the file on its own so diagnostics point at its lines
        (None, Some((text, origin))) => {
            toml::from_str::<RunConfig>(&text).map_err(|e| ConfigError(format!("{origin}: {e}")))?
        }
        (Some(name), user) => {
            let text = preset(name).ok_or_else(|| {
                let names: Vec<_> = PRESETS.iter().map(|(n, _)| *n).collect();
                ConfigError(format!("unknown preset `{name}` (known: {})", names.join(", ")))
            })?;
            let mut table = parse_table(text, &format!("preset {name}"))?;
            let origin = match user {
                Some((text, origin)) => {
                    merge(&mut table, parse_table(&text, &origin)?);
                    format!("{origin} over preset {name}")
                }
                None => format!("preset {name}"),
            };
            let merged = toml::to_string(&table).map_err(|e| ConfigError(e.to_string()))?;
            toml::from_str::<RunConfig>(&merged).map_err(|e| ConfigError(format!("{origin}: {e}")))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field: &str, why: &str| Err(ConfigError(format!("`{field}`: {why}")));
        let d = &self.discretization;
        if d.modes_per_axis == 0 {
            return bad("discretization.modes_per_axis", "must be positive");
        }
        for b in std::iter::once(&d.beta_inv).chain(&d.sweep) {
            if !(*b > 0.0 && b.is_finite()) {
                return bad("discretization.beta_inv", "temperatures must be positive and finite");
            }
        }
        if !(self.deflation.power > 0.0) || !(self.deflation.shift >= 0.0) {
            return bad("deflation", "need power > 0 and shift >= 0");
        }
        if self.verify.refine == 0 {
            return bad("verify.refine", "must be at least 1");
        }
        if let Some(e) = &self.evolve {
            if !(e.span > 0.0 && e.dt > 0.0) {
                return bad("evolve", "span and dt must be positive");
            }
            if e.snapshot_stride == 0 {
                return bad("evolve.snapshot_stride", "must be positive");
            }
        }
        if let Some(c) = &self.control {
            if !(c.window > 0.0 && c.span > 0.0 && c.dt > 0.0 && c.n_steps > 0) {
                return bad("control", "window, span, dt and n_steps must be positive");
            }
            if c.snapshot_stride == 0 {
                return bad("control.snapshot_stride", "must be positive");
            }
        }
        Ok(())
    }

    pub fn grid_points(&self, dim: usize) -> usize {
        self.output
            .grid_points
            .unwrap_or(if dim == 1 { 512 } else { 128 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses() {
        for (name, _) in PRESETS {
            let cfg = load(None, Some(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
            mvsteady::models::make_model(&cfg.model.name, &cfg.model.params)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn file_overrides_preset() {
        let dir = std::env::temp_dir().join(format!("mvsteady-cfg-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("over.toml");
        fs::write(&p, "[model.params]\nkappa = 2.5\n[discretization]\nmodes_per_axis = 8\n").unwrap();
        let cfg = load(Some(&p), Some("hkb-k3")).unwrap();
        assert_eq!(cfg.model.params["kappa"], 2.5);
        assert_eq!(cfg.model.params["alpha"], -1.0);
        assert_eq!(cfg.discretization.modes_per_axis, 8);
        assert_eq!(cfg.discretization.beta_inv, 1.0);
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn diagnostics_name_the_field() {
        let dir = std::env::temp_dir().join(format!("mvsteady-bad-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.toml");
        fs::write(
            &p,
            "[model]\nname = \"hkb\"\n\n[discretization]\nmodes_per_axis = 4\nbeta_inv = 1.0\nbogus = 3\n",
        )
        .unwrap();
        let e = load(Some(&p), None).unwrap_err().0;
        assert!(e.contains("bogus"), "{e}");
        assert!(e.contains("line 7"), "{e}");
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn needs_some_input() {
        assert!(load(None, None).is_err());
        assert!(load(None, Some("nope")).is_err());
    }
}
