//! Confining and interaction potentials for the supported models.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{Point, TorusDomain};

/// User supplied potentials. `interaction_gradient` is the gradient of W in
/// its first argument.
pub trait Potentials: Send + Sync {
    fn confinement(&self, x: &Point) -> f64;
    fn confinement_gradient(&self, x: &Point) -> Point;
    fn interaction(&self, x: &Point, y: &Point) -> f64;
    fn interaction_gradient(&self, x: &Point, y: &Point) -> Point;
}

/// Which sign convention to use for the cos 2x confinement of the HKB model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HkbConvention {
    /// V = -c1 cos x - c2 cos 2x, drift from its gradient. Stationary states
    /// are then proportional to exp(-beta(alpha cos 2x - kappa m.(cos x, sin x)))
    /// with alpha = -c2.
    #[default]
    Potential,
    /// Confining drift `c1 sin x + 2 alpha sin 2x`, i.e. the cos 2x term with
    /// the opposite sign.
    PrintedDrift,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HkbParams {
    pub c1: f64,
    pub c2: f64,
    pub kappa: f64,
    pub convention: HkbConvention,
}

impl HkbParams {
    /// Symmetric case c1 = 0, c2 = -alpha.
    pub fn symmetric(alpha: f64, kappa: f64) -> Self {
        Self {
            c1: 0.0,
            c2: -alpha,
            kappa,
            convention: HkbConvention::Potential,
        }
    }

    pub fn alpha(&self) -> f64 {
        -self.c2
    }

    fn c2_signed(&self) -> f64 {
        match self.convention {
            HkbConvention::Potential => self.c2,
            HkbConvention::PrintedDrift => -self.c2,
        }
    }

    pub fn confinement(&self, x: f64) -> f64 {
        -self.c1 * x.cos() - self.c2_signed() * (2.0 * x).cos()
    }

    /// Confining drift dV/dx under the selected convention.
    pub fn confining_drift(&self, x: f64) -> f64 {
        self.c1 * x.sin() + 2.0 * self.c2_signed() * (2.0 * x).sin()
    }

    /// Exponent of the stationary density for order parameter `m`, up to the
    /// normalisation: `-beta (V(x) - kappa (m1 cos x + m2 sin x))`.
    pub fn stationary_exponent(&self, beta: f64, x: f64, m: [f64; 2]) -> f64 {
        -beta * (self.confinement(x) - self.kappa * (m[0] * x.cos() + m[1] * x.sin()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct O2Params {
    pub eta_field: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HkParams {
    pub r: f64,
    pub epsilon_reg: f64,
}

impl HkParams {
    pub fn new(r: f64) -> Self {
        Self {
            r,
            epsilon_reg: 0.005,
        }
    }

    /// W'(z) for a wrapped displacement `z`: identity inside the radius,
    /// linear ramp to zero over `(r, r + eps)`, zero beyond.
    pub fn force(&self, z: f64) -> f64 {
        let (r, e, a) = (self.r, self.epsilon_reg, z.abs());
        if a <= r {
            z
        } else if a < r + e {
            z.signum() * r * (r + e - a) / e
        } else {
            0.0
        }
    }

    /// Antiderivative of [`force`](Self::force) with W(0) = 0.
    pub fn potential(&self, z: f64) -> f64 {
        let (r, e, a) = (self.r, self.epsilon_reg, z.abs());
        if a <= r {
            0.5 * z * z
        } else if a < r + e {
            0.5 * r * r + r * ((r + e) * (a - r) - 0.5 * (a * a - r * r)) / e
        } else {
            0.5 * r * r + 0.5 * r * e
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VonMisesParams {
    pub theta: f64,
    pub normalization: f64,
}

impl VonMisesParams {
    /// Prefactor `I0(theta)^-2`.
    pub fn new(theta: f64) -> Self {
        Self {
            theta,
            normalization: bessel_i0(theta).powi(-2),
        }
    }
}

/// Modified Bessel function I0 by its power series.
pub fn bessel_i0(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..500 {
        term *= q / (k * k) as f64;
        sum += term;
        if term <= 1e-16 * sum {
            break;
        }
    }
    sum
}

#[derive(Clone)]
pub enum ModelKind {
    Hkb(HkbParams),
    O2(O2Params),
    HegselmannKrause(HkParams),
    VonMises(VonMisesParams),
    /// V = W = 0.
    Free,
    Custom(Arc<dyn Potentials>),
}

impl fmt::Debug for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Hkb(p) => write!(f, "Hkb({p:?})"),
            ModelKind::O2(p) => write!(f, "O2({p:?})"),
            ModelKind::HegselmannKrause(p) => write!(f, "HegselmannKrause({p:?})"),
            ModelKind::VonMises(p) => write!(f, "VonMises({p:?})"),
            ModelKind::Free => write!(f, "Free"),
            ModelKind::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// A model: potentials plus the torus they live on.
#[derive(Clone, Debug)]
pub struct Model {
    pub name: String,
    pub kind: ModelKind,
    pub domain: TorusDomain,
    pub params: BTreeMap<String, f64>,
}

impl Model {
    pub fn hkb(params: HkbParams) -> Self {
        let map = [
            ("c1", params.c1),
            ("c2", params.c2),
            ("kappa", params.kappa),
            (
                "printed_drift",
                f64::from(params.convention == HkbConvention::PrintedDrift),
            ),
        ];
        Self {
            name: "hkb".into(),
            kind: ModelKind::Hkb(params),
            domain: TorusDomain::interval(0.0, 2.0 * PI).expect("valid"),
            params: to_map(&map),
        }
    }

    pub fn o2(params: O2Params) -> Self {
        Self {
            name: "o2".into(),
            kind: ModelKind::O2(params),
            domain: TorusDomain::interval(0.0, 1.0).expect("valid"),
            params: to_map(&[("eta_field", params.eta_field)]),
        }
    }

    pub fn hegselmann_krause(params: HkParams) -> Self {
        Self {
            name: "hk".into(),
            kind: ModelKind::HegselmannKrause(params),
            domain: TorusDomain::interval(0.0, 1.0).expect("valid"),
            params: to_map(&[("r", params.r), ("epsilon_reg", params.epsilon_reg)]),
        }
    }

    pub fn von_mises(params: VonMisesParams) -> Self {
        Self {
            name: "von-mises".into(),
            kind: ModelKind::VonMises(params),
            domain: TorusDomain::square(-PI, PI).expect("valid"),
            params: to_map(&[
                ("theta", params.theta),
                ("normalization", params.normalization),
            ]),
        }
    }

    pub fn free(domain: TorusDomain) -> Self {
        Self {
            name: "free".into(),
            kind: ModelKind::Free,
            domain,
            params: BTreeMap::new(),
        }
    }

    pub fn custom(name: &str, domain: TorusDomain, potentials: Arc<dyn Potentials>) -> Self {
        Self {
            name: name.into(),
            kind: ModelKind::Custom(potentials),
            domain,
            params: BTreeMap::new(),
        }
    }

    /// Stable identifier used as part of operator cache keys.
    pub fn id(&self) -> String {
        let mut s = self.name.clone();
        for (k, v) in &self.params {
            s.push_str(&format!(";{k}={v:e}"));
        }
        for j in 0..self.domain.dim() {
            s.push_str(&format!(
                ";ax{j}=[{:e},{:e}]",
                self.domain.lower(j),
                self.domain.upper(j)
            ));
        }
        s
    }

    pub fn confinement(&self, x: &Point) -> f64 {
        match &self.kind {
            ModelKind::Hkb(p) => p.confinement(x[0]),
            ModelKind::O2(p) => -p.eta_field * (2.0 * PI * x[0]).cos(),
            ModelKind::HegselmannKrause(_) | ModelKind::VonMises(_) | ModelKind::Free => 0.0,
            ModelKind::Custom(c) => c.confinement(x),
        }
    }

    pub fn confinement_gradient(&self, x: &Point) -> Point {
        match &self.kind {
            ModelKind::Hkb(p) => [p.confining_drift(x[0]), 0.0],
            ModelKind::O2(p) => [2.0 * PI * p.eta_field * (2.0 * PI * x[0]).sin(), 0.0],
            ModelKind::HegselmannKrause(_) | ModelKind::VonMises(_) | ModelKind::Free => [0.0; 2],
            ModelKind::Custom(c) => c.confinement_gradient(x),
        }
    }

    pub fn interaction(&self, x: &Point, y: &Point) -> f64 {
        match &self.kind {
            ModelKind::Hkb(p) => -p.kappa * (x[0] - y[0]).cos(),
            ModelKind::O2(_) => -(2.0 * PI * (x[0] - y[0])).cos(),
            ModelKind::HegselmannKrause(p) => {
                p.potential(self.domain.wrap_displacement(0, x[0] - y[0]))
            }
            ModelKind::VonMises(p) => {
                let (z0, z1) = (x[0] - y[0], x[1] - y[1]);
                -p.normalization * (p.theta * (z0.cos() + z1.cos())).exp()
            }
            ModelKind::Free => 0.0,
            ModelKind::Custom(c) => c.interaction(x, y),
        }
    }

    pub fn interaction_gradient(&self, x: &Point, y: &Point) -> Point {
        match &self.kind {
            ModelKind::Hkb(p) => [p.kappa * (x[0] - y[0]).sin(), 0.0],
            ModelKind::O2(_) => [2.0 * PI * (2.0 * PI * (x[0] - y[0])).sin(), 0.0],
            ModelKind::HegselmannKrause(p) => {
                [p.force(self.domain.wrap_displacement(0, x[0] - y[0])), 0.0]
            }
            ModelKind::VonMises(p) => {
                let (z0, z1) = (x[0] - y[0], x[1] - y[1]);
                let e = p.normalization * p.theta * (p.theta * (z0.cos() + z1.cos())).exp();
                [e * z0.sin(), e * z1.sin()]
            }
            ModelKind::Free => [0.0; 2],
            ModelKind::Custom(c) => c.interaction_gradient(x, y),
        }
    }

    pub fn hkb_params(&self) -> Option<&HkbParams> {
        match &self.kind {
            ModelKind::Hkb(p) => Some(p),
            _ => None,
        }
    }
}

fn to_map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn get(params: &BTreeMap<String, f64>, key: &str, default: Option<f64>) -> Result<f64> {
    match params.get(key).copied().or(default) {
        Some(v) if v.is_finite() => Ok(v),
        Some(v) => Err(Error::param(key, format!("not finite: {v}"))),
        None => Err(Error::param(key, "missing")),
    }
}

/// Builds a model from its name and a parameter map.
///
/// Recognised names and keys:
/// * `hkb`: `kappa`, and either `alpha` or `c1`/`c2`; `printed_drift` = 1
///   selects [`HkbConvention::PrintedDrift`].
/// * `o2`: `eta_field` in (0, 1).
/// * `hk` (or `hegselmann-krause`): `r`, optional `epsilon_reg` (default 0.005).
/// * `von-mises`: `theta`, optional `normalization` (default `I0(theta)^-2`).
/// * `free`: optional `dim`, `lower`, `upper` (default 1D `[0, 2 pi]`).
pub fn make_model(name: &str, params: &BTreeMap<String, f64>) -> Result<Model> {
    match name {
        "hkb" => {
            let kappa = get(params, "kappa", None)?;
            if kappa < 0.0 {
                return Err(Error::param("kappa", "must be non-negative"));
            }
            let (c1, c2) = if params.contains_key("alpha") {
                (0.0, -get(params, "alpha", None)?)
            } else {
                (get(params, "c1", Some(0.0))?, get(params, "c2", None)?)
            };
            let convention = if get(params, "printed_drift", Some(0.0))? != 0.0 {
                HkbConvention::PrintedDrift
            } else {
                HkbConvention::Potential
            };
            Ok(Model::hkb(HkbParams {
                c1,
                c2,
                kappa,
                convention,
            }))
        }
        "o2" => {
            let eta_field = get(params, "eta_field", None)?;
            if !(eta_field > 0.0 && eta_field < 1.0) {
                return Err(Error::param("eta_field", "must lie in (0, 1)"));
            }
            Ok(Model::o2(O2Params { eta_field }))
        }
        "hk" | "hegselmann-krause" => {
            let r = get(params, "r", None)?;
            let epsilon_reg = get(params, "epsilon_reg", Some(0.005))?;
            if !(r > 0.0 && epsilon_reg > 0.0 && r + epsilon_reg < 0.5) {
                return Err(Error::param(
                    "r",
                    "need r > 0, epsilon_reg > 0 and r + epsilon_reg < 1/2",
                ));
            }
            Ok(Model::hegselmann_krause(HkParams { r, epsilon_reg }))
        }
        "von-mises" | "vonmises" => {
            let theta = get(params, "theta", None)?;
            if theta <= 0.0 {
                return Err(Error::param("theta", "must be positive"));
            }
            let normalization = get(params, "normalization", Some(bessel_i0(theta).powi(-2)))?;
            if normalization <= 0.0 {
                return Err(Error::param("normalization", "must be positive"));
            }
            Ok(Model::von_mises(VonMisesParams {
                theta,
                normalization,
            }))
        }
        "free" => {
            let dim = get(params, "dim", Some(1.0))?;
            let lo = get(params, "lower", Some(0.0))?;
            let hi = get(params, "upper", Some(2.0 * PI))?;
            let domain = match dim as i64 {
                1 => TorusDomain::interval(lo, hi)?,
                2 => TorusDomain::square(lo, hi)?,
                _ => return Err(Error::param("dim", "must be 1 or 2")),
            };
            Ok(Model::free(domain))
        }
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_models() -> Vec<Model> {
        vec![
            Model::hkb(HkbParams {
                c1: 0.3,
                c2: 1.0,
                kappa: 2.0,
                convention: HkbConvention::Potential,
            }),
            Model::o2(O2Params { eta_field: 0.05 }),
            Model::hegselmann_krause(HkParams::new(0.1)),
            Model::von_mises(VonMisesParams::new(1.0)),
        ]
    }

    fn sample(d: &TorusDomain, u: [f64; 2]) -> Point {
        let mut p = [0.0; 2];
        for j in 0..d.dim() {
            p[j] = d.lower(j) + u[j] * d.length(j);
        }
        p
    }

    #[test]
    fn hkb_examples() {
        let m = Model::hkb(HkbParams {
            c1: 0.0,
            c2: 1.0,
            kappa: 1.0,
            convention: HkbConvention::Potential,
        });
        assert!((m.confinement(&[0.0, 0.0]) + 1.0).abs() < 1e-15);
        assert_eq!(m.confinement_gradient(&[0.0, 0.0])[0], 0.0);

        let mut p = HkbParams::symmetric(-1.0, 3.0);
        p.convention = HkbConvention::PrintedDrift;
        assert!((p.confining_drift(PI / 4.0) + 2.0).abs() < 1e-14);
        assert_eq!(HkbParams::symmetric(0.0, 1.0).confining_drift(1.1), 0.0);

        // exponent: -beta (alpha cos 2x - kappa (m1 cos x + m2 sin x))
        let p = HkbParams::symmetric(-1.0, 3.0);
        let (x, m, beta): (f64, [f64; 2], f64) = (0.7, [0.4, -0.2], 1.3);
        let want = -beta * (-(2.0 * x).cos() - 3.0 * (0.4 * x.cos() - 0.2 * x.sin()));
        assert!((p.stationary_exponent(beta, x, m) - want).abs() < 1e-14);
    }

    #[test]
    fn hk_force_profile() {
        let p = HkParams::new(0.1);
        assert!((p.force(0.05) - 0.05).abs() < 1e-15);
        assert_eq!(p.force(0.2), 0.0);
        assert!((p.force(-0.1) + 0.1).abs() < 1e-15);
        assert!((p.force(0.1025) - 0.05).abs() < 1e-12);
        // potential continuous at the ramp ends
        for a in [0.1, 0.105] {
            assert!((p.potential(a - 1e-12) - p.potential(a + 1e-12)).abs() < 1e-10);
        }
    }

    #[test]
    fn bessel_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-16);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-15);
        let vm = VonMisesParams::new(1.0);
        assert!((vm.normalization - 0.623_860_360_432_069_4).abs() < 1e-14);
    }

    #[test]
    fn make_model_validation() {
        let p = |kv: &[(&str, f64)]| to_map(kv);
        assert!(make_model("nope", &p(&[])).is_err());
        assert!(make_model("hkb", &p(&[("alpha", -1.0)])).is_err());
        assert!(make_model("hkb", &p(&[("alpha", -1.0), ("kappa", -1.0)])).is_err());
        assert!(make_model("o2", &p(&[("eta_field", 1.5)])).is_err());
        assert!(make_model("hk", &p(&[("r", 0.6)])).is_err());
        assert!(make_model("von-mises", &p(&[("theta", 0.0)])).is_err());
        let m = make_model("hkb", &p(&[("alpha", -1.0), ("kappa", 3.0)])).unwrap();
        assert_eq!(m.hkb_params().unwrap().c2, 1.0);
        let m = make_model("free", &p(&[("dim", 2.0), ("upper", 1.0)])).unwrap();
        assert_eq!(m.domain.dim(), 2);
        assert_ne!(
            make_model("o2", &p(&[("eta_field", 0.05)])).unwrap().id(),
            make_model("o2", &p(&[("eta_field", 0.06)])).unwrap().id()
        );
    }

    #[test]
    fn zero_interaction_limits() {
        let m = Model::hkb(HkbParams::symmetric(-1.0, 0.0));
        assert_eq!(m.interaction_gradient(&[0.3, 0.0], &[2.0, 0.0]), [0.0, 0.0]);
        let vm = Model::von_mises(VonMisesParams::new(1e-12));
        let g = vm.interaction_gradient(&[0.3, -1.0], &[2.0, 0.5]);
        assert!(g[0].abs() < 1e-11 && g[1].abs() < 1e-11);
    }

    proptest! {
        #[test]
        fn interaction_is_symmetric(u in prop::array::uniform4(0.0f64..1.0)) {
            for m in all_models() {
                let x = sample(&m.domain, [u[0], u[1]]);
                let y = sample(&m.domain, [u[2], u[3]]);
                prop_assert!((m.interaction(&x, &y) - m.interaction(&y, &x)).abs() <= 1e-12);
            }
        }

        #[test]
        fn gradients_match_central_differences(u in prop::array::uniform4(0.0f64..1.0)) {
            let h = 1e-5;
            for m in all_models() {
                let x = sample(&m.domain, [u[0], u[1]]);
                let y = sample(&m.domain, [u[2], u[3]]);
                if let ModelKind::HegselmannKrause(p) = &m.kind {
                    let a = m.domain.wrap_displacement(0, x[0] - y[0]).abs();
                    let corner = [p.r, p.r + p.epsilon_reg, 0.5];
                    if corner.iter().any(|c| (a - c).abs() < 2.0 * p.epsilon_reg) {
                        continue;
                    }
                }
                let gv = m.confinement_gradient(&x);
                let gw = m.interaction_gradient(&x, &y);
                for j in 0..m.domain.dim() {
                    let (mut xp, mut xm) = (x, x);
                    xp[j] += h;
                    xm[j] -= h;
                    let fv = (m.confinement(&xp) - m.confinement(&xm)) / (2.0 * h);
                    let fw = (m.interaction(&xp, &y) - m.interaction(&xm, &y)) / (2.0 * h);
                    prop_assert!((fv - gv[j]).abs() <= 1e-6 * gv[j].abs().max(1.0));
                    prop_assert!((fw - gw[j]).abs() <= 1e-6 * gw[j].abs().max(1.0));
                }
            }
        }

        #[test]
        fn potentials_are_periodic(u in prop::array::uniform2(0.0f64..1.0)) {
            for m in all_models() {
                let x = sample(&m.domain, u);
                let y = sample(&m.domain, [u[1], u[0]]);
                for j in 0..m.domain.dim() {
                    let mut xs = x;
                    xs[j] += m.domain.length(j);
                    prop_assert!((m.confinement(&x) - m.confinement(&xs)).abs() <= 1e-10);
                    prop_assert!((m.interaction(&x, &y) - m.interaction(&xs, &y)).abs() <= 1e-10);
                }
            }
        }
    }
}
