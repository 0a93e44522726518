use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::Model;

use super::basis::SpectralBasis;
use super::quadrature::QuadratureRule;

/// Assembled Galerkin operators for the weak form with test function `psi_m`:
///
/// * `M[m,n] = int psi_m psi_n`, `A[m,n] = int grad psi_m . grad psi_n`
/// * `C[m,n] = int psi_n grad V . grad psi_m`
/// * `B_m[n,k] = int psi_n (grad W * psi_k) . grad psi_m`, so `b_m(a) = a' B_m a`
/// * `D_j[m][i][k] = int psi_i psi_k d_j psi_m`, so `d_m(a,u) = sum_j a' D_j[m] u_j`
/// * `zeta_i = int psi_i`
///
/// The cubic tensors are stored as stacked `L^2 x L` matrices so that every
/// contraction is a single matrix-vector product. Operators assembled by
/// quadrature also keep the nodal factors of those tensors, which evaluate
/// `b` and `d` in `O(Nq L)` instead of `O(L^3)`; the two paths agree to
/// rounding.
#[derive(Clone, Debug)]
pub struct GalerkinOperators {
    pub beta_inv: f64,
    pub dim: usize,
    pub mass: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    pub confinement: DMatrix<f64>,
    pub integrals: DVector<f64>,
    size: usize,
    // row m*L + n, column k: B_m[n,k]
    interaction: DMatrix<f64>,
    // row m*L + k, column n: B_m[n,k]
    interaction_t: DMatrix<f64>,
    // per axis, row m*L + i, column k: D_j[m][i][k]
    control: Vec<DMatrix<f64>>,
    // -(beta_inv A + C)
    linear: DMatrix<f64>,
    mass_inverse: Option<DMatrix<f64>>,
    nodal: Option<NodalFactors>,
}

/// Quadrature factorisation of B and D: with `rho = Psi a`,
/// `b = sum_j Gw_j' (rho .* (K_j a))` and `d = sum_j Gw_j' (rho .* (Psi u_j))`.
#[derive(Clone, Debug)]
pub(crate) struct NodalFactors {
    /// `Psi[q,i] = psi_i(x_q)`.
    pub psi: DMatrix<f64>,
    /// `Gw_j[q,m] = w_q d_j psi_m(x_q)`.
    pub wgrad: Vec<DMatrix<f64>>,
    /// `K_j[q,k] = (d_j W * psi_k)(x_q)`.
    pub conv: Vec<DMatrix<f64>>,
}

/// Threshold on `max |M - I|` below which the mass matrix is treated as the identity.
const IDENTITY_MASS_TOL: f64 = 1e-10;

impl GalerkinOperators {
    /// Builds operators from explicit slices: `interaction[m] = B_m` and
    /// `control[j][m] = D_j[m]`. Each `D_j[m]` must be symmetric, as the
    /// assembled ones are; the control adjoint relies on it.
    pub fn from_tensors(
        beta_inv: f64,
        mass: DMatrix<f64>,
        stiffness: DMatrix<f64>,
        confinement: DMatrix<f64>,
        integrals: DVector<f64>,
        interaction: &[DMatrix<f64>],
        control: &[Vec<DMatrix<f64>>],
    ) -> Result<Self> {
        let l = integrals.len();
        if !(beta_inv > 0.0 && beta_inv.is_finite()) {
            return Err(Error::param("beta_inv", "must be positive and finite"));
        }
        for (name, m) in [("mass", &mass), ("stiffness", &stiffness), ("confinement", &confinement)] {
            if m.nrows() != l || m.ncols() != l {
                return Err(Error::dims(name, l, m.nrows()));
            }
        }
        if interaction.len() != l {
            return Err(Error::dims("interaction slices", l, interaction.len()));
        }
        if control.is_empty() || control.len() > 2 {
            return Err(Error::dims("control axes", 1, control.len()));
        }
        let mut s = DMatrix::zeros(l * l, l);
        let mut t = DMatrix::zeros(l * l, l);
        for (m, bm) in interaction.iter().enumerate() {
            if bm.shape() != (l, l) {
                return Err(Error::dims("interaction slice", l, bm.nrows()));
            }
            s.view_mut((m * l, 0), (l, l)).copy_from(bm);
            t.view_mut((m * l, 0), (l, l)).copy_from(&bm.transpose());
        }
        let mut stacks = Vec::with_capacity(control.len());
        for dj in control {
            if dj.len() != l {
                return Err(Error::dims("control slices", l, dj.len()));
            }
            let mut st = DMatrix::zeros(l * l, l);
            for (m, dm) in dj.iter().enumerate() {
                if dm.shape() != (l, l) {
                    return Err(Error::dims("control slice", l, dm.nrows()));
                }
                if (dm - dm.transpose()).amax() > 1e-12 * dm.amax().max(1.0) {
                    return Err(Error::param("control", format!("slice {m} is not symmetric")));
                }
                st.view_mut((m * l, 0), (l, l)).copy_from(dm);
            }
            stacks.push(st);
        }
        Ok(Self::finish(
            beta_inv, mass, stiffness, confinement, integrals, s, t, stacks,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        beta_inv: f64,
        mass: DMatrix<f64>,
        stiffness: DMatrix<f64>,
        confinement: DMatrix<f64>,
        integrals: DVector<f64>,
        interaction: DMatrix<f64>,
        interaction_t: DMatrix<f64>,
        control: Vec<DMatrix<f64>>,
    ) -> Self {
        let size = integrals.len();
        let linear = -(&stiffness * beta_inv + &confinement);
        let id_err = (&mass - DMatrix::identity(size, size)).amax();
        let mass_inverse = if id_err <= IDENTITY_MASS_TOL {
            None
        } else {
            mass.clone().try_inverse()
        };
        Self {
            beta_inv,
            dim: control.len(),
            mass,
            stiffness,
            confinement,
            integrals,
            size,
            interaction,
            interaction_t,
            control,
            linear,
            mass_inverse,
            nodal: None,
        }
    }

    pub(crate) fn with_nodal(mut self, nodal: NodalFactors) -> Result<Self> {
        let l = self.size;
        let nq = nodal.psi.nrows();
        let ok = nodal.psi.ncols() == l
            && nodal.wgrad.len() == self.dim
            && nodal.conv.len() == self.dim
            && nodal
                .wgrad
                .iter()
                .chain(&nodal.conv)
                .all(|m| m.shape() == (nq, l));
        if !ok {
            return Err(Error::dims("nodal factors", l, nodal.psi.ncols()));
        }
        self.nodal = Some(nodal);
        Ok(self)
    }

    pub(crate) fn nodal(&self) -> Option<&NodalFactors> {
        self.nodal.as_ref()
    }

    /// Number of basis functions L.
    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Same tensors, different noise strength.
    pub fn with_beta_inv(&self, beta_inv: f64) -> Self {
        let mut out = self.clone();
        out.beta_inv = beta_inv;
        out.linear = -(&self.stiffness * beta_inv + &self.confinement);
        out
    }

    /// `-(beta_inv A + C)`.
    pub fn linear_part(&self) -> &DMatrix<f64> {
        &self.linear
    }

    pub fn interaction_slice(&self, m: usize) -> DMatrix<f64> {
        let l = self.size;
        self.interaction.view((m * l, 0), (l, l)).into_owned()
    }

    pub fn control_slice(&self, axis: usize, m: usize) -> DMatrix<f64> {
        let l = self.size;
        self.control[axis].view((m * l, 0), (l, l)).into_owned()
    }

    pub(crate) fn interaction_stack(&self) -> &DMatrix<f64> {
        &self.interaction
    }

    pub(crate) fn control_stacks(&self) -> &[DMatrix<f64>] {
        &self.control
    }

    pub fn apply_mass_inverse(&self, v: DVector<f64>) -> DVector<f64> {
        match &self.mass_inverse {
            Some(mi) => mi * v,
            None => v,
        }
    }

    fn reshape(&self, v: DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_vec(self.size, self.size, v.data.into())
    }

    /// Columns `B_m a` and `B_m' a` for every m.
    fn interaction_columns(&self, a: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            self.reshape(&self.interaction * a),
            self.reshape(&self.interaction_t * a),
        )
    }

    /// `b_m(a) = a' B_m a`.
    pub fn bilinear(&self, a: &DVector<f64>) -> DVector<f64> {
        if let Some(nf) = &self.nodal {
            let rho = &nf.psi * a;
            let mut b = DVector::zeros(self.size);
            for (wg, k) in nf.wgrad.iter().zip(&nf.conv) {
                b += wg.tr_mul(&rho.component_mul(&(k * a)));
            }
            return b;
        }
        let y = self.reshape(&self.interaction * a);
        y.tr_mul(a)
    }

    /// Jacobian of [`bilinear`](Self::bilinear): row m is `a'(B_m + B_m')`.
    pub fn bilinear_jacobian(&self, a: &DVector<f64>) -> DMatrix<f64> {
        let (y, z) = self.interaction_columns(a);
        (y + z).transpose()
    }

    /// `d_m(a, u) = sum_j a' D_j[m] u_j`; `u` is `L x d` with column j = `u_j`.
    pub fn control_term(&self, a: &DVector<f64>, u: &DMatrix<f64>) -> DVector<f64> {
        let mut d = DVector::zeros(self.size);
        if let Some(nf) = &self.nodal {
            let rho = &nf.psi * a;
            for (j, wg) in nf.wgrad.iter().enumerate() {
                d += wg.tr_mul(&rho.component_mul(&(&nf.psi * u.column(j))));
            }
            return d;
        }
        for (j, st) in self.control.iter().enumerate() {
            let q = self.reshape(st * u.column(j));
            d += q.tr_mul(a);
        }
        d
    }

    /// Stationary residual, `L + 1` rows: `-(beta_inv A + C) a - b(a)` over `zeta' a - 1`.
    pub fn residual(&self, a: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(a)?;
        let top = &self.linear * a - self.bilinear(a);
        let mut f = DVector::zeros(self.size + 1);
        f.rows_mut(0, self.size).copy_from(&top);
        f[self.size] = self.integrals.dot(a) - 1.0;
        Ok(f)
    }

    /// Analytic Jacobian of [`residual`](Self::residual), `(L + 1) x L`.
    pub fn jacobian(&self, a: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(a)?;
        let l = self.size;
        let mut j = DMatrix::zeros(l + 1, l);
        j.view_mut((0, 0), (l, l))
            .copy_from(&(&self.linear - self.bilinear_jacobian(a)));
        j.row_mut(l).copy_from(&self.integrals.transpose());
        Ok(j)
    }

    /// Right-hand side `M^-1(-(beta_inv A + C) a - b(a) - d(a, u))` of the evolution.
    pub fn drift(&self, a: &DVector<f64>, u: Option<&DMatrix<f64>>) -> DVector<f64> {
        let mut r = &self.linear * a - self.bilinear(a);
        if let Some(u) = u {
            r -= self.control_term(a, u);
        }
        self.apply_mass_inverse(r)
    }

    /// Vector-Jacobian product of [`drift`](Self::drift): returns
    /// `(J_a' w, J_u' w)` with the control part shaped `L x d`.
    pub fn drift_vjp(
        &self,
        a: &DVector<f64>,
        u: Option<&DMatrix<f64>>,
        w: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let v = match &self.mass_inverse {
            Some(mi) => mi.tr_mul(w),
            None => w.clone(),
        };
        if let Some(nf) = &self.nodal {
            return self.drift_vjp_nodal(nf, a, u, &v);
        }
        let (y, z) = self.interaction_columns(a);
        let mut ga = self.linear.tr_mul(&v) - (y + z) * &v;
        let mut gu = DMatrix::zeros(self.size, self.control.len());
        for (j, st) in self.control.iter().enumerate() {
            if let Some(u) = u {
                let q = self.reshape(st * u.column(j));
                ga -= q * &v;
            }
            let r = self.reshape(st * a);
            gu.set_column(j, &(-(r * &v)));
        }
        (ga, gu)
    }

    fn drift_vjp_nodal(
        &self,
        nf: &NodalFactors,
        a: &DVector<f64>,
        u: Option<&DMatrix<f64>>,
        v: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let rho = &nf.psi * a;
        let mut ga = self.linear.tr_mul(v);
        let mut gu = DMatrix::zeros(self.size, self.dim);
        // nodal weights of v' b and v' d
        let mut on_rho = DVector::zeros(rho.len());
        for j in 0..self.dim {
            let g = &nf.wgrad[j] * v;
            let c = &nf.conv[j] * a;
            on_rho += g.component_mul(&c);
            ga -= nf.conv[j].tr_mul(&g.component_mul(&rho));
            if let Some(u) = u {
                on_rho += g.component_mul(&(&nf.psi * u.column(j)));
            }
            gu.set_column(j, &(-nf.psi.tr_mul(&g.component_mul(&rho))));
        }
        ga -= nf.psi.tr_mul(&on_rho);
        (ga, gu)
    }

    fn check(&self, a: &DVector<f64>) -> Result<()> {
        if a.len() != self.size {
            return Err(Error::dims("coefficient vector", self.size, a.len()));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("coefficient vector".into()));
        }
        Ok(())
    }
}

/// Basis values and gradients at every quadrature node.
pub(crate) struct NodalBasis {
    /// `Nq x L`.
    pub values: DMatrix<f64>,
    /// Per axis, `Nq x L`.
    pub grads: Vec<DMatrix<f64>>,
}

impl NodalBasis {
    pub fn new(basis: &SpectralBasis, quad: &QuadratureRule) -> Self {
        let (nq, l, d) = (quad.len(), basis.len(), basis.dim());
        let mut values = DMatrix::zeros(nq, l);
        let mut grads = vec![DMatrix::zeros(nq, l); d];
        let mut v = vec![0.0; l];
        let mut g = vec![[0.0; 2]; l];
        for (q, x) in quad.nodes.iter().enumerate() {
            basis.eval_all(x, &mut v, &mut g);
            for i in 0..l {
                values[(q, i)] = v[i];
                for (j, gj) in grads.iter_mut().enumerate() {
                    gj[(q, i)] = g[i][j];
                }
            }
        }
        Self { values, grads }
    }
}

fn check_finite(what: &str, v: f64, node: &[f64; 2]) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} at node {node:?}")))
    }
}

/// Assembles all operators by Gauss-Legendre quadrature. The convolution
/// `grad W * psi_k` is evaluated at each node by an inner sum over the same rule.
pub fn assemble_operators(
    basis: &SpectralBasis,
    quad: &QuadratureRule,
    model: &Model,
    beta_inv: f64,
) -> Result<GalerkinOperators> {
    if !(beta_inv > 0.0 && beta_inv.is_finite()) {
        return Err(Error::param("beta_inv", "must be positive and finite"));
    }
    if basis.dim() != quad.dim || basis.dim() != model.domain.dim() {
        return Err(Error::dims("dimension", basis.dim(), quad.dim));
    }
    let (nq, l, d) = (quad.len(), basis.len(), basis.dim());
    let nodal = NodalBasis::new(basis, quad);
    let w = DVector::from_column_slice(&quad.weights);
    let psi = &nodal.values;
    let wpsi = DMatrix::from_fn(nq, l, |q, i| w[q] * psi[(q, i)]);

    let mass = psi.tr_mul(&wpsi);
    let mut stiffness = DMatrix::zeros(l, l);
    let mut confinement = DMatrix::zeros(l, l);
    for j in 0..d {
        let g = &nodal.grads[j];
        let wg = DMatrix::from_fn(nq, l, |q, i| w[q] * g[(q, i)]);
        stiffness += g.tr_mul(&wg);
        let mut dv = DVector::zeros(nq);
        for (q, x) in quad.nodes.iter().enumerate() {
            let gv = model.confinement_gradient(x)[j];
            check_finite("confinement gradient", gv, x)?;
            dv[q] = gv;
        }
        // C[m,n] = sum_q w dV psi_n d_j psi_m
        let scaled = DMatrix::from_fn(nq, l, |q, i| wg[(q, i)] * dv[q]);
        confinement += scaled.tr_mul(psi);
    }
    let mass = 0.5 * (&mass + mass.transpose());
    let stiffness = 0.5 * (&stiffness + stiffness.transpose());
    let integrals = psi.tr_mul(&w);

    // G_j[q,k] = (d_j W * psi_k)(x_q)
    let mut conv = Vec::with_capacity(d);
    for j in 0..d {
        let mut kernel = DMatrix::zeros(nq, nq);
        for (q2, y) in quad.nodes.iter().enumerate() {
            for (q1, x) in quad.nodes.iter().enumerate() {
                let g = model.interaction_gradient(x, y)[j];
                check_finite("interaction gradient", g, x)?;
                kernel[(q1, q2)] = g;
            }
        }
        conv.push(kernel * &wpsi);
    }

    let slices: Vec<(DMatrix<f64>, Vec<DMatrix<f64>>)> = (0..l)
        .into_par_iter()
        .map(|m| {
            let mut h = DMatrix::zeros(nq, l);
            let mut dm = Vec::with_capacity(d);
            for j in 0..d {
                let gm = nodal.grads[j].column(m);
                for k in 0..l {
                    for q in 0..nq {
                        h[(q, k)] += w[q] * gm[q] * conv[j][(q, k)];
                    }
                }
                let wd = DMatrix::from_fn(nq, l, |q, i| w[q] * gm[q] * psi[(q, i)]);
                let dj = psi.tr_mul(&wd);
                dm.push(0.5 * (&dj + dj.transpose()));
            }
            (psi.tr_mul(&h), dm)
        })
        .collect();

    let mut s = DMatrix::zeros(l * l, l);
    let mut t = DMatrix::zeros(l * l, l);
    let mut stacks = vec![DMatrix::zeros(l * l, l); d];
    for (m, (bm, dm)) in slices.into_iter().enumerate() {
        s.view_mut((m * l, 0), (l, l)).copy_from(&bm);
        t.view_mut((m * l, 0), (l, l)).copy_from(&bm.transpose());
        for j in 0..d {
            stacks[j].view_mut((m * l, 0), (l, l)).copy_from(&dm[j]);
        }
    }
    let wgrad = nodal
        .grads
        .iter()
        .map(|g| DMatrix::from_fn(nq, l, |q, i| w[q] * g[(q, i)]))
        .collect();
    GalerkinOperators::finish(
        beta_inv,
        mass,
        stiffness,
        confinement,
        integrals,
        s,
        t,
        stacks,
    )
    .with_nodal(NodalFactors {
        psi: nodal.values,
        wgrad,
        conv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{HkbParams, Model};
    use crate::spectral::{recommended_points, TorusDomain};
    use std::f64::consts::PI;

    fn hkb_ops(l: usize, kappa: f64) -> (SpectralBasis, GalerkinOperators) {
        let model = Model::hkb(HkbParams::symmetric(-1.0, kappa));
        let basis = SpectralBasis::new(model.domain.clone(), l).unwrap();
        let quad = QuadratureRule::gauss_legendre(&model.domain, recommended_points(l)).unwrap();
        let ops = assemble_operators(&basis, &quad, &model, 0.7).unwrap();
        (basis, ops)
    }

    fn random_vec(n: usize, seed: u64) -> DVector<f64> {
        let mut s = seed;
        DVector::from_fn(n, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn free_model_operators() {
        let d = TorusDomain::interval(0.0, 2.0 * PI).unwrap();
        let basis = SpectralBasis::new(d.clone(), 1).unwrap();
        let quad = QuadratureRule::gauss_legendre(&d, 16).unwrap();
        let ops = assemble_operators(&basis, &quad, &Model::free(d), 1.0).unwrap();
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0, 1.0]));
        assert!((&ops.stiffness - a).amax() < 1e-12);
        assert!(ops.confinement.amax() < 1e-15);
        assert!(ops.interaction.amax() == 0.0);
        assert!((ops.integrals[0] - (2.0 * PI).sqrt()).abs() < 1e-12);
        assert!(ops.integrals.rows(1, 2).amax() < 1e-12);
        assert!(ops.mass_inverse.is_none());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (_, ops) = hkb_ops(3, 2.0);
        let a = random_vec(ops.len(), 7);
        let j = ops.jacobian(&a).unwrap();
        let h = 1e-6;
        for c in 0..ops.len() {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[c] += h;
            am[c] -= h;
            let fd = (ops.residual(&ap).unwrap() - ops.residual(&am).unwrap()) / (2.0 * h);
            let err = (fd - j.column(c)).amax();
            assert!(err <= 1e-6 * j.column(c).amax().max(1.0), "column {c}: {err}");
        }
    }

    #[test]
    fn residual_examples() {
        let (basis, ops) = hkb_ops(3, 2.0);
        let f = ops.residual(&DVector::zeros(ops.len())).unwrap();
        assert!((f[ops.len()] + 1.0).abs() < 1e-15);
        assert!(f.rows(0, ops.len()).amax() == 0.0);

        let d = TorusDomain::interval(0.0, 1.0).unwrap();
        let b = SpectralBasis::new(d.clone(), 4).unwrap();
        let q = QuadratureRule::gauss_legendre(&d, 40).unwrap();
        let free = assemble_operators(&b, &q, &Model::free(d), 0.3).unwrap();
        assert!(free.residual(&b.uniform_density()).unwrap().amax() < 1e-14);
        assert!(ops.residual(&DVector::zeros(3)).is_err());
        let _ = basis;
    }

    #[test]
    fn bilinear_row_structure() {
        let (_, ops) = hkb_ops(2, 1.5);
        let a = random_vec(ops.len(), 3);
        let jb = ops.bilinear_jacobian(&a);
        let b = ops.bilinear(&a);
        for m in 0..ops.len() {
            let bm = ops.interaction_slice(m);
            let row = a.transpose() * (&bm + bm.transpose());
            assert!((row - jb.row(m)).amax() < 1e-13);
            assert!((b[m] - a.dot(&(&bm * &a))).abs() < 1e-13);
        }
    }

    #[test]
    fn drift_vjp_matches_forward_products() {
        let d = TorusDomain::square(0.0, 1.0).unwrap();
        let model = Model::custom("anisotropic", d.clone(), std::sync::Arc::new(Skew));
        let basis = SpectralBasis::new(d.clone(), 1).unwrap();
        let quad = QuadratureRule::gauss_legendre(&d, 12).unwrap();
        let ops = assemble_operators(&basis, &quad, &model, 0.4).unwrap();
        let l = ops.len();
        let a = random_vec(l, 11);
        let u = DMatrix::from_columns(&[random_vec(l, 12), random_vec(l, 13)]);
        let w = random_vec(l, 14);
        let (ga, gu) = ops.drift_vjp(&a, Some(&u), &w);
        let h = 1e-6;
        for c in 0..l {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[c] += h;
            am[c] -= h;
            let fd = w.dot(&(ops.drift(&ap, Some(&u)) - ops.drift(&am, Some(&u)))) / (2.0 * h);
            assert!((fd - ga[c]).abs() < 1e-7, "a[{c}]");
            for j in 0..2 {
                let mut up = u.clone();
                let mut um = u.clone();
                up[(c, j)] += h;
                um[(c, j)] -= h;
                let fd = w.dot(&(ops.drift(&a, Some(&up)) - ops.drift(&a, Some(&um)))) / (2.0 * h);
                assert!((fd - gu[(c, j)]).abs() < 1e-7, "u[{c},{j}]");
            }
        }
    }

    #[test]
    fn mass_is_conserved_by_drift() {
        let (_, ops) = hkb_ops(4, 3.0);
        let l = ops.len();
        for seed in 0..5 {
            let a = random_vec(l, seed);
            let u = DMatrix::from_columns(&[random_vec(l, seed + 100)]);
            assert!(ops.integrals.dot(&ops.drift(&a, Some(&u))).abs() < 1e-10);
        }
    }

    #[test]
    fn with_beta_inv_rescales_diffusion_only() {
        let (_, ops) = hkb_ops(2, 1.0);
        let o2 = ops.with_beta_inv(0.2);
        let want = -(&ops.stiffness * 0.2 + &ops.confinement);
        assert!((o2.linear_part() - want).amax() < 1e-15);
    }

    #[test]
    fn non_finite_potential_is_reported() {
        let d = TorusDomain::interval(0.0, 1.0).unwrap();
        let model = Model::custom("bad", d.clone(), std::sync::Arc::new(Singular));
        let basis = SpectralBasis::new(d.clone(), 1).unwrap();
        let quad = QuadratureRule::gauss_legendre(&d, 4).unwrap();
        let err = assemble_operators(&basis, &quad, &model, 1.0).unwrap_err();
        assert!(err.to_string().contains("node"));
    }

    #[test]
    fn nodal_and_tensor_contractions_agree() {
        let d = TorusDomain::square(0.0, 1.0).unwrap();
        let model = Model::custom("anisotropic", d.clone(), std::sync::Arc::new(Skew));
        let basis = SpectralBasis::new(d.clone(), 2).unwrap();
        let quad = QuadratureRule::gauss_legendre(&d, 18).unwrap();
        let fast = assemble_operators(&basis, &quad, &model, 0.4).unwrap();
        assert!(fast.nodal().is_some());
        let mut slow = fast.clone();
        slow.nodal = None;
        let l = fast.len();
        let a = random_vec(l, 21);
        let u = DMatrix::from_columns(&[random_vec(l, 22), random_vec(l, 23)]);
        let w = random_vec(l, 24);
        assert!((fast.bilinear(&a) - slow.bilinear(&a)).amax() < 1e-12);
        assert!((fast.control_term(&a, &u) - slow.control_term(&a, &u)).amax() < 1e-12);
        let (fa, fu) = fast.drift_vjp(&a, Some(&u), &w);
        let (sa, su) = slow.drift_vjp(&a, Some(&u), &w);
        assert!((fa - sa).amax() < 1e-11);
        assert!((fu - su).amax() < 1e-11);
    }

    struct Skew;
    impl crate::models::Potentials for Skew {
        fn confinement(&self, x: &[f64; 2]) -> f64 {
            (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos()
        }
        fn confinement_gradient(&self, x: &[f64; 2]) -> [f64; 2] {
            let (a, b) = (2.0 * PI * x[0], 2.0 * PI * x[1]);
            [2.0 * PI * a.cos() * b.cos(), -2.0 * PI * a.sin() * b.sin()]
        }
        fn interaction(&self, x: &[f64; 2], y: &[f64; 2]) -> f64 {
            -(2.0 * PI * (x[0] - y[0])).cos() - 0.5 * (2.0 * PI * (x[1] - y[1])).cos()
        }
        fn interaction_gradient(&self, x: &[f64; 2], y: &[f64; 2]) -> [f64; 2] {
            [
                2.0 * PI * (2.0 * PI * (x[0] - y[0])).sin(),
                PI * (2.0 * PI * (x[1] - y[1])).sin(),
            ]
        }
    }

    struct Singular;
    impl crate::models::Potentials for Singular {
        fn confinement(&self, _: &[f64; 2]) -> f64 {
            0.0
        }
        fn confinement_gradient(&self, x: &[f64; 2]) -> [f64; 2] {
            [1.0 / (x[0] - x[0]), 0.0]
        }
        fn interaction(&self, _: &[f64; 2], _: &[f64; 2]) -> f64 {
            0.0
        }
        fn interaction_gradient(&self, _: &[f64; 2], _: &[f64; 2]) -> [f64; 2] {
            [0.0; 2]
        }
    }
}
