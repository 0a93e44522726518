//! Binary on-disk cache for assembled operators.
//!
//! Layout (little endian): magic, format version, key string, size L, axes d,
//! beta_inv, then M, A, C (row-major L x L), zeta, the stacked interaction
//! tensor and the d stacked control tensors (row-major L^2 x L each).

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::Model;

use super::basis::SpectralBasis;
use super::operators::{assemble_operators, GalerkinOperators, NodalFactors};
use super::quadrature::QuadratureRule;

const MAGIC: &[u8; 8] = b"MVSTOPS\0";
const VERSION: u32 = 2;

/// Identifies one assembled operator set.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheKey {
    pub model_id: String,
    pub modes_per_axis: usize,
    pub quadrature_points: usize,
    pub beta_inv: f64,
}

impl CacheKey {
    pub fn new(model: &Model, basis: &SpectralBasis, quad: &QuadratureRule, beta_inv: f64) -> Self {
        Self {
            model_id: model.id(),
            modes_per_axis: basis.modes_per_axis(),
            quadrature_points: quad.points_per_axis,
            beta_inv,
        }
    }

    fn encode(&self) -> String {
        format!(
            "{}|l={}|n={}|beta_inv={:e}",
            self.model_id, self.modes_per_axis, self.quadrature_points, self.beta_inv
        )
    }

    /// File name derived from a hash of the key.
    pub fn file_name(&self) -> String {
        // FNV-1a, stable across runs and platforms
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.encode().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("ops-{h:016x}.bin")
    }
}

fn write_matrix(w: &mut impl Write, m: &DMatrix<f64>) -> std::io::Result<()> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            w.write_all(&m[(r, c)].to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Cache(format!("truncated file: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn read_matrix(r: &mut impl Read, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    Ok(DMatrix::from_row_slice(rows, cols, &read_f64s(r, rows * cols)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Cache(format!("truncated header: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn save_operators(path: &Path, key: &CacheKey, ops: &GalerkinOperators) -> Result<()> {
    let l = ops.len();
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let k = key.encode();
    w.write_all(&(k.len() as u64).to_le_bytes())?;
    w.write_all(k.as_bytes())?;
    w.write_all(&(l as u64).to_le_bytes())?;
    w.write_all(&(ops.dim as u64).to_le_bytes())?;
    w.write_all(&ops.beta_inv.to_le_bytes())?;
    write_matrix(&mut w, &ops.mass)?;
    write_matrix(&mut w, &ops.stiffness)?;
    write_matrix(&mut w, &ops.confinement)?;
    for z in ops.integrals.iter() {
        w.write_all(&z.to_le_bytes())?;
    }
    write_matrix(&mut w, ops.interaction_stack())?;
    for st in ops.control_stacks() {
        write_matrix(&mut w, st)?;
    }
    // optional nodal section, introduced by a node count of zero when absent
    match ops.nodal() {
        Some(nf) => {
            w.write_all(&(nf.psi.nrows() as u64).to_le_bytes())?;
            write_matrix(&mut w, &nf.psi)?;
            for m in nf.wgrad.iter().chain(&nf.conv) {
                write_matrix(&mut w, m)?;
            }
        }
        None => w.write_all(&0u64.to_le_bytes())?,
    }
    w.flush()?;
    Ok(())
}

/// Loads operators, refusing files written for a different key or format version.
pub fn load_operators(path: &Path, key: &CacheKey) -> Result<GalerkinOperators> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Cache("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Cache("bad magic".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)
        .map_err(|_| Error::Cache("file too short".into()))?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Cache(format!("unsupported version {version}")));
    }
    let klen = read_u64(&mut r)? as usize;
    if klen > 1 << 20 {
        return Err(Error::Cache("corrupt key length".into()));
    }
    let mut kb = vec![0u8; klen];
    r.read_exact(&mut kb)
        .map_err(|_| Error::Cache("truncated key".into()))?;
    if kb != key.encode().as_bytes() {
        return Err(Error::Cache("key mismatch".into()));
    }
    let l = read_u64(&mut r)? as usize;
    let d = read_u64(&mut r)? as usize;
    if l == 0 || l > 1 << 16 || !(1..=2).contains(&d) {
        return Err(Error::Cache("corrupt dimensions".into()));
    }
    let beta_inv = read_f64s(&mut r, 1)?[0];
    let mass = read_matrix(&mut r, l, l)?;
    let stiffness = read_matrix(&mut r, l, l)?;
    let confinement = read_matrix(&mut r, l, l)?;
    let integrals = DVector::from_vec(read_f64s(&mut r, l)?);
    let s = read_matrix(&mut r, l * l, l)?;
    let interaction: Vec<DMatrix<f64>> = (0..l)
        .map(|m| s.view((m * l, 0), (l, l)).into_owned())
        .collect();
    let mut control = Vec::with_capacity(d);
    for _ in 0..d {
        let st = read_matrix(&mut r, l * l, l)?;
        control.push(
            (0..l)
                .map(|m| st.view((m * l, 0), (l, l)).into_owned())
                .collect::<Vec<_>>(),
        );
    }
    let ops = GalerkinOperators::from_tensors(
        beta_inv,
        mass,
        stiffness,
        confinement,
        integrals,
        &interaction,
        &control,
    )?;
    let nq = read_u64(&mut r)? as usize;
    if nq == 0 {
        return Ok(ops);
    }
    if nq > 1 << 24 {
        return Err(Error::Cache("corrupt node count".into()));
    }
    let psi = read_matrix(&mut r, nq, l)?;
    let mut rest = Vec::with_capacity(2 * d);
    for _ in 0..2 * d {
        rest.push(read_matrix(&mut r, nq, l)?);
    }
    let conv = rest.split_off(d);
    ops.with_nodal(NodalFactors {
        psi,
        wgrad: rest,
        conv,
    })
}

/// Loads from `dir` when a matching file exists, otherwise assembles and stores.
pub fn load_or_assemble(
    dir: &Path,
    basis: &SpectralBasis,
    quad: &QuadratureRule,
    model: &Model,
    beta_inv: f64,
) -> Result<GalerkinOperators> {
    let key = CacheKey::new(model, basis, quad, beta_inv);
    let path: PathBuf = dir.join(key.file_name());
    if path.exists() {
        if let Ok(ops) = load_operators(&path, &key) {
            return Ok(ops);
        }
    }
    let ops = assemble_operators(basis, quad, model, beta_inv)?;
    fs::create_dir_all(dir)?;
    save_operators(&path, &key, &ops)?;
    Ok(ops)
}
