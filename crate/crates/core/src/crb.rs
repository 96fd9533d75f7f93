//! Fisher information and Cramér-Rao bound for the real Jones parameters
//! under compound-Gaussian noise with inverse-gamma texture.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::algebra::{vec2, CMat2, CVec4, HermitianMat4, C64, J};
use crate::error::{Error, Result};
use crate::gauge::ambiguity_dimension;
use crate::model::{baselines, JonesSet, SourceModel};

/// Relative eigenvalue cutoff of the pseudo-inverse.
pub const EIGEN_CUTOFF: f64 = 1e-10;

/// Index of `Re` (or `Im` with `imag`) of row-major entry `k` of `J_{i,p}`.
pub fn param_index(n_antennas: usize, i: usize, p: usize, k: usize, imag: bool) -> usize {
    (i * n_antennas + p) * 8 + 2 * k + usize::from(imag)
}

fn unit(k: usize) -> CMat2 {
    let mut m = CMat2::zero();
    m.0[k / 2][k % 2] = C64::new(1.0, 0.0);
    m
}

/// Non-zero columns of `∂ṽ_pq/∂θ_real`: `(parameter index, derivative)`.
///
/// `V_pq = Σ_i J_{i,p} C_i J_{i,q}ᴴ` is linear in `J_{i,p}` and antilinear in
/// `J_{i,q}`, so for the unit matrix `E_k`
/// `∂V/∂Re p_k = E_k C Jqᴴ`, `∂V/∂Im p_k = j E_k C Jqᴴ`,
/// `∂V/∂Re q_k = Jp C E_kᵀ`, `∂V/∂Im q_k = −j Jp C E_kᵀ`.
pub fn sparse_jacobian(jones: &JonesSet, sources: &SourceModel, p: usize, q: usize) -> Vec<(usize, CVec4)> {
    let m = jones.n_antennas();
    let mut out = Vec::with_capacity(16 * sources.len());
    for i in 0..sources.len() {
        let c = *sources.coherency(i);
        let right = c * jones.get(i, q).adjoint();
        let left = *jones.get(i, p) * c;
        for k in 0..4 {
            let e = unit(k);
            let dp = vec2(&(e * right));
            out.push((param_index(m, i, p, k, false), dp));
            out.push((param_index(m, i, p, k, true), dp.scale(J)));
            let dq = vec2(&(left * e.transpose()));
            out.push((param_index(m, i, q, k, false), dq));
            out.push((param_index(m, i, q, k, true), dq.scale(-J)));
        }
    }
    out
}

/// Dense `4 × 8DM` sensitivity block of baseline `(p, q)`.
pub fn model_jacobian(jones: &JonesSet, sources: &SourceModel, p: usize, q: usize) -> DMatrix<C64> {
    let mut out = DMatrix::zeros(4, jones.n_real_params());
    for (col, d) in sparse_jacobian(jones, sources, p, q) {
        for r in 0..4 {
            out[(r, col)] = d.0[r];
        }
    }
    out
}

/// `2(ν+4)/(ν+5)`; 2 for infinite `ν`.
pub fn fisher_prefactor(nu: f64) -> f64 {
    if nu.is_infinite() {
        2.0
    } else {
        2.0 * (nu + 4.0) / (nu + 5.0)
    }
}

/// Real symmetric Fisher information over [`JonesSet::real_params`].
#[derive(Clone, Debug, PartialEq)]
pub struct FisherMatrix(pub DMatrix<f64>);

impl FisherMatrix {
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// `[F]_kl = 2(ν+4)/(ν+5) Σ_pq Re{∂ṽᴴ/∂k Ω⁻¹ ∂ṽ/∂l}` with `Ω` the shared
/// scatter matrix of the noise.
pub fn fisher(jones: &JonesSet, sources: &SourceModel, omega: &HermitianMat4, nu: f64) -> Result<FisherMatrix> {
    if !(nu > 0.0) {
        return Err(Error::invalid("nu", "degrees of freedom must be positive"));
    }
    let inv = omega.inverse()?;
    let n = jones.n_real_params();
    let pairs: Vec<_> = baselines(jones.n_antennas()).collect();
    let parts: Vec<DMatrix<f64>> = pairs
        .par_iter()
        .map(|&(p, q)| {
            let cols = sparse_jacobian(jones, sources, p, q);
            let weighted: Vec<CVec4> = cols.iter().map(|(_, d)| inv.mul_vec(d)).collect();
            let mut f = DMatrix::zeros(n, n);
            for (k, dk) in &cols {
                for ((l, _), wl) in cols.iter().zip(&weighted) {
                    f[(*k, *l)] += dk.dot(wl).re;
                }
            }
            f
        })
        .collect();
    let mut total = DMatrix::zeros(n, n);
    for f in parts {
        total += f;
    }
    total *= fisher_prefactor(nu);
    let sym = (&total + total.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { stage: "Fisher assembly" });
    }
    Ok(FisherMatrix(sym))
}

/// Per-parameter bounds from the pseudo-inverse of `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct Crb {
    pub diag: Vec<f64>,
    /// Eigenvalues of `F` at or below the cutoff.
    pub null_dimension: usize,
    pub cutoff: f64,
}

impl Crb {
    /// Whether the null space is exactly the model's ambiguity group.
    pub fn null_matches_ambiguity(&self, n_sources: usize) -> bool {
        self.null_dimension == ambiguity_dimension(n_sources)
    }
}

/// Diagonal of the pseudo-inverse with eigenvalues below
/// `EIGEN_CUTOFF · λ_max` discarded.
pub fn crb_diag(f: &FisherMatrix) -> Crb {
    let eig = SymmetricEigen::new(f.0.clone());
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let cutoff = EIGEN_CUTOFF * lmax;
    let n = f.dim();
    let mut diag = vec![0.0; n];
    let mut null_dimension = 0;
    for (e, v) in eig.eigenvalues.iter().zip(eig.eigenvectors.column_iter()) {
        if *e <= cutoff {
            null_dimension += 1;
            continue;
        }
        for (d, x) in diag.iter_mut().zip(v.iter()) {
            *d += x * x / e;
        }
    }
    Crb { diag, null_dimension, cutoff }
}

/// Bound for `jones` under scatter `omega` and texture degrees of freedom `nu`.
pub fn crb(jones: &JonesSet, sources: &SourceModel, omega: &HermitianMat4, nu: f64) -> Result<Crb> {
    Ok(crb_diag(&fisher(jones, sources, omega, nu)?))
}
