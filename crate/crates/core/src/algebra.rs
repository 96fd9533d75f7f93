//! Fixed-size complex kernels: 2×2 Jones/coherency matrices, 4-vectors for
//! vectorised correlations and 4×4 blocks for noise covariances and the
//! per-antenna normal equations.
//!
//! Vectorisation is column-major everywhere: `vec2([[a, b], [c, d]]) =
//! [a, c, b, d]`, so that `vec(A·B·C) = (Cᵀ ⊗ A)·vec(B)`.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const J: C64 = C64::new(0.0, 1.0);

/// Relative pivot tolerance used by [`herm_solve`].
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// A 2×2 complex matrix, indexed `[row][col]`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CMat2(pub [[C64; 2]; 2]);

impl CMat2 {
    pub const fn new(m11: C64, m12: C64, m21: C64, m22: C64) -> Self {
        CMat2([[m11, m12], [m21, m22]])
    }

    pub const fn identity() -> Self {
        CMat2::new(ONE, ZERO, ZERO, ONE)
    }

    pub const fn zero() -> Self {
        CMat2::new(ZERO, ZERO, ZERO, ZERO)
    }

    pub fn diag(a: C64, b: C64) -> Self {
        CMat2::new(a, ZERO, ZERO, b)
    }

    pub fn scalar(s: C64) -> Self {
        CMat2::diag(s, s)
    }

    /// Real rotation by `angle` radians.
    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        CMat2::new(c.into(), (-s).into(), s.into(), c.into())
    }

    /// Row-major flattening `[m11, m12, m21, m22]`, the Jones parameter layout.
    pub fn to_row_major(&self) -> CVec4 {
        CVec4([self.0[0][0], self.0[0][1], self.0[1][0], self.0[1][1]])
    }

    pub fn from_row_major(v: &CVec4) -> Self {
        CMat2::new(v.0[0], v.0[1], v.0[2], v.0[3])
    }

    pub fn adjoint(&self) -> Self {
        let m = &self.0;
        CMat2::new(m[0][0].conj(), m[1][0].conj(), m[0][1].conj(), m[1][1].conj())
    }

    pub fn conj(&self) -> Self {
        let m = &self.0;
        CMat2::new(m[0][0].conj(), m[0][1].conj(), m[1][0].conj(), m[1][1].conj())
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        CMat2::new(m[0][0], m[1][0], m[0][1], m[1][1])
    }

    pub fn trace(&self) -> C64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn det(&self) -> C64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn scale(&self, s: C64) -> Self {
        let m = &self.0;
        CMat2::new(m[0][0] * s, m[0][1] * s, m[1][0] * s, m[1][1] * s)
    }

    pub fn inverse(&self) -> Option<Self> {
        let d = self.det();
        if d.norm() == 0.0 || !d.is_finite() {
            return None;
        }
        let m = &self.0;
        Some(CMat2::new(m[1][1], -m[0][1], -m[1][0], m[0][0]).scale(d.inv()))
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().flatten().map(|z| z.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|z| z.is_finite())
    }

    /// Principal square root of a Hermitian positive-definite matrix.
    pub fn sqrt_hpd(&self) -> Option<Self> {
        let det = self.det().re;
        let tr = self.trace().re;
        if !(det > 0.0 && tr > 0.0) {
            return None;
        }
        let s = det.sqrt();
        let t = (tr + 2.0 * s).sqrt();
        Some((*self + CMat2::scalar(s.into())).scale((1.0 / t).into()))
    }
}

impl Mul for CMat2 {
    type Output = CMat2;
    fn mul(self, rhs: CMat2) -> CMat2 {
        let a = &self.0;
        let b = &rhs.0;
        CMat2::new(
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        )
    }
}

impl Add for CMat2 {
    type Output = CMat2;
    fn add(self, rhs: CMat2) -> CMat2 {
        let a = &self.0;
        let b = &rhs.0;
        CMat2::new(a[0][0] + b[0][0], a[0][1] + b[0][1], a[1][0] + b[1][0], a[1][1] + b[1][1])
    }
}

impl Sub for CMat2 {
    type Output = CMat2;
    fn sub(self, rhs: CMat2) -> CMat2 {
        self + rhs.scale(-ONE)
    }
}

/// A complex 4-vector.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CVec4(pub [C64; 4]);

impl CVec4 {
    pub const fn zero() -> Self {
        CVec4([ZERO; 4])
    }

    pub fn basis(k: usize) -> Self {
        let mut v = CVec4::zero();
        v.0[k] = ONE;
        v
    }

    /// `xᴴ y`.
    pub fn dot(&self, other: &CVec4) -> C64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn scale(&self, s: C64) -> Self {
        CVec4(self.0.map(|z| z * s))
    }

    pub fn conj(&self) -> Self {
        CVec4(self.0.map(|z| z.conj()))
    }

    /// `x xᴴ`.
    pub fn outer(&self) -> HermitianMat4 {
        let mut m = CMat4::zero();
        for r in 0..4 {
            for c in 0..4 {
                m.0[r][c] = self.0[r] * self.0[c].conj();
            }
        }
        HermitianMat4(m)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.is_finite())
    }
}

impl Index<usize> for CVec4 {
    type Output = C64;
    fn index(&self, k: usize) -> &C64 {
        &self.0[k]
    }
}

impl IndexMut<usize> for CVec4 {
    fn index_mut(&mut self, k: usize) -> &mut C64 {
        &mut self.0[k]
    }
}

impl Add for CVec4 {
    type Output = CVec4;
    fn add(self, rhs: CVec4) -> CVec4 {
        CVec4([self.0[0] + rhs.0[0], self.0[1] + rhs.0[1], self.0[2] + rhs.0[2], self.0[3] + rhs.0[3]])
    }
}

impl AddAssign for CVec4 {
    fn add_assign(&mut self, rhs: CVec4) {
        *self = *self + rhs;
    }
}

impl Sub for CVec4 {
    type Output = CVec4;
    fn sub(self, rhs: CVec4) -> CVec4 {
        CVec4([self.0[0] - rhs.0[0], self.0[1] - rhs.0[1], self.0[2] - rhs.0[2], self.0[3] - rhs.0[3]])
    }
}

impl SubAssign for CVec4 {
    fn sub_assign(&mut self, rhs: CVec4) {
        *self = *self - rhs;
    }
}

impl Neg for CVec4 {
    type Output = CVec4;
    fn neg(self) -> CVec4 {
        self.scale(-ONE)
    }
}

/// A general 4×4 complex matrix, indexed `[row][col]`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CMat4(pub [[C64; 4]; 4]);

impl CMat4 {
    pub const fn zero() -> Self {
        CMat4([[ZERO; 4]; 4])
    }

    pub fn identity() -> Self {
        let mut m = CMat4::zero();
        for k in 0..4 {
            m.0[k][k] = ONE;
        }
        m
    }

    pub fn from_columns(cols: &[CVec4; 4]) -> Self {
        let mut m = CMat4::zero();
        for (c, col) in cols.iter().enumerate() {
            for r in 0..4 {
                m.0[r][c] = col.0[r];
            }
        }
        m
    }

    pub fn column(&self, c: usize) -> CVec4 {
        CVec4([self.0[0][c], self.0[1][c], self.0[2][c], self.0[3][c]])
    }

    pub fn mul_vec(&self, v: &CVec4) -> CVec4 {
        let mut out = CVec4::zero();
        for r in 0..4 {
            out.0[r] = (0..4).map(|c| self.0[r][c] * v.0[c]).sum();
        }
        out
    }

    pub fn adjoint(&self) -> Self {
        let mut m = CMat4::zero();
        for r in 0..4 {
            for c in 0..4 {
                m.0[r][c] = self.0[c][r].conj();
            }
        }
        m
    }

    pub fn conj(&self) -> Self {
        CMat4(self.0.map(|row| row.map(|z| z.conj())))
    }

    pub fn scale(&self, s: C64) -> Self {
        CMat4(self.0.map(|row| row.map(|z| z * s)))
    }

    pub fn trace(&self) -> C64 {
        (0..4).map(|k| self.0[k][k]).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.0.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|z| z.is_finite())
    }
}

impl Mul for CMat4 {
    type Output = CMat4;
    fn mul(self, rhs: CMat4) -> CMat4 {
        let mut m = CMat4::zero();
        for r in 0..4 {
            for c in 0..4 {
                m.0[r][c] = (0..4).map(|k| self.0[r][k] * rhs.0[k][c]).sum();
            }
        }
        m
    }
}

impl Add for CMat4 {
    type Output = CMat4;
    fn add(self, rhs: CMat4) -> CMat4 {
        let mut m = self;
        for r in 0..4 {
            for c in 0..4 {
                m.0[r][c] += rhs.0[r][c];
            }
        }
        m
    }
}

impl Sub for CMat4 {
    type Output = CMat4;
    fn sub(self, rhs: CMat4) -> CMat4 {
        self + rhs.scale(-ONE)
    }
}

/// A 4×4 Hermitian matrix. Construction through [`HermitianMat4::new`]
/// checks symmetry and stores the exactly-symmetrised value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CMat4", into = "CMat4")]
pub struct HermitianMat4(CMat4);

/// Relative Hermitian-symmetry tolerance accepted on construction.
pub const HERMITIAN_TOLERANCE: f64 = 1e-12;

impl TryFrom<CMat4> for HermitianMat4 {
    type Error = Error;
    fn try_from(m: CMat4) -> Result<Self> {
        HermitianMat4::new(m)
    }
}

impl From<HermitianMat4> for CMat4 {
    fn from(h: HermitianMat4) -> CMat4 {
        h.0
    }
}

impl HermitianMat4 {
    pub fn new(m: CMat4) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::NonFinite { stage: "hermitian matrix construction" });
        }
        let scale = m.frobenius().max(f64::MIN_POSITIVE);
        let asym = (m - m.adjoint()).frobenius();
        if asym > HERMITIAN_TOLERANCE * scale {
            return Err(Error::NotHermitian { asymmetry: asym / scale });
        }
        Ok(HermitianMat4::symmetrised(&m))
    }

    /// `(m + mᴴ)/2`, no checks.
    pub fn symmetrised(m: &CMat4) -> Self {
        HermitianMat4((*m + m.adjoint()).scale((0.5).into()))
    }

    pub fn identity() -> Self {
        HermitianMat4(CMat4::identity())
    }

    /// `I/4`, the unit-trace white speckle covariance.
    pub fn white() -> Self {
        HermitianMat4(CMat4::identity().scale((0.25).into()))
    }

    pub fn zero() -> Self {
        HermitianMat4(CMat4::zero())
    }

    pub fn matrix(&self) -> &CMat4 {
        &self.0
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.0 .0[r][c]
    }

    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    pub fn scale(&self, s: f64) -> Self {
        HermitianMat4(self.0.scale(s.into()))
    }

    pub fn conj(&self) -> Self {
        HermitianMat4(self.0.conj())
    }

    pub fn mul_vec(&self, v: &CVec4) -> CVec4 {
        self.0.mul_vec(v)
    }

    pub fn add_ridge(&self, delta: f64) -> Self {
        self.add(&HermitianMat4::identity().scale(delta))
    }

    pub fn add(&self, other: &HermitianMat4) -> Self {
        HermitianMat4(self.0 + other.0)
    }

    /// Divide by the trace so that `tr = 1`.
    pub fn trace_normalized(&self) -> Option<Self> {
        let t = self.trace();
        if t > 0.0 && t.is_finite() {
            Some(self.scale(1.0 / t))
        } else {
            None
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.0.frobenius()
    }

    /// `xᴴ A⁻¹ x` via the factorisation.
    pub fn inv_quadratic_form(&self, x: &CVec4) -> Result<f64> {
        let y = herm_solve(self, x)?;
        Ok(x.dot(&y).re)
    }

    pub fn inverse(&self) -> Result<HermitianMat4> {
        let ldl = Ldl::factor(self)?;
        let cols = [0, 1, 2, 3].map(|k| ldl.solve(&CVec4::basis(k)));
        Ok(HermitianMat4::symmetrised(&CMat4::from_columns(&cols)))
    }

    /// `log |A|`; requires a positive-definite matrix.
    pub fn log_det(&self) -> Result<f64> {
        let ldl = Ldl::factor(self)?;
        if ldl.d.iter().any(|&d| d <= 0.0) {
            return Err(Error::SingularMatrix {
                pivot: ldl.d.iter().cloned().fold(f64::INFINITY, f64::min),
                tolerance: 0.0,
            });
        }
        Ok(ldl.d.iter().map(|d| d.ln()).sum())
    }

    /// Lower-triangular `L` with `A = L Lᴴ` for positive-semidefinite `A`.
    /// Columns with a vanishing pivot are zeroed.
    pub fn psd_sqrt_factor(&self) -> CMat4 {
        let a = &self.0 .0;
        let tol = PIVOT_TOLERANCE * self.frobenius();
        let mut l = CMat4::zero();
        for j in 0..4 {
            let mut d = a[j][j].re;
            for k in 0..j {
                d -= l.0[j][k].norm_sqr();
            }
            if d <= tol {
                continue;
            }
            let d = d.sqrt();
            l.0[j][j] = d.into();
            for i in (j + 1)..4 {
                let mut s = a[i][j];
                for k in 0..j {
                    s -= l.0[i][k] * l.0[j][k].conj();
                }
                l.0[i][j] = s / d;
            }
        }
        l
    }
}

/// `A = L D Lᴴ` factorisation without pivoting, unit lower-triangular `L`.
struct Ldl {
    l: [[C64; 4]; 4],
    d: [f64; 4],
}

impl Ldl {
    fn factor(a: &HermitianMat4) -> Result<Self> {
        let m = &a.0 .0;
        let tolerance = PIVOT_TOLERANCE * a.frobenius();
        let mut l = [[ZERO; 4]; 4];
        let mut d = [0.0; 4];
        for j in 0..4 {
            let mut dj = m[j][j].re;
            for k in 0..j {
                dj -= l[j][k].norm_sqr() * d[k];
            }
            if !(dj.abs() > tolerance) {
                return Err(Error::SingularMatrix { pivot: dj.abs(), tolerance });
            }
            d[j] = dj;
            l[j][j] = ONE;
            for i in (j + 1)..4 {
                let mut s = m[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k].conj() * d[k];
                }
                l[i][j] = s / dj;
            }
        }
        Ok(Ldl { l, d })
    }

    fn solve(&self, b: &CVec4) -> CVec4 {
        let l = &self.l;
        let mut y = *b;
        for i in 0..4 {
            for k in 0..i {
                let t = l[i][k] * y.0[k];
                y.0[i] -= t;
            }
        }
        for i in 0..4 {
            y.0[i] /= self.d[i];
        }
        for i in (0..4).rev() {
            for k in (i + 1)..4 {
                let t = l[k][i].conj() * y.0[k];
                y.0[i] -= t;
            }
        }
        y
    }
}

/// Column-major vectorisation `[m11, m21, m12, m22]`.
pub fn vec2(m: &CMat2) -> CVec4 {
    CVec4([m.0[0][0], m.0[1][0], m.0[0][1], m.0[1][1]])
}

/// Inverse of [`vec2`].
pub fn unvec2(v: &CVec4) -> CMat2 {
    CMat2::new(v.0[0], v.0[2], v.0[1], v.0[3])
}

/// `conj(jq) ⊗ jp`, so that `kron_conj(jq, jp)·vec2(C) = vec2(jp·C·jqᴴ)`.
pub fn kron_conj(jq: &CMat2, jp: &CMat2) -> CMat4 {
    let mut out = CMat4::zero();
    for a in 0..2 {
        for b in 0..2 {
            let s = jq.0[a][b].conj();
            for r in 0..2 {
                for c in 0..2 {
                    out.0[2 * a + r][2 * b + c] = s * jp.0[r][c];
                }
            }
        }
    }
    out
}

/// Error-free transformation of `a + b`.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Compensated dot product of real sequences.
fn dot_compensated(terms: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for (x, y) in terms {
        let p = x * y;
        let pe = x.mul_add(y, -p);
        let (t, e) = two_sum(s, p);
        s = t;
        c += e + pe;
    }
    s + c
}

/// `b − a·x` evaluated with compensated arithmetic.
fn residual_compensated(a: &HermitianMat4, x: &CVec4, b: &CVec4) -> CVec4 {
    let m = a.matrix();
    let mut r = CVec4::zero();
    for i in 0..4 {
        let re = (0..4)
            .flat_map(|k| [(m.0[i][k].re, -x.0[k].re), (m.0[i][k].im, x.0[k].im)])
            .chain(std::iter::once((b.0[i].re, 1.0)));
        let im = (0..4)
            .flat_map(|k| [(m.0[i][k].re, -x.0[k].im), (m.0[i][k].im, -x.0[k].re)])
            .chain(std::iter::once((b.0[i].im, 1.0)));
        r.0[i] = C64::new(dot_compensated(re), dot_compensated(im));
    }
    r
}

/// Solve `a·x = b` for Hermitian `a` via `L D Lᴴ` with two steps of iterative
/// refinement on compensated residuals. Fails with [`Error::SingularMatrix`]
/// when a pivot falls below `1e-12·‖a‖_F`.
pub fn herm_solve(a: &HermitianMat4, b: &CVec4) -> Result<CVec4> {
    let ldl = Ldl::factor(a)?;
    let mut x = ldl.solve(b);
    for _ in 0..2 {
        let r = residual_compensated(a, &x, b);
        x += ldl.solve(&r);
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { stage: "hermitian solve" });
    }
    Ok(x)
}
