//! Ambiguity of the unstructured Jones model.
//!
//! Stack the Jones matrices of antenna `p` as `K_p = [J_{1,p} … J_{D,p}]`
//! (2×2D) and let `C = blockdiag(C_1 … C_D)`. Then `V_pq = K_p C K_qᴴ`, so
//! `K_p → K_p Q` for all `p` leaves every visibility unchanged whenever
//! `Q C Qᴴ = C`. With `L = C^{1/2}` that group is `Q = L U L⁻¹`, `U ∈ U(2D)`,
//! of real dimension `4D²`. It contains the per-source rotations
//! (block-diagonal `U`) and also mixes sources.
//!
//! [`anchor_in_place`] removes the ambiguity by orthogonal Procrustes in the
//! `C`-whitened metric (closed form). [`align_jones`] starts there and
//! refines `U` by Gauss-Newton on the plain Euclidean distance in Jones
//! entries, which to first order is the orthogonal projection of the error
//! off the ambiguity directions.

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::algebra::{CMat2, C64};
use crate::model::{JonesSet, SourceModel};

/// Relative determinant below which a coherency is treated as singular and
/// alignment is skipped.
pub const SINGULAR_COHERENCY: f64 = 1e-10;

const REFINE_STEPS: usize = 30;
const REFINE_TOLERANCE: f64 = 1e-28;

/// Real dimension of the ambiguity group for `d` sources.
pub fn ambiguity_dimension(d: usize) -> usize {
    4 * d * d
}

fn to_na(m: &CMat2) -> Matrix2<C64> {
    Matrix2::from_fn(|r, c| m.0[r][c])
}

fn from_na(m: &Matrix2<C64>) -> CMat2 {
    CMat2([[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]])
}

/// Unitary polar factor of `m`.
pub fn polar_unitary(m: &CMat2) -> CMat2 {
    let svd = to_na(m).svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => from_na(&(u * v_t)),
        _ => CMat2::identity(),
    }
}

fn polar_dense(m: &DMatrix<C64>) -> DMatrix<C64> {
    let svd = m.clone().svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => u * v_t,
        _ => DMatrix::identity(m.nrows(), m.ncols()),
    }
}

/// `(C^{1/2}, C^{-1/2})` when `C` is well conditioned.
fn whitening(c: &CMat2) -> Option<(CMat2, CMat2)> {
    let tr = c.trace().re;
    if !(tr > 0.0) || c.det().re <= SINGULAR_COHERENCY * tr * tr {
        return None;
    }
    let l = c.sqrt_hpd()?;
    let inv = l.inverse()?;
    Some((l, inv))
}

fn block_diag(blocks: &[CMat2]) -> DMatrix<C64> {
    let n = 2 * blocks.len();
    let mut out = DMatrix::zeros(n, n);
    for (i, b) in blocks.iter().enumerate() {
        for r in 0..2 {
            for c in 0..2 {
                out[(2 * i + r, 2 * i + c)] = b.0[r][c];
            }
        }
    }
    out
}

fn stacked(j: &JonesSet, p: usize) -> DMatrix<C64> {
    let d = j.n_sources();
    DMatrix::from_fn(2, 2 * d, |r, c| j.get(c / 2, p).0[r][c % 2])
}

/// A transform `K_p → K_p Q` in the ambiguity group.
#[derive(Clone, Debug, PartialEq)]
pub struct GaugeTransform {
    q: DMatrix<C64>,
}

impl GaugeTransform {
    pub fn identity(d: usize) -> Self {
        GaugeTransform { q: DMatrix::identity(2 * d, 2 * d) }
    }

    /// Wraps an arbitrary invertible `2D×2D` matrix. Only transforms with
    /// `Q C Qᴴ = C` preserve visibilities.
    pub fn from_matrix(q: DMatrix<C64>) -> Self {
        GaugeTransform { q }
    }

    /// `Q` as a dense `2D×2D` matrix.
    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.q
    }

    pub fn apply(&self, jones: &JonesSet) -> JonesSet {
        let mut out = jones.clone();
        self.apply_in_place(&mut out);
        out
    }

    pub fn apply_in_place(&self, jones: &mut JonesSet) {
        for p in 0..jones.n_antennas() {
            let k = stacked(jones, p) * &self.q;
            for i in 0..jones.n_sources() {
                jones.set(i, p, CMat2::new(k[(0, 2 * i)], k[(0, 2 * i + 1)], k[(1, 2 * i)], k[(1, 2 * i + 1)]));
            }
        }
    }
}

struct Frame {
    l: DMatrix<C64>,
    l_inv: DMatrix<C64>,
}

fn frame(sources: &SourceModel) -> Option<Frame> {
    let mut l = Vec::with_capacity(sources.len());
    let mut l_inv = Vec::with_capacity(sources.len());
    for i in 0..sources.len() {
        let (a, b) = whitening(sources.coherency(i))?;
        l.push(a);
        l_inv.push(b);
    }
    Some(Frame { l: block_diag(&l), l_inv: block_diag(&l_inv) })
}

fn whitened_unitary(estimate: &JonesSet, reference: &JonesSet, f: &Frame) -> DMatrix<C64> {
    let n = 2 * estimate.n_sources();
    let mut m = DMatrix::<C64>::zeros(n, n);
    for p in 0..estimate.n_antennas() {
        let e = stacked(estimate, p) * &f.l;
        let r = stacked(reference, p) * &f.l;
        m += e.adjoint() * r;
    }
    polar_dense(&m)
}

/// Best transform in the `C`-whitened metric. Identity when any coherency is
/// singular.
pub fn whitened_alignment(estimate: &JonesSet, reference: &JonesSet, sources: &SourceModel) -> GaugeTransform {
    let d = estimate.n_sources();
    let Some(f) = frame(sources) else {
        return GaugeTransform::identity(d);
    };
    let u = whitened_unitary(estimate, reference, &f);
    GaugeTransform { q: &f.l * u * &f.l_inv }
}

/// Hermitian basis element `k` of size `n`: diagonal units, then symmetric
/// and antisymmetric pairs above the diagonal.
fn hermitian_basis(n: usize, k: usize) -> DMatrix<C64> {
    let mut h = DMatrix::zeros(n, n);
    if k < n {
        h[(k, k)] = C64::new(1.0, 0.0);
        return h;
    }
    let mut idx = n;
    for r in 0..n {
        for c in r + 1..n {
            if idx == k {
                h[(r, c)] = C64::new(1.0, 0.0);
                h[(c, r)] = C64::new(1.0, 0.0);
                return h;
            }
            if idx + 1 == k {
                h[(r, c)] = C64::new(0.0, 1.0);
                h[(c, r)] = C64::new(0.0, -1.0);
                return h;
            }
            idx += 2;
        }
    }
    unreachable!("basis index {k} out of range for size {n}")
}

/// Cayley map of the Hermitian `h`: `(I − jh/2)⁻¹ (I + jh/2)`, exactly unitary.
fn cayley(h: &DMatrix<C64>) -> Option<DMatrix<C64>> {
    let n = h.nrows();
    let half = h * C64::new(0.0, 0.5);
    let id = DMatrix::<C64>::identity(n, n);
    let inv = (&id - &half).try_inverse()?;
    Some(inv * (id + half))
}

fn euclidean_cost(estimate: &[DMatrix<C64>], reference: &[DMatrix<C64>], q: &DMatrix<C64>) -> f64 {
    estimate.iter().zip(reference).map(|(e, r)| (e * q - r).norm_squared()).sum()
}

/// Best transform in the Euclidean metric on Jones entries: the whitened
/// solution refined by Gauss-Newton over `U` with a Cayley retraction.
pub fn euclidean_alignment(estimate: &JonesSet, reference: &JonesSet, sources: &SourceModel) -> GaugeTransform {
    let d = estimate.n_sources();
    let Some(f) = frame(sources) else {
        return GaugeTransform::identity(d);
    };
    let n = 2 * d;
    let dim = ambiguity_dimension(d);
    let est: Vec<_> = (0..estimate.n_antennas()).map(|p| stacked(estimate, p)).collect();
    let refs: Vec<_> = (0..reference.n_antennas()).map(|p| stacked(reference, p)).collect();
    let basis: Vec<_> = (0..dim).map(|k| hermitian_basis(n, k)).collect();
    let mut u = whitened_unitary(estimate, reference, &f);
    let mut cost = euclidean_cost(&est, &refs, &(&f.l * &u * &f.l_inv));
    let rows = 2 * 2 * n * est.len();
    for _ in 0..REFINE_STEPS {
        let a: Vec<_> = est.iter().map(|e| e * &f.l * &u).collect();
        let q = &f.l * &u * &f.l_inv;
        let mut jac = DMatrix::<f64>::zeros(rows, dim);
        let mut rhs = DVector::<f64>::zeros(rows);
        for (k, h) in basis.iter().enumerate() {
            let mut row = 0;
            for ap in &a {
                let col = ap * h * &f.l_inv * C64::new(0.0, 1.0);
                for z in col.iter() {
                    jac[(row, k)] = z.re;
                    jac[(row + 1, k)] = z.im;
                    row += 2;
                }
            }
        }
        let mut row = 0;
        for (e, r) in est.iter().zip(&refs) {
            let res = e * &q - r;
            for z in res.iter() {
                rhs[row] = -z.re;
                rhs[row + 1] = -z.im;
                row += 2;
            }
        }
        let Ok(step) = jac.svd(true, true).solve(&rhs, 1e-12) else {
            break;
        };
        let h = basis.iter().zip(step.iter()).fold(DMatrix::<C64>::zeros(n, n), |acc, (b, s)| acc + b * C64::from(*s));
        let Some(rot) = cayley(&h) else {
            break;
        };
        let next = &u * rot;
        let next_cost = euclidean_cost(&est, &refs, &(&f.l * &next * &f.l_inv));
        if !(next_cost <= cost) {
            break;
        }
        let gain = cost - next_cost;
        u = next;
        cost = next_cost;
        if step.norm_squared() < REFINE_TOLERANCE || gain <= REFINE_TOLERANCE * cost.max(1.0) {
            break;
        }
    }
    GaugeTransform { q: &f.l * u * &f.l_inv }
}

/// `estimate` moved as close as possible to `reference` in Jones entries.
pub fn align_jones(estimate: &JonesSet, reference: &JonesSet, sources: &SourceModel) -> JonesSet {
    euclidean_alignment(estimate, reference, sources).apply(estimate)
}

/// Moves `estimate` towards `reference` with the closed-form whitened
/// transform. Used to pin the iterates of a solver.
pub fn anchor_in_place(estimate: &mut JonesSet, reference: &JonesSet, sources: &SourceModel) {
    whitened_alignment(estimate, reference, sources).apply_in_place(estimate);
}
