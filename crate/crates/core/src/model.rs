//! Array, sky and Jones data model, and noise-free visibility synthesis.
//!
//! Conventions:
//! - antennas and sources are 0-based; baselines are the pairs `p < q` in
//!   lexicographic order `(0,1), (0,2), …, (M-2,M-1)`;
//! - a Jones matrix is flattened row-major, `θ_{i,p} = [J₁₁, J₁₂, J₂₁, J₂₂]`;
//! - coherencies and visibilities are vectorised column-major with [`vec2`].

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algebra::{kron_conj, vec2, CMat2, CVec4, C64};
use crate::error::{Error, Result};

/// Number of baselines for `m` antennas, autocorrelations excluded.
pub fn baseline_count(m: usize) -> usize {
    m * m.saturating_sub(1) / 2
}

/// Index of baseline `(p, q)`, `p < q`, in the lexicographic ordering.
pub fn baseline_index(m: usize, p: usize, q: usize) -> usize {
    debug_assert!(p < q && q < m);
    p * (2 * m - p - 1) / 2 + (q - p - 1)
}

/// All baselines `(p, q)` with `p < q`, in storage order.
pub fn baselines(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |p| ((p + 1)..m).map(move |q| (p, q)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AntennaArray {
    positions: Vec<[f64; 2]>,
}

impl AntennaArray {
    /// `positions` are `(u, v)` in wavelengths.
    pub fn new(positions: Vec<[f64; 2]>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::invalid("antennas", format!("need at least 2 antennas, got {}", positions.len())));
        }
        if let Some(k) = positions.iter().position(|r| !(r[0].is_finite() && r[1].is_finite())) {
            return Err(Error::invalid(format!("antennas[{k}]"), "position is not finite"));
        }
        Ok(AntennaArray { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_baselines(&self) -> usize {
        baseline_count(self.len())
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn position(&self, p: usize) -> [f64; 2] {
        self.positions[p]
    }

    /// `[[Σu², Σuv], [Σuv, Σv²]]`.
    pub fn gram(&self) -> [[f64; 2]; 2] {
        let (mut uu, mut uv, mut vv) = (0.0, 0.0, 0.0);
        for [u, v] in &self.positions {
            uu += u * u;
            uv += u * v;
            vv += v * v;
        }
        [[uu, uv], [uv, vv]]
    }

    pub fn gram_determinant(&self) -> f64 {
        let g = self.gram();
        g[0][0] * g[1][1] - g[0][1] * g[1][0]
    }

    /// Ionospheric phase `η u_p + ζ v_p` for offsets `alpha = [η, ζ]`.
    pub fn phase(&self, alpha: [f64; 2], p: usize) -> f64 {
        let [u, v] = self.positions[p];
        alpha[0] * u + alpha[1] * v
    }
}

/// Calibrator coherencies `C_i` and optional known beams `H_{i,p}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceModel {
    coherencies: Vec<CMat2>,
    coherency_vecs: Vec<CVec4>,
    beams: Option<Vec<Vec<CMat2>>>,
}

impl SourceModel {
    pub fn new(coherencies: Vec<CMat2>, beams: Option<Vec<Vec<CMat2>>>) -> Result<Self> {
        if coherencies.is_empty() {
            return Err(Error::invalid("sources", "need at least one calibrator source"));
        }
        for (i, c) in coherencies.iter().enumerate() {
            check_coherency(c).map_err(|m| Error::invalid(format!("sources[{i}].coherency"), m))?;
        }
        if let Some(b) = &beams {
            if b.len() != coherencies.len() {
                return Err(Error::invalid("sources.beams", "beam table must cover every source"));
            }
            let m = b[0].len();
            if b.iter().any(|row| row.len() != m || row.iter().any(|h| !h.is_finite())) {
                return Err(Error::invalid("sources.beams", "beam rows must have equal length and finite entries"));
            }
        }
        let coherency_vecs = coherencies.iter().map(vec2).collect();
        Ok(SourceModel { coherencies, coherency_vecs, beams })
    }

    pub fn len(&self) -> usize {
        self.coherencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coherencies.is_empty()
    }

    pub fn coherency(&self, i: usize) -> &CMat2 {
        &self.coherencies[i]
    }

    /// `c_i = vec2(C_i)`.
    pub fn coherency_vec(&self, i: usize) -> &CVec4 {
        &self.coherency_vecs[i]
    }

    pub fn coherencies(&self) -> &[CMat2] {
        &self.coherencies
    }

    /// `H_{i,p}`, identity when no beams are configured.
    pub fn beam(&self, i: usize, p: usize) -> CMat2 {
        match &self.beams {
            Some(b) => b[i][p],
            None => CMat2::identity(),
        }
    }

    pub fn beams(&self) -> Option<&Vec<Vec<CMat2>>> {
        self.beams.as_ref()
    }

    pub fn has_beams(&self) -> bool {
        self.beams.is_some()
    }
}

fn check_coherency(c: &CMat2) -> std::result::Result<(), String> {
    if !c.is_finite() {
        return Err("entries must be finite".into());
    }
    let m = &c.0;
    let scale = c.norm_sqr().sqrt().max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;
    if m[0][0].im.abs() > tol || m[1][1].im.abs() > tol || (m[0][1] - m[1][0].conj()).norm() > tol {
        return Err("coherency must be Hermitian".into());
    }
    if m[0][0].re < -tol || m[1][1].re < -tol || c.det().re < -tol * scale {
        return Err("coherency must be positive semidefinite".into());
    }
    Ok(())
}

/// The `D × M` Jones matrices, source-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<CMat2>>", into = "Vec<Vec<CMat2>>")]
pub struct JonesSet {
    n_sources: usize,
    n_antennas: usize,
    entries: Vec<CMat2>,
}

impl TryFrom<Vec<Vec<CMat2>>> for JonesSet {
    type Error = Error;
    fn try_from(rows: Vec<Vec<CMat2>>) -> Result<Self> {
        let d = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if d == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("jones", "expected a non-empty rectangular sources × antennas table"));
        }
        let entries: Vec<CMat2> = rows.into_iter().flatten().collect();
        if entries.iter().any(|j| !j.is_finite()) {
            return Err(Error::invalid("jones", "entries must be finite"));
        }
        Ok(JonesSet { n_sources: d, n_antennas: m, entries })
    }
}

impl From<JonesSet> for Vec<Vec<CMat2>> {
    fn from(j: JonesSet) -> Self {
        j.entries.chunks(j.n_antennas).map(<[CMat2]>::to_vec).collect()
    }
}

impl JonesSet {
    pub fn from_fn(n_sources: usize, n_antennas: usize, mut f: impl FnMut(usize, usize) -> CMat2) -> Self {
        let mut entries = Vec::with_capacity(n_sources * n_antennas);
        for i in 0..n_sources {
            for p in 0..n_antennas {
                entries.push(f(i, p));
            }
        }
        JonesSet { n_sources, n_antennas, entries }
    }

    pub fn identity(n_sources: usize, n_antennas: usize) -> Self {
        Self::from_fn(n_sources, n_antennas, |_, _| CMat2::identity())
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn n_antennas(&self) -> usize {
        self.n_antennas
    }

    pub fn get(&self, i: usize, p: usize) -> &CMat2 {
        &self.entries[i * self.n_antennas + p]
    }

    pub fn set(&mut self, i: usize, p: usize, j: CMat2) {
        self.entries[i * self.n_antennas + p] = j;
    }

    /// `θ_{i,p}`, row-major.
    pub fn theta(&self, i: usize, p: usize) -> CVec4 {
        self.get(i, p).to_row_major()
    }

    pub fn set_theta(&mut self, i: usize, p: usize, theta: &CVec4) {
        self.set(i, p, CMat2::from_row_major(theta));
    }

    pub fn source(&self, i: usize) -> &[CMat2] {
        &self.entries[i * self.n_antennas..(i + 1) * self.n_antennas]
    }

    pub fn iter(&self) -> impl Iterator<Item = &CMat2> {
        self.entries.iter()
    }

    /// Number of real parameters, `8 D M`.
    pub fn n_real_params(&self) -> usize {
        8 * self.entries.len()
    }

    /// Real parametrisation: per `(i, p)` (sources outer, antennas inner),
    /// `[Re p₁, Im p₁, …, Re p₄, Im p₄]`.
    pub fn real_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_real_params());
        for j in &self.entries {
            for z in j.to_row_major().0 {
                out.push(z.re);
                out.push(z.im);
            }
        }
        out
    }

    pub fn from_real_params(n_sources: usize, n_antennas: usize, params: &[f64]) -> Result<Self> {
        if params.len() != 8 * n_sources * n_antennas {
            return Err(Error::invalid(
                "params",
                format!("expected {} values, got {}", 8 * n_sources * n_antennas, params.len()),
            ));
        }
        let entries = params
            .chunks(8)
            .map(|c| CMat2::new(C64::new(c[0], c[1]), C64::new(c[2], c[3]), C64::new(c[4], c[5]), C64::new(c[6], c[7])))
            .collect();
        Ok(JonesSet { n_sources, n_antennas, entries })
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(CMat2::is_finite)
    }

    /// `‖Re{self − other}‖²`.
    pub fn real_part_change(&self, other: &JonesSet) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (*a - *b).0.iter().flatten().map(|z| z.re * z.re).sum::<f64>())
            .sum()
    }

    /// Largest entry-wise modulus of `self − other`.
    pub fn max_abs_diff(&self, other: &JonesSet) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|(a, b)| (*a - *b).0.into_iter().flatten().map(|z| z.norm()))
            .fold(0.0, f64::max)
    }
}

/// Physical 3DC parameters: Faraday angles, electronic gains and ionospheric
/// offsets. Real-vector ordering is `[ϑ₁..ϑ_D, g₁ᵀ..g_Mᵀ, α₁ᵀ..α_Dᵀ]` with
/// each complex gain entry split into `(Re, Im)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredParams3DC {
    /// `ϑ_i`, radians.
    pub faraday: Vec<f64>,
    /// `g_p = (g_{p,x}, g_{p,y})`.
    pub gains: Vec<[C64; 2]>,
    /// `α_i = (η_i, ζ_i)`, radians per wavelength.
    pub offsets: Vec<[f64; 2]>,
}

impl StructuredParams3DC {
    pub fn neutral(n_sources: usize, n_antennas: usize) -> Self {
        StructuredParams3DC {
            faraday: vec![0.0; n_sources],
            gains: vec![[C64::new(1.0, 0.0); 2]; n_antennas],
            offsets: vec![[0.0; 2]; n_sources],
        }
    }

    pub fn n_sources(&self) -> usize {
        self.faraday.len()
    }

    pub fn n_antennas(&self) -> usize {
        self.gains.len()
    }

    pub fn validate(&self, n_sources: usize, n_antennas: usize) -> Result<()> {
        if self.faraday.len() != n_sources || self.offsets.len() != n_sources {
            return Err(Error::invalid("truth.structured", format!("expected {n_sources} Faraday angles and offsets")));
        }
        if self.gains.len() != n_antennas {
            return Err(Error::invalid("truth.structured.gains", format!("expected {n_antennas} gain pairs")));
        }
        let finite = self.faraday.iter().all(|x| x.is_finite())
            && self.offsets.iter().flatten().all(|x| x.is_finite())
            && self.gains.iter().flatten().all(|g| g.is_finite());
        if !finite {
            return Err(Error::invalid("truth.structured", "parameters must be finite"));
        }
        Ok(())
    }

    /// Number of real parameters, `D + 4M + 2D`.
    pub fn n_real_params(&self) -> usize {
        self.faraday.len() * 3 + self.gains.len() * 4
    }

    pub fn to_real_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_real_params());
        out.extend_from_slice(&self.faraday);
        for g in &self.gains {
            for z in g {
                out.push(z.re);
                out.push(z.im);
            }
        }
        for a in &self.offsets {
            out.extend_from_slice(a);
        }
        out
    }

    /// Labels matching [`to_real_vector`](Self::to_real_vector), 1-based.
    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.n_real_params());
        for i in 0..self.faraday.len() {
            out.push(format!("faraday_{}", i + 1));
        }
        for p in 0..self.gains.len() {
            for k in ["x", "y"] {
                out.push(format!("re_g{}_{k}", p + 1));
                out.push(format!("im_g{}_{k}", p + 1));
            }
        }
        for i in 0..self.offsets.len() {
            out.push(format!("eta_{}", i + 1));
            out.push(format!("zeta_{}", i + 1));
        }
        out
    }

    /// Index of gain `[g_p]_k` real part in the real vector.
    pub fn gain_index(&self, p: usize, k: usize) -> usize {
        self.faraday.len() + 4 * p + 2 * k
    }
}

/// `Z_{i,p} = exp{j(η_i u_p + ζ_i v_p)}·I`.
pub fn ionospheric_phase_matrix(array: &AntennaArray, alpha: [f64; 2], p: usize) -> CMat2 {
    CMat2::scalar(C64::from_polar(1.0, array.phase(alpha, p)))
}

/// `J_{i,p} = G_p H_{i,p} Z_{i,p}(α_i) F_i(ϑ_i)`.
pub fn build_structured_jones(
    params: &StructuredParams3DC,
    sources: &SourceModel,
    array: &AntennaArray,
    i: usize,
    p: usize,
) -> CMat2 {
    let g = params.gains[p];
    CMat2::diag(g[0], g[1])
        * sources.beam(i, p)
        * ionospheric_phase_matrix(array, params.offsets[i], p)
        * CMat2::rotation(params.faraday[i])
}

pub fn structured_jones_set(params: &StructuredParams3DC, sources: &SourceModel, array: &AntennaArray) -> JonesSet {
    JonesSet::from_fn(sources.len(), array.len(), |i, p| build_structured_jones(params, sources, array, i, p))
}

/// Baseline-ordered stack of 4-vector correlations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityBatch {
    n_antennas: usize,
    data: Vec<CVec4>,
}

impl VisibilityBatch {
    pub fn zeros(n_antennas: usize) -> Self {
        VisibilityBatch { n_antennas, data: vec![CVec4::zero(); baseline_count(n_antennas)] }
    }

    pub fn from_vec(n_antennas: usize, data: Vec<CVec4>) -> Result<Self> {
        if data.len() != baseline_count(n_antennas) {
            return Err(Error::invalid(
                "visibilities",
                format!(
                    "expected {} baselines for {n_antennas} antennas, got {}",
                    baseline_count(n_antennas),
                    data.len()
                ),
            ));
        }
        Ok(VisibilityBatch { n_antennas, data })
    }

    pub fn n_antennas(&self) -> usize {
        self.n_antennas
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, p: usize, q: usize) -> &CVec4 {
        &self.data[baseline_index(self.n_antennas, p, q)]
    }

    pub fn as_slice(&self) -> &[CVec4] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [CVec4] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<CVec4> {
        self.data
    }

    /// `‖x‖²` over all `4B` complex entries.
    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(CVec4::norm_sqr).sum()
    }

    pub fn add_assign(&mut self, other: &VisibilityBatch) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(CVec4::is_finite)
    }

    /// Real-valued measurement count, `8B`.
    pub fn n_real_measurements(&self) -> usize {
        8 * self.data.len()
    }
}

/// `u_{i,pq} = (J*_{i,q} ⊗ J_{i,p}) c_i`.
pub fn synth_source_baseline(jones: &JonesSet, sources: &SourceModel, i: usize, p: usize, q: usize) -> CVec4 {
    kron_conj(jones.get(i, q), jones.get(i, p)).mul_vec(sources.coherency_vec(i))
}

/// `ṽ_pq = Σ_i u_{i,pq}`.
pub fn synth_baseline(jones: &JonesSet, sources: &SourceModel, p: usize, q: usize) -> CVec4 {
    (0..sources.len()).fold(CVec4::zero(), |acc, i| acc + synth_source_baseline(jones, sources, i, p, q))
}

/// Noise-free visibilities for all baselines.
pub fn synth_all(jones: &JonesSet, sources: &SourceModel) -> VisibilityBatch {
    let m = jones.n_antennas();
    let data = baselines(m).map(|(p, q)| synth_baseline(jones, sources, p, q)).collect();
    VisibilityBatch { n_antennas: m, data }
}

/// Per-source contributions `u_i(θ_i)`.
pub fn synth_per_source(jones: &JonesSet, sources: &SourceModel) -> Vec<VisibilityBatch> {
    let m = jones.n_antennas();
    (0..sources.len())
        .map(|i| VisibilityBatch {
            n_antennas: m,
            data: baselines(m).map(|(p, q)| synth_source_baseline(jones, sources, i, p, q)).collect(),
        })
        .collect()
}

/// One calibrator entry of a scene file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub coherency: CMat2,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beams: Option<Vec<CMat2>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    /// Jones matrices built from 3DC parameters.
    Structured(StructuredParams3DC),
    /// Non-structured Jones matrices, `truth.jones[i][p]`.
    Jones(JonesSet),
}

/// A scene file: array layout, calibrators and the true Jones terms.
///
/// ```json
/// {
///   "antennas": [[0.0, 0.0], [3.1, -1.2], ...],
///   "sources": [{"coherency": [[[1,0],[0.1,0.05]], [[0.1,-0.05],[0.8,0]]]}],
///   "truth": {"structured": {"faraday": [0.3], "gains": [[[1,0],[1,0]], ...], "offsets": [[0.01, -0.02]]}}
/// }
/// ```
/// Complex numbers are `[re, im]` pairs; matrices are row lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub antennas: Vec<[f64; 2]>,
    pub sources: Vec<SourceEntry>,
    pub truth: Truth,
}

/// A validated scene.
#[derive(Clone, Debug)]
pub struct SceneModel {
    pub array: AntennaArray,
    pub sources: SourceModel,
    pub truth: JonesSet,
    pub structured: Option<StructuredParams3DC>,
}

impl Scene {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|source| Error::Parse { path: path.to_path_buf(), source })
    }

    pub fn build(&self) -> Result<SceneModel> {
        let array = AntennaArray::new(self.antennas.clone())?;
        let m = array.len();
        let beams = if self.sources.iter().any(|s| s.beams.is_some()) {
            let rows = self
                .sources
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let row = s.beams.clone().unwrap_or_else(|| vec![CMat2::identity(); m]);
                    if row.len() != m {
                        return Err(Error::invalid(
                            format!("sources[{i}].beams"),
                            format!("expected {m} beam matrices"),
                        ));
                    }
                    Ok(row)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(rows)
        } else {
            None
        };
        let sources = SourceModel::new(self.sources.iter().map(|s| s.coherency).collect(), beams)?;
        let (truth, structured) = match &self.truth {
            Truth::Structured(params) => {
                params.validate(sources.len(), m)?;
                (structured_jones_set(params, &sources, &array), Some(params.clone()))
            }
            Truth::Jones(j) => {
                if j.n_sources() != sources.len() || j.n_antennas() != m {
                    return Err(Error::invalid(
                        "truth.jones",
                        format!(
                            "expected {} × {m} Jones matrices, got {} × {}",
                            sources.len(),
                            j.n_sources(),
                            j.n_antennas()
                        ),
                    ));
                }
                (j.clone(), None)
            }
        };
        Ok(SceneModel { array, sources, truth, structured })
    }

    /// A compact random station: `m` antennas uniformly inside a disc of
    /// radius `radius` wavelengths and `d` mildly polarised calibrators with
    /// 3DC truth. Offsets and angles are drawn small enough that every
    /// ionospheric phase stays inside `(−π/2, π/2)`.
    pub fn random_station(d: usize, m: usize, radius: f64, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let antennas = (0..m)
            .map(|_| {
                let r = radius * rng.gen::<f64>().sqrt();
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        let sources = (0..d)
            .map(|i| {
                let flux = 1.0 - 0.2 * i as f64 / d.max(1) as f64;
                let pol = rng.gen_range(0.0..0.15);
                let leak = C64::from_polar(rng.gen_range(0.0..0.1), rng.gen_range(0.0..std::f64::consts::TAU));
                let coherency = CMat2::new(
                    C64::new(flux * (1.0 + pol), 0.0),
                    leak * flux,
                    leak.conj() * flux,
                    C64::new(flux * (1.0 - pol), 0.0),
                );
                SourceEntry { coherency, beams: None }
            })
            .collect();
        let max_offset = 0.8 / (radius * std::f64::consts::SQRT_2);
        let truth = StructuredParams3DC {
            faraday: (0..d).map(|_| rng.gen_range(-0.6..0.6)).collect(),
            gains: (0..m)
                .map(|_| [0, 1].map(|_| C64::from_polar(rng.gen_range(0.8..1.2), rng.gen_range(-1.0..1.0))))
                .collect(),
            offsets: (0..d)
                .map(|_| [rng.gen_range(-max_offset..max_offset), rng.gen_range(-max_offset..max_offset)])
                .collect(),
        };
        Scene { antennas, sources, truth: Truth::Structured(truth) }
    }

    /// [`random_station`](Self::random_station) with known beams
    /// `H_{i,p} = I + E`, `E_kl ~ CN(0, beam_spread²)` drawn independently per
    /// source and antenna. Distinct beams keep the calibrators separable when
    /// their ionospheric phases are too small to tell them apart.
    pub fn random_station_with_beams(d: usize, m: usize, radius: f64, beam_spread: f64, seed: u64) -> Scene {
        let mut scene = Scene::random_station(d, m, radius, seed);
        if beam_spread == 0.0 {
            return scene;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
        let normal = rand_distr::StandardNormal;
        let mut draw = || {
            let re: f64 = rng.sample(normal);
            let im: f64 = rng.sample(normal);
            C64::new(re, im) * (beam_spread / std::f64::consts::SQRT_2)
        };
        for source in &mut scene.sources {
            source.beams = Some(
                (0..m)
                    .map(|_| {
                        let (a, b, c, e) = (draw(), draw(), draw(), draw());
                        CMat2::identity() + CMat2::new(a, b, c, e)
                    })
                    .collect(),
            );
        }
        scene
    }

    /// Same layout and calibrators as [`random_station`](Self::random_station)
    /// but with unstructured truth `J_{i,p} = (I + E) e^{j2π⟨r_p, l_i⟩}`:
    /// `E_kl ~ CN(0, spread²)` independently per source and antenna, and each
    /// source sits in a direction `l_i` drawn uniformly from `[-0.5, 0.5]²`.
    pub fn random_unstructured(d: usize, m: usize, radius: f64, spread: f64, seed: u64) -> Scene {
        let mut scene = Scene::random_station(d, m, radius, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let directions: Vec<[f64; 2]> = (0..d).map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]).collect();
        let normal = rand_distr::StandardNormal;
        let mut draw = || {
            let re: f64 = rng.sample(normal);
            let im: f64 = rng.sample(normal);
            C64::new(re, im) * (spread / std::f64::consts::SQRT_2)
        };
        let positions = scene.antennas.clone();
        let jones = JonesSet::from_fn(d, m, |i, p| {
            let e = CMat2::new(draw(), draw(), draw(), draw());
            let [x, y] = positions[p];
            let phase = std::f64::consts::TAU * (x * directions[i][0] + y * directions[i][1]);
            (CMat2::identity() + e).scale(C64::from_polar(1.0, phase))
        });
        scene.truth = Truth::Jones(jones);
        scene
    }
}
