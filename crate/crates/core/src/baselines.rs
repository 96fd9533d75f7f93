//! Comparison calibrators: white Gaussian least squares and an iteratively
//! reweighted Student's-t calibrator, both driven by the same EM loop as the
//! robust calibrator.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::algebra::{unvec2, CMat2, CVec4, HermitianMat4};
use crate::calib_robust::{
    calibrate, check_inputs, run_em, Budget, CalibrationConfig, CalibrationState, EmWeights, FrozenNoise, NoiseState,
    NoiseUpdater, TAU_FLOOR,
};
use crate::error::{Error, Result};
use crate::model::{JonesSet, SourceModel, VisibilityBatch};
use crate::noise::Speckle;

/// Grid of degrees of freedom searched when `ν` is estimated.
pub const NU_GRID_MIN: f64 = 0.1;
pub const NU_GRID_MAX: f64 = 100.0;
pub const NU_GRID_POINTS: usize = 61;

/// Calibrator selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    Robust,
    GaussianLs,
    StudentT {
        nu_init: f64,
        #[serde(default)]
        estimate_nu: bool,
    },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Robust => "robust",
            Method::GaussianLs => "gaussian_ls",
            Method::StudentT { .. } => "student_t",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Method::StudentT { nu_init, .. } = self {
            if !(*nu_init > 0.0 && nu_init.is_finite()) {
                return Err(Error::invalid("nu_init", "degrees of freedom must be positive and finite"));
            }
        }
        Ok(())
    }
}

/// A calibrator together with its budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    #[serde(flatten)]
    pub kind: Method,
    #[serde(default)]
    pub budget: Budget,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        self.budget.validate()
    }
}

/// Runs `method` with `config`'s initial point and budget.
pub fn run_method(
    method: &Method,
    x: &VisibilityBatch,
    sources: &SourceModel,
    config: &CalibrationConfig,
) -> Result<CalibrationState> {
    method.validate()?;
    match method {
        Method::Robust => calibrate(x, sources, config),
        Method::GaussianLs => gaussian_ls_calibrate(x, sources, config),
        Method::StudentT { nu_init, estimate_nu } => {
            student_t_calibrate(x, sources, config, &mut StudentT::new(*nu_init, *estimate_nu)?)
        }
    }
}

/// Least-squares update of `J_{i,p}` with every other antenna held:
/// `J_p = (Σ_q T_pq Z_q)(Σ_q Z_qᴴ Z_q)⁻¹`, `Z_q = J_q C_i`, where `T_pq` is
/// `W_pq` for `q > p` and `W_qpᴴ` for `q < p`.
fn ls_antenna_update(jones: &JonesSet, c: &CMat2, w: &VisibilityBatch, i: usize, p: usize) -> Option<CMat2> {
    let mut rhs = CMat2::zero();
    let mut normal = CMat2::zero();
    for q in 0..jones.n_antennas() {
        if q == p {
            continue;
        }
        let z = *jones.get(i, q) * *c;
        let t = if q > p { unvec2(w.get(p, q)) } else { unvec2(w.get(q, p)).adjoint() };
        rhs = rhs + t * z;
        normal = normal + z.adjoint() * z;
    }
    Some(rhs * normal.inverse()?)
}

/// One Gauss-Seidel sweep of [`ls_antenna_update`] over all antennas.
pub fn ls_sweep(jones: &mut JonesSet, sources: &SourceModel, w: &VisibilityBatch, i: usize) -> Result<()> {
    let c = *sources.coherency(i);
    for p in 0..jones.n_antennas() {
        let j = ls_antenna_update(jones, &c, w, i, p).ok_or(Error::SingularNormalMatrix {
            source_index: i,
            antenna: p,
            ridge: 0.0,
        })?;
        if !j.is_finite() {
            return Err(Error::NonFinite { stage: "least-squares update" });
        }
        jones.set(i, p, j);
    }
    Ok(())
}

/// White Gaussian least squares: `τ = 1`, `Ω = I/4` throughout. The M-step
/// is solved directly on 2×2 matrices.
pub fn gaussian_ls_calibrate(
    x: &VisibilityBatch,
    sources: &SourceModel,
    config: &CalibrationConfig,
) -> Result<CalibrationState> {
    check_inputs(x, sources, config)?;
    let noise = NoiseState::initial(x.len(), false);
    run_em(x, sources, config, noise, &mut FrozenNoise, |jones, w, _inv, _weights: &EmWeights, i| {
        ls_sweep(jones, sources, w, i)
    })
}

/// Iteratively reweighted Student's-t noise step.
///
/// With residual powers `δ_b = ‖a_b‖²`, the weights are
/// `ω_b = (ν+4)/(ν + δ_b/s²)` and the scale `s² = Σ ω_b δ_b / 4B`. The
/// resulting per-baseline covariance `s²/ω_b · I` is stored as
/// `τ_b = 4s²/ω_b` with `Ω = I/4`.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentT {
    pub nu: f64,
    pub estimate_nu: bool,
    pub scale2: Option<f64>,
    pub weights: Vec<f64>,
}

impl StudentT {
    pub fn new(nu_init: f64, estimate_nu: bool) -> Result<Self> {
        Method::StudentT { nu_init, estimate_nu }.validate()?;
        Ok(StudentT { nu: nu_init, estimate_nu, scale2: None, weights: Vec::new() })
    }
}

/// `(ν+4)/(ν + δ/s²)`.
pub fn student_weight(nu: f64, delta: f64, scale2: f64) -> f64 {
    (nu + 4.0) / (nu + delta / scale2)
}

/// Log-likelihood of residual powers under the four-dimensional t law with
/// scale `s²`, up to terms free of `ν`.
pub fn student_log_likelihood(nu: f64, deltas: &[f64], scale2: f64) -> f64 {
    let per = ln_gamma((nu + 4.0) / 2.0) - ln_gamma(nu / 2.0) - 2.0 * nu.ln();
    deltas.iter().map(|d| per - (nu + 4.0) / 2.0 * (d / (nu * scale2)).ln_1p()).sum()
}

/// Log-spaced `ν` grid from [`NU_GRID_MIN`] to [`NU_GRID_MAX`].
pub fn nu_grid() -> Vec<f64> {
    let (a, b) = (NU_GRID_MIN.ln(), NU_GRID_MAX.ln());
    (0..NU_GRID_POINTS).map(|k| (a + (b - a) * k as f64 / (NU_GRID_POINTS - 1) as f64).exp()).collect()
}

/// Grid maximiser of [`student_log_likelihood`]; ties go to the smaller `ν`.
pub fn estimate_nu(deltas: &[f64], scale2: f64) -> f64 {
    let mut best = (f64::NEG_INFINITY, NU_GRID_MIN);
    for nu in nu_grid() {
        let l = student_log_likelihood(nu, deltas, scale2);
        if l > best.0 {
            best = (l, nu);
        }
    }
    best.1
}

impl NoiseUpdater for StudentT {
    fn update(&mut self, residuals: &[CVec4], noise: &mut NoiseState) -> Result<()> {
        let n = residuals.len() as f64;
        let deltas: Vec<f64> = residuals.iter().map(CVec4::norm_sqr).collect();
        let s2 = match self.scale2 {
            Some(s) => s,
            None => deltas.iter().sum::<f64>() / (4.0 * n),
        }
        .max(TAU_FLOOR);
        let weights: Vec<f64> = deltas.iter().map(|d| student_weight(self.nu, *d, s2)).collect();
        let s2 = (weights.iter().zip(&deltas).map(|(w, d)| w * d).sum::<f64>() / (4.0 * n)).max(TAU_FLOOR);
        if self.estimate_nu {
            self.nu = estimate_nu(&deltas, s2);
        }
        self.weights = deltas.iter().map(|d| student_weight(self.nu, *d, s2)).collect();
        self.scale2 = Some(s2);
        noise.omega = Speckle::Shared(HermitianMat4::white());
        noise.tau = self.weights.iter().map(|w| (4.0 * s2 / w).max(TAU_FLOOR)).collect();
        Ok(())
    }
}

/// Student's-t calibration; `t` holds the evolving `ν`, scale and weights.
pub fn student_t_calibrate(
    x: &VisibilityBatch,
    sources: &SourceModel,
    config: &CalibrationConfig,
    t: &mut StudentT,
) -> Result<CalibrationState> {
    check_inputs(x, sources, config)?;
    let noise = NoiseState::initial(x.len(), false);
    run_em(x, sources, config, noise, t, |jones, w, inv, weights, i| {
        crate::calib_robust::bcd_sweep(jones, sources, w, inv, weights, i)
    })
}
