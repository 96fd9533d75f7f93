//! Relaxed concentrated maximum-likelihood calibration under compound-Gaussian
//! noise: texture and speckle updates, EM over superimposed sources and
//! per-antenna block coordinate descent.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::algebra::{herm_solve, CMat2, CMat4, CVec4, HermitianMat4, C64, ZERO};
use crate::error::{Error, Result};
use crate::gauge::anchor_in_place;
use crate::model::{
    baseline_index, baselines, synth_baseline, synth_per_source, JonesSet, SourceModel, VisibilityBatch,
};
use crate::noise::Speckle;

/// Lower bound on texture estimates.
pub const TAU_FLOOR: f64 = 1e-12;
/// First ridge tried on a singular matrix, relative to `tr/4`.
pub const RIDGE_START: f64 = 1e-9;
/// Largest ridge tried before giving up, relative to `tr/4`.
pub const RIDGE_MAX: f64 = 1e-3;

/// Texture and speckle estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseState {
    pub tau: Vec<f64>,
    pub omega: Speckle,
}

impl NoiseState {
    /// `τ = 1`, `Ω = I/4`, shared or per baseline.
    pub fn initial(n_baselines: usize, per_baseline: bool) -> Self {
        let omega = if per_baseline {
            Speckle::PerBaseline(vec![HermitianMat4::white(); n_baselines])
        } else {
            Speckle::Shared(HermitianMat4::white())
        };
        NoiseState { tau: vec![1.0; n_baselines], omega }
    }

    pub fn n_baselines(&self) -> usize {
        self.tau.len()
    }

    pub fn omega(&self, b: usize) -> &HermitianMat4 {
        self.omega.for_baseline(b)
    }

    pub fn is_per_baseline(&self) -> bool {
        matches!(self.omega, Speckle::PerBaseline(_))
    }

    /// `(τ_b Ω_b)⁻¹` for every baseline.
    pub fn inverse_covariances(&self) -> Result<Vec<HermitianMat4>> {
        match &self.omega {
            Speckle::Shared(o) => {
                let inv = invert_with_ridge(o)?;
                Ok(self.tau.iter().map(|t| inv.scale(1.0 / t)).collect())
            }
            Speckle::PerBaseline(v) => {
                v.iter().zip(&self.tau).map(|(o, t)| Ok(invert_with_ridge(o)?.scale(1.0 / t))).collect()
            }
        }
    }

    fn validate(&self, n_baselines: usize) -> Result<()> {
        if self.tau.len() != n_baselines {
            return Err(Error::invalid(
                "noise.tau",
                format!("expected {n_baselines} textures, got {}", self.tau.len()),
            ));
        }
        if self.tau.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::invalid("noise.tau", "textures must be positive"));
        }
        if let Speckle::PerBaseline(v) = &self.omega {
            if v.len() != n_baselines {
                return Err(Error::invalid("noise.omega", format!("expected {n_baselines} speckle matrices")));
            }
        }
        Ok(())
    }
}

/// Inverse of a Hermitian matrix, retrying with a growing ridge.
pub fn invert_with_ridge(m: &HermitianMat4) -> Result<HermitianMat4> {
    match m.inverse() {
        Ok(inv) => Ok(inv),
        Err(first) => {
            let base = m.trace() / 4.0;
            if !(base > 0.0 && base.is_finite()) {
                return Err(first);
            }
            let mut delta = RIDGE_START * base;
            while delta <= RIDGE_MAX * base {
                if let Ok(inv) = m.add_ridge(delta).inverse() {
                    return Ok(inv);
                }
                delta *= 2.0;
            }
            Err(first)
        }
    }
}

/// EM source weights `β_i`, positive and summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmWeights {
    beta: Vec<f64>,
}

impl TryFrom<Vec<f64>> for EmWeights {
    type Error = Error;
    fn try_from(beta: Vec<f64>) -> Result<Self> {
        EmWeights::new(beta)
    }
}

impl From<EmWeights> for Vec<f64> {
    fn from(w: EmWeights) -> Self {
        w.beta
    }
}

impl EmWeights {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::invalid("beta", "weights must be positive"));
        }
        let sum: f64 = beta.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("beta", format!("weights must sum to 1, got {sum}")));
        }
        Ok(EmWeights { beta })
    }

    /// `β_i = 1/D`.
    pub fn uniform(d: usize) -> Self {
        EmWeights { beta: vec![1.0 / d as f64; d] }
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.beta[i]
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
}

/// `a_pq = x_pq − ṽ_pq(θ)`.
pub fn residual(x: &VisibilityBatch, jones: &JonesSet, sources: &SourceModel, p: usize, q: usize) -> CVec4 {
    *x.get(p, q) - synth_baseline(jones, sources, p, q)
}

/// Residuals for all baselines, in storage order.
pub fn residuals(x: &VisibilityBatch, jones: &JonesSet, sources: &SourceModel) -> Vec<CVec4> {
    baselines(x.n_antennas()).map(|(p, q)| residual(x, jones, sources, p, q)).collect()
}

/// `τ̂ = max(aᴴΩ⁻¹a / 4, ε_τ)`.
pub fn update_texture(a: &CVec4, omega: &HermitianMat4) -> Result<f64> {
    if *a == CVec4::zero() {
        return Ok(TAU_FLOOR);
    }
    Ok((omega.inv_quadratic_form(a)? / 4.0).max(TAU_FLOOR))
}

/// [`update_texture`], falling back to a ridged inverse for a singular `Ω`.
pub fn texture_with_ridge(a: &CVec4, omega: &HermitianMat4) -> Result<f64> {
    match update_texture(a, omega) {
        Err(Error::SingularMatrix { .. }) => Ok((invert_with_ridge(omega)?.mul_vec(a).dot(a).re / 4.0).max(TAU_FLOOR)),
        other => other,
    }
}

/// One fixed-point step `Ω̂ = (4/B) Σ a aᴴ / (aᴴ Ω⁻¹ a)` followed by trace
/// normalisation.
pub fn update_speckle(residuals: &[CVec4], omega_prev: &HermitianMat4) -> Result<HermitianMat4> {
    let inv = invert_with_ridge(omega_prev)?;
    let floor = 4.0 * TAU_FLOOR;
    let mut acc = CMat4::zero();
    let mut degenerate = true;
    for a in residuals {
        let d = inv.mul_vec(a).dot(a).re;
        if d >= floor {
            degenerate = false;
        }
        acc = acc + a.outer().matrix().scale(C64::from(1.0 / d.max(floor)));
    }
    if degenerate {
        return Err(Error::DegenerateResiduals);
    }
    let acc = acc.scale(C64::from(4.0 / residuals.len() as f64));
    HermitianMat4::symmetrised(&acc).trace_normalized().ok_or(Error::DegenerateResiduals)
}

/// Rank-one per-baseline update `4 a aᴴ / (aᴴ Ω⁻¹ a)` with a ridge, trace
/// normalised.
pub fn update_speckle_per_baseline(a: &CVec4, omega_prev: &HermitianMat4) -> Result<HermitianMat4> {
    let inv = invert_with_ridge(omega_prev)?;
    let d = inv.mul_vec(a).dot(a).re;
    if !(d >= 4.0 * TAU_FLOOR) {
        return Err(Error::DegenerateResiduals);
    }
    let rank_one = a.outer().scale(4.0 / d);
    let ridged = rank_one.add_ridge(RIDGE_START * rank_one.trace() / 4.0);
    ridged.trace_normalized().ok_or(Error::DegenerateResiduals)
}

/// `ŵ_i = u_i + β_i (x − Σ_l u_l)` from precomputed per-source contributions.
pub fn e_step_from_parts(x: &VisibilityBatch, parts: &[VisibilityBatch], weights: &EmWeights) -> Vec<VisibilityBatch> {
    let total_residual: Vec<CVec4> =
        (0..x.len()).map(|b| parts.iter().fold(x.as_slice()[b], |acc, u| acc - u.as_slice()[b])).collect();
    parts
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let beta = C64::from(weights.beta(i));
            let data = u.as_slice().iter().zip(&total_residual).map(|(ub, r)| *ub + r.scale(beta)).collect();
            VisibilityBatch::from_vec(x.n_antennas(), data).expect("same layout as x")
        })
        .collect()
}

/// Complete-data estimates `ŵ_i` for every source.
pub fn e_step(
    x: &VisibilityBatch,
    jones: &JonesSet,
    sources: &SourceModel,
    weights: &EmWeights,
) -> Vec<VisibilityBatch> {
    e_step_from_parts(x, &synth_per_source(jones, sources), weights)
}

/// `Σ_{i,q}`: `u_{i,pq} = Σ_{i,q} θ_{i,p}`, built from `J_{i,q}` and `c_i`.
pub fn sigma_block(jq: &CMat2, c: &CVec4) -> CMat4 {
    let [q1, q2, q3, q4] = jq.to_row_major().0.map(|z| z.conj());
    let [c1, c2, c3, c4] = c.0;
    let alpha = q1 * c1 + q2 * c3;
    let beta = q1 * c2 + q2 * c4;
    let gamma = q3 * c1 + q4 * c3;
    let rho = q3 * c2 + q4 * c4;
    CMat4([[alpha, beta, ZERO, ZERO], [ZERO, ZERO, alpha, beta], [gamma, rho, ZERO, ZERO], [ZERO, ZERO, gamma, rho]])
}

/// `Υ_{i,q}`: `u_{i,qp} = Υ_{i,q} θ*_{i,p}`, built from `J_{i,q}` and `c_i`.
pub fn upsilon_block(jq: &CMat2, c: &CVec4) -> CMat4 {
    let [q1, q2, q3, q4] = jq.to_row_major().0;
    let [c1, c2, c3, c4] = c.0;
    let lambda = q1 * c1 + q2 * c2;
    let mu = q1 * c3 + q2 * c4;
    let nu = q3 * c1 + q4 * c2;
    let xi = q3 * c3 + q4 * c4;
    CMat4([[lambda, mu, ZERO, ZERO], [nu, xi, ZERO, ZERO], [ZERO, ZERO, lambda, mu], [ZERO, ZERO, nu, xi]])
}

/// Linear model and weights for updating `θ_{i,p}` with all other antennas
/// fixed.
#[derive(Clone, Debug)]
pub struct BcdFactors {
    pub source: usize,
    pub antenna: usize,
    /// `Σ_{i,q}` for `q > p`.
    pub sigma: Vec<CMat4>,
    /// `Υ*_{i,q}` for `q < p`.
    pub upsilon: Vec<CMat4>,
    /// `(β_i τ_pq Ω)⁻¹` for `q > p`.
    pub weights: Vec<HermitianMat4>,
    /// `(β_i τ_qp Ω*)⁻¹` for `q < p`.
    pub weights_tilde: Vec<HermitianMat4>,
}

/// Builds the factors from per-baseline inverse covariances `(τ_b Ω_b)⁻¹`.
pub fn build_bcd_factors(
    jones: &JonesSet,
    sources: &SourceModel,
    inverse_covariances: &[HermitianMat4],
    weights: &EmWeights,
    i: usize,
    p: usize,
) -> BcdFactors {
    let m = jones.n_antennas();
    let c = sources.coherency_vec(i);
    let inv_beta = 1.0 / weights.beta(i);
    let sigma = ((p + 1)..m).map(|q| sigma_block(jones.get(i, q), c)).collect();
    let upsilon = (0..p).map(|q| upsilon_block(jones.get(i, q), c).conj()).collect();
    let weights_fwd = ((p + 1)..m).map(|q| inverse_covariances[baseline_index(m, p, q)].scale(inv_beta)).collect();
    let weights_tilde = (0..p).map(|q| inverse_covariances[baseline_index(m, q, p)].conj().scale(inv_beta)).collect();
    BcdFactors { source: i, antenna: p, sigma, upsilon, weights: weights_fwd, weights_tilde }
}

/// Stacked data `w_{i,p} = [w_{i,pq}]_{q>p}` and `w̃_{i,p} = [w*_{i,qp}]_{q<p}`.
pub fn stack_data(w: &VisibilityBatch, p: usize) -> (Vec<CVec4>, Vec<CVec4>) {
    let m = w.n_antennas();
    let fwd = ((p + 1)..m).map(|q| *w.get(p, q)).collect();
    let tilde = (0..p).map(|q| w.get(q, p).conj()).collect();
    (fwd, tilde)
}

/// `φ_i(θ_{i,p})` up to a constant.
pub fn bcd_cost(f: &BcdFactors, w: &[CVec4], w_tilde: &[CVec4], theta: &CVec4) -> f64 {
    let mut cost = 0.0;
    for ((s, a), wb) in f.sigma.iter().zip(&f.weights).zip(w) {
        let r = *wb - s.mul_vec(theta);
        cost += r.dot(&a.mul_vec(&r)).re;
    }
    for ((u, a), wb) in f.upsilon.iter().zip(&f.weights_tilde).zip(w_tilde) {
        let r = *wb - u.mul_vec(theta);
        cost += r.dot(&a.mul_vec(&r)).re;
    }
    cost
}

/// Closed-form minimiser of `φ_i` over `θ_{i,p}`.
pub fn bcd_update(f: &BcdFactors, w: &[CVec4], w_tilde: &[CVec4]) -> Result<CVec4> {
    let mut normal = CMat4::zero();
    let mut rhs = CVec4::zero();
    for ((s, a), wb) in f.sigma.iter().zip(&f.weights).zip(w) {
        let sha = s.adjoint() * *a.matrix();
        normal = normal + sha * *s;
        rhs += sha.mul_vec(wb);
    }
    for ((u, a), wb) in f.upsilon.iter().zip(&f.weights_tilde).zip(w_tilde) {
        let uha = u.adjoint() * *a.matrix();
        normal = normal + uha * *u;
        rhs += uha.mul_vec(wb);
    }
    let normal = HermitianMat4::symmetrised(&normal);
    solve_with_ridge(&normal, &rhs).ok_or(Error::SingularNormalMatrix {
        source_index: f.source,
        antenna: f.antenna,
        ridge: RIDGE_MAX,
    })
}

fn solve_with_ridge(a: &HermitianMat4, b: &CVec4) -> Option<CVec4> {
    if let Ok(x) = herm_solve(a, b) {
        return Some(x);
    }
    let base = a.trace() / 4.0;
    if !(base > 0.0 && base.is_finite()) {
        return None;
    }
    let mut delta = RIDGE_START * base;
    while delta <= RIDGE_MAX * base {
        if let Ok(x) = herm_solve(&a.add_ridge(delta), b) {
            return Some(x);
        }
        delta *= 2.0;
    }
    None
}

/// Relaxed negative log-likelihood `Σ_pq [4 ln τ + ln|Ω| + aᴴ(τΩ)⁻¹a]`,
/// without the constant `4B ln π`.
pub fn relaxed_nll(residuals: &[CVec4], noise: &NoiseState) -> Result<f64> {
    let shared_logdet = match &noise.omega {
        Speckle::Shared(o) => Some(o.log_det()?),
        Speckle::PerBaseline(_) => None,
    };
    let inv = noise.inverse_covariances()?;
    let mut total = 0.0;
    for (b, a) in residuals.iter().enumerate() {
        let logdet = match shared_logdet {
            Some(l) => l,
            None => noise.omega(b).log_det()?,
        };
        total += 4.0 * noise.tau[b].ln() + logdet + a.dot(&inv[b].mul_vec(a)).re;
    }
    Ok(total)
}

/// Iteration caps and stopping tolerance for every loop level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub outer: usize,
    pub em: usize,
    pub bcd: usize,
    /// A loop stops once its `ε^h` falls below this value.
    pub tolerance: f64,
    /// Optional wall-clock budget in seconds, checked after each EM iteration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_seconds: Option<f64>,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { outer: 20, em: 5, bcd: 3, tolerance: 1e-8, max_seconds: None }
    }
}

impl Budget {
    /// Four outer iterations, enough for near-bound accuracy in practice.
    pub fn fast() -> Self {
        Budget { outer: 4, ..Budget::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer == 0 || self.em == 0 || self.bcd == 0 {
            return Err(Error::invalid("budget", "iteration caps must be positive"));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::invalid("budget.tolerance", "must be non-negative"));
        }
        if let Some(s) = self.max_seconds {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::invalid("budget.max_seconds", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CalibrationConfig {
    pub init: JonesSet,
    /// Defaults to `I/4` shared, or per baseline when `per_baseline` is set.
    pub omega_init: Option<Speckle>,
    /// Defaults to `1` on every baseline.
    pub tau_init: Option<Vec<f64>>,
    pub per_baseline: bool,
    /// Defaults to `1/D` per source.
    pub beta: Option<EmWeights>,
    pub budget: Budget,
    /// Re-align each source to its previous iterate after every EM
    /// iteration, removing drift along the ambiguity group.
    pub anchor_gauge: bool,
}

impl CalibrationConfig {
    pub fn new(init: JonesSet) -> Self {
        CalibrationConfig {
            init,
            omega_init: None,
            tau_init: None,
            per_baseline: false,
            beta: None,
            budget: Budget::default(),
            anchor_gauge: true,
        }
    }

    pub fn with_budget(mut self, budget: Budget) -> Self {
        self.budget = budget;
        self
    }

    fn initial_noise(&self, n_baselines: usize) -> Result<NoiseState> {
        let mut state = NoiseState::initial(n_baselines, self.per_baseline);
        if let Some(o) = &self.omega_init {
            state.omega = o.clone();
        }
        if let Some(t) = &self.tau_init {
            state.tau = t.clone();
        }
        state.validate(n_baselines)?;
        Ok(state)
    }
}

/// `ε^h` series per loop level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    /// One value per outer iteration.
    pub outer: Vec<f64>,
    /// Per outer iteration, one value per EM iteration.
    pub em: Vec<Vec<f64>>,
    /// Per EM iteration (flattened over outer iterations), one value per BCD
    /// sweep summed over sources.
    pub bcd: Vec<Vec<f64>>,
    /// Relaxed negative log-likelihood after each outer iteration.
    pub nll: Vec<f64>,
}

impl ConvergenceTrace {
    pub fn em_flat(&self) -> Vec<f64> {
        self.em.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub jones: JonesSet,
    pub noise: NoiseState,
    pub trace: ConvergenceTrace,
    /// Outer iterations performed.
    pub iterations: usize,
    /// True when the outer loop met its tolerance.
    pub converged: bool,
    /// Wall-clock time spent, in seconds.
    #[serde(default)]
    pub elapsed_seconds: f64,
}

impl CalibrationState {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Noise-parameter step run after each EM loop.
pub trait NoiseUpdater {
    fn update(&mut self, residuals: &[CVec4], noise: &mut NoiseState) -> Result<()>;
}

/// Halvings tried before a speckle step that raises the relaxed likelihood
/// is abandoned.
pub const SPECKLE_BACKTRACK: usize = 8;

/// Speckle fixed-point step followed by the texture update.
///
/// The trace-normalised fixed point never raises the relaxed likelihood
/// while every texture sits above `TAU_FLOOR`. When floored textures break
/// that, the step is blended back towards the previous `Ω` until it no
/// longer increases, and dropped as a last resort.
#[derive(Clone, Copy, Debug, Default)]
pub struct RobustUpdate;

fn speckle_step(residuals: &[CVec4], omega: &Speckle) -> Result<Speckle> {
    Ok(match omega {
        Speckle::Shared(o) => match update_speckle(residuals, o) {
            Ok(next) => Speckle::Shared(next),
            Err(Error::DegenerateResiduals) => omega.clone(),
            Err(e) => return Err(e),
        },
        Speckle::PerBaseline(v) => {
            let mut out = Vec::with_capacity(v.len());
            for (o, a) in v.iter().zip(residuals) {
                out.push(match update_speckle_per_baseline(a, o) {
                    Ok(next) => next,
                    Err(Error::DegenerateResiduals) => *o,
                    Err(e) => return Err(e),
                });
            }
            Speckle::PerBaseline(out)
        }
    })
}

fn blend(from: &Speckle, to: &Speckle, s: f64) -> Speckle {
    let mix = |a: &HermitianMat4, b: &HermitianMat4| a.scale(1.0 - s).add(&b.scale(s));
    match (from, to) {
        (Speckle::Shared(a), Speckle::Shared(b)) => Speckle::Shared(mix(a, b)),
        (Speckle::PerBaseline(a), Speckle::PerBaseline(b)) => {
            Speckle::PerBaseline(a.iter().zip(b).map(|(x, y)| mix(x, y)).collect())
        }
        _ => unreachable!("speckle layout is fixed for a run"),
    }
}

fn with_textures(residuals: &[CVec4], omega: Speckle) -> Result<NoiseState> {
    let mut tau = Vec::with_capacity(residuals.len());
    for (b, a) in residuals.iter().enumerate() {
        tau.push(texture_with_ridge(a, omega.for_baseline(b))?);
    }
    Ok(NoiseState { tau, omega })
}

impl NoiseUpdater for RobustUpdate {
    fn update(&mut self, residuals: &[CVec4], noise: &mut NoiseState) -> Result<()> {
        let kept = with_textures(residuals, noise.omega.clone())?;
        let reference = relaxed_nll(residuals, &kept)?;
        let target = speckle_step(residuals, &noise.omega)?;
        let mut s = 1.0;
        for _ in 0..=SPECKLE_BACKTRACK {
            let candidate = with_textures(residuals, blend(&noise.omega, &target, s))?;
            if relaxed_nll(residuals, &candidate).is_ok_and(|v| v <= reference) {
                *noise = candidate;
                return Ok(());
            }
            s *= 0.5;
        }
        *noise = kept;
        Ok(())
    }
}

/// Leaves the noise state untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct FrozenNoise;

impl NoiseUpdater for FrozenNoise {
    fn update(&mut self, _residuals: &[CVec4], _noise: &mut NoiseState) -> Result<()> {
        Ok(())
    }
}

pub(crate) fn check_inputs(x: &VisibilityBatch, sources: &SourceModel, config: &CalibrationConfig) -> Result<()> {
    config.budget.validate()?;
    if config.init.n_sources() != sources.len() || config.init.n_antennas() != x.n_antennas() {
        return Err(Error::invalid(
            "init",
            format!(
                "initial Jones set is {} × {}, data need {} × {}",
                config.init.n_sources(),
                config.init.n_antennas(),
                sources.len(),
                x.n_antennas()
            ),
        ));
    }
    if let Some(b) = &config.beta {
        if b.len() != sources.len() {
            return Err(Error::invalid("beta", format!("expected {} weights", sources.len())));
        }
    }
    if !x.is_finite() {
        return Err(Error::invalid("visibilities", "data must be finite"));
    }
    Ok(())
}

/// One BCD sweep over all antennas of source `i`, updating `jones` in place.
pub fn bcd_sweep(
    jones: &mut JonesSet,
    sources: &SourceModel,
    w: &VisibilityBatch,
    inverse_covariances: &[HermitianMat4],
    weights: &EmWeights,
    i: usize,
) -> Result<()> {
    for p in 0..jones.n_antennas() {
        let f = build_bcd_factors(jones, sources, inverse_covariances, weights, i, p);
        let (fwd, tilde) = stack_data(w, p);
        let theta = bcd_update(&f, &fwd, &tilde)?;
        if !theta.is_finite() {
            return Err(Error::NonFinite { stage: "BCD update" });
        }
        jones.set_theta(i, p, &theta);
    }
    Ok(())
}

/// Relative slack before an EM iteration counts as raising the misfit.
pub const MISFIT_SLACK: f64 = 1e-12;

/// `Σ_pq aᴴ(τΩ)⁻¹a`, the part of the relaxed likelihood an EM loop lowers.
pub fn weighted_misfit(
    x: &VisibilityBatch,
    jones: &JonesSet,
    sources: &SourceModel,
    inverse_covariances: &[HermitianMat4],
) -> f64 {
    residuals(x, jones, sources).iter().zip(inverse_covariances).map(|(a, w)| a.dot(&w.mul_vec(a)).re).sum()
}

/// EM iterations over all sources with fixed noise weights; used by every
/// calibrator sharing this machinery. `sweep` updates one source in place.
///
/// Exact EM never raises the weighted misfit. With textures at the floor the
/// weights span twelve decades and rounding can; such an iteration is
/// undone and ends the EM loop.
pub(crate) fn run_em<S>(
    x: &VisibilityBatch,
    sources: &SourceModel,
    config: &CalibrationConfig,
    noise: NoiseState,
    updater: &mut dyn NoiseUpdater,
    mut sweep: S,
) -> Result<CalibrationState>
where
    S: FnMut(&mut JonesSet, &VisibilityBatch, &[HermitianMat4], &EmWeights, usize) -> Result<()>,
{
    let start = Instant::now();
    let deadline = config.budget.max_seconds.map(|s| start + Duration::from_secs_f64(s));
    let budget = &config.budget;
    let weights = config.beta.clone().unwrap_or_else(|| EmWeights::uniform(sources.len()));
    let mut jones = config.init.clone();
    let mut noise = noise;
    let mut trace = ConvergenceTrace::default();
    let mut converged = false;
    let mut iterations = 0;
    'outer: for _ in 0..budget.outer {
        iterations += 1;
        let outer_start = jones.clone();
        let inverse_covariances = noise.inverse_covariances()?;
        let mut misfit = weighted_misfit(x, &jones, sources, &inverse_covariances);
        let mut em_series = Vec::with_capacity(budget.em);
        let mut out_of_time = false;
        for _ in 0..budget.em {
            let em_start = jones.clone();
            let w = e_step(x, &jones, sources, &weights);
            let mut sweeps = vec![0.0; budget.bcd];
            for (i, wi) in w.iter().enumerate() {
                for s in sweeps.iter_mut() {
                    let before = jones.clone();
                    sweep(&mut jones, wi, &inverse_covariances, &weights, i)?;
                    let eps = jones.real_part_change(&before);
                    *s += eps;
                    if eps < budget.tolerance {
                        break;
                    }
                }
            }
            trace.bcd.push(sweeps);
            if config.anchor_gauge {
                anchor_in_place(&mut jones, &em_start, sources);
            }
            let next = weighted_misfit(x, &jones, sources, &inverse_covariances);
            let rejected = !(next <= misfit + MISFIT_SLACK * misfit.abs());
            if rejected {
                jones = em_start.clone();
            } else {
                misfit = next;
            }
            let eps = jones.real_part_change(&em_start);
            if !eps.is_finite() {
                return Err(Error::NonFinite { stage: "EM iteration" });
            }
            em_series.push(eps);
            if deadline.is_some_and(|d| Instant::now() >= d) {
                out_of_time = true;
                break;
            }
            if rejected || eps < budget.tolerance {
                break;
            }
        }
        trace.em.push(em_series);
        let res = residuals(x, &jones, sources);
        updater.update(&res, &mut noise)?;
        if noise.tau.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { stage: "noise update" });
        }
        trace.nll.push(relaxed_nll(&res, &noise)?);
        let eps = jones.real_part_change(&outer_start);
        trace.outer.push(eps);
        if eps < budget.tolerance {
            converged = true;
            break 'outer;
        }
        if out_of_time {
            break;
        }
    }
    Ok(CalibrationState { jones, noise, trace, iterations, converged, elapsed_seconds: start.elapsed().as_secs_f64() })
}

fn standard_sweep(
    sources: &SourceModel,
) -> impl FnMut(&mut JonesSet, &VisibilityBatch, &[HermitianMat4], &EmWeights, usize) -> Result<()> + '_ {
    move |jones, w, inv, weights, i| bcd_sweep(jones, sources, w, inv, weights, i)
}

/// Calibration with a caller-supplied noise step.
pub fn calibrate_with(
    x: &VisibilityBatch,
    sources: &SourceModel,
    config: &CalibrationConfig,
    updater: &mut dyn NoiseUpdater,
) -> Result<CalibrationState> {
    check_inputs(x, sources, config)?;
    let noise = config.initial_noise(x.len())?;
    run_em(x, sources, config, noise, updater, standard_sweep(sources))
}

/// Relaxed concentrated ML calibration.
pub fn calibrate(x: &VisibilityBatch, sources: &SourceModel, config: &CalibrationConfig) -> Result<CalibrationState> {
    calibrate_with(x, sources, config, &mut RobustUpdate)
}

/// Calibration with the noise state held at its initial value.
pub fn calibrate_frozen(
    x: &VisibilityBatch,
    sources: &SourceModel,
    config: &CalibrationConfig,
) -> Result<CalibrationState> {
    calibrate_with(x, sources, config, &mut FrozenNoise)
}
