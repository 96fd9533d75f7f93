//! Compound-Gaussian (SIRP) noise, weak outlier sources and SNR bookkeeping.

use std::f64::consts::{FRAC_PI_2, SQRT_2, TAU};

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::algebra::{CMat2, CMat4, CVec4, HermitianMat4, C64};
use crate::error::{Error, Result};
use crate::model::{baselines, AntennaArray, VisibilityBatch};

/// Distribution of the per-baseline texture `τ_pq`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum TextureLaw {
    /// `τ ~ IG(ν/2, ν/2)`, giving Student's t noise with `ν` degrees of freedom.
    InverseGamma { nu: f64 },
    /// `τ = 1`, Gaussian noise.
    Constant,
    /// `τ` drawn uniformly from a table of positive values.
    Table { values: Vec<f64> },
}

impl TextureLaw {
    pub fn validate(&self) -> Result<()> {
        match self {
            TextureLaw::InverseGamma { nu } if !(nu.is_finite() && *nu > 0.0) => {
                Err(Error::invalid("noise.texture.nu", format!("degrees of freedom must be positive, got {nu}")))
            }
            TextureLaw::Table { values }
                if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v > 0.0)) =>
            {
                Err(Error::invalid("noise.texture.values", "table must be non-empty with positive finite entries"))
            }
            _ => Ok(()),
        }
    }

    /// `E[τ]`, when finite.
    pub fn mean(&self) -> Option<f64> {
        match self {
            TextureLaw::InverseGamma { nu } if *nu > 2.0 => Some(nu / (nu - 2.0)),
            TextureLaw::InverseGamma { .. } => None,
            TextureLaw::Constant => Some(1.0),
            TextureLaw::Table { values } => Some(values.iter().sum::<f64>() / values.len() as f64),
        }
    }

    pub fn nu(&self) -> Option<f64> {
        match self {
            TextureLaw::InverseGamma { nu } => Some(*nu),
            _ => None,
        }
    }
}

/// Speckle covariance, shared or per baseline. Every matrix has unit trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speckle {
    Shared(HermitianMat4),
    PerBaseline(Vec<HermitianMat4>),
}

impl Speckle {
    pub fn for_baseline(&self, b: usize) -> &HermitianMat4 {
        match self {
            Speckle::Shared(o) => o,
            Speckle::PerBaseline(v) => &v[b],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub texture: TextureLaw,
    /// Noise scale `σ²`.
    pub sigma2: f64,
    pub speckle: Speckle,
}

/// `I/4`.
pub fn white_speckle() -> HermitianMat4 {
    HermitianMat4::white()
}

/// `[Ω]_{k,l} ∝ ρ^{|k−l|} e^{jψ(k−l)}`, trace-normalised.
pub fn correlated_speckle(rho: f64, psi: f64) -> HermitianMat4 {
    let mut m = CMat4::zero();
    for k in 0..4 {
        for l in 0..4 {
            let d = k as f64 - l as f64;
            m.0[k][l] = C64::from_polar(rho.powf(d.abs()) / 4.0, psi * d);
        }
    }
    HermitianMat4::symmetrised(&m)
}

/// The correlated speckle used in the default simulations: `ρ = 0.9`, `ψ = π/2`.
pub fn default_correlated_speckle() -> HermitianMat4 {
    correlated_speckle(0.9, FRAC_PI_2)
}

fn normalise_speckle(omega: &HermitianMat4, field: &str) -> Result<HermitianMat4> {
    let min_diag = (0..4).map(|k| omega.get(k, k).re).fold(f64::INFINITY, f64::min);
    if min_diag < 0.0 {
        return Err(Error::invalid(field, "speckle covariance must be positive semidefinite"));
    }
    omega.trace_normalized().ok_or_else(|| Error::invalid(field, "speckle covariance must have positive trace"))
}

impl NoiseSpec {
    /// Builds a spec, renormalising every speckle matrix to unit trace.
    pub fn new(texture: TextureLaw, sigma2: f64, speckle: Speckle) -> Result<Self> {
        texture.validate()?;
        if !(sigma2.is_finite() && sigma2 >= 0.0) {
            return Err(Error::invalid("noise.sigma2", format!("must be non-negative, got {sigma2}")));
        }
        let speckle = match speckle {
            Speckle::Shared(o) => Speckle::Shared(normalise_speckle(&o, "noise.speckle")?),
            Speckle::PerBaseline(v) => Speckle::PerBaseline(
                v.iter()
                    .enumerate()
                    .map(|(b, o)| normalise_speckle(o, &format!("noise.speckle[{b}]")))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(NoiseSpec { texture, sigma2, speckle })
    }

    pub fn gaussian_white(sigma2: f64) -> Self {
        NoiseSpec { texture: TextureLaw::Constant, sigma2, speckle: Speckle::Shared(white_speckle()) }
    }

    /// Checks that the speckle table matches `n_baselines`.
    pub fn check_baselines(&self, n_baselines: usize) -> Result<()> {
        match &self.speckle {
            Speckle::PerBaseline(v) if v.len() != n_baselines => Err(Error::invalid(
                "noise.speckle",
                format!("per-baseline speckle has {} entries for {n_baselines} baselines", v.len()),
            )),
            _ => Ok(()),
        }
    }

    pub fn with_sigma2(&self, sigma2: f64) -> Self {
        NoiseSpec { sigma2, ..self.clone() }
    }
}

/// One texture draw.
pub fn sample_texture(law: &TextureLaw, rng: &mut impl Rng) -> f64 {
    match law {
        TextureLaw::InverseGamma { nu } => {
            // IG(ν/2, ν/2) is the reciprocal of Gamma(shape ν/2, rate ν/2).
            let g = Gamma::new(nu / 2.0, 2.0 / nu).expect("validated degrees of freedom");
            loop {
                let x: f64 = g.sample(rng);
                if x > 0.0 {
                    return 1.0 / x;
                }
            }
        }
        TextureLaw::Constant => 1.0,
        TextureLaw::Table { values } => values[rng.gen_range(0..values.len())],
    }
}

/// `z ~ CN(0, I₄)`.
pub fn standard_complex_normal(rng: &mut impl Rng) -> CVec4 {
    let mut z = CVec4::zero();
    for k in 0..4 {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        z.0[k] = C64::new(re, im) / SQRT_2;
    }
    z
}

/// Noise for `n_baselines` baselines together with the texture draws.
pub fn sample_noise_with_textures(spec: &NoiseSpec, n_baselines: usize, rng: &mut impl Rng) -> (Vec<CVec4>, Vec<f64>) {
    let sigma = spec.sigma2.sqrt();
    let shared = match &spec.speckle {
        Speckle::Shared(o) => Some(o.psd_sqrt_factor()),
        Speckle::PerBaseline(_) => None,
    };
    let mut noise = Vec::with_capacity(n_baselines);
    let mut textures = Vec::with_capacity(n_baselines);
    for b in 0..n_baselines {
        let tau = sample_texture(&spec.texture, rng);
        let z = standard_complex_normal(rng);
        let l = match &shared {
            Some(l) => *l,
            None => spec.speckle.for_baseline(b).psd_sqrt_factor(),
        };
        noise.push(l.mul_vec(&z).scale(C64::from(sigma * tau.sqrt())));
        textures.push(tau);
    }
    (noise, textures)
}

/// `n_pq = √τ_pq g_pq` with `g_pq ~ CN(0, σ²Ω_pq)`.
pub fn sample_noise(spec: &NoiseSpec, n_baselines: usize, rng: &mut impl Rng) -> Vec<CVec4> {
    sample_noise_with_textures(spec, n_baselines, rng).0
}

/// Adds noise to a clean batch.
pub fn add_noise(clean: &VisibilityBatch, spec: &NoiseSpec, rng: &mut impl Rng) -> Result<VisibilityBatch> {
    spec.check_baselines(clean.len())?;
    let noise = sample_noise(spec, clean.len(), rng);
    let data = clean.as_slice().iter().zip(noise).map(|(v, n)| *v + n).collect();
    VisibilityBatch::from_vec(clean.n_antennas(), data)
}

/// Weak non-calibrator sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierSpec {
    /// Number of weak sources `D′`.
    pub count: usize,
    /// Coherency of each weak source is `flux_scale · I`.
    pub flux_scale: f64,
    /// Standard deviation of the complex Gaussian perturbation of identity.
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
}

fn default_perturbation() -> f64 {
    0.3
}

impl OutlierSpec {
    pub fn none() -> Self {
        OutlierSpec { count: 0, flux_scale: 0.1, perturbation: default_perturbation() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.flux_scale.is_finite() && self.flux_scale > 0.0) {
            return Err(Error::invalid("outliers.flux_scale", "must be positive"));
        }
        if !(self.perturbation.is_finite() && self.perturbation >= 0.0) {
            return Err(Error::invalid("outliers.perturbation", "must be non-negative"));
        }
        Ok(())
    }
}

/// Random Jones matrix `(I + E)` with `E_kl ~ CN(0, s²)`, rescaled to
/// `‖J‖_F² = 2` so that the source power does not depend on `s`.
fn outlier_jones(perturbation: f64, rng: &mut impl Rng) -> CMat2 {
    let mut j = CMat2::identity();
    for row in j.0.iter_mut() {
        for z in row.iter_mut() {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *z += C64::new(re, im) * (perturbation / SQRT_2);
        }
    }
    let n = j.norm_sqr();
    if n > 0.0 {
        j.scale(C64::from((2.0 / n).sqrt()))
    } else {
        CMat2::identity()
    }
}

/// Adds `count` weak sources. Each has coherency `flux_scale·I`, its own
/// random direction (a linear phase across the array) and independent random
/// Jones matrices per antenna.
pub fn inject_outliers(
    clean: &VisibilityBatch,
    spec: &OutlierSpec,
    array: &AntennaArray,
    rng: &mut impl Rng,
) -> Result<VisibilityBatch> {
    spec.validate()?;
    let mut out = clean.clone();
    if spec.count == 0 {
        return Ok(out);
    }
    let m = array.len();
    let r_max = array.positions().iter().map(|[u, v]| u.hypot(*v)).fold(0.0, f64::max).max(1e-12);
    let span = std::f64::consts::PI / r_max;
    for _ in 0..spec.count {
        let alpha = [rng.gen_range(-span..span), rng.gen_range(-span..span)];
        let offset = rng.gen_range(0.0..TAU);
        let jones: Vec<CMat2> = (0..m)
            .map(|p| outlier_jones(spec.perturbation, rng).scale(C64::from_polar(1.0, array.phase(alpha, p) + offset)))
            .collect();
        for (v, (p, q)) in out.as_mut_slice().iter_mut().zip(baselines(m)) {
            let w = (jones[p] * jones[q].adjoint()).scale(C64::from(spec.flux_scale));
            *v += crate::algebra::vec2(&w);
        }
    }
    Ok(out)
}

/// Expected noise energy over `n_baselines`, `n_baselines · E[τ] · σ²`.
pub fn expected_noise_energy(spec: &NoiseSpec, n_baselines: usize) -> Result<f64> {
    let mean = spec
        .texture
        .mean()
        .ok_or_else(|| Error::invalid("noise.texture.nu", "SNR needs a texture law with finite mean (ν > 2)"))?;
    Ok(n_baselines as f64 * mean * spec.sigma2)
}

/// `10 log₁₀(‖clean‖² / E‖n‖²)`.
pub fn snr_db(clean: &VisibilityBatch, spec: &NoiseSpec) -> Result<f64> {
    let signal = clean.norm_sqr();
    if signal == 0.0 {
        return Err(Error::ZeroSignal);
    }
    Ok(10.0 * (signal / expected_noise_energy(spec, clean.len())?).log10())
}

/// Rescales `σ²` so that the batch SNR equals `target_snr_db`.
pub fn calibrate_snr(clean: &VisibilityBatch, spec: &NoiseSpec, target_snr_db: f64) -> Result<NoiseSpec> {
    let signal = clean.norm_sqr();
    if signal == 0.0 {
        return Err(Error::ZeroSignal);
    }
    if !target_snr_db.is_finite() {
        return Err(Error::invalid("snr_db", "target SNR must be finite"));
    }
    let unit = NoiseSpec { sigma2: 1.0, ..spec.clone() };
    let per_unit = expected_noise_energy(&unit, clean.len())?;
    Ok(spec.with_sigma2(signal / (per_unit * 10f64.powf(target_snr_db / 10.0))))
}
