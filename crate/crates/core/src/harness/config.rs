//! Experiment configuration and bundled presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::algebra::HermitianMat4;
use crate::baselines::{BaselineConfig, Method};
use crate::calib_robust::Budget;
use crate::calib_structured::StructuredConfig;
use crate::error::{Error, Result};
use crate::model::{Scene, SceneModel};
use crate::noise::{correlated_speckle, white_speckle, NoiseSpec, OutlierSpec, Speckle, TextureLaw};

/// Where the scene comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneSource {
    /// A scene file, relative paths resolved against the config file.
    File(PathBuf),
    Inline(Box<Scene>),
    /// [`Scene::random_unstructured`].
    RandomUnstructured {
        sources: usize,
        antennas: usize,
        radius: f64,
        spread: f64,
        seed: u64,
    },
    /// [`Scene::random_station_with_beams`], with 3DC truth.
    RandomStation {
        sources: usize,
        antennas: usize,
        radius: f64,
        #[serde(default)]
        beam_spread: f64,
        seed: u64,
    },
}

impl SceneSource {
    pub fn load(&self, base: Option<&Path>) -> Result<Scene> {
        match self {
            SceneSource::File(path) => {
                let path = match base {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                Scene::load(&path)
            }
            SceneSource::Inline(scene) => Ok((**scene).clone()),
            SceneSource::RandomUnstructured { sources, antennas, radius, spread, seed } => {
                check_random(*sources, *antennas, *radius)?;
                Ok(Scene::random_unstructured(*sources, *antennas, *radius, *spread, *seed))
            }
            SceneSource::RandomStation { sources, antennas, radius, beam_spread, seed } => {
                check_random(*sources, *antennas, *radius)?;
                if !(beam_spread.is_finite() && *beam_spread >= 0.0) {
                    return Err(Error::invalid("scene.beam_spread", "must be non-negative"));
                }
                Ok(Scene::random_station_with_beams(*sources, *antennas, *radius, *beam_spread, *seed))
            }
        }
    }
}

fn check_random(d: usize, m: usize, radius: f64) -> Result<()> {
    if d == 0 {
        return Err(Error::invalid("scene.sources", "need at least one source"));
    }
    if m < 3 {
        return Err(Error::invalid("scene.antennas", "need at least 3 antennas"));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::invalid("scene.radius", "must be positive"));
    }
    Ok(())
}

/// Speckle covariance of the simulated noise, normalised to unit trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SpeckleConfig {
    White,
    /// `[Ω]_{k,l} ∝ ρ^{|k−l|} e^{jψ(k−l)}`.
    Correlated {
        rho: f64,
        psi: f64,
    },
    Matrix(HermitianMat4),
}

impl SpeckleConfig {
    pub fn matrix(&self) -> Result<HermitianMat4> {
        match self {
            SpeckleConfig::White => Ok(white_speckle()),
            SpeckleConfig::Correlated { rho, psi } => {
                if !(rho.is_finite() && (0.0..1.0).contains(rho) && psi.is_finite()) {
                    return Err(Error::invalid("noise.speckle.rho", "must lie in [0, 1)"));
                }
                Ok(correlated_speckle(*rho, *psi))
            }
            SpeckleConfig::Matrix(m) => Ok(*m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub texture: TextureLaw,
    pub speckle: SpeckleConfig,
}

impl NoiseConfig {
    /// Noise spec with unit `σ²`; experiments rescale it per SNR.
    pub fn spec(&self) -> Result<NoiseSpec> {
        NoiseSpec::new(self.texture.clone(), 1.0, Speckle::Shared(self.speckle.matrix()?))
    }
}

fn default_runs() -> usize {
    100
}

fn default_perturbation() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

fn default_outliers() -> OutlierSpec {
    OutlierSpec::none()
}

/// A Monte-Carlo sweep over SNR values for a list of calibrators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub scene: SceneSource,
    pub methods: Vec<BaselineConfig>,
    pub snr_db: Vec<f64>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    pub noise: NoiseConfig,
    #[serde(default = "default_outliers")]
    pub outliers: OutlierSpec,
    /// Half-width of the uniform perturbation added to every real Jones
    /// parameter of the truth to form the initial point.
    #[serde(default = "default_perturbation")]
    pub init_perturbation: f64,
    /// Align each estimate to the truth over the ambiguity group before
    /// computing errors.
    #[serde(default = "default_true")]
    pub align: bool,
    /// When present, the structured parameters are extracted from every
    /// estimate and scored as well. Needs a scene with 3DC truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured: Option<StructuredConfig>,
    /// Give every method the same wall-clock budget per calibration,
    /// instead of its iteration caps.
    #[serde(default)]
    pub matched_time: bool,
    /// Per-calibration time budget in matched-time mode. Measured from the
    /// first method under its own budget when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_budget_seconds: Option<f64>,
    /// Keep per-run convergence traces in the result.
    #[serde(default)]
    pub keep_traces: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|source| Error::Parse { path: path.to_path_buf(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::invalid("runs", "must be at least 1"));
        }
        if self.snr_db.is_empty() {
            return Err(Error::invalid("snr_db", "SNR grid must not be empty"));
        }
        if let Some(k) = self.snr_db.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("snr_db[{k}]"), "must be finite"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("methods", "need at least one method"));
        }
        for (k, m) in self.methods.iter().enumerate() {
            m.validate().map_err(|e| prefix(e, &format!("methods[{k}]")))?;
        }
        if !(self.init_perturbation.is_finite() && self.init_perturbation >= 0.0) {
            return Err(Error::invalid("init_perturbation", "must be non-negative"));
        }
        self.noise.texture.validate()?;
        if self.noise.texture.mean().is_none() {
            return Err(Error::invalid("noise.texture.nu", "SNR needs a texture law with finite mean (ν > 2)"));
        }
        self.noise.speckle.matrix()?;
        self.outliers.validate()?;
        if let Some(s) = &self.structured {
            s.validate()?;
        }
        if let Some(t) = self.time_budget_seconds {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::invalid("time_budget_seconds", "must be positive"));
            }
        }
        Ok(())
    }

    /// Loads and checks the scene.
    pub fn scene(&self, base: Option<&Path>) -> Result<SceneModel> {
        let model = self.scene.load(base)?.build()?;
        if self.structured.is_some() && model.structured.is_none() {
            return Err(Error::invalid("structured", "structured scoring needs a scene with 3DC truth"));
        }
        Ok(model)
    }

    /// Hex SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "fig2" => Ok(fig2()),
            "fig3" => Ok(fig3()),
            "fig4" => Ok(fig4()),
            _ => Err(Error::invalid("preset", format!("unknown preset {name:?}; expected fig2, fig3 or fig4"))),
        }
    }
}

fn prefix(e: Error, field: &str) -> Error {
    match e {
        Error::Invalid { field: f, message } => Error::Invalid { field: format!("{field}.{f}"), message },
        other => other,
    }
}

fn all_methods(budget: Budget) -> Vec<BaselineConfig> {
    [Method::Robust, Method::StudentT { nu_init: 3.0, estimate_nu: true }, Method::GaussianLs]
        .into_iter()
        .map(|kind| BaselineConfig { kind, budget: budget.clone() })
        .collect()
}

/// SIRP noise with inverse-gamma texture (`ν = 3`) and correlated speckle,
/// `D = 2`, `M = 8`, robust calibrator only.
pub fn fig2() -> ExperimentConfig {
    ExperimentConfig {
        name: "fig2".into(),
        scene: SceneSource::RandomUnstructured { sources: 2, antennas: 8, radius: 8.0, spread: 0.5, seed: 1 },
        methods: vec![BaselineConfig { kind: Method::Robust, budget: Budget::fast() }],
        snr_db: vec![5.0, 10.0, 15.0, 20.0],
        runs: 100,
        seed: 2024,
        noise: NoiseConfig {
            texture: TextureLaw::InverseGamma { nu: 3.0 },
            speckle: SpeckleConfig::Correlated { rho: 0.9, psi: std::f64::consts::FRAC_PI_2 },
        },
        outliers: OutlierSpec::none(),
        init_perturbation: 0.1,
        align: true,
        structured: None,
        matched_time: false,
        time_budget_seconds: None,
        keep_traces: false,
    }
}

/// Gaussian background noise plus `D′ = 8` weak outlier sources; all three
/// calibrators under the same iteration budget.
pub fn fig3() -> ExperimentConfig {
    ExperimentConfig {
        name: "fig3".into(),
        methods: all_methods(Budget::fast()),
        snr_db: vec![10.0, 15.0, 20.0],
        noise: NoiseConfig { texture: TextureLaw::Constant, speckle: SpeckleConfig::White },
        outliers: OutlierSpec { count: 8, flux_scale: 0.1, perturbation: 0.3 },
        ..fig2()
    }
}

/// 3DC truth with known per-antenna beams, the SIRP noise of [`fig2`] plus
/// `D′ = 4` outliers; structured parameters extracted from every
/// unstructured estimate.
pub fn fig4() -> ExperimentConfig {
    ExperimentConfig {
        name: "fig4".into(),
        scene: SceneSource::RandomStation { sources: 2, antennas: 8, radius: 8.0, beam_spread: 0.5, seed: 1 },
        outliers: OutlierSpec { count: 4, flux_scale: 0.1, perturbation: 0.3 },
        snr_db: vec![10.0, 15.0, 20.0],
        structured: Some(StructuredConfig::default()),
        noise: fig2().noise,
        ..fig3()
    }
}
