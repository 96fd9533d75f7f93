//! Monte-Carlo runner: per-run data synthesis, calibration by every method,
//! error accumulation and the CRB overlay.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::C64;
use crate::baselines::{run_method, BaselineConfig};
use crate::calib_robust::{Budget, CalibrationConfig, CalibrationState};
use crate::calib_structured::{calibrate_structured, canonical_gauge};
use crate::crb::crb;
use crate::error::{Error, Result};
use crate::gauge::align_jones;
use crate::harness::config::ExperimentConfig;
use crate::model::{synth_all, JonesSet, SceneModel, StructuredParams3DC, VisibilityBatch};
use crate::noise::{calibrate_snr, inject_outliers, sample_noise, NoiseSpec, TextureLaw};

/// Iteration cap used for every loop in matched-time mode; the clock stops
/// calibration long before it is reached.
pub const MATCHED_TIME_CAP: usize = 100_000;

/// Per-loop `ε^h` series of one calibration.
/// Per-SNR bound diagonals and the null dimension of the FIM.
type Bounds = (Vec<Option<Vec<f64>>>, Option<usize>);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSeries {
    pub outer: Vec<f64>,
    pub em: Vec<f64>,
    pub bcd: Vec<f64>,
}

/// Flattens the trace of `state` into one series per loop level.
pub fn convergence_trace(state: &CalibrationState) -> ConvergenceSeries {
    ConvergenceSeries {
        outer: state.trace.outer.clone(),
        em: state.trace.em_flat(),
        bcd: state.trace.bcd.iter().flatten().copied().collect(),
    }
}

/// Outcome of one method on one Monte-Carlo run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub snr_index: usize,
    pub run: usize,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Squared error per real Jones parameter.
    pub sq_err: Vec<f64>,
    /// Squared error per structured parameter, after canonicalisation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured_sq_err: Option<Vec<f64>>,
    pub iterations: usize,
    pub elapsed_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<ConvergenceSeries>,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Averages of one method at one SNR over its successful runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub snr_db: f64,
    pub runs: usize,
    pub failed: usize,
    pub mse: Vec<f64>,
    /// Monte-Carlo standard error of each MSE entry.
    pub se: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured_mse: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured_se: Option<Vec<f64>>,
    pub mean_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetadata {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub runs: usize,
    pub n_sources: usize,
    pub n_antennas: usize,
    pub n_baselines: usize,
    pub n_unknowns: usize,
    pub n_measurements: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured_labels: Option<Vec<String>>,
    /// Noise scale `σ²` used at each SNR.
    pub sigma2: Vec<f64>,
    /// Dimension of the Fisher null space, when a bound was computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crb_null_dimension: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_budget_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub metadata: ExperimentMetadata,
    pub snr_db: Vec<f64>,
    /// Per SNR, the bound on every real Jones parameter. Absent for texture
    /// laws without a closed-form bound.
    pub crb: Vec<Option<Vec<f64>>>,
    pub summaries: Vec<MethodSummary>,
    pub runs: Vec<RunRecord>,
}

impl ExperimentResult {
    pub fn summary(&self, method: &str, snr_index: usize) -> Option<&MethodSummary> {
        let snr = self.snr_db.get(snr_index)?;
        self.summaries.iter().find(|s| s.method == method && s.snr_db == *snr)
    }

    pub fn records(&self, method: &str, snr_index: usize) -> impl Iterator<Item = &RunRecord> {
        let method = method.to_string();
        self.runs.iter().filter(move |r| r.method == method && r.snr_index == snr_index)
    }

    /// Wall-clock seconds per method summed over every run.
    pub fn total_seconds(&self, method: &str) -> f64 {
        self.runs.iter().filter(|r| r.method == method).map(|r| r.elapsed_seconds).sum()
    }
}

/// Truth plus `U(−h, h)` on every real parameter.
pub fn perturb_jones(truth: &JonesSet, half_width: f64, rng: &mut impl Rng) -> JonesSet {
    let params: Vec<f64> = truth
        .real_params()
        .into_iter()
        .map(|x| if half_width > 0.0 { x + rng.gen_range(-half_width..half_width) } else { x })
        .collect();
    JonesSet::from_real_params(truth.n_sources(), truth.n_antennas(), &params).expect("same shape")
}

/// Truth with every angle and offset scaled by `1 + U(−r, r)` and every gain
/// multiplied by `1 + U(−r, r) + jU(−r, r)`.
pub fn perturb_structured(truth: &StructuredParams3DC, relative: f64, rng: &mut impl Rng) -> StructuredParams3DC {
    let draw = |rng: &mut dyn rand::RngCore| if relative > 0.0 { rng.gen_range(-relative..relative) } else { 0.0 };
    let mut out = truth.clone();
    for x in &mut out.faraday {
        *x *= 1.0 + draw(rng);
    }
    for g in &mut out.gains {
        for z in g {
            *z *= C64::new(1.0 + draw(rng), draw(rng));
        }
    }
    for a in &mut out.offsets {
        for x in a {
            *x *= 1.0 + draw(rng);
        }
    }
    out
}

/// Per-run RNG: the experiment seed on the stream of `(snr_index, run)`.
pub fn run_rng(seed: u64, n_runs: usize, snr_index: usize, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((snr_index * n_runs + run) as u64);
    rng
}

/// Noisy data for one run and its initial points.
pub struct RunData {
    pub x: VisibilityBatch,
    pub init: JonesSet,
    pub structured_init: Option<StructuredParams3DC>,
}

struct Prepared {
    cfg: ExperimentConfig,
    model: SceneModel,
    clean: VisibilityBatch,
    specs: Vec<NoiseSpec>,
}

impl Prepared {
    fn new(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.scene(base)?;
        let clean = synth_all(&model.truth, &model.sources);
        let unit = cfg.noise.spec()?;
        let specs = cfg.snr_db.iter().map(|s| calibrate_snr(&clean, &unit, *s)).collect::<Result<Vec<_>>>()?;
        Ok(Prepared { cfg: cfg.clone(), model, clean, specs })
    }

    fn data(&self, snr_index: usize, run: usize) -> Result<RunData> {
        let mut rng = run_rng(self.cfg.seed, self.cfg.runs, snr_index, run);
        let mut x = inject_outliers(&self.clean, &self.cfg.outliers, &self.model.array, &mut rng)?;
        let noise = sample_noise(&self.specs[snr_index], x.len(), &mut rng);
        for (v, n) in x.as_mut_slice().iter_mut().zip(noise) {
            *v += n;
        }
        let init = perturb_jones(&self.model.truth, self.cfg.init_perturbation, &mut rng);
        let structured_init = match (&self.cfg.structured, &self.model.structured) {
            (Some(_), Some(truth)) => Some(perturb_structured(truth, self.cfg.init_perturbation, &mut rng)),
            _ => None,
        };
        Ok(RunData { x, init, structured_init })
    }

    fn budget(&self, method: &BaselineConfig, time_budget: Option<f64>) -> Budget {
        match time_budget {
            Some(t) => Budget {
                outer: MATCHED_TIME_CAP,
                em: method.budget.em,
                bcd: method.budget.bcd,
                tolerance: 0.0,
                max_seconds: Some(t),
            },
            None => method.budget.clone(),
        }
    }

    fn run_one(
        &self,
        method: &BaselineConfig,
        data: &RunData,
        snr_index: usize,
        run: usize,
        time_budget: Option<f64>,
    ) -> RunRecord {
        let mut record = RunRecord {
            snr_index,
            run,
            method: method.kind.name().to_string(),
            error: None,
            sq_err: Vec::new(),
            structured_sq_err: None,
            iterations: 0,
            elapsed_seconds: 0.0,
            trace: None,
        };
        let start = Instant::now();
        if let Err(e) = self.score(method, data, time_budget, &mut record) {
            record.error = Some(e.to_string());
            record.sq_err.clear();
            record.structured_sq_err = None;
        }
        record.elapsed_seconds = start.elapsed().as_secs_f64();
        record
    }

    fn score(
        &self,
        method: &BaselineConfig,
        data: &RunData,
        time_budget: Option<f64>,
        record: &mut RunRecord,
    ) -> Result<()> {
        let config = CalibrationConfig::new(data.init.clone()).with_budget(self.budget(method, time_budget));
        let state = run_method(&method.kind, &data.x, &self.model.sources, &config)?;
        if !state.jones.is_finite() {
            return Err(Error::NonFinite { stage: "calibration output" });
        }
        record.iterations = state.iterations;
        if self.cfg.keep_traces {
            record.trace = Some(convergence_trace(&state));
        }
        let truth = &self.model.truth;
        let estimate = if self.cfg.align { align_jones(&state.jones, truth, &self.model.sources) } else { state.jones };
        record.sq_err = squared_errors(&estimate.real_params(), &truth.real_params());
        if let (Some(scfg), Some(init), Some(strue)) =
            (&self.cfg.structured, &data.structured_init, &self.model.structured)
        {
            let fit = calibrate_structured(&estimate, &self.model.sources, &self.model.array, init, scfg)?;
            let est = canonical_gauge(&fit.params, &self.model.array).to_real_vector();
            let tru = canonical_gauge(strue, &self.model.array).to_real_vector();
            record.structured_sq_err = Some(squared_errors(&est, &tru));
        }
        Ok(())
    }

    fn bounds(&self) -> Result<Bounds> {
        let nu = match self.cfg.noise.texture {
            TextureLaw::InverseGamma { nu } => nu,
            TextureLaw::Constant => f64::INFINITY,
            TextureLaw::Table { .. } => return Ok((vec![None; self.specs.len()], None)),
        };
        let omega = self.cfg.noise.speckle.matrix()?;
        let mut null = None;
        let mut out = Vec::with_capacity(self.specs.len());
        for spec in &self.specs {
            let b = crb(&self.model.truth, &self.model.sources, &omega.scale(spec.sigma2), nu)?;
            null = Some(b.null_dimension);
            out.push(Some(b.diag));
        }
        Ok((out, null))
    }
}

fn squared_errors(estimate: &[f64], truth: &[f64]) -> Vec<f64> {
    estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).collect()
}

/// Mean and standard error of each column.
fn mean_and_se<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let mut sum = vec![0.0; dim];
    let mut sum2 = vec![0.0; dim];
    let mut n = 0usize;
    for row in rows {
        n += 1;
        for k in 0..dim {
            sum[k] += row[k];
            sum2[k] += row[k] * row[k];
        }
    }
    if n == 0 {
        return (vec![f64::NAN; dim], vec![f64::NAN; dim], 0);
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let se = if n > 1 {
        sum2.iter().zip(&mean).map(|(s2, m)| ((s2 / nf - m * m).max(0.0) * nf / (nf - 1.0) / nf).sqrt()).collect()
    } else {
        vec![0.0; dim]
    };
    (mean, se, n)
}

fn summarise(
    cfg: &ExperimentConfig,
    records: &[RunRecord],
    n_params: usize,
    n_structured: Option<usize>,
) -> Vec<MethodSummary> {
    let mut out = Vec::new();
    for (s, snr) in cfg.snr_db.iter().enumerate() {
        for method in &cfg.methods {
            let name = method.kind.name();
            let rows: Vec<&RunRecord> = records.iter().filter(|r| r.snr_index == s && r.method == name).collect();
            let ok: Vec<&RunRecord> = rows.iter().copied().filter(|r| r.ok()).collect();
            let (mse, se, n) = mean_and_se(ok.iter().map(|r| &r.sq_err), n_params);
            let (structured_mse, structured_se) = match n_structured {
                Some(dim) => {
                    let (m, e, _) = mean_and_se(ok.iter().filter_map(|r| r.structured_sq_err.as_ref()), dim);
                    (Some(m), Some(e))
                }
                None => (None, None),
            };
            let mean_seconds = if rows.is_empty() {
                0.0
            } else {
                rows.iter().map(|r| r.elapsed_seconds).sum::<f64>() / rows.len() as f64
            };
            out.push(MethodSummary {
                method: name.to_string(),
                snr_db: *snr,
                runs: n,
                failed: rows.len() - n,
                mse,
                se,
                structured_mse,
                structured_se,
                mean_seconds,
            });
        }
    }
    out
}

/// Runs the sweep on `threads` worker threads (all available when `None`).
/// `base` resolves relative scene paths. Outputs do not depend on the thread
/// count.
pub fn run_experiment(cfg: &ExperimentConfig, base: Option<&Path>, threads: Option<usize>) -> Result<ExperimentResult> {
    let prepared = Prepared::new(cfg, base)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::invalid("threads", "must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::invalid("threads", e.to_string()))?;
    let time_budget = if cfg.matched_time {
        Some(match cfg.time_budget_seconds {
            Some(t) => t,
            None => {
                let data = prepared.data(0, 0)?;
                let probe = prepared.run_one(&cfg.methods[0], &data, 0, 0, None);
                probe.elapsed_seconds.max(1e-3)
            }
        })
    } else {
        None
    };
    let tasks: Vec<(usize, usize)> = (0..cfg.snr_db.len()).flat_map(|s| (0..cfg.runs).map(move |r| (s, r))).collect();
    let per_task: Vec<Result<Vec<RunRecord>>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(s, r)| {
                let data = prepared.data(s, r)?;
                Ok(cfg.methods.iter().map(|m| prepared.run_one(m, &data, s, r, time_budget)).collect())
            })
            .collect()
    });
    let mut records = Vec::with_capacity(tasks.len() * cfg.methods.len());
    for batch in per_task {
        records.extend(batch?);
    }
    let model = &prepared.model;
    let n_params = model.truth.n_real_params();
    let n_structured = cfg.structured.as_ref().and(model.structured.as_ref()).map(|s| s.n_real_params());
    let summaries = summarise(cfg, &records, n_params, n_structured);
    let (crb, crb_null_dimension) = prepared.bounds()?;
    let metadata = ExperimentMetadata {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        runs: cfg.runs,
        n_sources: model.sources.len(),
        n_antennas: model.array.len(),
        n_baselines: model.array.n_baselines(),
        n_unknowns: n_params,
        n_measurements: prepared.clean.n_real_measurements(),
        structured_labels: cfg.structured.as_ref().and(model.structured.as_ref()).map(|s| s.labels()),
        sigma2: prepared.specs.iter().map(|s| s.sigma2).collect(),
        crb_null_dimension,
        time_budget_seconds: time_budget,
    };
    Ok(ExperimentResult { metadata, snr_db: cfg.snr_db.clone(), crb, summaries, runs: records })
}

/// Noisy data and initial points of one run, exactly as the sweep sees them.
pub fn simulate_run(
    cfg: &ExperimentConfig,
    base: Option<&Path>,
    snr_index: usize,
    run: usize,
) -> Result<(SceneModel, RunData)> {
    let prepared = Prepared::new(cfg, base)?;
    if snr_index >= cfg.snr_db.len() {
        return Err(Error::invalid("snr_index", format!("only {} SNR values configured", cfg.snr_db.len())));
    }
    let data = prepared.data(snr_index, run)?;
    Ok((prepared.model, data))
}
