//! CSV and JSON output of experiment results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::experiment::{ExperimentMetadata, ExperimentResult};

pub const MSE_HEADER: &str = "method,snr_db,param_index,mse,crb,runs,seed";

fn push_float(out: &mut String, x: Option<f64>) {
    if let Some(x) = x.filter(|x| !x.is_nan()) {
        write!(out, "{x:e}").expect("write to string");
    }
}

/// Long-format MSE table over the real Jones parameters, with the bound of
/// each parameter alongside.
pub fn mse_csv(result: &ExperimentResult) -> String {
    let mut out = String::from(MSE_HEADER);
    out.push('\n');
    for s in &result.summaries {
        let snr_index = result.snr_db.iter().position(|x| *x == s.snr_db).expect("summary SNR is on the grid");
        let bound = result.crb[snr_index].as_ref();
        for (k, mse) in s.mse.iter().enumerate() {
            write!(out, "{},{},{k},", s.method, s.snr_db).expect("write to string");
            push_float(&mut out, Some(*mse));
            out.push(',');
            push_float(&mut out, bound.map(|b| b[k]));
            writeln!(out, ",{},{}", s.runs, result.metadata.seed).expect("write to string");
        }
    }
    out
}

/// Same schema over the structured parameters; the bound column is empty.
pub fn structured_csv(result: &ExperimentResult) -> Option<String> {
    let mut out = String::from(MSE_HEADER);
    out.push('\n');
    let mut any = false;
    for s in &result.summaries {
        let Some(mse) = &s.structured_mse else { continue };
        any = true;
        for (k, v) in mse.iter().enumerate() {
            write!(out, "{},{},{k},", s.method, s.snr_db).expect("write to string");
            push_float(&mut out, Some(*v));
            writeln!(out, ",,{},{}", s.runs, result.metadata.seed).expect("write to string");
        }
    }
    any.then_some(out)
}

/// Per-method, per-SNR figures that do not fit the long table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub method: String,
    pub snr_db: f64,
    pub runs: usize,
    pub failed: usize,
    pub mean_seconds: f64,
    pub se: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured_se: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub metadata: ExperimentMetadata,
    pub entries: Vec<SidecarEntry>,
}

pub fn sidecar(result: &ExperimentResult) -> Sidecar {
    Sidecar {
        metadata: result.metadata.clone(),
        entries: result
            .summaries
            .iter()
            .map(|s| SidecarEntry {
                method: s.method.clone(),
                snr_db: s.snr_db,
                runs: s.runs,
                failed: s.failed,
                mean_seconds: s.mean_seconds,
                se: s.se.clone(),
                structured_se: s.structured_se.clone(),
            })
            .collect(),
    }
}

/// Files written by [`write_experiment`].
pub struct OutputFiles {
    pub mse: PathBuf,
    pub structured: Option<PathBuf>,
    pub sidecar: PathBuf,
    pub results: PathBuf,
}

/// Writes `mse.csv`, `mse.json`, `results.json` and, for structured runs,
/// `structured.csv` into `dir`.
pub fn write_experiment(result: &ExperimentResult, dir: &Path) -> Result<OutputFiles> {
    std::fs::create_dir_all(dir)?;
    let files = OutputFiles {
        mse: dir.join("mse.csv"),
        structured: None,
        sidecar: dir.join("mse.json"),
        results: dir.join("results.json"),
    };
    std::fs::write(&files.mse, mse_csv(result))?;
    std::fs::write(&files.sidecar, serde_json::to_string_pretty(&sidecar(result))?)?;
    std::fs::write(&files.results, serde_json::to_string(result)?)?;
    let structured = match structured_csv(result) {
        Some(text) => {
            let path = dir.join("structured.csv");
            std::fs::write(&path, text)?;
            Some(path)
        }
        None => None,
    };
    Ok(OutputFiles { structured, ..files })
}

pub fn load_result(path: &Path) -> Result<ExperimentResult> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|source| Error::Parse { path: path.to_path_buf(), source })
}

/// One row per method and SNR, averaged over parameters: mean MSE, mean
/// bound and the median per-parameter MSE/CRB ratio.
pub fn summary_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("method,snr_db,mean_mse,mean_crb,median_ratio,runs,failed,mean_seconds\n");
    for s in &result.summaries {
        let snr_index = result.snr_db.iter().position(|x| *x == s.snr_db).expect("summary SNR is on the grid");
        let mean_mse = s.mse.iter().sum::<f64>() / s.mse.len().max(1) as f64;
        write!(out, "{},{},", s.method, s.snr_db).expect("write to string");
        push_float(&mut out, Some(mean_mse));
        out.push(',');
        let bound = result.crb[snr_index].as_ref();
        push_float(&mut out, bound.map(|b| b.iter().sum::<f64>() / b.len().max(1) as f64));
        out.push(',');
        push_float(&mut out, bound.and_then(|b| median_ratio(&s.mse, b)));
        writeln!(out, ",{},{},{:e}", s.runs, s.failed, s.mean_seconds).expect("write to string");
    }
    out
}

/// Median of `mse_k / crb_k` over parameters with a positive bound.
pub fn median_ratio(mse: &[f64], crb: &[f64]) -> Option<f64> {
    let mut r: Vec<f64> =
        mse.iter().zip(crb).filter(|(_, c)| **c > 0.0).map(|(m, c)| m / c).filter(|x| !x.is_nan()).collect();
    if r.is_empty() {
        return None;
    }
    r.sort_by(f64::total_cmp);
    let n = r.len();
    Some(if n % 2 == 1 { r[n / 2] } else { 0.5 * (r[n / 2 - 1] + r[n / 2]) })
}

/// Long table of convergence traces: `method,snr_db,run,level,iteration,epsilon`.
pub fn traces_csv(result: &ExperimentResult) -> Option<String> {
    let mut out = String::from("method,snr_db,run,level,iteration,epsilon\n");
    let mut any = false;
    for r in &result.runs {
        let Some(t) = &r.trace else { continue };
        any = true;
        let snr = result.snr_db[r.snr_index];
        for (level, series) in [("outer", &t.outer), ("em", &t.em), ("bcd", &t.bcd)] {
            for (h, eps) in series.iter().enumerate() {
                writeln!(out, "{},{snr},{},{level},{},{eps:e}", r.method, r.run, h + 1).expect("write to string");
            }
        }
    }
    any.then_some(out)
}
