//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::baselines::{run_method, Method};
use crate::calib_robust::{Budget, CalibrationConfig};
use crate::crb::crb;
use crate::error::{Error, Result};
use crate::gauge::align_jones;
use crate::harness::config::ExperimentConfig;
use crate::harness::experiment::{run_experiment, simulate_run};
use crate::harness::report::{load_result, summary_csv, traces_csv, write_experiment, MSE_HEADER};
use crate::model::{synth_all, JonesSet, VisibilityBatch};
use crate::noise::{calibrate_snr, TextureLaw};

#[derive(Debug, Parser)]
#[command(name = "jonescal", version, about = "Robust Jones-matrix calibration experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Bundled configuration used when `--config` is absent: fig2, fig3 or fig4.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for Monte-Carlo runs.
    #[arg(long, global = true, env = "JONESCAL_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesise one run's visibilities and initial point.
    Simulate {
        /// Index into the SNR grid.
        #[arg(long, default_value_t = 0)]
        snr_index: usize,
        #[arg(long, default_value_t = 0)]
        run: usize,
        /// Clean calibrator visibilities only: no noise, no outliers.
        #[arg(long)]
        noiseless: bool,
    },
    /// Calibrate a visibility file.
    Calibrate {
        /// Visibility file written by `simulate`.
        #[arg(long)]
        input: PathBuf,
        /// robust, gaussian_ls or student_t.
        #[arg(long, default_value = "robust")]
        method: String,
        /// Start from identity Jones matrices instead of the file's initial point.
        #[arg(long)]
        identity_init: bool,
    },
    /// Per-parameter bounds at every configured SNR.
    Crb,
    /// Run the Monte-Carlo sweep.
    Experiment {
        /// Overrides the number of runs.
        #[arg(long)]
        runs: Option<usize>,
        /// Give every method the same wall-clock budget.
        #[arg(long)]
        matched_time: bool,
        /// Score raw estimates without ambiguity alignment.
        #[arg(long)]
        no_align: bool,
        /// Keep per-run convergence traces.
        #[arg(long)]
        traces: bool,
    },
    /// Print the resolved configuration as JSON.
    Config,
    /// Summarise a `results.json` into plot-ready tables.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

/// Output of `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityFile {
    pub config_hash: String,
    pub snr_db: Option<f64>,
    pub visibilities: VisibilityBatch,
    pub init: JonesSet,
    pub truth: JonesSet,
}

fn load_config(global: &GlobalArgs) -> Result<(ExperimentConfig, Option<PathBuf>)> {
    let (mut cfg, base) = match (&global.config, &global.preset) {
        (Some(path), _) => (ExperimentConfig::load(path)?, path.parent().map(Path::to_path_buf)),
        (None, Some(name)) => (ExperimentConfig::preset(name)?, None),
        (None, None) => return Err(Error::invalid("config", "pass --config <file> or --preset <name>")),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok((cfg, base))
}

fn out_path(global: &GlobalArgs, default: &str) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn method_from_name(cfg: &ExperimentConfig, name: &str) -> Result<(Method, Budget)> {
    if let Some(m) = cfg.methods.iter().find(|m| m.kind.name() == name) {
        return Ok((m.kind.clone(), m.budget.clone()));
    }
    let kind = match name {
        "robust" => Method::Robust,
        "gaussian_ls" => Method::GaussianLs,
        "student_t" => Method::StudentT { nu_init: 3.0, estimate_nu: true },
        _ => {
            return Err(Error::invalid(
                "method",
                format!("unknown method {name:?}; expected robust, gaussian_ls or student_t"),
            ))
        }
    };
    Ok((kind, Budget::default()))
}

fn simulate(global: &GlobalArgs, snr_index: usize, run: usize, noiseless: bool) -> Result<()> {
    let (cfg, base) = load_config(global)?;
    let (model, data) = simulate_run(&cfg, base.as_deref(), snr_index, run)?;
    let file = VisibilityFile {
        config_hash: cfg.hash(),
        snr_db: (!noiseless).then(|| cfg.snr_db[snr_index]),
        visibilities: if noiseless { synth_all(&model.truth, &model.sources) } else { data.x },
        init: data.init,
        truth: model.truth,
    };
    let out = out_path(global, "visibilities.json");
    std::fs::write(&out, serde_json::to_string_pretty(&file)?)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn calibrate(global: &GlobalArgs, input: &Path, method: &str, identity_init: bool) -> Result<()> {
    let (cfg, base) = load_config(global)?;
    let model = cfg.scene(base.as_deref())?;
    if !input.exists() {
        return Err(Error::MissingFile(input.to_path_buf()));
    }
    let text = std::fs::read_to_string(input)?;
    let file: VisibilityFile =
        serde_json::from_str(&text).map_err(|source| Error::Parse { path: input.to_path_buf(), source })?;
    if file.visibilities.n_antennas() != model.array.len() {
        return Err(Error::invalid("input.visibilities", "antenna count does not match the configured scene"));
    }
    let (kind, budget) = method_from_name(&cfg, method)?;
    let init =
        if identity_init { JonesSet::identity(model.sources.len(), model.array.len()) } else { file.init.clone() };
    let state =
        run_method(&kind, &file.visibilities, &model.sources, &CalibrationConfig::new(init).with_budget(budget))?;
    let aligned = align_jones(&state.jones, &file.truth, &model.sources);
    let err = aligned.max_abs_diff(&file.truth);
    println!(
        "{method}: {} outer iterations, converged {}, max aligned error {err:.3e}",
        state.iterations, state.converged
    );
    let out = out_path(global, "state.json");
    std::fs::write(&out, state.to_json()?)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn bound(global: &GlobalArgs) -> Result<()> {
    let (cfg, base) = load_config(global)?;
    let model = cfg.scene(base.as_deref())?;
    let nu = match cfg.noise.texture {
        TextureLaw::InverseGamma { nu } => nu,
        TextureLaw::Constant => f64::INFINITY,
        TextureLaw::Table { .. } => return Err(Error::invalid("noise.texture", "no bound for tabulated textures")),
    };
    let clean = synth_all(&model.truth, &model.sources);
    let unit = cfg.noise.spec()?;
    let omega = cfg.noise.speckle.matrix()?;
    let mut out = format!("{MSE_HEADER}\n");
    for snr in &cfg.snr_db {
        let spec = calibrate_snr(&clean, &unit, *snr)?;
        let b = crb(&model.truth, &model.sources, &omega.scale(spec.sigma2), nu)?;
        for (k, c) in b.diag.iter().enumerate() {
            out.push_str(&format!("crb,{snr},{k},,{c:e},0,{}\n", cfg.seed));
        }
        log::info!("SNR {snr} dB: null dimension {}", b.null_dimension);
    }
    let path = out_path(global, "crb.csv");
    std::fs::write(&path, out)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn experiment(
    global: &GlobalArgs,
    runs: Option<usize>,
    matched_time: bool,
    no_align: bool,
    traces: bool,
) -> Result<()> {
    let (mut cfg, base) = load_config(global)?;
    if let Some(r) = runs {
        cfg.runs = r;
    }
    cfg.matched_time |= matched_time;
    cfg.align &= !no_align;
    cfg.keep_traces |= traces;
    cfg.validate()?;
    let result = run_experiment(&cfg, base.as_deref(), global.threads)?;
    let dir = out_path(global, "results");
    let files = write_experiment(&result, &dir)?;
    for s in &result.summaries {
        let mean = s.mse.iter().sum::<f64>() / s.mse.len().max(1) as f64;
        println!(
            "{:<12} {:>6} dB  mean MSE {mean:.4e}  runs {}  failed {}  {:.3} s/run",
            s.method, s.snr_db, s.runs, s.failed, s.mean_seconds
        );
    }
    log::info!("wrote {}", files.mse.display());
    Ok(())
}

fn show_config(global: &GlobalArgs) -> Result<()> {
    let (cfg, _) = load_config(global)?;
    cfg.validate()?;
    let text = serde_json::to_string_pretty(&cfg)? + "\n";
    match &global.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn report(global: &GlobalArgs, input: &Path) -> Result<()> {
    let result = load_result(input)?;
    let out = out_path(global, "summary.csv");
    std::fs::write(&out, summary_csv(&result))?;
    if let Some(t) = traces_csv(&result) {
        std::fs::write(out.with_file_name("traces.csv"), t)?;
    }
    print!("{}", summary_csv(&result));
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate { snr_index, run, noiseless } => simulate(g, *snr_index, *run, *noiseless),
        Command::Calibrate { input, method, identity_init } => calibrate(g, input, method, *identity_init),
        Command::Crb => bound(g),
        Command::Experiment { runs, matched_time, no_align, traces } => {
            experiment(g, *runs, *matched_time, *no_align, *traces)
        }
        Command::Config => show_config(g),
        Command::Report { input } => report(g, input),
    }
}

/// Exit status for an error: 2 for bad input or configuration, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        2
    } else {
        1
    }
}

/// Parses `std::env::args`, runs the command and returns the exit status.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
