//! C ABI over the `jonescal` calibration library.
//!
//! Objects are opaque heap handles released with their `*_free` function.
//! Every call returns a [`JcStatus`]; on failure the message is kept per
//! thread and read with [`jc_last_error_message`]. Real parameter buffers use
//! the library layout: for source `i`, antenna `p`, row-major entry `k`,
//! `Re` sits at `(i·M + p)·8 + 2k` and `Im` right after it. Visibility
//! buffers hold `Re, Im` pairs of the four entries of every baseline `p < q`
//! in lexicographic order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use jonescal::algebra::{CVec4, HermitianMat4, C64};
use jonescal::baselines::{run_method, Method};
use jonescal::calib_robust::{Budget, CalibrationConfig, CalibrationState};
use jonescal::crb::crb;
use jonescal::gauge::align_jones;
use jonescal::harness::experiment::run_rng;
use jonescal::harness::report::write_experiment;
use jonescal::harness::{run_experiment, ExperimentConfig};
use jonescal::model::{synth_all, JonesSet, Scene, SceneModel, VisibilityBatch};
use jonescal::noise::{add_noise, calibrate_snr, white_speckle, NoiseSpec, Speckle, TextureLaw};
use jonescal::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JcStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad configuration, file content or argument value.
    InvalidArgument = 2,
    /// The computation failed (singular system, non-finite values, ...).
    Numerical = 3,
    /// Reading or writing a file failed.
    Io = 4,
    /// An output buffer has the wrong length.
    BufferSize = 5,
    /// A panic was caught at the boundary.
    Panic = 6,
}

/// Calibration method.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JcMethod {
    Robust = 0,
    GaussianLs = 1,
    /// Student's-t reweighting starting at `ν = 3` with `ν` re-estimated.
    StudentT = 2,
}

/// Iteration caps per loop level and the stopping tolerance on `ε^h`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JcBudget {
    pub outer: u32,
    pub em: u32,
    pub bcd: u32,
    pub tolerance: f64,
}

/// Sky, array and true Jones matrices.
pub struct JcScene {
    model: SceneModel,
}

/// Stacked baseline visibilities.
pub struct JcVisibilities {
    batch: VisibilityBatch,
}

/// Output of one calibration.
pub struct JcCalibration {
    state: CalibrationState,
}

struct Failure {
    status: JcStatus,
    message: String,
}

impl Failure {
    fn new(status: JcStatus, message: impl Into<String>) -> Self {
        Failure { status, message: message.into() }
    }

    fn null(name: &str) -> Self {
        Failure::new(JcStatus::NullPointer, format!("{name} is null"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            _ if e.is_validation() => JcStatus::InvalidArgument,
            Error::Io(_) => JcStatus::Io,
            _ => JcStatus::Numerical,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_last_error(message: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = message);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> JcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(String::new());
            JcStatus::Ok
        }
        Ok(Err(fail)) => {
            set_last_error(fail.message);
            fail.status
        }
        Err(payload) => {
            let text = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {text}"));
            JcStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| Failure::null(name))
}

unsafe fn out_ptr<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| Failure::null(name))
}

unsafe fn text<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure::null(name));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| Failure::new(JcStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn buffer<'a>(ptr: *mut f64, len: usize, want: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if ptr.is_null() {
        return Err(Failure::null(name));
    }
    if len != want {
        return Err(Failure::new(JcStatus::BufferSize, format!("{name} holds {len} values, {want} required")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn boxed<T>(out: &mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

fn scene_handle(out: *mut *mut JcScene, scene: Scene) -> JcStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        boxed(out, JcScene { model: scene.build()? });
        Ok(())
    })
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncated to `len` bytes. Returns the byte length
/// of the full message including the terminator; 1 when no call failed.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn jc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Defaults: 20 outer, 5 EM and 3 BCD iterations, tolerance `1e-8`.
#[no_mangle]
pub extern "C" fn jc_budget_default() -> JcBudget {
    let b = Budget::default();
    JcBudget { outer: b.outer as u32, em: b.em as u32, bcd: b.bcd as u32, tolerance: b.tolerance }
}

/// Parses a scene from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn jc_scene_from_json(json: *const c_char, out: *mut *mut JcScene) -> JcStatus {
    guard(|| {
        let json = text(json, "json")?;
        let out = out_ptr(out, "out")?;
        let scene: Scene = serde_json::from_str(json).map_err(Error::from)?;
        boxed(out, JcScene { model: scene.build()? });
        Ok(())
    })
}

/// Loads a scene file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn jc_scene_load(path: *const c_char, out: *mut *mut JcScene) -> JcStatus {
    guard(|| {
        let path = text(path, "path")?;
        let out = out_ptr(out, "out")?;
        boxed(out, JcScene { model: Scene::load(Path::new(path))?.build()? });
        Ok(())
    })
}

/// Random unstructured scene: `d` sources, `m` antennas in a disc of the
/// given radius, Jones entries spread around identity.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn jc_scene_random_unstructured(
    d: usize,
    m: usize,
    radius: f64,
    spread: f64,
    seed: u64,
    out: *mut *mut JcScene,
) -> JcStatus {
    scene_handle(out, Scene::random_unstructured(d, m, radius, spread, seed))
}

/// Random scene with 3DC structured truth and known beams of the given
/// spread (0 for identity beams).
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn jc_scene_random_station(
    d: usize,
    m: usize,
    radius: f64,
    beam_spread: f64,
    seed: u64,
    out: *mut *mut JcScene,
) -> JcStatus {
    scene_handle(out, Scene::random_station_with_beams(d, m, radius, beam_spread, seed))
}

/// # Safety
/// `scene` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn jc_scene_free(scene: *mut JcScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Source and antenna counts.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn jc_scene_shape(
    scene: *const JcScene,
    n_sources: *mut usize,
    n_antennas: *mut usize,
) -> JcStatus {
    guard(|| {
        let scene = get(scene, "scene")?;
        *out_ptr(n_sources, "n_sources")? = scene.model.truth.n_sources();
        *out_ptr(n_antennas, "n_antennas")? = scene.model.truth.n_antennas();
        Ok(())
    })
}

/// Copies the `8·D·M` real parameters of the true Jones matrices.
///
/// # Safety
/// `out` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn jc_scene_truth(scene: *const JcScene, out: *mut f64, len: usize) -> JcStatus {
    guard(|| {
        let scene = get(scene, "scene")?;
        let params = scene.model.truth.real_params();
        buffer(out, len, params.len(), "out")?.copy_from_slice(&params);
        Ok(())
    })
}

/// Visibilities of the true Jones matrices plus white-speckle noise scaled to
/// `snr_db`. The texture is inverse-gamma with `texture_nu` degrees of
/// freedom, or constant (Gaussian noise) when `texture_nu` is infinite. An
/// infinite `snr_db` gives noiseless data.
///
/// # Safety
/// `scene` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn jc_simulate(
    scene: *const JcScene,
    snr_db: f64,
    texture_nu: f64,
    seed: u64,
    out: *mut *mut JcVisibilities,
) -> JcStatus {
    guard(|| {
        let scene = get(scene, "scene")?;
        let out = out_ptr(out, "out")?;
        let clean = synth_all(&scene.model.truth, &scene.model.sources);
        let batch = if snr_db == f64::INFINITY {
            clean
        } else {
            let texture = if texture_nu == f64::INFINITY {
                TextureLaw::Constant
            } else {
                TextureLaw::InverseGamma { nu: texture_nu }
            };
            let unit = NoiseSpec::new(texture, 1.0, Speckle::Shared(white_speckle()))?;
            let spec = calibrate_snr(&clean, &unit, snr_db)?;
            add_noise(&clean, &spec, &mut run_rng(seed, 1, 0, 0))?
        };
        boxed(out, JcVisibilities { batch });
        Ok(())
    })
}

/// Wraps caller data of `n_antennas` antennas; `len` must be `8·M(M−1)/2`.
///
/// # Safety
/// `data` must be valid for `len` doubles; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn jc_visibilities_from_raw(
    n_antennas: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut JcVisibilities,
) -> JcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if data.is_null() {
            return Err(Failure::null("data"));
        }
        if !len.is_multiple_of(8) {
            return Err(Failure::new(JcStatus::BufferSize, format!("{len} values is not a whole number of baselines")));
        }
        let raw = std::slice::from_raw_parts(data, len);
        let entries =
            raw.chunks_exact(8).map(|c| CVec4(std::array::from_fn(|k| C64::new(c[2 * k], c[2 * k + 1])))).collect();
        boxed(out, JcVisibilities { batch: VisibilityBatch::from_vec(n_antennas, entries)? });
        Ok(())
    })
}

/// Number of doubles in the visibility buffer.
///
/// # Safety
/// `vis` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn jc_visibilities_len(vis: *const JcVisibilities) -> usize {
    vis.as_ref().map_or(0, |v| 8 * v.batch.len())
}

/// # Safety
/// `out` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn jc_visibilities_copy(vis: *const JcVisibilities, out: *mut f64, len: usize) -> JcStatus {
    guard(|| {
        let vis = get(vis, "vis")?;
        let out = buffer(out, len, 8 * vis.batch.len(), "out")?;
        for (chunk, v) in out.chunks_exact_mut(8).zip(vis.batch.as_slice()) {
            for (k, z) in v.0.iter().enumerate() {
                chunk[2 * k] = z.re;
                chunk[2 * k + 1] = z.im;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `vis` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn jc_visibilities_free(vis: *mut JcVisibilities) {
    if !vis.is_null() {
        drop(Box::from_raw(vis));
    }
}

/// Calibrates `vis` against the sources of `scene`. `init` holds `8·D·M`
/// real parameters, or is null to start from identity Jones matrices.
/// `budget` may be null for the defaults.
///
/// # Safety
/// Handles must be live; `init` must be null or valid for `init_len`
/// doubles; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn jc_calibrate(
    scene: *const JcScene,
    vis: *const JcVisibilities,
    method: JcMethod,
    init: *const f64,
    init_len: usize,
    budget: *const JcBudget,
    out: *mut *mut JcCalibration,
) -> JcStatus {
    guard(|| {
        let scene = get(scene, "scene")?;
        let vis = get(vis, "vis")?;
        let out = out_ptr(out, "out")?;
        let (d, m) = (scene.model.truth.n_sources(), scene.model.truth.n_antennas());
        let start = if init.is_null() {
            JonesSet::identity(d, m)
        } else {
            JonesSet::from_real_params(d, m, std::slice::from_raw_parts(init, init_len))?
        };
        let budget = match budget.as_ref() {
            Some(b) => Budget {
                outer: b.outer as usize,
                em: b.em as usize,
                bcd: b.bcd as usize,
                tolerance: b.tolerance,
                max_seconds: None,
            },
            None => Budget::default(),
        };
        let method = match method {
            JcMethod::Robust => Method::Robust,
            JcMethod::GaussianLs => Method::GaussianLs,
            JcMethod::StudentT => Method::StudentT { nu_init: 3.0, estimate_nu: true },
        };
        let config = CalibrationConfig::new(start).with_budget(budget);
        let state = run_method(&method, &vis.batch, &scene.model.sources, &config)?;
        boxed(out, JcCalibration { state });
        Ok(())
    })
}

/// Copies the `8·D·M` real parameters of the estimate.
///
/// # Safety
/// `out` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn jc_calibration_jones(cal: *const JcCalibration, out: *mut f64, len: usize) -> JcStatus {
    guard(|| {
        let cal = get(cal, "cal")?;
        let params = cal.state.jones.real_params();
        buffer(out, len, params.len(), "out")?.copy_from_slice(&params);
        Ok(())
    })
}

/// Outer iterations run and whether the tolerance was met.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn jc_calibration_iterations(
    cal: *const JcCalibration,
    iterations: *mut usize,
    converged: *mut bool,
) -> JcStatus {
    guard(|| {
        let cal = get(cal, "cal")?;
        *out_ptr(iterations, "iterations")? = cal.state.iterations;
        *out_ptr(converged, "converged")? = cal.state.converged;
        Ok(())
    })
}

/// Largest entry-wise error against the scene truth after removing the
/// model's ambiguity.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn jc_calibration_aligned_error(
    cal: *const JcCalibration,
    scene: *const JcScene,
    out: *mut f64,
) -> JcStatus {
    guard(|| {
        let cal = get(cal, "cal")?;
        let scene = get(scene, "scene")?;
        let out = out_ptr(out, "out")?;
        let truth = &scene.model.truth;
        if cal.state.jones.n_sources() != truth.n_sources() || cal.state.jones.n_antennas() != truth.n_antennas() {
            return Err(Failure::new(JcStatus::InvalidArgument, "calibration and scene shapes differ"));
        }
        *out = align_jones(&cal.state.jones, truth, &scene.model.sources).max_abs_diff(truth);
        Ok(())
    })
}

/// # Safety
/// `cal` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn jc_calibration_free(cal: *mut JcCalibration) {
    if !cal.is_null() {
        drop(Box::from_raw(cal));
    }
}

/// Per-parameter Cramér-Rao bound at the scene truth for white speckle of
/// scale `sigma2` and inverse-gamma texture with `nu` degrees of freedom
/// (infinite for Gaussian noise). `null_dimension` may be null.
///
/// # Safety
/// `out` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn jc_crb(
    scene: *const JcScene,
    sigma2: f64,
    nu: f64,
    out: *mut f64,
    len: usize,
    null_dimension: *mut usize,
) -> JcStatus {
    guard(|| {
        let scene = get(scene, "scene")?;
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Failure::new(JcStatus::InvalidArgument, "sigma2 must be positive"));
        }
        let out = buffer(out, len, scene.model.truth.n_real_params(), "out")?;
        let omega: HermitianMat4 = white_speckle().scale(sigma2);
        let bound = crb(&scene.model.truth, &scene.model.sources, &omega, nu)?;
        out.copy_from_slice(&bound.diag);
        if let Some(n) = null_dimension.as_mut() {
            *n = bound.null_dimension;
        }
        Ok(())
    })
}

/// Runs a Monte-Carlo experiment described by JSON text and writes its
/// outputs (`mse.csv`, `mse.json`, `results.json`, `structured.csv`) into
/// `out_dir`. Relative scene paths resolve against the working directory.
/// `threads = 0` uses every core.
///
/// # Safety
/// Both strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn jc_experiment_run(
    config_json: *const c_char,
    out_dir: *const c_char,
    threads: usize,
) -> JcStatus {
    guard(|| {
        let json = text(config_json, "config_json")?;
        let dir = text(out_dir, "out_dir")?;
        let cfg: ExperimentConfig = serde_json::from_str(json).map_err(Error::from)?;
        let result = run_experiment(&cfg, None, (threads > 0).then_some(threads))?;
        write_experiment(&result, Path::new(dir))?;
        Ok(())
    })
}
