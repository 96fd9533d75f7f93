//! Extraction of physical 3DC parameters (Faraday angles, electronic gains and
//! ionospheric offsets) from estimated Jones matrices by cyclic closed-form
//! and one-dimensional updates.
//!
//! Each cycle updates, in order, every `ϑ_i`, then every `g_p`, then every
//! `α_i` (per-antenna phases followed by a plane fit).
//!
//! Two ambiguities are inherent to the model. The ionospheric phase is a
//! scalar, so a phase gradient `a·u_p + b·v_p` can move between the gains and
//! all offsets without changing any Jones matrix. When the input is aligned
//! to the structured model at every cycle, a common gain phase is free as
//! well. [`canonical_gauge`] removes both before parameters are compared.

use serde::{Deserialize, Serialize};

use crate::algebra::{CMat2, C64, ZERO};
use crate::error::{Error, Result};
use crate::gauge::euclidean_alignment;
use crate::model::{
    build_structured_jones, ionospheric_phase_matrix, structured_jones_set, AntennaArray, JonesSet, SourceModel,
    StructuredParams3DC,
};

/// Magnitude below which gain denominators, phase traces and the Gram
/// determinant count as degenerate.
pub const DEGENERATE_TOLERANCE: f64 = 1e-12;

/// Number of grid points over `(−π/2, π/2]` in the Faraday search.
pub const FARADAY_GRID: usize = 720;

/// Golden-section iterations refining the best grid point.
pub const GOLDEN_STEPS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructuredConfig {
    pub max_cycles: usize,
    /// Stop once the largest real-parameter change in a cycle drops below this.
    pub tolerance: f64,
    /// Re-align the input Jones matrices to the current structured model at
    /// the start of every cycle. Needed when the input comes from an
    /// unstructured calibrator, whose output is defined only up to the
    /// source-mixing ambiguity. The alternation converges linearly, so a
    /// few hundred cycles may be needed when sources are weakly polarised.
    pub align_gauge: bool,
}

impl Default for StructuredConfig {
    fn default() -> Self {
        StructuredConfig { max_cycles: 50, tolerance: 1e-8, align_gauge: false }
    }
}

impl StructuredConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_cycles == 0 {
            return Err(Error::invalid("structured.max_cycles", "must be at least 1"));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(Error::invalid("structured.tolerance", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Transient per-`(i, p)` products of the current parameter state.
#[derive(Clone, Copy, Debug)]
pub struct StructuredFactors {
    /// `R = H Z F`.
    pub r: CMat2,
    /// `X = R Ĵᴴ`.
    pub x: CMat2,
    /// `W = R Rᴴ`.
    pub w: CMat2,
    /// `M = Ĵ Fᴴ Hᴴ Gᴴ`.
    pub m: CMat2,
}

impl StructuredFactors {
    pub fn new(
        jhat: &CMat2,
        state: &StructuredParams3DC,
        sources: &SourceModel,
        array: &AntennaArray,
        i: usize,
        p: usize,
    ) -> Self {
        let h = sources.beam(i, p);
        let f = CMat2::rotation(state.faraday[i]);
        let g = state.gains[p];
        let r = h * ionospheric_phase_matrix(array, state.offsets[i], p) * f;
        let m = *jhat * f.adjoint() * h.adjoint() * CMat2::diag(g[0], g[1]).adjoint();
        StructuredFactors { r, x: r * jhat.adjoint(), w: r * r.adjoint(), m }
    }
}

/// `Σ_{i,p} ‖Ĵ_{i,p} − G_p H_{i,p} Z_{i,p} F_i‖_F²`.
pub fn structured_cost(
    jhat: &JonesSet,
    params: &StructuredParams3DC,
    sources: &SourceModel,
    array: &AntennaArray,
) -> f64 {
    let mut cost = 0.0;
    for i in 0..jhat.n_sources() {
        for p in 0..jhat.n_antennas() {
            cost += (*jhat.get(i, p) - build_structured_jones(params, sources, array, i, p)).norm_sqr();
        }
    }
    cost
}

/// Closed-form gains given the current angles and offsets:
/// `[ĝ_p]_k = (Σ_i [W*]_kk)⁻¹ Σ_i [X*]_kk`.
pub fn estimate_gains(
    jhat: &JonesSet,
    state: &StructuredParams3DC,
    sources: &SourceModel,
    array: &AntennaArray,
) -> Result<Vec<[C64; 2]>> {
    (0..jhat.n_antennas())
        .map(|p| {
            let mut num = [ZERO; 2];
            let mut den = [ZERO; 2];
            for i in 0..jhat.n_sources() {
                let f = StructuredFactors::new(jhat.get(i, p), state, sources, array, i, p);
                for k in 0..2 {
                    num[k] += f.x.0[k][k].conj();
                    den[k] += f.w.0[k][k].conj();
                }
            }
            let mut g = [ZERO; 2];
            for k in 0..2 {
                if den[k].norm() < DEGENERATE_TOLERANCE {
                    return Err(Error::DegenerateGain { antenna: p, polarisation: k });
                }
                g[k] = num[k] / den[k];
            }
            Ok(g)
        })
        .collect()
}

/// Per-antenna ionospheric phase from `exp{2jφ} = Tr M / Tr Mᴴ`, returned in
/// `(−π/2, π/2]`.
pub fn estimate_phase(
    jhat_ip: &CMat2,
    state: &StructuredParams3DC,
    sources: &SourceModel,
    array: &AntennaArray,
    i: usize,
    p: usize,
) -> Result<f64> {
    let t = StructuredFactors::new(jhat_ip, state, sources, array, i, p).m.trace();
    if t.norm() < DEGENERATE_TOLERANCE {
        return Err(Error::DegeneratePhase { source_index: i, antenna: p });
    }
    Ok(0.5 * (t / t.conj()).arg())
}

/// Least-squares plane fit `φ_p ≈ η u_p + ζ v_p` through the adjugate of the
/// antenna Gram matrix.
pub fn estimate_offsets(phases: &[f64], array: &AntennaArray) -> Result<[f64; 2]> {
    if phases.len() != array.len() {
        return Err(Error::invalid("phases", format!("expected {} phases, got {}", array.len(), phases.len())));
    }
    let det = array.gram_determinant();
    if det.abs() <= DEGENERATE_TOLERANCE {
        return Err(Error::DegenerateGeometry { determinant: det });
    }
    let g = array.gram();
    let (mut su, mut sv) = (0.0, 0.0);
    for (phi, [u, v]) in phases.iter().zip(array.positions()) {
        su += phi * u;
        sv += phi * v;
    }
    Ok([(su * g[1][1] - sv * g[1][0]) / det, (sv * g[0][0] - su * g[0][1]) / det])
}

fn faraday_cost(
    jhat: &JonesSet,
    state: &StructuredParams3DC,
    sources: &SourceModel,
    array: &AntennaArray,
    i: usize,
    angle: f64,
) -> f64 {
    let f = CMat2::rotation(angle);
    (0..jhat.n_antennas())
        .map(|p| {
            let g = state.gains[p];
            let a = CMat2::diag(g[0], g[1]) * sources.beam(i, p) * ionospheric_phase_matrix(array, state.offsets[i], p);
            (*jhat.get(i, p) - a * f).norm_sqr()
        })
        .sum()
}

/// Grid point `k` of the Faraday search, `−π/2 + (k + 1)·π/720`.
pub fn faraday_grid_point(k: usize) -> f64 {
    -std::f64::consts::FRAC_PI_2 + (k + 1) as f64 * std::f64::consts::PI / FARADAY_GRID as f64
}

/// Faraday angle of source `i` minimising its Jones misfit over
/// `(−π/2, π/2]`: exhaustive grid, then golden-section refinement on the
/// neighbouring cells.
pub fn estimate_faraday(
    jhat: &JonesSet,
    state: &StructuredParams3DC,
    sources: &SourceModel,
    array: &AntennaArray,
    i: usize,
) -> f64 {
    let cost = |angle: f64| faraday_cost(jhat, state, sources, array, i, angle);
    let (mut best, mut best_cost) = (faraday_grid_point(0), f64::INFINITY);
    for k in 0..FARADAY_GRID {
        let angle = faraday_grid_point(k);
        let c = cost(angle);
        if c < best_cost {
            best = angle;
            best_cost = c;
        }
    }
    let step = std::f64::consts::PI / FARADAY_GRID as f64;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let (mut lo, mut hi) = ((best - step).max(-half_pi), (best + step).min(half_pi));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut c1, mut c2) = (cost(x1), cost(x2));
    for _ in 0..GOLDEN_STEPS {
        if c1 <= c2 {
            hi = x2;
            x2 = x1;
            c2 = c1;
            x1 = hi - ratio * (hi - lo);
            c1 = cost(x1);
        } else {
            lo = x1;
            x1 = x2;
            c1 = c2;
            x2 = lo + ratio * (hi - lo);
            c2 = cost(x2);
        }
    }
    for (x, c) in [(x1, c1), (x2, c2)] {
        if c < best_cost && x > -half_pi {
            best = x;
            best_cost = c;
        }
    }
    best
}

/// Result of [`calibrate_structured`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredFit {
    pub params: StructuredParams3DC,
    pub cycles: usize,
    pub converged: bool,
    /// Misfit after each cycle.
    pub cost_trace: Vec<f64>,
}

/// Cyclic estimation of `ε^3DC` from the Jones matrices `jhat`, starting
/// from `init`.
pub fn calibrate_structured(
    jhat: &JonesSet,
    sources: &SourceModel,
    array: &AntennaArray,
    init: &StructuredParams3DC,
    config: &StructuredConfig,
) -> Result<StructuredFit> {
    config.validate()?;
    let (d, m) = (jhat.n_sources(), jhat.n_antennas());
    if sources.len() != d || array.len() != m {
        return Err(Error::invalid(
            "jones",
            format!("shape {d}x{m} does not match {} sources and {} antennas", sources.len(), array.len()),
        ));
    }
    init.validate(d, m)?;
    if !jhat.is_finite() {
        return Err(Error::NonFinite { stage: "structured input" });
    }
    let mut state = init.clone();
    let mut work = jhat.clone();
    let mut cost_trace = Vec::new();
    let mut converged = false;
    let mut cycles = 0;
    while cycles < config.max_cycles {
        cycles += 1;
        let previous = state.to_real_vector();
        if config.align_gauge {
            let aligned = euclidean_alignment(jhat, &structured_jones_set(&state, sources, array), sources).apply(jhat);
            if structured_cost(&aligned, &state, sources, array) <= structured_cost(&work, &state, sources, array) {
                work = aligned;
            }
        }
        run_cycle(&work, &mut state, sources, array)
            .map_err(|e| Error::Structured { cycle: cycles, source: Box::new(e) })?;
        cost_trace.push(structured_cost(&work, &state, sources, array));
        let change = state.to_real_vector().iter().zip(&previous).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if !change.is_finite() {
            return Err(Error::Structured {
                cycle: cycles,
                source: Box::new(Error::NonFinite { stage: "structured update" }),
            });
        }
        if change < config.tolerance {
            converged = true;
            break;
        }
    }
    Ok(StructuredFit { params: state, cycles, converged, cost_trace })
}

fn run_cycle(
    jhat: &JonesSet,
    state: &mut StructuredParams3DC,
    sources: &SourceModel,
    array: &AntennaArray,
) -> Result<()> {
    for i in 0..jhat.n_sources() {
        state.faraday[i] = estimate_faraday(jhat, state, sources, array, i);
    }
    state.gains = estimate_gains(jhat, state, sources, array)?;
    for i in 0..jhat.n_sources() {
        let phases = (0..jhat.n_antennas())
            .map(|p| estimate_phase(jhat.get(i, p), state, sources, array, i, p))
            .collect::<Result<Vec<_>>>()?;
        state.offsets[i] = estimate_offsets(&phases, array)?;
    }
    Ok(())
}

/// Representative of `params` whose offsets average to zero and whose gains
/// satisfy `arg Σ_p g_{p,x} g_{p,y} = 0`. The gradient leaves the offsets for
/// the gains before the common phase is removed, and the remaining sign is
/// fixed by `Re Σ_p (g_{p,x} + g_{p,y}) ≥ 0`. The gradient and phase steps are
/// continuous in the parameters, so gain phases may lie anywhere.
pub fn canonical_gauge(params: &StructuredParams3DC, array: &AntennaArray) -> StructuredParams3DC {
    let mut out = params.clone();
    let d = out.offsets.len().max(1) as f64;
    let (a, b) = out.offsets.iter().fold((0.0, 0.0), |(a, b), o| (a + o[0] / d, b + o[1] / d));
    for o in &mut out.offsets {
        o[0] -= a;
        o[1] -= b;
    }
    for (p, g) in out.gains.iter_mut().enumerate() {
        let [u, v] = array.position(p);
        let rot = C64::from_polar(1.0, a * u + b * v);
        g[0] *= rot;
        g[1] *= rot;
    }
    let total: C64 = out.gains.iter().map(|g| g[0] * g[1]).sum();
    if total.norm() > 0.0 {
        let rot = C64::from_polar(1.0, -0.5 * total.arg());
        for g in &mut out.gains {
            g[0] *= rot;
            g[1] *= rot;
        }
    }
    let lead: C64 = out.gains.iter().map(|g| g[0] + g[1]).sum();
    if lead.re < 0.0 {
        for g in &mut out.gains {
            g[0] = -g[0];
            g[1] = -g[1];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Scene;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn station(d: usize, m: usize, seed: u64) -> (SourceModel, AntennaArray, StructuredParams3DC) {
        let model = Scene::random_station(d, m, 8.0, seed).build().unwrap();
        (model.sources, model.array, model.structured.unwrap())
    }

    fn max_diff(a: &StructuredParams3DC, b: &StructuredParams3DC) -> f64 {
        a.to_real_vector().iter().zip(b.to_real_vector()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn perturbed(truth: &StructuredParams3DC, scale: f64, seed: u64) -> StructuredParams3DC {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = truth.clone();
        for x in &mut out.faraday {
            *x *= 1.0 + rng.gen_range(-scale..scale);
        }
        for g in &mut out.gains {
            for z in g {
                *z *= C64::new(1.0 + rng.gen_range(-scale..scale), rng.gen_range(-scale..scale));
            }
        }
        for a in &mut out.offsets {
            for x in a {
                *x *= 1.0 + rng.gen_range(-scale..scale);
            }
        }
        out
    }

    #[test]
    fn identity_factors_pass_diagonal_through() {
        let array = AntennaArray::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let sources = SourceModel::new(vec![CMat2::identity()], None).unwrap();
        let a = C64::new(0.7, -0.2);
        let b = C64::new(1.3, 0.4);
        let jhat = JonesSet::from_fn(1, 3, |_, _| CMat2::diag(a, b));
        let gains = estimate_gains(&jhat, &StructuredParams3DC::neutral(1, 3), &sources, &array).unwrap();
        for g in gains {
            assert_abs_diff_eq!((g[0] - a).norm(), 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!((g[1] - b).norm(), 0.0, epsilon = 1e-15);
        }
        let zero = JonesSet::from_fn(1, 3, |_, _| CMat2::zero());
        let gains = estimate_gains(&zero, &StructuredParams3DC::neutral(1, 3), &sources, &array).unwrap();
        assert!(gains.iter().flatten().all(|g| g.norm() == 0.0));
    }

    #[test]
    fn gains_invert_forward_model() {
        let (sources, array, truth) = station(2, 8, 11);
        let jhat = structured_jones_set(&truth, &sources, &array);
        let mut state = truth.clone();
        state.gains = vec![[C64::new(1.0, 0.0); 2]; 8];
        let gains = estimate_gains(&jhat, &state, &sources, &array).unwrap();
        for (g, t) in gains.iter().zip(&truth.gains) {
            for k in 0..2 {
                assert_abs_diff_eq!((g[k] - t[k]).norm(), 0.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn gains_minimise_misfit() {
        let (sources, array, truth) = station(2, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let jhat = JonesSet::from_fn(2, 5, |i, p| {
            let noise = CMat2::new(
                C64::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
                C64::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
                C64::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
                C64::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
            );
            build_structured_jones(&truth, &sources, &array, i, p) + noise
        });
        let mut state = truth.clone();
        state.gains = estimate_gains(&jhat, &truth, &sources, &array).unwrap();
        let base = structured_cost(&jhat, &state, &sources, &array);
        for p in 0..5 {
            for k in 0..2 {
                for delta in [C64::new(1e-4, 0.0), C64::new(0.0, 1e-4), C64::new(-1e-4, 0.0), C64::new(0.0, -1e-4)] {
                    let mut probe = state.clone();
                    probe.gains[p][k] += delta;
                    assert!(structured_cost(&jhat, &probe, &sources, &array) >= base);
                }
            }
        }
    }

    #[test]
    fn degenerate_gain_is_reported() {
        let array = AntennaArray::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let zero_beam = vec![vec![CMat2::diag(C64::new(1.0, 0.0), ZERO); 3]];
        let sources = SourceModel::new(vec![CMat2::identity()], Some(zero_beam)).unwrap();
        let jhat = JonesSet::identity(1, 3);
        let err = estimate_gains(&jhat, &StructuredParams3DC::neutral(1, 3), &sources, &array).unwrap_err();
        assert!(matches!(err, Error::DegenerateGain { antenna: 0, polarisation: 1 }));
    }

    #[test]
    fn phase_examples() {
        let array = AntennaArray::new(vec![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let sources = SourceModel::new(vec![CMat2::identity()], None).unwrap();
        let neutral = StructuredParams3DC::neutral(1, 3);
        assert_eq!(estimate_phase(&CMat2::identity(), &neutral, &sources, &array, 0, 0).unwrap(), 0.0);
        let (sources, array, truth) = station(1, 6, 5);
        let mut truth = truth;
        let [u, _] = array.position(2);
        for phi in [0.3, 2.0] {
            truth.offsets[0] = [phi / u, 0.0];
            let jhat = build_structured_jones(&truth, &sources, &array, 0, 2);
            let got = estimate_phase(&jhat, &truth, &sources, &array, 0, 2).unwrap();
            let want = if phi > std::f64::consts::FRAC_PI_2 { phi - std::f64::consts::PI } else { phi };
            assert_abs_diff_eq!(got, want, epsilon = 1e-10);
        }
        let zero = CMat2::zero();
        assert!(matches!(
            estimate_phase(&zero, &truth, &sources, &array, 0, 1),
            Err(Error::DegeneratePhase { source_index: 0, antenna: 1 })
        ));
    }

    #[test]
    fn offsets_examples() {
        let (_, array, _) = station(1, 7, 6);
        assert_eq!(estimate_offsets(&[0.0; 7], &array).unwrap(), [0.0, 0.0]);
        let alpha = [0.05, -0.07];
        let phases: Vec<f64> = (0..7).map(|p| array.phase(alpha, p)).collect();
        assert!(phases.iter().all(|x| x.abs() < std::f64::consts::FRAC_PI_2));
        let got = estimate_offsets(&phases, &array).unwrap();
        assert_abs_diff_eq!(got[0], alpha[0], epsilon = 1e-12);
        assert_abs_diff_eq!(got[1], alpha[1], epsilon = 1e-12);
        let line = AntennaArray::new(vec![[1.0, 2.0], [2.0, 4.0]]).unwrap();
        assert!(matches!(estimate_offsets(&[0.1, 0.2], &line), Err(Error::DegenerateGeometry { .. })));
    }

    proptest! {
        #[test]
        fn adjugate_matches_generic_solve(
            pos in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..12),
            phases in proptest::collection::vec(-1.5f64..1.5, 12),
        ) {
            let array = AntennaArray::new(pos.iter().map(|&(u, v)| [u, v]).collect()).unwrap();
            prop_assume!(array.gram_determinant() > 1e-3);
            let phases = &phases[..array.len()];
            let got = estimate_offsets(phases, &array).unwrap();
            let mut lam = nalgebra::DMatrix::<f64>::zeros(2, array.len());
            for (p, [u, v]) in array.positions().iter().enumerate() {
                lam[(0, p)] = *u;
                lam[(1, p)] = *v;
            }
            let phi = nalgebra::DVector::from_column_slice(phases);
            let want = (&lam * lam.transpose()).lu().solve(&(&lam * phi)).unwrap();
            let scale = want.norm().max(1e-12);
            prop_assert!((got[0] - want[0]).abs() <= 1e-12 * scale.max(1.0) * 10.0);
            prop_assert!((got[1] - want[1]).abs() <= 1e-12 * scale.max(1.0) * 10.0);
        }

        #[test]
        fn phase_is_equivariant(delta in -3.0f64..3.0, seed in 0u64..50) {
            let (sources, array, truth) = station(1, 5, seed);
            let base = build_structured_jones(&truth, &sources, &array, 0, 3);
            let phi = estimate_phase(&base, &truth, &sources, &array, 0, 3).unwrap();
            let shifted = base.scale(C64::from_polar(1.0, delta));
            let got = estimate_phase(&shifted, &truth, &sources, &array, 0, 3).unwrap();
            let diff = (got - phi - delta).rem_euclid(std::f64::consts::PI);
            prop_assert!(diff < 1e-9 || std::f64::consts::PI - diff < 1e-9);
        }
    }

    /// Independent oracle: the misfit is `const − 2 Re Tr(N F(ϑ))`, so the
    /// unconstrained minimiser is `atan2(b, a)`.
    fn faraday_closed_form(
        jhat: &JonesSet,
        state: &StructuredParams3DC,
        sources: &SourceModel,
        array: &AntennaArray,
        i: usize,
    ) -> f64 {
        let mut n = CMat2::zero();
        for p in 0..jhat.n_antennas() {
            let g = state.gains[p];
            let a = CMat2::diag(g[0], g[1]) * sources.beam(i, p) * ionospheric_phase_matrix(array, state.offsets[i], p);
            n = n + jhat.get(i, p).adjoint() * a;
        }
        let a = (n.0[0][0] + n.0[1][1]).re;
        let b = (n.0[0][1] - n.0[1][0]).re;
        b.atan2(a)
    }

    #[test]
    fn faraday_recovers_truth() {
        let (sources, array, mut truth) = station(2, 8, 12);
        for angle in [0.4, 0.0, -1.2] {
            truth.faraday[1] = angle;
            let jhat = structured_jones_set(&truth, &sources, &array);
            let got = estimate_faraday(&jhat, &truth, &sources, &array, 1);
            assert_abs_diff_eq!(got, angle, epsilon = 1e-6);
            assert_abs_diff_eq!(got, faraday_closed_form(&jhat, &truth, &sources, &array, 1), epsilon = 1e-6);
        }
    }

    #[test]
    fn faraday_beats_every_grid_point() {
        let (sources, array, truth) = station(1, 6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let jhat = JonesSet::from_fn(1, 6, |i, p| {
            build_structured_jones(&truth, &sources, &array, i, p)
                + CMat2::scalar(C64::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)))
        });
        let got = estimate_faraday(&jhat, &truth, &sources, &array, 0);
        assert!(got > -std::f64::consts::FRAC_PI_2 && got <= std::f64::consts::FRAC_PI_2);
        let best = faraday_cost(&jhat, &truth, &sources, &array, 0, got);
        for k in 0..FARADAY_GRID {
            assert!(best <= faraday_cost(&jhat, &truth, &sources, &array, 0, faraday_grid_point(k)));
        }
    }

    #[test]
    fn round_trip_recovers_parameters() {
        for seed in [1, 2, 3] {
            let (sources, array, truth) = station(2, 8, seed);
            let jhat = structured_jones_set(&truth, &sources, &array);
            let init = perturbed(&truth, 0.1, seed + 100);
            let fit = calibrate_structured(&jhat, &sources, &array, &init, &StructuredConfig::default()).unwrap();
            let err = max_diff(&canonical_gauge(&fit.params, &array), &canonical_gauge(&truth, &array));
            assert!(err < 1e-6, "seed {seed}: error {err:.3e} after {} cycles", fit.cycles);
            assert!(structured_cost(&jhat, &fit.params, &sources, &array) < 1e-10);
        }
    }

    #[test]
    fn cost_is_monotone_across_cycles() {
        for seed in [4, 5] {
            let (sources, array, truth) = station(2, 8, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let jhat = JonesSet::from_fn(2, 8, |i, p| {
                let e = CMat2::new(
                    C64::new(rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01)),
                    C64::new(rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01)),
                    C64::new(rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01)),
                    C64::new(rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01)),
                );
                build_structured_jones(&truth, &sources, &array, i, p) + e
            });
            let init = perturbed(&truth, 0.1, seed);
            let config = StructuredConfig { tolerance: 0.0, max_cycles: 20, ..Default::default() };
            let fit = calibrate_structured(&jhat, &sources, &array, &init, &config).unwrap();
            for w in fit.cost_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "cost rose from {} to {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn canonical_gauge_removes_gradient() {
        let (sources, array, truth) = station(2, 8, 7);
        for (a, b, c) in [(0.02, -0.03, 0.4), (0.9, -0.7, 2.5)] {
            let mut moved = truth.clone();
            for (p, g) in moved.gains.iter_mut().enumerate() {
                let [u, v] = array.position(p);
                let rot = C64::from_polar(1.0, c + a * u + b * v);
                g[0] *= rot;
                g[1] *= rot;
            }
            for o in &mut moved.offsets {
                o[0] -= a;
                o[1] -= b;
            }
            let j1 = structured_jones_set(&truth, &sources, &array);
            let j2 = structured_jones_set(&moved, &sources, &array);
            assert!(j1.max_abs_diff(&j2.clone()) > 0.1);
            let common = C64::from_polar(1.0, -c);
            let j2 = JonesSet::from_fn(2, 8, |i, p| j2.get(i, p).scale(common));
            assert!(j1.max_abs_diff(&j2) < 1e-12);
            assert!(max_diff(&canonical_gauge(&truth, &array), &canonical_gauge(&moved, &array)) < 1e-12);
        }
    }

    #[test]
    fn identity_scene_returns_neutral() {
        let array = AntennaArray::new(vec![[0.0, 0.0], [3.0, 1.0], [-1.0, 2.0], [2.0, -2.0]]).unwrap();
        let sources = SourceModel::new(vec![CMat2::identity(); 2], None).unwrap();
        let jhat = JonesSet::identity(2, 4);
        let neutral = StructuredParams3DC::neutral(2, 4);
        let fit = calibrate_structured(&jhat, &sources, &array, &neutral, &StructuredConfig::default()).unwrap();
        assert!(max_diff(&fit.params, &neutral) < 1e-12);
        assert!(fit.converged);
    }

    #[test]
    fn large_configuration_has_38_parameters() {
        let (sources, array, truth) = station(2, 8, 21);
        assert_eq!(truth.n_real_params(), 38);
        let jhat = structured_jones_set(&truth, &sources, &array);
        let fit = calibrate_structured(
            &jhat,
            &sources,
            &array,
            &StructuredParams3DC::neutral(2, 8),
            &StructuredConfig::default(),
        )
        .unwrap();
        assert_eq!(fit.params.n_real_params(), 38);
        assert_eq!(fit.params.labels().len(), 38);
    }

    #[test]
    fn gauge_alignment_recovers_from_mixed_input() {
        let (_, array, truth) = station(2, 8, 31);
        let sources = SourceModel::new(
            vec![
                CMat2::new(C64::new(1.6, 0.0), C64::new(0.3, 0.2), C64::new(0.3, -0.2), C64::new(0.5, 0.0)),
                CMat2::new(C64::new(0.6, 0.0), C64::new(-0.2, 0.1), C64::new(-0.2, -0.1), C64::new(1.2, 0.0)),
            ],
            None,
        )
        .unwrap();
        let jhat = structured_jones_set(&truth, &sources, &array);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut l = nalgebra::DMatrix::<C64>::zeros(4, 4);
        for i in 0..2 {
            let s = sources.coherency(i).sqrt_hpd().unwrap();
            for r in 0..2 {
                for c in 0..2 {
                    l[(2 * i + r, 2 * i + c)] = s.0[r][c];
                }
            }
        }
        let mut h = nalgebra::DMatrix::<C64>::zeros(4, 4);
        for r in 0..4 {
            h[(r, r)] = C64::new(rng.gen_range(-0.1..0.1), 0.0);
            for c in r + 1..4 {
                h[(r, c)] = C64::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
                h[(c, r)] = h[(r, c)].conj();
            }
        }
        let id = nalgebra::DMatrix::<C64>::identity(4, 4);
        let half = &h * C64::new(0.0, 0.5);
        let u = (&id - &half).try_inverse().unwrap() * (&id + &half);
        let q = &l * u * l.clone().try_inverse().unwrap();
        let f = crate::gauge::GaugeTransform::from_matrix(q);
        let mixed = f.apply(&jhat);
        let init = perturbed(&truth, 0.05, 8);
        let config = StructuredConfig { align_gauge: true, max_cycles: 400, tolerance: 0.0 };
        let fit = calibrate_structured(&mixed, &sources, &array, &init, &config).unwrap();
        let err = max_diff(&canonical_gauge(&fit.params, &array), &canonical_gauge(&truth, &array));
        let plain = calibrate_structured(&mixed, &sources, &array, &init, &StructuredConfig::default()).unwrap();
        let plain_err = max_diff(&canonical_gauge(&plain.params, &array), &canonical_gauge(&truth, &array));
        assert!(err < 1e-3, "aligned error {err:.3e}");
        assert!(plain_err > 10.0 * err, "unaligned error {plain_err:.3e}");
        for w in fit.cost_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn errors_carry_cycle() {
        let array = AntennaArray::new(vec![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]).unwrap();
        let sources = SourceModel::new(vec![CMat2::identity()], None).unwrap();
        let jhat = JonesSet::identity(1, 3);
        let err = calibrate_structured(
            &jhat,
            &sources,
            &array,
            &StructuredParams3DC::neutral(1, 3),
            &StructuredConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Structured { cycle: 1, .. }));
    }
}
