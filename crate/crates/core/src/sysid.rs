//! Identification of the sonic conductances and the per-mode spool map from
//! step-response traces.
//!
//! Each mode is identified in three one-dimensional stages: the leakage
//! conductance from a closed-valve relaxation, the source conductance from a
//! full-open step, then one spool fraction per constant-duty segment, to
//! which a cubic in duty is fitted.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{self, LoadModel, Mode, PlantParams, PlantState};
use crate::valvemap::SpoolMap;

/// Search interval for conductances, log10 of m³/(s·Pa).
pub const LOG_C_RANGE: (f64, f64) = (-13.0, -8.0);
const LOG_C_GRID: usize = 51;
/// Minimum start-to-end pressure excursion for a segment to carry information, Pa.
pub const MIN_EXCURSION: f64 = 1000.0;
/// Duty band in which a motionless sweep segment means broken data, %.
pub const STUCK_BAND: (f64, f64) = (40.0, 80.0);
/// Spool fractions closer than this to 0 or 1 are reported on the bound.
pub const BOUND_SNAP: f64 = 1e-3;
const MIN_SAMPLES: usize = 10;
const MAX_SUBSTEP: f64 = 1e-3;
const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Protocol phase of a segment: `rise` while the delivery valve is driven,
/// `decay` while it is closed and the outlet relaxes through leakage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Rise,
    Decay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub t: Vec<f64>,
    /// Absolute pressure, Pa.
    pub p: Vec<f64>,
    /// Polarity valve duty, %.
    pub u1: f64,
    /// Delivery valve duty, %.
    pub u2: f64,
    pub kind: SegmentKind,
}

impl StepTrace {
    pub fn new(t: Vec<f64>, p: Vec<f64>, u1: f64, u2: f64, kind: SegmentKind) -> Result<Self> {
        let tr = Self { t, p, u1, u2, kind };
        tr.validate()?;
        Ok(tr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t.len() != self.p.len() {
            return Err(Error::BadData(
                "time and pressure columns differ in length".into(),
            ));
        }
        if self.t.len() < MIN_SAMPLES {
            return Err(Error::BadData(format!(
                "segment (u1 {}%, u2 {}%) has {} samples, need at least {MIN_SAMPLES}",
                self.u1,
                self.u2,
                self.t.len()
            )));
        }
        if self.t.iter().chain(&self.p).any(|v| !v.is_finite()) {
            return Err(Error::BadData("non-finite sample".into()));
        }
        if self.t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::BadData(
                "timestamps must be strictly increasing".into(),
            ));
        }
        if !(0.0..=100.0).contains(&self.u1) || !(0.0..=100.0).contains(&self.u2) {
            return Err(Error::BadData("duties must lie in [0, 100] %".into()));
        }
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        if self.u1 >= 50.0 {
            Mode::Inflation
        } else {
            Mode::Deflation
        }
    }

    /// Difference between the mean of the last and first tenth of samples, Pa.
    pub fn excursion(&self) -> f64 {
        let n = (self.p.len() / 10).max(1);
        let head = self.p[..n].iter().sum::<f64>() / n as f64;
        let tail = self.p[self.p.len() - n..].iter().sum::<f64>() / n as f64;
        tail - head
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    t_s: f64,
    p_pa: f64,
    u1_pct: f64,
    u2_pct: f64,
    kind: SegmentKind,
}

/// Reads traces from CSV, starting a new segment whenever `(u1, u2, kind)` changes.
pub fn read_traces<R: Read>(input: R) -> Result<Vec<StepTrace>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out: Vec<StepTrace> = Vec::new();
    for row in rdr.deserialize() {
        let row: TraceRow = row?;
        let same = out
            .last()
            .is_some_and(|s| s.u1 == row.u1_pct && s.u2 == row.u2_pct && s.kind == row.kind);
        if !same {
            out.push(StepTrace {
                t: Vec::new(),
                p: Vec::new(),
                u1: row.u1_pct,
                u2: row.u2_pct,
                kind: row.kind,
            });
        }
        let seg = out.last_mut().expect("segment pushed above");
        seg.t.push(row.t_s);
        seg.p.push(row.p_pa);
    }
    for seg in &out {
        seg.validate()?;
    }
    Ok(out)
}

pub fn write_trace<W: Write>(trace: &StepTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (&t, &p) in trace.t.iter().zip(&trace.p) {
        w.serialize(TraceRow {
            t_s: t,
            p_pa: p,
            u1_pct: trace.u1,
            u2_pct: trace.u2,
            kind: trace.kind,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Loads every `*.csv` in `dir`, in file-name order.
pub fn read_trace_dir(dir: &Path) -> Result<Vec<StepTrace>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::BadData(format!(
            "no .csv traces in {}",
            dir.display()
        )));
    }
    let mut out = Vec::new();
    for f in files {
        let segs = read_traces(fs::File::open(&f)?)
            .map_err(|e| Error::BadData(format!("{}: {e}", f.display())))?;
        out.extend(segs);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdResult {
    pub value: f64,
    /// Root-mean-square pressure error, Pa.
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conductance {
    CPo,
    COn,
    COa,
    CAo,
}

impl Conductance {
    pub fn set(self, params: &mut PlantParams, value: f64) {
        let c = &mut params.conductances;
        match self {
            Conductance::CPo => c.c_po = value,
            Conductance::COn => c.c_on = value,
            Conductance::COa => c.c_oa = value,
            Conductance::CAo => c.c_ao = value,
        }
    }

    pub fn get(self, params: &PlantParams) -> f64 {
        let c = &params.conductances;
        match self {
            Conductance::CPo => c.c_po,
            Conductance::COn => c.c_on,
            Conductance::COa => c.c_oa,
            Conductance::CAo => c.c_ao,
        }
    }

    fn is_leak(self) -> bool {
        matches!(self, Conductance::COa | Conductance::CAo)
    }

    fn mode(self) -> Mode {
        match self {
            Conductance::CPo | Conductance::COa => Mode::Inflation,
            Conductance::COn | Conductance::CAo => Mode::Deflation,
        }
    }
}

/// Model pressure at the trace's sample times, started from its first
/// sample, with spool fraction `x` held throughout.
pub fn simulate_samples(
    times: &[f64],
    p_first: f64,
    x: f64,
    mode: Mode,
    params: &PlantParams,
) -> Result<Vec<f64>> {
    let load = LoadModel::Fixed;
    let mut state = PlantState {
        p_out: params.clamp_pressure(p_first),
        t: times[0],
    };
    let mut out = Vec::with_capacity(times.len());
    out.push(state.p_out);
    for w in times.windows(2) {
        let dt = w[1] - w[0];
        let n = (dt / MAX_SUBSTEP).ceil().max(1.0) as usize;
        state = plant::advance(state, x, mode, dt, n, params, &load)?;
        out.push(state.p_out);
    }
    Ok(out)
}

fn rms_error(trace: &StepTrace, x: f64, mode: Mode, params: &PlantParams) -> Result<f64> {
    let sim = simulate_samples(&trace.t, trace.p[0], x, mode, params)?;
    let sse: f64 = sim
        .iter()
        .zip(&trace.p)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sse / trace.p.len() as f64).sqrt())
}

/// RMS mismatch of a trace against the model with conductance `which` set to `value`.
pub fn conductance_residual(
    trace: &StepTrace,
    which: Conductance,
    value: f64,
    params: &PlantParams,
) -> Result<f64> {
    let mut p = *params;
    which.set(&mut p, value);
    let x = if which.is_leak() { 0.0 } else { 1.0 };
    rms_error(trace, x, which.mode(), &p)
}

fn golden_section(
    mut a: f64,
    mut b: f64,
    tol: f64,
    f: &mut impl FnMut(f64) -> Result<f64>,
) -> Result<(f64, f64, usize)> {
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    let mut iters = 0;
    while b - a > tol {
        iters += 1;
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc <= fd {
        (c, fc, iters)
    } else {
        (d, fd, iters)
    })
}

fn check_excursion(trace: &StepTrace, what: &str) -> Result<()> {
    if trace.excursion().abs() < MIN_EXCURSION {
        return Err(Error::BadData(format!(
            "{what} trace moves {:.0} Pa, below the {MIN_EXCURSION} Pa needed to identify anything",
            trace.excursion().abs()
        )));
    }
    Ok(())
}

fn fit_conductance(
    trace: &StepTrace,
    which: Conductance,
    params: &PlantParams,
) -> Result<IdResult> {
    trace.validate()?;
    check_excursion(trace, &format!("{which:?}"))?;
    let (lo, hi) = LOG_C_RANGE;
    let mut objective = |log_c: f64| conductance_residual(trace, which, 10f64.powf(log_c), params);
    let step = (hi - lo) / (LOG_C_GRID - 1) as f64;
    let mut best = (0, f64::INFINITY);
    for i in 0..LOG_C_GRID {
        let r = objective(lo + step * i as f64)?;
        if r < best.1 {
            best = (i, r);
        }
    }
    if best.0 == 0 || best.0 == LOG_C_GRID - 1 {
        return Err(Error::BadData(format!(
            "{which:?} fit does not bracket a minimum inside 1e{lo}..1e{hi}"
        )));
    }
    let a = lo + step * (best.0 - 1) as f64;
    let b = lo + step * (best.0 + 1) as f64;
    let (log_c, residual, iters) = golden_section(a, b, 1e-7, &mut objective)?;
    Ok(IdResult {
        value: 10f64.powf(log_c),
        residual,
        iterations: LOG_C_GRID + iters,
    })
}

/// Fits a leakage conductance (`c_oa` or `c_ao`) to a closed-valve relaxation.
pub fn fit_decay_conductance(
    trace: &StepTrace,
    which: Conductance,
    params: &PlantParams,
) -> Result<IdResult> {
    if !which.is_leak() {
        return Err(Error::config("which", "decay traces identify c_oa or c_ao"));
    }
    fit_conductance(trace, which, params)
}

/// Fits a source conductance (`c_po` or `c_on`) to a full-open step. The
/// leakage conductances in `params` should already be identified.
pub fn fit_source_conductance(
    trace: &StepTrace,
    which: Conductance,
    params: &PlantParams,
) -> Result<IdResult> {
    if which.is_leak() {
        return Err(Error::config(
            "which",
            "full-open traces identify c_po or c_on",
        ));
    }
    fit_conductance(trace, which, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPair {
    /// Duty, %.
    pub u: f64,
    pub x: f64,
    /// RMS pressure error, Pa.
    pub residual: f64,
}

/// One spool-fraction estimate per constant-duty segment.
pub fn fit_spool_segments(
    traces: &[StepTrace],
    params: &PlantParams,
) -> Result<Vec<CalibrationPair>> {
    let mut out = Vec::with_capacity(traces.len());
    for tr in traces {
        tr.validate()?;
        let moved = tr.excursion().abs() >= MIN_EXCURSION;
        if !moved && (STUCK_BAND.0..=STUCK_BAND.1).contains(&tr.u2) {
            return Err(Error::BadData(format!(
                "segment at {}% duty shows no pressure change; valve or sensor stuck",
                tr.u2
            )));
        }
        let mode = tr.mode();
        let mut objective = |x: f64| rms_error(tr, x, mode, params);
        let n = 21usize;
        let mut best = (0usize, f64::INFINITY);
        for i in 0..n {
            let r = objective(i as f64 / (n - 1) as f64)?;
            if r < best.1 {
                best = (i, r);
            }
        }
        let a = best.0.saturating_sub(1) as f64 / (n - 1) as f64;
        let b = (best.0 + 1).min(n - 1) as f64 / (n - 1) as f64;
        let (mut x, mut residual, _) = golden_section(a, b, 1e-6, &mut objective)?;
        let grid_x = best.0 as f64 / (n - 1) as f64;
        if best.1 < residual {
            x = grid_x;
            residual = best.1;
        }
        if x < BOUND_SNAP {
            x = 0.0;
        } else if x > 1.0 - BOUND_SNAP {
            x = 1.0;
        }
        out.push(CalibrationPair {
            u: tr.u2,
            x,
            residual,
        });
    }
    Ok(out)
}

fn cubic_lstsq(pairs: &[(f64, f64)]) -> Result<[f64; 4]> {
    let mut distinct: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::BadData(format!(
            "cubic fit needs at least 4 distinct duties, got {}",
            distinct.len()
        )));
    }
    // duty scaled to [0, 1] keeps the Vandermonde design well conditioned
    let s = 0.01;
    let design = DMatrix::from_fn(pairs.len(), 4, |i, k| (pairs[i].0 * s).powi(k as i32));
    let rhs = DVector::from_iterator(pairs.len(), pairs.iter().map(|p| p.1));
    let svd = design.svd(true, true);
    let sv = &svd.singular_values;
    if sv.min() <= 1e-10 * sv.max() {
        return Err(Error::BadData(
            "cubic design matrix is rank deficient".into(),
        ));
    }
    let b = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Calibration(e.to_string()))?;
    Ok([b[0], b[1] * s, b[2] * s * s, b[3] * s * s * s])
}

fn cubic(a: &[f64; 4], u: f64) -> f64 {
    a[0] + u * (a[1] + u * (a[2] + u * a[3]))
}

/// Least-squares cubic in duty through calibration pairs, validated as a
/// spool map over `[u_min, u_max]`.
pub fn fit_cubic(pairs: &[(f64, f64)], mode: Mode, u_min: f64, u_max: f64) -> Result<SpoolMap> {
    SpoolMap::new(cubic_lstsq(pairs)?, u_min, u_max, mode)
}

/// Least-squares fit of the clipped cubic `clamp(c(u), 0, 1)`.
///
/// A pair pinned at 0 or 1 only says the cubic lies beyond that bound, so
/// it contributes a residual only while the cubic sits on the wrong side.
/// The objective is convex in the coefficients and is solved by iterating
/// on the set of contributing bound pairs.
pub fn fit_clipped_cubic(
    pairs: &[(f64, f64)],
    mode: Mode,
    u_min: f64,
    u_max: f64,
) -> Result<SpoolMap> {
    let interior = |p: &(f64, f64)| p.1 > 0.0 && p.1 < 1.0;
    let violated = |a: &[f64; 4], &(u, x): &(f64, f64)| {
        let c = cubic(a, u);
        (x <= 0.0 && c > 0.0) || (x >= 1.0 && c < 1.0)
    };
    let solve = |active: &[bool]| {
        let used: Vec<(f64, f64)> = pairs
            .iter()
            .zip(active)
            .filter(|(_, &on)| on)
            .map(|(p, _)| *p)
            .collect();
        cubic_lstsq(&used)
    };
    let mut active: Vec<bool> = pairs.iter().map(interior).collect();
    let mut a = solve(&active).or_else(|_| solve(&vec![true; pairs.len()]))?;
    for _ in 0..50 {
        let next: Vec<bool> = pairs
            .iter()
            .map(|p| interior(p) || violated(&a, p))
            .collect();
        if next == active {
            break;
        }
        active = next;
        a = solve(&active)?;
    }
    SpoolMap::new(a, u_min, u_max, mode)
}

/// Outcome of identifying one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeIdentification {
    pub mode: Mode,
    pub leak: IdResult,
    pub source: IdResult,
    pub pairs: Vec<CalibrationPair>,
    pub map: SpoolMap,
}

impl ModeIdentification {
    /// Copies the identified conductances into `params`.
    pub fn apply(&self, params: &mut PlantParams) {
        let (leak, source) = conductances_for(self.mode);
        leak.set(params, self.leak.value);
        source.set(params, self.source.value);
    }
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Inflation => "inflation",
        Mode::Deflation => "deflation",
    }
}

fn conductances_for(mode: Mode) -> (Conductance, Conductance) {
    match mode {
        Mode::Inflation => (Conductance::COa, Conductance::CPo),
        Mode::Deflation => (Conductance::CAo, Conductance::COn),
    }
}

/// Runs the three identification stages for `mode`. Segments are told
/// apart by delivery duty: 0 % is the leakage relaxation, 100 % the
/// full-open step, anything else a sweep segment.
pub fn identify(
    traces: &[StepTrace],
    mode: Mode,
    base: &PlantParams,
    u_range: (f64, f64),
) -> Result<ModeIdentification> {
    let own: Vec<&StepTrace> = traces.iter().filter(|t| t.mode() == mode).collect();
    let leak_tr = own
        .iter()
        .find(|t| t.u2 == 0.0 && t.kind == SegmentKind::Decay);
    let full_tr = own
        .iter()
        .find(|t| t.u2 == 100.0 && t.kind == SegmentKind::Rise);
    let sweep: Vec<StepTrace> = own
        .iter()
        .filter(|t| t.kind == SegmentKind::Rise && t.u2 > 0.0 && t.u2 < 100.0)
        .map(|t| (*t).clone())
        .collect();
    let mut missing = Vec::new();
    if leak_tr.is_none() {
        missing.push("x̄ = 0 leakage relaxation (u2 = 0, decay)");
    }
    if full_tr.is_none() {
        missing.push("x̄ = 1 full-open step (u2 = 100, rise)");
    }
    if sweep.len() < 4 {
        missing.push("duty sweep (at least 4 rise segments with 0 < u2 < 100)");
    }
    let (Some(leak_tr), Some(full_tr), false) = (leak_tr, full_tr, sweep.len() < 4) else {
        return Err(Error::BadData(format!(
            "{} protocol incomplete; missing: {}",
            mode_name(mode),
            missing.join("; ")
        )));
    };

    let (leak_c, source_c) = conductances_for(mode);
    let mut params = *base;
    let leak = fit_decay_conductance(leak_tr, leak_c, &params)?;
    leak_c.set(&mut params, leak.value);
    let source = fit_source_conductance(full_tr, source_c, &params)?;
    source_c.set(&mut params, source.value);

    let pairs = fit_spool_segments(&sweep, &params)?;
    let uv: Vec<(f64, f64)> = pairs.iter().map(|p| (p.u, p.x)).collect();
    let map = fit_clipped_cubic(&uv, mode, u_range.0, u_range.1)?;
    Ok(ModeIdentification {
        mode,
        leak,
        source,
        pairs,
        map,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    /// Sample rate, Hz.
    pub sample_rate: f64,
    /// Measurement noise standard deviation, Pa.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Full-open step length, s.
    pub full_open_hold: f64,
    /// Leakage relaxation length per mode, s.
    pub inflation_leak_hold: f64,
    pub deflation_leak_hold: f64,
    /// Sweep segment length, s.
    pub sweep_hold: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            sample_rate: 60.0,
            noise_sigma: 0.0,
            seed: 0,
            full_open_hold: 1.5,
            inflation_leak_hold: 10.0,
            deflation_leak_hold: 25.0,
            sweep_hold: 3.0,
        }
    }
}

/// Duty levels of the calibration sweep: 20 to 30 % in 0.2 % steps, then
/// 35 to 95 % in 5 % steps.
pub fn sweep_duties() -> Vec<f64> {
    let mut d: Vec<f64> = (0..=50).map(|i| (200 + 2 * i) as f64 / 10.0).collect();
    d.extend((7..=19).map(|i| 5.0 * i as f64));
    d
}

struct Sampler {
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

impl Sampler {
    fn measure(&mut self, p: f64) -> f64 {
        match &self.noise {
            Some(n) => p + n.sample(&mut self.rng),
            None => p,
        }
    }
}

/// Holds `x` from `p_start` for `hold` seconds, sampling at the configured
/// rate. Returns the trace and the final true pressure.
#[allow(clippy::too_many_arguments)]
fn record_segment(
    p_start: f64,
    x: f64,
    mode: Mode,
    u2: f64,
    kind: SegmentKind,
    hold: f64,
    cfg: &SynthesisConfig,
    params: &PlantParams,
    sampler: &mut Sampler,
) -> Result<(StepTrace, f64)> {
    let load = LoadModel::Fixed;
    let n_samples = (hold * cfg.sample_rate).round() as usize + 1;
    let dt = 1.0 / cfg.sample_rate;
    let n_sub = (dt / MAX_SUBSTEP).ceil() as usize;
    let mut state = PlantState {
        p_out: p_start,
        t: 0.0,
    };
    let mut t = Vec::with_capacity(n_samples);
    let mut p = Vec::with_capacity(n_samples);
    for k in 0..n_samples {
        if k > 0 {
            state = plant::advance(state, x, mode, dt, n_sub, params, &load)?;
        }
        t.push(k as f64 * dt);
        p.push(sampler.measure(state.p_out));
    }
    let u1 = if mode == Mode::Inflation { 100.0 } else { 0.0 };
    let final_p = state.p_out;
    Ok((StepTrace::new(t, p, u1, u2, kind)?, final_p))
}

/// Generates the full calibration protocol for one mode from a known plant
/// and spool map: a full-open step from atmosphere, the leakage relaxation
/// that follows it, and one step from atmosphere per sweep duty.
pub fn synthesize_protocol(
    mode: Mode,
    params: &PlantParams,
    map: &SpoolMap,
    cfg: &SynthesisConfig,
) -> Result<Vec<(String, StepTrace)>> {
    if !(cfg.sample_rate.is_finite() && cfg.sample_rate > 0.0) {
        return Err(Error::config("sample_rate", "must be > 0"));
    }
    let noise = if cfg.noise_sigma > 0.0 {
        Some(
            Normal::new(0.0, cfg.noise_sigma)
                .map_err(|e| Error::config("noise_sigma", e.to_string()))?,
        )
    } else {
        None
    };
    let mut sampler = Sampler {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ (mode.bit() as u64) << 32),
        noise,
    };
    let tag = mode_name(mode);
    let leak_hold = match mode {
        Mode::Inflation => cfg.inflation_leak_hold,
        Mode::Deflation => cfg.deflation_leak_hold,
    };
    let mut out = Vec::new();
    let (full, p_end) = record_segment(
        params.p_atm,
        1.0,
        mode,
        100.0,
        SegmentKind::Rise,
        cfg.full_open_hold,
        cfg,
        params,
        &mut sampler,
    )?;
    out.push((format!("{tag}_full_open.csv"), full));
    let (leak, _) = record_segment(
        p_end,
        0.0,
        mode,
        0.0,
        SegmentKind::Decay,
        leak_hold,
        cfg,
        params,
        &mut sampler,
    )?;
    out.push((format!("{tag}_leak_decay.csv"), leak));
    for u in sweep_duties() {
        let (seg, _) = record_segment(
            params.p_atm,
            map.eval(u),
            mode,
            u,
            SegmentKind::Rise,
            cfg.sweep_hold,
            cfg,
            params,
            &mut sampler,
        )?;
        out.push((format!("{tag}_sweep_u{u:06.2}.csv"), seg));
    }
    Ok(out)
}

/// Writes synthesized traces into `dir`, one CSV per segment.
pub fn write_protocol(dir: &Path, traces: &[(String, StepTrace)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, tr) in traces {
        let f = fs::File::create(dir.join(name))?;
        write_trace(tr, std::io::BufWriter::new(f))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::valvemap::SpoolMaps;

    fn protocol(mode: Mode, sigma: f64, seed: u64) -> Vec<StepTrace> {
        let p = PlantParams::default();
        let maps = SpoolMaps::default();
        let cfg = SynthesisConfig {
            noise_sigma: sigma,
            seed,
            ..SynthesisConfig::default()
        };
        synthesize_protocol(mode, &p, maps.get(mode), &cfg)
            .unwrap()
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }

    fn find(traces: &[StepTrace], u2: f64, kind: SegmentKind) -> StepTrace {
        traces
            .iter()
            .find(|t| t.u2 == u2 && t.kind == kind)
            .unwrap()
            .clone()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b
    }

    #[test]
    fn sweep_levels_match_protocol() {
        let d = sweep_duties();
        assert_eq!(d.len(), 51 + 13);
        assert_eq!(d[0], 20.0);
        assert_eq!(d[1], 20.2);
        assert_eq!(d[50], 30.0);
        assert_eq!(d[51], 35.0);
        assert_eq!(*d.last().unwrap(), 95.0);
    }

    #[test]
    fn leak_conductances_recovered_noiseless() {
        let truth = PlantParams::default();
        let inf = protocol(Mode::Inflation, 0.0, 0);
        let r = fit_decay_conductance(
            &find(&inf, 0.0, SegmentKind::Decay),
            Conductance::COa,
            &truth,
        )
        .unwrap();
        assert!(rel(r.value, 6.94e-12) < 0.01, "{r:?}");
        let def = protocol(Mode::Deflation, 0.0, 0);
        let r = fit_decay_conductance(
            &find(&def, 0.0, SegmentKind::Decay),
            Conductance::CAo,
            &truth,
        )
        .unwrap();
        assert!(rel(r.value, 4.52e-12) < 0.01, "{r:?}");
    }

    #[test]
    fn source_conductances_recovered_noiseless() {
        let truth = PlantParams::default();
        let inf = protocol(Mode::Inflation, 0.0, 0);
        let r = fit_source_conductance(
            &find(&inf, 100.0, SegmentKind::Rise),
            Conductance::CPo,
            &truth,
        )
        .unwrap();
        assert!(rel(r.value, 2.64e-10) < 0.01, "{r:?}");
        let def = protocol(Mode::Deflation, 0.0, 0);
        let r = fit_source_conductance(
            &find(&def, 100.0, SegmentKind::Rise),
            Conductance::COn,
            &truth,
        )
        .unwrap();
        assert!(rel(r.value, 3.44e-10) < 0.01, "{r:?}");
    }

    #[test]
    fn residual_is_a_local_minimum() {
        let truth = PlantParams::default();
        let inf = protocol(Mode::Inflation, 500.0, 3);
        let tr = find(&inf, 0.0, SegmentKind::Decay);
        let r = fit_decay_conductance(&tr, Conductance::COa, &truth).unwrap();
        for f in [0.5, 2.0] {
            let other = conductance_residual(&tr, Conductance::COa, f * r.value, &truth).unwrap();
            assert!(r.residual <= other);
        }
    }

    #[test]
    fn flat_trace_carries_no_information() {
        let p = PlantParams::default();
        let t: Vec<f64> = (0..100).map(|i| i as f64 / 60.0).collect();
        let tr = StepTrace::new(
            t.clone(),
            vec![p.p_atm; 100],
            100.0,
            0.0,
            SegmentKind::Decay,
        )
        .unwrap();
        assert!(matches!(
            fit_decay_conductance(&tr, Conductance::COa, &p),
            Err(Error::BadData(_))
        ));
        let tr = StepTrace::new(t, vec![p.p_atm; 100], 100.0, 100.0, SegmentKind::Rise).unwrap();
        assert!(fit_source_conductance(&tr, Conductance::CPo, &p).is_err());
    }

    #[test]
    fn spool_fraction_segments() {
        let p = PlantParams::default();
        let mut sampler = Sampler {
            rng: ChaCha8Rng::seed_from_u64(0),
            noise: None,
        };
        let cfg = SynthesisConfig::default();
        let mut segs = Vec::new();
        for x in [0.8, 0.0, 1.0] {
            let (tr, _) = record_segment(
                p.p_atm,
                x,
                Mode::Inflation,
                50.0,
                SegmentKind::Rise,
                3.0,
                &cfg,
                &p,
                &mut sampler,
            )
            .unwrap();
            segs.push(tr);
        }
        // the x = 0 segment never leaves atmosphere; give it a low duty so it is not treated as stuck
        segs[1].u2 = 21.0;
        let pairs = fit_spool_segments(&segs, &p).unwrap();
        assert!((pairs[0].x - 0.8).abs() <= 0.01, "{pairs:?}");
        assert_eq!(pairs[1].x, 0.0);
        assert_eq!(pairs[2].x, 1.0);
    }

    #[test]
    fn stuck_mid_duty_segment_rejected() {
        let p = PlantParams::default();
        let t: Vec<f64> = (0..100).map(|i| i as f64 / 60.0).collect();
        let tr = StepTrace::new(t, vec![p.p_atm; 100], 100.0, 60.0, SegmentKind::Rise).unwrap();
        assert!(matches!(
            fit_spool_segments(&[tr], &p),
            Err(Error::BadData(_))
        ));
    }

    #[test]
    fn cubic_exact_on_tabulated_maps() {
        for map in [SpoolMap::inflation_default(), SpoolMap::deflation_default()] {
            let pairs: Vec<(f64, f64)> = (0..9)
                .map(|i| 20.0 + 10.0 * i as f64)
                .map(|u| (u, map.raw(u)))
                .collect();
            let fit = fit_cubic(&pairs, map.mode(), 20.0, 100.0).unwrap();
            for (a, b) in fit.coefficients().iter().zip(map.coefficients()) {
                assert!((a - b).abs() <= 1e-8 * b.abs(), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn clipped_cubic_exact_through_dead_zone() {
        // the sweep reads 0 wherever the tabulated cubic is negative
        for map in [SpoolMap::inflation_default(), SpoolMap::deflation_default()] {
            let pairs: Vec<(f64, f64)> = sweep_duties()
                .into_iter()
                .map(|u| (u, map.eval(u)))
                .collect();
            assert!(pairs.iter().any(|p| p.1 == 0.0));
            let fit = fit_clipped_cubic(&pairs, map.mode(), 20.0, 100.0).unwrap();
            for (a, b) in fit.coefficients().iter().zip(map.coefficients()) {
                assert!((a - b).abs() <= 1e-8 * b.abs(), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn clipped_cubic_pulls_in_violated_bound_pairs() {
        // interior points on a line that extrapolates above zero at u = 20
        let mut pairs: Vec<(f64, f64)> = (0..8)
            .map(|i| 40.0 + 8.0 * i as f64)
            .map(|u| (u, 0.01 * u - 0.15))
            .collect();
        let free = fit_cubic(&pairs, Mode::Inflation, 20.0, 100.0).unwrap();
        assert!(free.raw(20.0) > 0.04);
        pairs.push((20.0, 0.0));
        pairs.push((25.0, 0.0));
        let fit = fit_clipped_cubic(&pairs, Mode::Inflation, 20.0, 100.0).unwrap();
        assert!(fit.raw(20.0) < 0.5 * free.raw(20.0), "{}", fit.raw(20.0));
    }

    #[test]
    fn cubic_rejects_duplicate_duties() {
        let pairs = [
            (30.0, 0.2),
            (30.0, 0.21),
            (50.0, 0.5),
            (50.0, 0.5),
            (70.0, 0.8),
        ];
        assert!(matches!(
            fit_cubic(&pairs, Mode::Inflation, 20.0, 100.0),
            Err(Error::BadData(_))
        ));
    }

    #[test]
    fn cubic_rejects_decreasing_data() {
        let pairs: Vec<(f64, f64)> = (0..8)
            .map(|i| (20.0 + 10.0 * i as f64, 0.9 - 0.1 * i as f64))
            .collect();
        assert!(matches!(
            fit_cubic(&pairs, Mode::Inflation, 20.0, 100.0),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn cubic_noise_residual_small() {
        let map = SpoolMap::inflation_default();
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pairs: Vec<(f64, f64)> = sweep_duties()
                .into_iter()
                .filter(|&u| map.raw(u) > 0.05)
                .map(|u| (u, map.raw(u) + noise.sample(&mut rng)))
                .collect();
            let fit = fit_cubic(&pairs, Mode::Inflation, 20.0, 100.0).unwrap();
            let rms = (pairs
                .iter()
                .map(|&(u, x)| (fit.raw(u) - x).powi(2))
                .sum::<f64>()
                / pairs.len() as f64)
                .sqrt();
            assert!(rms <= 0.02, "{rms}");
        }
    }

    #[test]
    fn csv_round_trip_splits_segments() {
        let traces = protocol(Mode::Inflation, 0.0, 0);
        let mut buf = Vec::new();
        for tr in &traces[..3] {
            let mut one = Vec::new();
            write_trace(tr, &mut one).unwrap();
            if buf.is_empty() {
                buf = one;
            } else {
                let s = String::from_utf8(one).unwrap();
                buf.extend(
                    s.lines()
                        .skip(1)
                        .flat_map(|l| format!("{l}\n").into_bytes()),
                );
            }
        }
        let back = read_traces(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].p, traces[0].p);
        assert_eq!(back[2].u2, traces[2].u2);
    }

    #[test]
    fn missing_segments_listed() {
        let inf = protocol(Mode::Inflation, 0.0, 0);
        let err = identify(
            &inf,
            Mode::Deflation,
            &PlantParams::default(),
            (20.0, 100.0),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("leakage") && msg.contains("full-open") && msg.contains("sweep"),
            "{msg}"
        );
        let no_leak: Vec<StepTrace> = inf.iter().filter(|t| t.u2 != 0.0).cloned().collect();
        let msg = identify(
            &no_leak,
            Mode::Inflation,
            &PlantParams::default(),
            (20.0, 100.0),
        )
        .unwrap_err()
        .to_string();
        assert!(
            msg.contains("leakage") && !msg.contains("full-open"),
            "{msg}"
        );
    }

    #[test]
    fn short_segment_rejected() {
        let r = StepTrace::new(
            vec![0.0, 1.0],
            vec![1e5, 1e5],
            100.0,
            50.0,
            SegmentKind::Rise,
        );
        assert!(matches!(r, Err(Error::BadData(_))));
        let r = StepTrace::new(
            (0..20).map(|_| 0.0).collect(),
            vec![1e5; 20],
            100.0,
            50.0,
            SegmentKind::Rise,
        );
        assert!(r.is_err());
    }
}
