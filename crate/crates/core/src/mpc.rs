//! Predictive baselines: NMPC over the duty sequence under a supervisor-held
//! mode, and MI-NMPC over joint mode and duty sequences.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::control::{select_mode, SupervisorConfig};
use crate::error::{Error, Result};
use crate::experiment::scenario::{Command, Controller, Observation};
use crate::plant::{self, LoadModel, Mode, PlantParams, PlantState};
use crate::valvemap::SpoolMaps;

const INV_PHI: f64 = 0.618_033_988_749_894_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon_steps: usize,
    /// Prediction step, s.
    pub dt_pred: f64,
    /// Tracking weight, 1/Pa².
    pub w_e: f64,
    /// Effort weight on the spool fraction squared.
    pub w_u: f64,
    /// Penalty per mode change.
    pub w_sw: f64,
    /// Coordinate-descent sweeps.
    pub max_iters: usize,
    /// Mode changes allowed inside one MI-NMPC horizon.
    pub max_switches: usize,
    /// RK4 substeps per prediction step.
    pub substeps: usize,
    /// Coarse grid points per line search, ends included.
    pub line_grid: usize,
    /// Golden-section bracket width on duty, %.
    pub duty_tol: f64,
    /// A sweep whose cost decrease is below `rel_tol · cost + abs_tol`
    /// counts as converged.
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 10,
            dt_pred: 0.01,
            w_e: 1e-6,
            w_u: 0.5,
            w_sw: 30.0,
            max_iters: 4,
            max_switches: 1,
            substeps: 2,
            line_grid: 9,
            duty_tol: 0.05,
            rel_tol: 1e-4,
            abs_tol: 1e-3,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_steps == 0 {
            return Err(Error::config("mpc.horizon_steps", "must be >= 1"));
        }
        if !(self.dt_pred.is_finite() && self.dt_pred > 0.0) {
            return Err(Error::config("mpc.dt_pred", "must be > 0"));
        }
        for (key, w) in [
            ("mpc.w_e", self.w_e),
            ("mpc.w_u", self.w_u),
            ("mpc.w_sw", self.w_sw),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(key, "must be finite and >= 0"));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::config("mpc.max_iters", "must be >= 1"));
        }
        if self.substeps == 0 {
            return Err(Error::config("mpc.substeps", "must be >= 1"));
        }
        if self.line_grid < 2 {
            return Err(Error::config("mpc.line_grid", "must be >= 2"));
        }
        if !(self.duty_tol.is_finite() && self.duty_tol > 0.0) {
            return Err(Error::config("mpc.duty_tol", "must be > 0"));
        }
        if !(self.rel_tol.is_finite() && self.rel_tol >= 0.0) {
            return Err(Error::config("mpc.rel_tol", "must be >= 0"));
        }
        if !(self.abs_tol.is_finite() && self.abs_tol >= 0.0) {
            return Err(Error::config("mpc.abs_tol", "must be >= 0"));
        }
        Ok(())
    }
}

/// Plant, maps and load used for prediction.
#[derive(Debug, Clone, Copy)]
pub struct PredictionModel<'a> {
    pub plant: &'a PlantParams,
    pub maps: &'a SpoolMaps,
    pub load: &'a LoadModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    pub u_seq: Vec<f64>,
    pub m_seq: Vec<Mode>,
    pub cost: f64,
    /// Coordinate-descent sweeps, summed over candidates for MI-NMPC.
    pub iterations: usize,
    /// Wall-clock solve time, s.
    pub solve_time: f64,
    /// The sweep cap was reached before convergence.
    pub capped: bool,
    /// Cost after the warm start and after every sweep.
    pub cost_history: Vec<f64>,
}

fn count_switches(m_seq: &[Mode]) -> usize {
    m_seq.windows(2).filter(|w| w[0] != w[1]).count()
}

fn check_lengths(n: usize, u_len: usize, m_len: usize, r_len: usize) -> Result<()> {
    if u_len != n || m_len != n || r_len != n {
        return Err(Error::config(
            "mpc.horizon_steps",
            format!(
                "sequence lengths (u {u_len}, m {m_len}, ref {r_len}) must equal the horizon {n}"
            ),
        ));
    }
    Ok(())
}

/// Per-step stage costs of a rollout. Entry k holds the cost charged for
/// step k: squared error at the end of the step plus spool effort.
fn stage_costs(
    p_start: f64,
    u_seq: &[f64],
    m_seq: &[Mode],
    refs: &[f64],
    cfg: &MpcConfig,
    model: &PredictionModel<'_>,
    out_states: Option<&mut Vec<f64>>,
) -> Result<f64> {
    let mut state = PlantState {
        p_out: p_start,
        t: 0.0,
    };
    let mut total = 0.0;
    let mut states = out_states;
    for k in 0..u_seq.len() {
        if let Some(s) = states.as_deref_mut() {
            s.push(state.p_out);
        }
        let x = model.maps.get(m_seq[k]).eval(u_seq[k]);
        state = plant::advance(
            state,
            x,
            m_seq[k],
            cfg.dt_pred,
            cfg.substeps,
            model.plant,
            model.load,
        )?;
        let e = state.p_out - refs[k];
        total += cfg.w_e * e * e + cfg.w_u * x * x;
    }
    if !total.is_finite() {
        return Err(Error::Solver(
            "prediction rollout produced a non-finite cost".into(),
        ));
    }
    Ok(total)
}

/// Horizon cost of a duty and mode sequence starting from `p0`:
/// `Σ w_e e_k² + w_u x̄_k² + w_sw · (mode changes inside the sequence)`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_cost(
    p0: f64,
    u_seq: &[f64],
    m_seq: &[Mode],
    ref_seq: &[f64],
    cfg: &MpcConfig,
    plant: &PlantParams,
    maps: &SpoolMaps,
    load: &LoadModel,
) -> Result<f64> {
    check_lengths(cfg.horizon_steps, u_seq.len(), m_seq.len(), ref_seq.len())?;
    let model = PredictionModel { plant, maps, load };
    let stage = stage_costs(p0, u_seq, m_seq, ref_seq, cfg, &model, None)?;
    Ok(stage + cfg.w_sw * count_switches(m_seq) as f64)
}

fn golden_section(
    lo: f64,
    hi: f64,
    tol: f64,
    mut f: impl FnMut(f64) -> Result<f64>,
) -> Result<(f64, f64)> {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while b - a > tol {
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
    Ok(if fc <= fd { (c, fc) } else { (d, fd) })
}

/// Global-ish 1-D minimization over a duty range: a coarse grid picks the
/// bracket, golden section refines it. The grid includes both ends, so the
/// closed-valve floor and full duty are always tried.
fn line_search(
    lo: f64,
    hi: f64,
    cfg: &MpcConfig,
    f: &mut impl FnMut(f64) -> Result<f64>,
) -> Result<(f64, f64)> {
    let n = cfg.line_grid.max(2);
    let grid: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect();
    let mut best = (lo, f64::INFINITY);
    let mut best_i = 0;
    for (i, &v) in grid.iter().enumerate() {
        let c = f(v)?;
        if c < best.1 {
            best = (v, c);
            best_i = i;
        }
    }
    let a = grid[best_i.saturating_sub(1)];
    let b = grid[(best_i + 1).min(n - 1)];
    let refined = golden_section(a, b, cfg.duty_tol, &mut *f)?;
    Ok(if refined.1 < best.1 { refined } else { best })
}

/// Projected coordinate descent on the duty sequence for a fixed mode
/// sequence. Every accepted move lowers the cost, so the returned history
/// is non-increasing.
fn solve_fixed_modes(
    p0: f64,
    m_seq: &[Mode],
    refs: &[f64],
    warm: Option<&[f64]>,
    m_prev: Option<Mode>,
    cfg: &MpcConfig,
    model: &PredictionModel<'_>,
) -> Result<MpcSolution> {
    let n = m_seq.len();
    let mut u: Vec<f64> = (0..n)
        .map(|k| {
            let map = model.maps.get(m_seq[k]);
            warm.and_then(|w| w.get(k).copied())
                .unwrap_or(map.u_min())
                .clamp(map.u_min(), map.u_max())
        })
        .collect();
    // a constant-level start escapes the alternating patterns that single
    // coordinate moves cannot leave
    let level = |v: f64| -> Vec<f64> {
        (0..n)
            .map(|k| {
                let map = model.maps.get(m_seq[k]);
                v.clamp(map.u_min(), map.u_max())
            })
            .collect()
    };
    let lo = m_seq
        .iter()
        .map(|&m| model.maps.get(m).u_min())
        .fold(f64::INFINITY, f64::min);
    let hi = m_seq
        .iter()
        .map(|&m| model.maps.get(m).u_max())
        .fold(f64::NEG_INFINITY, f64::max);
    let (v, c_level) = line_search(lo, hi, cfg, &mut |v| {
        stage_costs(p0, &level(v), m_seq, refs, cfg, model, None)
    })?;
    if c_level < stage_costs(p0, &u, m_seq, refs, cfg, model, None)? {
        u = level(v);
    }
    let mut switch_cost = cfg.w_sw * count_switches(m_seq) as f64;
    if let Some(prev) = m_prev {
        if prev != m_seq[0] {
            switch_cost += cfg.w_sw;
        }
    }
    let mut states = Vec::with_capacity(n);
    let mut cost = stage_costs(p0, &u, m_seq, refs, cfg, model, Some(&mut states))?;
    let mut history = vec![cost + switch_cost];
    let mut sweeps = 0;
    let mut capped = true;
    while sweeps < cfg.max_iters {
        sweeps += 1;
        let start_cost = cost;
        for k in 0..n {
            let map = model.maps.get(m_seq[k]);
            // cost of steps before k does not depend on u_k
            let prefix = stage_costs(p0, &u[..k], &m_seq[..k], &refs[..k], cfg, model, None)?;
            let p_k = states[k];
            let mut trial = u.clone();
            let mut tail = |v: f64| -> Result<f64> {
                trial[k] = v;
                stage_costs(p_k, &trial[k..], &m_seq[k..], &refs[k..], cfg, model, None)
            };
            let (v_best, c_best) = line_search(map.u_min(), map.u_max(), cfg, &mut tail)?;
            if prefix + c_best < cost {
                u[k] = v_best;
                states.clear();
                cost = stage_costs(p0, &u, m_seq, refs, cfg, model, Some(&mut states))?;
            }
        }
        history.push(cost + switch_cost);
        if start_cost - cost <= cfg.rel_tol * start_cost + cfg.abs_tol {
            capped = false;
            break;
        }
    }
    Ok(MpcSolution {
        u_seq: u,
        m_seq: m_seq.to_vec(),
        cost: cost + switch_cost,
        iterations: sweeps,
        solve_time: 0.0,
        capped,
        cost_history: history,
    })
}

/// NMPC: optimizes the duty sequence with the mode held at `m`.
/// `warm` seeds the descent, typically with the previous solution shifted
/// by one step.
#[allow(clippy::too_many_arguments)]
pub fn nmpc_solve(
    p0: f64,
    ref_seq: &[f64],
    m: Mode,
    warm: Option<&[f64]>,
    cfg: &MpcConfig,
    plant: &PlantParams,
    maps: &SpoolMaps,
    load: &LoadModel,
) -> Result<MpcSolution> {
    cfg.validate()?;
    let n = cfg.horizon_steps;
    check_lengths(n, n, n, ref_seq.len())?;
    let started = Instant::now();
    let model = PredictionModel { plant, maps, load };
    let m_seq = vec![m; n];
    let mut sol = solve_fixed_modes(p0, &m_seq, ref_seq, warm, None, cfg, &model)?;
    sol.solve_time = started.elapsed().as_secs_f64();
    Ok(sol)
}

/// All mode sequences of length `n` with at most `max_switches` changes,
/// ordered by number of changes.
pub fn mode_sequences(n: usize, max_switches: usize) -> Vec<Vec<Mode>> {
    fn place(
        n: usize,
        from: usize,
        left: usize,
        start: Mode,
        points: &mut Vec<usize>,
        out: &mut Vec<(usize, Vec<Mode>)>,
    ) {
        if left == 0 {
            let mut seq = Vec::with_capacity(n);
            let mut m = start;
            let mut next = points.iter().peekable();
            for k in 0..n {
                if next.peek() == Some(&&k) {
                    m = m.flipped();
                    next.next();
                }
                seq.push(m);
            }
            out.push((points.len(), seq));
            return;
        }
        for p in from..n {
            points.push(p);
            place(n, p + 1, left - 1, start, points, out);
            points.pop();
        }
    }
    let mut out = Vec::new();
    for s in 0..=max_switches.min(n.saturating_sub(1)) {
        for start in [Mode::Deflation, Mode::Inflation] {
            place(n, 1, s, start, &mut Vec::new(), &mut out);
        }
    }
    out.sort_by_key(|(s, _)| *s);
    out.into_iter().map(|(_, seq)| seq).collect()
}

/// MI-NMPC: enumerates restricted mode sequences and solves the duty
/// subproblem for each. Ties go to fewer switches, then lower first duty.
#[allow(clippy::too_many_arguments)]
pub fn minmpc_solve(
    p0: f64,
    ref_seq: &[f64],
    m_prev: Option<Mode>,
    warm: Option<&[f64]>,
    cfg: &MpcConfig,
    plant: &PlantParams,
    maps: &SpoolMaps,
    load: &LoadModel,
) -> Result<MpcSolution> {
    cfg.validate()?;
    let n = cfg.horizon_steps;
    check_lengths(n, n, n, ref_seq.len())?;
    let started = Instant::now();
    let model = PredictionModel { plant, maps, load };
    let mut best: Option<MpcSolution> = None;
    let mut iterations = 0;
    let mut capped = false;
    for m_seq in mode_sequences(n, cfg.max_switches) {
        let sol = solve_fixed_modes(p0, &m_seq, ref_seq, warm, m_prev, cfg, &model)?;
        iterations += sol.iterations;
        capped |= sol.capped;
        let better = match &best {
            None => true,
            Some(b) => {
                let tie = (sol.cost - b.cost).abs() <= 1e-12 * b.cost.abs().max(1.0);
                if tie {
                    let (sa, sb) = (count_switches(&sol.m_seq), count_switches(&b.m_seq));
                    sa < sb || (sa == sb && sol.u_seq[0] < b.u_seq[0])
                } else {
                    sol.cost < b.cost
                }
            }
        };
        if better {
            best = Some(sol);
        }
    }
    let mut best = best.ok_or_else(|| Error::Solver("no mode sequence candidates".into()))?;
    best.iterations = iterations;
    best.capped = capped;
    best.solve_time = started.elapsed().as_secs_f64();
    Ok(best)
}

fn horizon_refs(obs: &Observation<'_>, cfg: &MpcConfig) -> Vec<f64> {
    (1..=cfg.horizon_steps)
        .map(|k| obs.reference_ahead(obs.t + k as f64 * cfg.dt_pred))
        .collect()
}

fn shifted(prev: &[f64]) -> Vec<f64> {
    let mut w: Vec<f64> = prev.iter().skip(1).copied().collect();
    if let Some(&last) = prev.last() {
        w.push(last);
    }
    w
}

/// Receding-horizon NMPC with the mode set by the hysteresis supervisor.
pub struct NmpcController {
    pub cfg: MpcConfig,
    pub supervisor: SupervisorConfig,
    mode: Mode,
    warm: Option<Vec<f64>>,
}

impl NmpcController {
    pub fn new(cfg: MpcConfig, supervisor: SupervisorConfig, initial_mode: Mode) -> Self {
        Self {
            cfg,
            supervisor,
            mode: initial_mode,
            warm: None,
        }
    }
}

impl Controller for NmpcController {
    fn name(&self) -> &str {
        "nmpc"
    }

    fn update(&mut self, obs: &Observation<'_>) -> Result<Command> {
        let mode = select_mode(obs.p_meas, obs.p_ref, &self.supervisor, self.mode);
        if mode != self.mode {
            self.warm = None;
        }
        self.mode = mode;
        let refs = horizon_refs(obs, &self.cfg);
        let sol = nmpc_solve(
            obs.p_meas,
            &refs,
            mode,
            self.warm.as_deref(),
            &self.cfg,
            obs.plant,
            obs.maps,
            obs.load,
        )?;
        self.warm = Some(shifted(&sol.u_seq));
        Ok(Command {
            u: sol.u_seq[0],
            mode,
            s: None,
            x_star: None,
            flagged: sol.capped,
        })
    }
}

/// Receding-horizon MI-NMPC applying the optimized first-step mode.
pub struct MiNmpcController {
    pub cfg: MpcConfig,
    mode: Mode,
    warm: Option<Vec<f64>>,
}

impl MiNmpcController {
    pub fn new(cfg: MpcConfig, initial_mode: Mode) -> Self {
        Self {
            cfg,
            mode: initial_mode,
            warm: None,
        }
    }
}

impl Controller for MiNmpcController {
    fn name(&self) -> &str {
        "mi-nmpc"
    }

    fn update(&mut self, obs: &Observation<'_>) -> Result<Command> {
        let refs = horizon_refs(obs, &self.cfg);
        let sol = minmpc_solve(
            obs.p_meas,
            &refs,
            Some(self.mode),
            self.warm.as_deref(),
            &self.cfg,
            obs.plant,
            obs.maps,
            obs.load,
        )?;
        self.mode = sol.m_seq[0];
        self.warm = Some(shifted(&sol.u_seq));
        Ok(Command {
            u: sol.u_seq[0],
            mode: sol.m_seq[0],
            s: None,
            x_star: None,
            flagged: sol.capped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (PlantParams, SpoolMaps, LoadModel) {
        (
            PlantParams::default(),
            SpoolMaps::default(),
            LoadModel::Fixed,
        )
    }

    fn small_cfg(n: usize) -> MpcConfig {
        MpcConfig {
            horizon_steps: n,
            ..MpcConfig::default()
        }
    }

    #[test]
    fn rollout_cost_trivial_cases() {
        let (p, maps, load) = setup();
        let cfg = small_cfg(5);
        let refs = vec![p.p_atm; 5];
        let c = rollout_cost(
            p.p_atm,
            &[0.0; 5],
            &[Mode::Inflation; 5],
            &refs,
            &cfg,
            &p,
            &maps,
            &load,
        )
        .unwrap();
        assert_eq!(c, 0.0);

        // with no tracking weight only the spool effort remains
        let cfg_u = MpcConfig { w_e: 0.0, ..cfg };
        let u = [60.0; 5];
        let c = rollout_cost(
            p.p_atm,
            &u,
            &[Mode::Inflation; 5],
            &refs,
            &cfg_u,
            &p,
            &maps,
            &load,
        )
        .unwrap();
        let x = maps.inflation.eval(60.0);
        assert!((c - cfg.w_u * 5.0 * x * x).abs() < 1e-12);
    }

    #[test]
    fn doubling_tracking_weight_doubles_error_term() {
        let (p, maps, load) = setup();
        let base = MpcConfig {
            w_u: 0.0,
            w_sw: 0.0,
            ..small_cfg(6)
        };
        let refs = vec![p.from_gauge_kpa(30.0); 6];
        let u = [50.0, 40.0, 30.0, 70.0, 20.0, 90.0];
        let m = [Mode::Inflation; 6];
        let c1 = rollout_cost(p.p_atm, &u, &m, &refs, &base, &p, &maps, &load).unwrap();
        let double = MpcConfig {
            w_e: 2.0 * base.w_e,
            ..base
        };
        let c2 = rollout_cost(p.p_atm, &u, &m, &refs, &double, &p, &maps, &load).unwrap();
        assert!((c2 - 2.0 * c1).abs() <= 1e-12 * c2);
    }

    #[test]
    fn rollout_rejects_wrong_lengths() {
        let (p, maps, load) = setup();
        let cfg = small_cfg(4);
        let r = rollout_cost(
            p.p_atm,
            &[0.0; 3],
            &[Mode::Inflation; 4],
            &[p.p_atm; 4],
            &cfg,
            &p,
            &maps,
            &load,
        );
        assert!(r.is_err());
    }

    #[test]
    fn switch_penalty_counts_changes() {
        let (p, maps, load) = setup();
        let cfg = MpcConfig {
            w_e: 0.0,
            w_u: 0.0,
            ..small_cfg(4)
        };
        let m = [
            Mode::Inflation,
            Mode::Deflation,
            Mode::Deflation,
            Mode::Inflation,
        ];
        let c = rollout_cost(
            p.p_atm,
            &[0.0; 4],
            &m,
            &[p.p_atm; 4],
            &cfg,
            &p,
            &maps,
            &load,
        )
        .unwrap();
        assert_eq!(c, 2.0 * cfg.w_sw);
    }

    #[test]
    fn nmpc_at_equilibrium_stays_closed() {
        let (p, maps, load) = setup();
        let cfg = small_cfg(8);
        let refs = vec![p.p_atm; 8];
        for m in [Mode::Inflation, Mode::Deflation] {
            let sol = nmpc_solve(p.p_atm, &refs, m, None, &cfg, &p, &maps, &load).unwrap();
            assert_eq!(sol.u_seq[0], maps.get(m).u_min());
        }
    }

    #[test]
    fn nmpc_cost_history_non_increasing() {
        let (p, maps, load) = setup();
        let cfg = MpcConfig {
            max_iters: 8,
            ..small_cfg(10)
        };
        let refs = vec![p.from_gauge_kpa(80.0); 10];
        let warm = vec![100.0; 10];
        let sol = nmpc_solve(
            p.from_gauge_kpa(60.0),
            &refs,
            Mode::Inflation,
            Some(&warm),
            &cfg,
            &p,
            &maps,
            &load,
        )
        .unwrap();
        for w in sol.cost_history.windows(2) {
            assert!(w[1] <= w[0], "{:?}", sol.cost_history);
        }
        assert!(sol.cost_history.last().unwrap() < &sol.cost_history[0]);
    }

    /// Dense grid over a single constant duty: an independent upper bound
    /// the descent result may not exceed.
    fn grid_constant_duty(p0: f64, refs: &[f64], m: Mode, cfg: &MpcConfig) -> (f64, f64) {
        let (p, maps, load) = setup();
        let map = maps.get(m);
        let mut best = (f64::INFINITY, map.u_min());
        for i in 0..=800 {
            let u = map.u_min() + (map.u_max() - map.u_min()) * i as f64 / 800.0;
            let c = rollout_cost(
                p0,
                &vec![u; refs.len()],
                &vec![m; refs.len()],
                refs,
                cfg,
                &p,
                &maps,
                &load,
            )
            .unwrap();
            if c < best.0 {
                best = (c, u);
            }
        }
        best
    }

    #[test]
    fn nmpc_large_error_opens_more_than_half_error() {
        let (p, maps, load) = setup();
        let cfg = small_cfg(6);
        let p0 = p.from_gauge_kpa(0.0);
        let full = vec![p.from_gauge_kpa(100.0); 6];
        let half = vec![p.from_gauge_kpa(50.0); 6];
        let s_full = nmpc_solve(p0, &full, Mode::Inflation, None, &cfg, &p, &maps, &load).unwrap();
        let s_half = nmpc_solve(p0, &half, Mode::Inflation, None, &cfg, &p, &maps, &load).unwrap();
        assert!(s_full.u_seq[0] >= s_half.u_seq[0]);
        let (g_full, u_full) = grid_constant_duty(p0, &full, Mode::Inflation, &cfg);
        let (_, u_half) = grid_constant_duty(p0, &half, Mode::Inflation, &cfg);
        assert!(u_full >= u_half);
        assert!(s_full.cost <= g_full * (1.0 + 1e-9));
    }

    #[test]
    fn mode_sequence_counts() {
        // 2 · Σ_{s ≤ k} C(n−1, s)
        assert_eq!(mode_sequences(10, 0).len(), 2);
        assert_eq!(mode_sequences(10, 1).len(), 2 + 2 * 9);
        assert_eq!(mode_sequences(6, 5).len(), 64);
        let all = mode_sequences(5, 4);
        let mut keys: Vec<u32> = all
            .iter()
            .map(|s| s.iter().fold(0u32, |acc, m| acc << 1 | m.bit() as u32))
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 32);
    }

    #[test]
    fn minmpc_picks_inflation_far_below_reference() {
        let (p, maps, load) = setup();
        let cfg = small_cfg(6);
        let refs = vec![p.from_gauge_kpa(100.0); 6];
        let sol = minmpc_solve(
            p.from_gauge_kpa(0.0),
            &refs,
            None,
            None,
            &cfg,
            &p,
            &maps,
            &load,
        )
        .unwrap();
        assert_eq!(sol.m_seq[0], Mode::Inflation);
        assert!(sol.m_seq.iter().all(|&m| m == Mode::Inflation));
    }

    #[test]
    fn minmpc_mirrored_choice() {
        let (p, maps, load) = setup();
        let cfg = small_cfg(6);
        let below = minmpc_solve(
            p.from_gauge_kpa(-30.0),
            &[p.from_gauge_kpa(0.0); 6],
            None,
            None,
            &cfg,
            &p,
            &maps,
            &load,
        )
        .unwrap();
        let above = minmpc_solve(
            p.from_gauge_kpa(30.0),
            &[p.from_gauge_kpa(0.0); 6],
            None,
            None,
            &cfg,
            &p,
            &maps,
            &load,
        )
        .unwrap();
        assert_eq!(below.m_seq[0], Mode::Inflation);
        assert_eq!(above.m_seq[0], Mode::Deflation);
    }

    #[test]
    fn zero_switches_is_best_of_two_nmpc() {
        let (p, maps, load) = setup();
        let cfg = MpcConfig {
            max_switches: 0,
            ..small_cfg(6)
        };
        let p0 = p.from_gauge_kpa(20.0);
        let refs = vec![p.from_gauge_kpa(40.0); 6];
        let mi = minmpc_solve(p0, &refs, None, None, &cfg, &p, &maps, &load).unwrap();
        let a = nmpc_solve(p0, &refs, Mode::Inflation, None, &cfg, &p, &maps, &load).unwrap();
        let b = nmpc_solve(p0, &refs, Mode::Deflation, None, &cfg, &p, &maps, &load).unwrap();
        assert_eq!(mi.cost, a.cost.min(b.cost));
    }

    #[test]
    fn minmpc_never_worse_than_supervised_nmpc() {
        let (p, maps, load) = setup();
        let cfg = small_cfg(6);
        for (g0, gr) in [(0.0, 50.0), (60.0, 40.0), (-20.0, -60.0), (10.0, 12.0)] {
            let p0 = p.from_gauge_kpa(g0);
            let refs = vec![p.from_gauge_kpa(gr); 6];
            let m = select_mode(p0, refs[0], &SupervisorConfig::default(), Mode::Inflation);
            let n = nmpc_solve(p0, &refs, m, None, &cfg, &p, &maps, &load).unwrap();
            let mi = minmpc_solve(p0, &refs, None, None, &cfg, &p, &maps, &load).unwrap();
            assert!(mi.cost <= n.cost, "{g0} -> {gr}: {} > {}", mi.cost, n.cost);
        }
    }

    #[test]
    fn config_validation_names_key() {
        let cfg = MpcConfig {
            dt_pred: 0.0,
            ..MpcConfig::default()
        };
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("mpc.dt_pred"));
    }
}
