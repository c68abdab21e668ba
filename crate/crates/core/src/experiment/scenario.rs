//! Closed-loop execution: plant at the substep rate, a held noisy sensor,
//! and a controller updated at the control rate.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::control::{self, ControllerState, PidConfig, SmcConfig};
use crate::error::{Error, Result};
use crate::experiment::reference::{reference_at, Reference};
use crate::plant::{self, LoadModel, Mode, PlantParams, PlantState};
use crate::valvemap::SpoolMaps;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub control_rate: f64,
    pub sensor_rate: f64,
    pub sim_substep: f64,
    /// Defaults to the reference duration when absent.
    pub duration: Option<f64>,
    /// Measurement noise standard deviation, Pa.
    pub noise_sigma: f64,
    pub seed: u64,
    pub initial_mode: Mode,
    /// Write measured update times into the trajectory CSV. Off by default
    /// so that repeated runs produce identical files.
    pub log_compute_time: bool,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            control_rate: 100.0,
            sensor_rate: 60.0,
            sim_substep: 1000.0,
            duration: None,
            noise_sigma: 500.0,
            seed: 0,
            initial_mode: Mode::Inflation,
            log_compute_time: false,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.control_rate.is_finite() && self.control_rate >= 1.0) {
            return Err(Error::config("timing.control_rate", "must be >= 1 Hz"));
        }
        if !(self.sim_substep.is_finite() && self.sim_substep >= self.control_rate) {
            return Err(Error::config(
                "timing.sim_substep",
                "must be >= control_rate",
            ));
        }
        if !(self.sensor_rate.is_finite() && self.sensor_rate > 0.0) {
            return Err(Error::config("timing.sensor_rate", "must be > 0"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("timing.noise_sigma", "must be >= 0"));
        }
        if let Some(d) = self.duration {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::config("timing.duration", "must be > 0"));
            }
        }
        Ok(())
    }
}

/// What a controller sees at a control tick.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub t: f64,
    /// Latest held sensor sample, Pa.
    pub p_meas: f64,
    pub p_ref: f64,
    pub p_ref_rate: f64,
    pub dt: f64,
    pub reference: &'a Reference,
    pub plant: &'a PlantParams,
    pub maps: &'a SpoolMaps,
    pub load: &'a LoadModel,
}

impl Observation<'_> {
    /// Absolute reference at `t`, holding the final value past the end.
    pub fn reference_ahead(&self, t: f64) -> f64 {
        let t = t.min(self.reference.duration());
        reference_at(self.reference, t, self.plant)
            .map(|(p, _)| p)
            .unwrap_or(self.p_ref)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Command {
    /// Duty, %.
    pub u: f64,
    pub mode: Mode,
    /// Sliding variable for controllers that have one.
    pub s: Option<f64>,
    /// Unclipped spool command for controllers that have one.
    pub x_star: Option<f64>,
    /// Raised on singular-gain fallbacks or solver iteration caps.
    pub flagged: bool,
}

pub trait Controller {
    fn name(&self) -> &str;
    fn update(&mut self, obs: &Observation<'_>) -> Result<Command>;
}

pub struct SmcController {
    pub cfg: SmcConfig,
    pub state: ControllerState,
}

impl SmcController {
    pub fn new(cfg: SmcConfig, initial_mode: Mode) -> Self {
        Self {
            cfg,
            state: ControllerState::new(initial_mode),
        }
    }
}

impl Controller for SmcController {
    fn name(&self) -> &str {
        "dm-smc"
    }

    fn update(&mut self, obs: &Observation<'_>) -> Result<Command> {
        let (u, next) = control::smc_update(
            self.state,
            obs.p_meas,
            obs.p_ref,
            obs.p_ref_rate,
            &self.cfg,
            obs.plant,
            obs.maps,
            obs.dt,
        )?;
        self.state = next;
        Ok(Command {
            u,
            mode: next.mode,
            s: Some(next.s),
            x_star: Some(next.x_star),
            flagged: next.singular,
        })
    }
}

pub struct PidController {
    pub cfg: PidConfig,
    pub state: ControllerState,
}

impl PidController {
    pub fn new(cfg: PidConfig, initial_mode: Mode) -> Self {
        Self {
            cfg,
            state: ControllerState::new(initial_mode),
        }
    }
}

impl Controller for PidController {
    fn name(&self) -> &str {
        "pid"
    }

    fn update(&mut self, obs: &Observation<'_>) -> Result<Command> {
        let (u, next) = control::pid_update(self.state, obs.p_meas, obs.p_ref, &self.cfg, obs.dt)?;
        self.state = next;
        Ok(Command {
            u,
            mode: next.mode,
            s: None,
            x_star: None,
            flagged: false,
        })
    }
}

/// One logged control tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickRecord {
    pub t: f64,
    pub p_ref: f64,
    pub p_true: f64,
    pub p_meas: f64,
    pub u: f64,
    pub mode: Mode,
    /// Wall-clock controller update time, s.
    pub ct: f64,
    pub s: Option<f64>,
    pub x_star: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub controller: String,
    pub control_dt: f64,
    pub p_atm: f64,
    pub records: Vec<TickRecord>,
    pub log_compute_time: bool,
}

#[derive(Serialize)]
struct CsvRow {
    t_s: f64,
    pref_kpa: f64,
    ptrue_kpa: f64,
    pmeas_kpa: f64,
    u_pct: f64,
    mode: u8,
    ct_us: f64,
}

impl Trajectory {
    pub fn mean_compute_time(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.ct).sum::<f64>() / self.records.len() as f64
    }

    pub fn flagged_ticks(&self) -> usize {
        self.records.iter().filter(|r| r.flagged).count()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let g = |p: f64| (p - self.p_atm) / 1000.0;
        for r in &self.records {
            w.serialize(CsvRow {
                t_s: r.t,
                pref_kpa: g(r.p_ref),
                ptrue_kpa: g(r.p_true),
                pmeas_kpa: g(r.p_meas),
                u_pct: r.u,
                mode: r.mode.bit(),
                ct_us: if self.log_compute_time {
                    r.ct * 1e6
                } else {
                    0.0
                },
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Runs one closed-loop scenario. Deterministic for a fixed seed, apart
/// from the recorded wall-clock update times.
pub fn run_scenario(
    reference: &Reference,
    controller: &mut dyn Controller,
    timing: &TimingConfig,
    plant_params: &PlantParams,
    maps: &SpoolMaps,
    load: &LoadModel,
) -> Result<Trajectory> {
    reference.validate()?;
    timing.validate()?;
    plant_params.validate()?;
    maps.validate()?;
    load.validate()?;

    let duration = timing.duration.unwrap_or_else(|| reference.duration());
    let control_dt = 1.0 / timing.control_rate;
    let n_ticks = (duration * timing.control_rate + 1e-9).floor() as usize;
    let n_sub = (timing.sim_substep / timing.control_rate).round().max(1.0) as usize;
    let sub_dt = control_dt / n_sub as f64;
    let sensor_dt = 1.0 / timing.sensor_rate;

    let mut rng = ChaCha8Rng::seed_from_u64(timing.seed);
    let noise = Normal::new(0.0, timing.noise_sigma.max(0.0))
        .map_err(|e| Error::config("timing.noise_sigma", e.to_string()))?;
    let sample = |p: f64, rng: &mut ChaCha8Rng| {
        if timing.noise_sigma > 0.0 {
            p + noise.sample(rng)
        } else {
            p
        }
    };

    let mut state = PlantState {
        p_out: plant_params.p_atm,
        t: 0.0,
    };
    let mut p_meas = sample(state.p_out, &mut rng);
    let mut next_sample = 1usize;
    let mut records = Vec::with_capacity(n_ticks);

    for k in 0..n_ticks {
        let t = k as f64 * control_dt;
        let (p_ref, p_ref_rate) =
            reference_at(reference, t.min(reference.duration()), plant_params)?;
        let obs = Observation {
            t,
            p_meas,
            p_ref,
            p_ref_rate,
            dt: control_dt,
            reference,
            plant: plant_params,
            maps,
            load,
        };
        let started = Instant::now();
        let cmd = controller.update(&obs)?;
        let ct = started.elapsed().as_secs_f64();
        records.push(TickRecord {
            t,
            p_ref,
            p_true: state.p_out,
            p_meas,
            u: cmd.u,
            mode: cmd.mode,
            ct,
            s: cmd.s,
            x_star: cmd.x_star,
            flagged: cmd.flagged,
        });

        let x_bar = maps.get(cmd.mode).eval(cmd.u);
        for j in 0..n_sub {
            state = plant::step(state, x_bar, cmd.mode, sub_dt, plant_params, load)?;
            let t_now = t + (j + 1) as f64 * sub_dt;
            // sensor samples land on the first substep at or after their time
            if t_now + 1e-12 >= next_sample as f64 * sensor_dt {
                p_meas = sample(state.p_out, &mut rng);
                next_sample += 1;
            }
        }
        state.t = (k + 1) as f64 * control_dt;
    }

    Ok(Trajectory {
        controller: controller.name().to_string(),
        control_dt,
        p_atm: plant_params.p_atm,
        records,
        log_compute_time: timing.log_compute_time,
    })
}
