//! Hysteresis mode supervision, mode-gated PID and the dual-mode
//! sliding-mode controller.
//!
//! Both controllers share [`select_mode`]: the polarity only changes once the
//! measured pressure leaves the band `p_ref ± h`. Inside each mode the
//! continuous command is a PWM duty in percent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{self, Mode, PlantParams};
use crate::valvemap::SpoolMaps;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisorConfig {
    /// Hysteresis half-band, Pa.
    pub h: f64,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self { h: 5_000.0 }
    }
}

impl SupervisorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::config(
                "h",
                format!("hysteresis half-band must be > 0, got {}", self.h),
            ));
        }
        Ok(())
    }
}

pub fn select_mode(p: f64, p_ref: f64, cfg: &SupervisorConfig, m_prev: Mode) -> Mode {
    if p <= p_ref - cfg.h {
        Mode::Inflation
    } else if p >= p_ref + cfg.h {
        Mode::Deflation
    } else {
        m_prev
    }
}

/// Pressure unit in which a controller forms its error.
///
/// The gains are unit-bearing. For the sliding-mode law, `Pa` makes the
/// boundary layer `mu` a pascal-scale band on `s`, while `KPa` expresses
/// every pressure, rate and the surface itself in kilopascals. For PID the
/// unit fixes the error scale multiplying the gains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PressureUnit {
    #[default]
    Pa,
    KPa,
}

impl PressureUnit {
    pub fn pascals(self) -> f64 {
        match self {
            PressureUnit::Pa => 1.0,
            PressureUnit::KPa => 1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmcGains {
    pub lambda: f64,
    pub eta: f64,
    /// Boundary-layer thickness on the sliding variable.
    pub mu: f64,
    pub k_i: f64,
}

impl SmcGains {
    pub fn inflation_default() -> Self {
        Self {
            lambda: 2.8,
            eta: 5.0e3,
            mu: 1.0e3,
            k_i: 0.8,
        }
    }

    pub fn deflation_default() -> Self {
        Self {
            lambda: 4.0,
            eta: 5.0e3,
            mu: 1.0e3,
            k_i: 0.8,
        }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.lambda) {
            return Err(Error::config(format!("{key}.lambda"), "must be > 0"));
        }
        if !ok(self.eta) {
            return Err(Error::config(format!("{key}.eta"), "must be > 0"));
        }
        if !ok(self.mu) {
            return Err(Error::config(format!("{key}.mu"), "must be > 0"));
        }
        if !(self.k_i.is_finite() && self.k_i >= 0.0) {
            return Err(Error::config(format!("{key}.k_i"), "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmcConfig {
    pub inflation: SmcGains,
    pub deflation: SmcGains,
    /// Set from the scenario-level supervisor when loaded from a config file.
    #[serde(skip)]
    pub supervisor: SupervisorConfig,
    pub unit: PressureUnit,
    /// Clear the error integral whenever the mode flips.
    pub reset_integral_on_switch: bool,
    /// `|g_m|` below this fraction of its mid-range magnitude is treated as singular.
    pub singular_fraction: f64,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            inflation: SmcGains::inflation_default(),
            deflation: SmcGains::deflation_default(),
            supervisor: SupervisorConfig::default(),
            unit: PressureUnit::KPa,
            reset_integral_on_switch: false,
            singular_fraction: 1e-3,
        }
    }
}

impl SmcConfig {
    pub fn gains(&self, m: Mode) -> &SmcGains {
        match m {
            Mode::Inflation => &self.inflation,
            Mode::Deflation => &self.deflation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.inflation.validate("smc.inflation")?;
        self.deflation.validate("smc.deflation")?;
        self.supervisor.validate()?;
        if !(self.singular_fraction >= 0.0 && self.singular_fraction < 1.0) {
            return Err(Error::config("smc.singular_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Gains act on error in kilopascals; output is duty in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub k_p: f64,
    pub k_i: f64,
    pub k_d: f64,
}

impl PidGains {
    pub fn validate(&self, key: &str) -> Result<()> {
        for (name, v) in [("k_p", self.k_p), ("k_i", self.k_i), ("k_d", self.k_d)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    format!("{key}.{name}"),
                    "must be finite and >= 0",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidConfig {
    pub inflation: PidGains,
    pub deflation: PidGains,
    /// Set from the scenario-level supervisor when loaded from a config file.
    #[serde(skip)]
    pub supervisor: SupervisorConfig,
    pub unit: PressureUnit,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            inflation: PidGains {
                k_p: 0.32,
                k_i: 0.3,
                k_d: 0.02,
            },
            deflation: PidGains {
                k_p: 0.6,
                k_i: 0.2,
                k_d: 0.01,
            },
            supervisor: SupervisorConfig::default(),
            unit: PressureUnit::Pa,
        }
    }
}

impl PidConfig {
    pub fn gains(&self, m: Mode) -> &PidGains {
        match m {
            Mode::Inflation => &self.inflation,
            Mode::Deflation => &self.deflation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.inflation.validate("pid.inflation")?;
        self.deflation.validate("pid.deflation")?;
        self.supervisor.validate()
    }
}

/// Mutable controller memory, passed by value through each update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub mode: Mode,
    /// Error integral in the controller's own error convention and unit
    /// (pascal-seconds for DM-SMC, kilopascal-seconds for PID).
    pub e_int: f64,
    /// Previous error, same convention as `e_int`; `None` before the first update.
    pub e_prev: Option<f64>,
    pub u_prev: f64,
    /// Sliding variable of the last DM-SMC update, in the configured unit.
    pub s: f64,
    /// Unclipped spool command of the last DM-SMC update.
    pub x_star: f64,
    /// Set when the last update hit the `g_m ≈ 0` fallback.
    pub singular: bool,
    /// Set when the last update saturated its output.
    pub clipped: bool,
}

impl ControllerState {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            e_int: 0.0,
            e_prev: None,
            u_prev: 0.0,
            s: 0.0,
            x_star: 0.0,
            singular: false,
            clipped: false,
        }
    }
}

impl Default for ControllerState {
    fn default() -> Self {
        Self::new(Mode::Inflation)
    }
}

/// Unit-slope clamp used as the boundary-layer switching function.
pub fn sat(z: f64) -> f64 {
    z.clamp(-1.0, 1.0)
}

/// Pressure at the middle of a mode's operating range.
fn mid_range(m: Mode, plant: &PlantParams) -> f64 {
    match m {
        Mode::Inflation => 0.5 * (plant.p_atm + plant.p_pos),
        Mode::Deflation => 0.5 * (plant.p_neg + plant.p_atm),
    }
}

/// One DM-SMC update from a (possibly noisy) pressure measurement.
///
/// Returns the PWM duty for the active mode and the updated state. The
/// integral is only advanced when the spool command stays inside `[0, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn smc_update(
    state: ControllerState,
    p: f64,
    p_ref: f64,
    p_ref_rate: f64,
    cfg: &SmcConfig,
    plant_params: &PlantParams,
    maps: &SpoolMaps,
    dt: f64,
) -> Result<(f64, ControllerState)> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::config("dt", "controller period must be positive"));
    }
    let mode = select_mode(p, p_ref, &cfg.supervisor, state.mode);
    let mut e_int = state.e_int;
    if mode != state.mode && cfg.reset_integral_on_switch {
        e_int = 0.0;
    }
    let gains = cfg.gains(mode);
    let scale = cfg.unit.pascals();

    let p_model = plant_params.clamp_pressure(p);
    let (f, g) = plant::drift_and_gain(p_model, mode, plant_params)?;
    let e_pa = p - p_ref;
    let e = e_pa / scale;
    let e_int_next = e_int + e_pa * dt;
    let s = gains.lambda * e + gains.k_i * e_int_next / scale;

    let numerator = (-f + p_ref_rate) / scale
        - s
        - gains.eta / gains.lambda * sat(s / gains.mu)
        - gains.k_i / gains.lambda * e;

    let g_mid = plant::gain(mid_range(mode, plant_params), mode, plant_params)?.abs();
    let singular = g.abs() < cfg.singular_fraction * g_mid;
    let x_star = if singular {
        // push towards the source only when the law asks for flow in the
        // direction this mode can deliver
        let nominal_sign = match mode {
            Mode::Inflation => 1.0,
            Mode::Deflation => -1.0,
        };
        if numerator * nominal_sign > 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        numerator / (g / scale)
    };
    let clipped = !(0.0..=1.0).contains(&x_star);
    let x_cmd = x_star.clamp(0.0, 1.0);
    let u = maps.get(mode).invert(x_cmd);

    let next = ControllerState {
        mode,
        e_int: if clipped { e_int } else { e_int_next },
        e_prev: Some(e_pa),
        u_prev: u,
        s,
        x_star,
        singular,
        clipped,
    };
    Ok((u, next))
}

/// One update of the mode-gated PID.
///
/// The error is oriented so that a positive value always asks the active
/// mode's source for more flow: `p_ref - p` while inflating, `p - p_ref`
/// while deflating, in kilopascals. Each mode runs its own controller, so
/// the integral and derivative memory restart when the mode flips.
pub fn pid_update(
    state: ControllerState,
    p: f64,
    p_ref: f64,
    cfg: &PidConfig,
    dt: f64,
) -> Result<(f64, ControllerState)> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::config("dt", "controller period must be positive"));
    }
    let mode = select_mode(p, p_ref, &cfg.supervisor, state.mode);
    let (mut e_int, mut e_prev) = (state.e_int, state.e_prev);
    if mode != state.mode {
        e_int = 0.0;
        e_prev = None;
    }
    let gains = cfg.gains(mode);
    let scale = cfg.unit.pascals();
    let e = match mode {
        Mode::Inflation => (p_ref - p) / scale,
        Mode::Deflation => (p - p_ref) / scale,
    };
    let de = e_prev.map_or(0.0, |prev| (e - prev) / dt);
    let e_int_next = e_int + e * dt;
    let raw = gains.k_p * e + gains.k_i * e_int_next + gains.k_d * de;
    let u = raw.clamp(0.0, 100.0);
    // conditional integration: hold the integral while it would push
    // further into saturation
    let winding = (raw > 100.0 && e > 0.0) || (raw < 0.0 && e < 0.0);
    let next = ControllerState {
        mode,
        e_int: if winding { e_int } else { e_int_next },
        e_prev: Some(e),
        u_prev: u,
        s: 0.0,
        x_star: 0.0,
        singular: false,
        clipped: raw != u,
    };
    Ok((u, next))
}
