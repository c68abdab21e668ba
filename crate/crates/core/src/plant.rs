//! Switched pressure dynamics of one pneumatic channel.
//!
//! The outlet pressure obeys `dP/dt = f(P) + g_m(P) * x`, where `x` is the
//! averaged spool fraction of the delivery valve and `m` the polarity mode.
//! The drift `f` is the leakage exchange with the atmosphere and the gain
//! `g_m` collects the source branch of the active mode together with the
//! leakage path that the spool closes as it opens.
//!
//! All pressures are absolute pascals. Gauge kilopascals appear only at
//! the I/O boundary through [`PlantParams::to_gauge_kpa`] and
//! [`PlantParams::from_gauge_kpa`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polarity selected by the upstream valve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Deflation,
    Inflation,
}

impl Mode {
    pub fn from_bit(bit: u8) -> Self {
        if bit == 0 {
            Mode::Deflation
        } else {
            Mode::Inflation
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Mode::Deflation => 0,
            Mode::Inflation => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Mode::Deflation => Mode::Inflation,
            Mode::Inflation => Mode::Deflation,
        }
    }
}

/// Sonic conductances of the four branches, m³·s⁻¹·Pa⁻¹.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conductances {
    /// Positive source to outlet.
    pub c_po: f64,
    /// Outlet to vacuum source.
    pub c_on: f64,
    /// Outlet to atmosphere (leakage while pressurised).
    pub c_oa: f64,
    /// Atmosphere to outlet (leakage while evacuated).
    pub c_ao: f64,
}

impl Default for Conductances {
    fn default() -> Self {
        Self {
            c_po: 2.64e-10,
            c_on: 3.44e-10,
            c_oa: 6.94e-12,
            c_ao: 4.52e-12,
        }
    }
}

impl Conductances {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("conductances.c_po", self.c_po),
            ("conductances.c_on", self.c_on),
            ("conductances.c_oa", self.c_oa),
            ("conductances.c_ao", self.c_ao),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, "must be finite and strictly positive"));
            }
        }
        Ok(())
    }
}

/// Physical constants of the channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    pub p_pos: f64,
    pub p_neg: f64,
    pub p_atm: f64,
    /// Critical pressure ratio.
    pub b: f64,
    pub rho_ref: f64,
    pub t_ref: f64,
    pub t_gas: f64,
    pub gamma: f64,
    pub r_gas: f64,
    /// Outlet volume, m³.
    pub volume: f64,
    pub conductances: Conductances,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            p_pos: 3.0e5,
            p_neg: 1.0e4,
            p_atm: 101_325.0,
            b: 0.26,
            rho_ref: 1.185,
            t_ref: 293.15,
            t_gas: 293.15,
            gamma: 1.4,
            r_gas: 287.0,
            volume: 2.0e-5,
            conductances: Conductances::default(),
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("plant.p_pos", self.p_pos),
            ("plant.p_neg", self.p_neg),
            ("plant.p_atm", self.p_atm),
            ("plant.rho_ref", self.rho_ref),
            ("plant.t_ref", self.t_ref),
            ("plant.t_gas", self.t_gas),
            ("plant.r_gas", self.r_gas),
            ("plant.volume", self.volume),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, "must be finite and strictly positive"));
            }
        }
        if !(self.p_neg < self.p_atm && self.p_atm < self.p_pos) {
            return Err(Error::config(
                "plant.p_atm",
                "requires p_neg < p_atm < p_pos",
            ));
        }
        if !(self.b > 0.0 && self.b < 1.0) {
            return Err(Error::config(
                "plant.b",
                "critical ratio must lie in (0, 1)",
            ));
        }
        if self.gamma.is_nan() || self.gamma <= 1.0 {
            return Err(Error::config(
                "plant.gamma",
                "heat-capacity ratio must exceed 1",
            ));
        }
        self.conductances.validate()
    }

    /// Factor `γRT/V` converting a mass flow (kg/s) into a pressure rate (Pa/s).
    pub fn flow_to_rate(&self, volume: f64) -> f64 {
        self.gamma * self.r_gas * self.t_gas / volume
    }

    pub fn to_gauge_kpa(&self, p_abs: f64) -> f64 {
        (p_abs - self.p_atm) / 1000.0
    }

    pub fn from_gauge_kpa(&self, gauge_kpa: f64) -> f64 {
        gauge_kpa * 1000.0 + self.p_atm
    }

    pub fn clamp_pressure(&self, p: f64) -> f64 {
        p.clamp(self.p_neg, self.p_pos)
    }

    fn check_range(&self, p: f64) -> Result<()> {
        if p.is_finite() && p >= self.p_neg && p <= self.p_pos {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                p,
                lo: self.p_neg,
                hi: self.p_pos,
            })
        }
    }

    fn temperature_correction(&self) -> f64 {
        (self.t_ref / self.t_gas).sqrt()
    }
}

/// Subsonic attenuation of the choked orifice flow.
///
/// Equal to one up to the critical ratio, an elliptic arc down to zero at
/// `r = 1`, and zero beyond.
pub fn shape_factor(r: f64, b: f64) -> f64 {
    if r <= b {
        1.0
    } else if r < 1.0 {
        let z = (r - b) / (1.0 - b);
        (1.0 - z * z).max(0.0).sqrt()
    } else {
        0.0
    }
}

/// Mass flows of the four branches, kg/s, each oriented upstream to downstream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchFlows {
    pub a_po: f64,
    pub a_on: f64,
    pub a_oa: f64,
    pub a_ao: f64,
}

pub fn branch_flows(p: f64, params: &PlantParams) -> Result<BranchFlows> {
    params.check_range(p)?;
    Ok(branch_flows_at(p, params))
}

/// Branch flows without the range check; callers guarantee `p` is sane.
pub(crate) fn branch_flows_at(p: f64, params: &PlantParams) -> BranchFlows {
    let c = &params.conductances;
    let k = params.rho_ref * params.temperature_correction();
    let b = params.b;
    BranchFlows {
        a_po: params.p_pos * c.c_po * k * shape_factor(p / params.p_pos, b),
        a_on: p * c.c_on * k * shape_factor(params.p_neg / p, b),
        a_oa: p * c.c_oa * k * shape_factor(params.p_atm / p, b),
        a_ao: params.p_atm * c.c_ao * k * shape_factor(p / params.p_atm, b),
    }
}

fn drift_from(flows: &BranchFlows) -> f64 {
    flows.a_ao - flows.a_oa
}

fn gain_from(flows: &BranchFlows, m: Mode) -> f64 {
    match m {
        Mode::Inflation => flows.a_po - flows.a_ao + flows.a_oa,
        Mode::Deflation => -flows.a_on - flows.a_ao + flows.a_oa,
    }
}

/// Drift term `f(P)`, Pa/s, at the nominal volume.
pub fn drift(p: f64, params: &PlantParams) -> Result<f64> {
    let flows = branch_flows(p, params)?;
    Ok(params.flow_to_rate(params.volume) * drift_from(&flows))
}

/// Input gain `g_m(P)`, Pa/s per unit spool fraction, at the nominal volume.
pub fn gain(p: f64, m: Mode, params: &PlantParams) -> Result<f64> {
    let flows = branch_flows(p, params)?;
    Ok(params.flow_to_rate(params.volume) * gain_from(&flows, m))
}

/// `(f(P), g_m(P))` from a single flow evaluation.
pub fn drift_and_gain(p: f64, m: Mode, params: &PlantParams) -> Result<(f64, f64)> {
    let flows = branch_flows(p, params)?;
    let k = params.flow_to_rate(params.volume);
    Ok((k * drift_from(&flows), k * gain_from(&flows, m)))
}

/// Net mass flow into the outlet, written case by case: the main valve
/// passes a fraction `x_bar` of its branch and the leakage path the
/// complementary `1 - x_bar` of the atmospheric branch on the side the
/// outlet pressure sits.
pub fn net_outlet_flow(x_bar: f64, p: f64, m: Mode, params: &PlantParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&x_bar) {
        return Err(Error::config(
            "x_bar",
            format!("spool fraction {x_bar} outside [0, 1]"),
        ));
    }
    let flows = branch_flows(p, params)?;
    let main = match m {
        Mode::Inflation => x_bar * flows.a_po,
        Mode::Deflation => -x_bar * flows.a_on,
    };
    let leakage = if p >= params.p_atm {
        -(1.0 - x_bar) * flows.a_oa
    } else {
        (1.0 - x_bar) * flows.a_ao
    };
    Ok(main + leakage)
}

/// Volume seen by the outlet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LoadModel {
    /// The plant's nominal volume.
    #[default]
    Fixed,
    /// Bellow whose volume grows affinely with gauge pressure, clamped.
    AffineBellow {
        v0: f64,
        k_v: f64,
        v_min: f64,
        v_max: f64,
    },
}

impl LoadModel {
    /// Bellow spanning 0–25 mL over the −80…200 kPa gauge range. The lower
    /// clamp is kept at 1 mL since the pressure rate diverges as V → 0.
    pub fn default_bellow() -> Self {
        let k_v = 25.0e-6 / 280.0e3;
        LoadModel::AffineBellow {
            v0: 80.0e3 * k_v,
            k_v,
            v_min: 1.0e-6,
            v_max: 25.0e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LoadModel::Fixed => Ok(()),
            LoadModel::AffineBellow {
                v0,
                k_v,
                v_min,
                v_max,
            } => {
                if !(v0.is_finite() && k_v.is_finite()) {
                    return Err(Error::config("load.v0", "must be finite"));
                }
                if !(v_min > 0.0 && v_min < v_max && v_max.is_finite()) {
                    return Err(Error::config("load.v_min", "requires 0 < v_min < v_max"));
                }
                Ok(())
            }
        }
    }

    pub fn volume(&self, p: f64, params: &PlantParams) -> f64 {
        match *self {
            LoadModel::Fixed => params.volume,
            LoadModel::AffineBellow {
                v0,
                k_v,
                v_min,
                v_max,
            } => (v0 + k_v * (p - params.p_atm)).clamp(v_min, v_max),
        }
    }
}

/// Pressure rate `f + g_m x` with the load volume evaluated at `p`.
pub fn pressure_rate(p: f64, x_bar: f64, m: Mode, params: &PlantParams, load: &LoadModel) -> f64 {
    let p = params.clamp_pressure(p);
    let flows = branch_flows_at(p, params);
    let k = params.flow_to_rate(load.volume(p, params));
    k * (drift_from(&flows) + gain_from(&flows, m) * x_bar)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub p_out: f64,
    pub t: f64,
}

/// One classic fourth-order Runge–Kutta step with the inputs held.
pub fn step(
    state: PlantState,
    x_bar: f64,
    m: Mode,
    dt: f64,
    params: &PlantParams,
    load: &LoadModel,
) -> Result<PlantState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::config("dt", "step size must be positive"));
    }
    if !(0.0..=1.0).contains(&x_bar) {
        return Err(Error::config(
            "x_bar",
            format!("spool fraction {x_bar} outside [0, 1]"),
        ));
    }
    let p = state.p_out;
    let rate = |p: f64| pressure_rate(p, x_bar, m, params, load);
    let k1 = rate(p);
    let k2 = rate(p + 0.5 * dt * k1);
    let k3 = rate(p + 0.5 * dt * k2);
    let k4 = rate(p + dt * k3);
    let next = p + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    let t = state.t + dt;
    if !next.is_finite() {
        return Err(Error::NonFinite { t });
    }
    Ok(PlantState {
        p_out: params.clamp_pressure(next),
        t,
    })
}

/// Advances over `duration` in `n` equal steps.
pub fn advance(
    mut state: PlantState,
    x_bar: f64,
    m: Mode,
    duration: f64,
    n: usize,
    params: &PlantParams,
    load: &LoadModel,
) -> Result<PlantState> {
    let dt = duration / n.max(1) as f64;
    for _ in 0..n.max(1) {
        state = step(state, x_bar, m, dt, params, load)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> PlantParams {
        PlantParams::default()
    }

    #[test]
    fn shape_factor_branches() {
        assert_eq!(shape_factor(0.2, 0.26), 1.0);
        assert_eq!(shape_factor(1.2, 0.26), 0.0);
        assert!((shape_factor(0.63, 0.26) - 0.75f64.sqrt()).abs() < 1e-12);
        assert!((shape_factor(0.63, 0.26) - 0.8660).abs() < 1e-4);
        assert_eq!(shape_factor(0.26, 0.26), 1.0);
        assert_eq!(shape_factor(1.0, 0.26), 0.0);
    }

    #[test]
    fn branch_flow_examples() {
        let p = params();
        let at_pos = branch_flows(p.p_pos, &p).unwrap();
        assert_eq!(at_pos.a_po, 0.0);
        let at_atm = branch_flows(p.p_atm, &p).unwrap();
        assert_eq!(at_atm.a_oa, 0.0);
        assert_eq!(at_atm.a_ao, 0.0);
        let at_100 = branch_flows(201_325.0, &p).unwrap();
        assert!(
            (at_100.a_po - 7.80e-5).abs() / 7.80e-5 < 2e-3,
            "{}",
            at_100.a_po
        );
        assert!(branch_flows(p.p_pos + 1.0, &p).is_err());
        assert!(branch_flows(p.p_neg - 1.0, &p).is_err());
    }

    #[test]
    fn drift_examples() {
        let p = params();
        assert_eq!(drift(p.p_atm, &p).unwrap(), 0.0);
        let d = drift(201_325.0, &p).unwrap();
        assert!((d + 9.21e3).abs() < 10.0, "{d}");
        assert!(drift(81_325.0, &p).unwrap() > 0.0);
        assert!((p.flow_to_rate(p.volume) - 5.889e9).abs() / 5.889e9 < 1e-3);
    }

    #[test]
    fn gain_examples() {
        let p = params();
        let g = gain(p.p_atm, Mode::Inflation, &p).unwrap();
        assert!((g - 5.50e5).abs() / 5.50e5 < 2e-3, "{g}");
        let flows = branch_flows(p.p_pos, &p).unwrap();
        let g_top = gain(p.p_pos, Mode::Inflation, &p).unwrap();
        assert!((g_top - p.flow_to_rate(p.volume) * flows.a_oa).abs() < 1e-9 * g_top.abs());
        let bottom = branch_flows(p.p_neg, &p).unwrap();
        assert_eq!(bottom.a_on, 0.0);
    }

    #[test]
    fn gain_sign_over_grid() {
        let p = params();
        for i in 1..200 {
            let up = p.p_atm + (p.p_pos - p.p_atm) * i as f64 / 200.0;
            assert!(gain(up, Mode::Inflation, &p).unwrap() > 0.0);
            let down = p.p_neg + (p.p_atm - p.p_neg) * i as f64 / 200.0;
            assert!(gain(down, Mode::Deflation, &p).unwrap() < 0.0);
        }
    }

    #[test]
    fn net_flow_cases() {
        let p = params();
        let hi = 201_325.0;
        let f = branch_flows(hi, &p).unwrap();
        assert_eq!(
            net_outlet_flow(0.0, hi, Mode::Inflation, &p).unwrap(),
            -f.a_oa
        );
        assert_eq!(
            net_outlet_flow(1.0, hi, Mode::Inflation, &p).unwrap(),
            f.a_po
        );
        let at = branch_flows(p.p_atm, &p).unwrap();
        let q = net_outlet_flow(0.5, p.p_atm, Mode::Deflation, &p).unwrap();
        assert!((q + 0.5 * at.a_on).abs() < 1e-18);
        assert!(net_outlet_flow(1.5, hi, Mode::Inflation, &p).is_err());
    }

    #[test]
    fn step_examples() {
        let p = params();
        let load = LoadModel::Fixed;
        let s0 = PlantState {
            p_out: p.p_atm,
            t: 0.0,
        };
        let same = step(s0, 0.0, Mode::Deflation, 1e-3, &p, &load).unwrap();
        assert_eq!(same.p_out, p.p_atm);
        assert!((same.t - 1e-3).abs() < 1e-15);
        let up = step(s0, 1.0, Mode::Inflation, 1e-3, &p, &load).unwrap();
        let dp = up.p_out - p.p_atm;
        assert!((dp - 550.0).abs() < 10.0, "{dp}");
        assert!(step(s0, 1.0, Mode::Inflation, 0.0, &p, &load).is_err());
    }

    #[test]
    fn rk4_matches_fine_euler() {
        let p = params();
        let load = LoadModel::Fixed;
        for (p0, x, m) in [
            (p.p_atm, 1.0, Mode::Inflation),
            (150_000.0, 0.4, Mode::Inflation),
            (p.p_atm, 0.7, Mode::Deflation),
            (60_000.0, 0.2, Mode::Deflation),
        ] {
            let s = step(PlantState { p_out: p0, t: 0.0 }, x, m, 0.01, &p, &load).unwrap();
            // Forward Euler with 1000 substeps, written independently.
            let mut q = p0;
            for _ in 0..1000 {
                let fl = branch_flows(q, &p).unwrap();
                let qout = match m {
                    Mode::Inflation => x * fl.a_po,
                    Mode::Deflation => -x * fl.a_on,
                } + (1.0 - x) * (fl.a_ao - fl.a_oa);
                q += 1e-5 * p.flow_to_rate(p.volume) * qout;
            }
            let change = (s.p_out - p0).abs().max(1.0);
            assert!((s.p_out - q).abs() <= 1e-3 * change, "{} vs {q}", s.p_out);
        }
    }

    #[test]
    fn bellow_volume_clamps() {
        let p = params();
        let load = LoadModel::default_bellow();
        load.validate().unwrap();
        assert!((load.volume(p.from_gauge_kpa(200.0), &p) - 25e-6).abs() < 1e-12);
        assert!((load.volume(p.from_gauge_kpa(-80.0), &p) - 1e-6).abs() < 1e-12);
        let mid = load.volume(p.from_gauge_kpa(60.0), &p);
        assert!(mid > 1e-6 && mid < 25e-6);
    }

    #[test]
    fn defaults_validate_and_bad_params_rejected() {
        params().validate().unwrap();
        let mut bad = params();
        bad.b = 1.2;
        assert!(bad.validate().is_err());
        let mut bad = params();
        bad.conductances.c_oa = 0.0;
        assert!(bad.validate().is_err());
    }
}
