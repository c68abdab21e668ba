//! Window-averaged tracking metrics.
//!
//! Every logged tick is treated as holding its values until the next tick,
//! so the integrals are exact for the piecewise-constant record. Errors use
//! the true plant pressure, in kilopascals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::reference::{Reference, Window};
use crate::experiment::scenario::Trajectory;

/// Fraction of each window, at its end, used for the steady-state error.
pub const STEADY_STATE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowPolicy {
    /// One window per reference stage.
    Stage,
    /// One window per sinusoid period.
    Period,
}

impl WindowPolicy {
    pub fn for_reference(reference: &Reference) -> Self {
        match reference {
            Reference::MultiStep { .. } => WindowPolicy::Stage,
            Reference::Sinusoid { .. } => WindowPolicy::Period,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub start: f64,
    pub end: f64,
    /// kPa
    pub e_ss: f64,
    /// kPa
    pub ae: f64,
    /// kPa·s²
    pub itae: f64,
    /// %·s
    pub pwm_e: f64,
    pub switches: u32,
    /// kPa
    pub max_abs_e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub controller: String,
    pub policy: WindowPolicy,
    pub e_ss: f64,
    pub ae: f64,
    pub itae: f64,
    pub pwm_e: f64,
    /// Window-averaged count of mode transitions.
    pub switches: f64,
    pub total_switches: u32,
    pub max_abs_e: f64,
    /// Mean controller update time, s.
    pub ct_mean: f64,
    pub flagged_ticks: usize,
    pub windows: Vec<WindowMetrics>,
}

/// Metrics over explicit windows.
pub fn metrics_over(traj: &Trajectory, windows: &[Window]) -> Result<Vec<WindowMetrics>> {
    let dt = traj.control_dt;
    let recs = &traj.records;
    let mut out = Vec::with_capacity(windows.len());
    for w in windows {
        let eps = 1e-9 * dt;
        let idx: Vec<usize> = (0..recs.len())
            .filter(|&i| recs[i].t >= w.start - eps && recs[i].t < w.end - eps)
            .collect();
        if idx.is_empty() {
            return Err(Error::config(
                "reference",
                format!(
                    "analysis window [{}, {}) contains no samples",
                    w.start, w.end
                ),
            ));
        }
        let err = |i: usize| ((recs[i].p_true - recs[i].p_ref) / 1000.0).abs();
        let span = idx.len() as f64 * dt;
        let mut ae = 0.0;
        let mut itae = 0.0;
        let mut pwm_e = 0.0;
        let mut max_abs_e: f64 = 0.0;
        let mut switches = 0;
        for &i in &idx {
            let e = err(i);
            let tau = recs[i].t - w.start;
            ae += e * dt;
            itae += e * dt * (tau + 0.5 * dt);
            pwm_e += recs[i].u.abs() * dt;
            max_abs_e = max_abs_e.max(e);
            if i > 0 && recs[i].mode != recs[i - 1].mode {
                switches += 1;
            }
        }
        let ss_start = w.end - STEADY_STATE_FRACTION * (w.end - w.start);
        let tail: Vec<f64> = idx
            .iter()
            .filter(|&&i| recs[i].t >= ss_start - eps)
            .map(|&i| err(i))
            .collect();
        let e_ss = if tail.is_empty() {
            err(*idx.last().unwrap())
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        };
        out.push(WindowMetrics {
            start: w.start,
            end: w.end,
            e_ss,
            ae: ae / span,
            itae,
            pwm_e,
            switches,
            max_abs_e,
        });
    }
    Ok(out)
}

pub fn compute_metrics(
    traj: &Trajectory,
    reference: &Reference,
    policy: WindowPolicy,
) -> Result<MetricsReport> {
    let windows = match (policy, reference) {
        (WindowPolicy::Stage, Reference::MultiStep { .. })
        | (WindowPolicy::Period, Reference::Sinusoid { .. }) => reference.windows(),
        _ => {
            return Err(Error::config(
                "policy",
                "stage windows need a multi-step reference and period windows a sinusoid",
            ))
        }
    };
    let per = metrics_over(traj, &windows)?;
    let n = per.len() as f64;
    let mean = |f: fn(&WindowMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        controller: traj.controller.clone(),
        policy,
        e_ss: mean(|w| w.e_ss),
        ae: mean(|w| w.ae),
        itae: mean(|w| w.itae),
        pwm_e: mean(|w| w.pwm_e),
        switches: mean(|w| w.switches as f64),
        total_switches: per.iter().map(|w| w.switches).sum(),
        max_abs_e: per.iter().map(|w| w.max_abs_e).fold(0.0, f64::max),
        ct_mean: traj.mean_compute_time(),
        flagged_ticks: traj.flagged_ticks(),
        windows: per,
    })
}
