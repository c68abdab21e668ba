use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::PlantParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    /// Gauge pressure, kPa.
    pub level: f64,
    /// Hold time, s.
    pub hold: f64,
}

/// Pressure reference in gauge kilopascals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Reference {
    MultiStep {
        stages: Vec<Stage>,
    },
    Sinusoid {
        /// kPa
        amplitude: f64,
        /// Hz
        frequency: f64,
        cycles: u32,
    },
}

impl Default for Reference {
    fn default() -> Self {
        Self::multi_step_default()
    }
}

/// Analysis window `[start, end)`, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl Reference {
    /// Thirteen 5 s stages sweeping both polarities.
    pub fn multi_step_default() -> Self {
        let levels = [
            0.0, 50.0, 100.0, 150.0, 200.0, 150.0, 100.0, 50.0, 0.0, -40.0, -80.0, -40.0, 0.0,
        ];
        Reference::MultiStep {
            stages: levels
                .iter()
                .map(|&level| Stage { level, hold: 5.0 })
                .collect(),
        }
    }

    pub fn sinusoid(frequency: f64, cycles: u32) -> Self {
        Reference::Sinusoid {
            amplitude: 50.0,
            frequency,
            cycles,
        }
    }

    /// Constant level held for `hold` seconds.
    pub fn constant(level: f64, hold: f64) -> Self {
        Reference::MultiStep {
            stages: vec![Stage { level, hold }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Reference::MultiStep { stages } => {
                if stages.is_empty() {
                    return Err(Error::config(
                        "reference.stages",
                        "at least one stage required",
                    ));
                }
                for (i, s) in stages.iter().enumerate() {
                    if !(s.hold.is_finite() && s.hold > 0.0) {
                        return Err(Error::config(
                            format!("reference.stages[{i}].hold"),
                            "must be > 0",
                        ));
                    }
                    if !s.level.is_finite() {
                        return Err(Error::config(
                            format!("reference.stages[{i}].level"),
                            "must be finite",
                        ));
                    }
                }
            }
            Reference::Sinusoid {
                amplitude,
                frequency,
                cycles,
            } => {
                if !(frequency.is_finite() && *frequency > 0.0) {
                    return Err(Error::config("reference.frequency", "must be > 0"));
                }
                if !amplitude.is_finite() {
                    return Err(Error::config("reference.amplitude", "must be finite"));
                }
                if *cycles == 0 {
                    return Err(Error::config("reference.cycles", "must be >= 1"));
                }
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        match self {
            Reference::MultiStep { stages } => stages.iter().map(|s| s.hold).sum(),
            Reference::Sinusoid {
                frequency, cycles, ..
            } => *cycles as f64 / frequency,
        }
    }

    /// Stages for multi-step references, periods for sinusoids.
    pub fn windows(&self) -> Vec<Window> {
        match self {
            Reference::MultiStep { stages } => {
                let mut start = 0.0;
                stages
                    .iter()
                    .map(|s| {
                        let w = Window {
                            start,
                            end: start + s.hold,
                        };
                        start += s.hold;
                        w
                    })
                    .collect()
            }
            Reference::Sinusoid {
                frequency, cycles, ..
            } => (0..*cycles)
                .map(|k| Window {
                    start: k as f64 / frequency,
                    end: (k + 1) as f64 / frequency,
                })
                .collect(),
        }
    }

    /// Gauge level (kPa) and rate (kPa/s) at `t`.
    pub fn gauge_at(&self, t: f64) -> Result<(f64, f64)> {
        let duration = self.duration();
        if t.is_nan() || t < 0.0 || t > duration + 1e-9 {
            return Err(Error::EndOfScenario { t, duration });
        }
        match self {
            Reference::MultiStep { stages } => {
                let mut end = 0.0;
                for s in stages {
                    end += s.hold;
                    if t < end {
                        return Ok((s.level, 0.0));
                    }
                }
                Ok((stages.last().map_or(0.0, |s| s.level), 0.0))
            }
            Reference::Sinusoid {
                amplitude,
                frequency,
                ..
            } => {
                let w = 2.0 * PI * frequency;
                Ok((amplitude * (w * t).sin(), amplitude * w * (w * t).cos()))
            }
        }
    }
}

/// Absolute reference pressure (Pa) and its rate (Pa/s).
pub fn reference_at(reference: &Reference, t: f64, plant: &PlantParams) -> Result<(f64, f64)> {
    let (level, rate) = reference.gauge_at(t)?;
    Ok((plant.from_gauge_kpa(level), rate * 1000.0))
}
