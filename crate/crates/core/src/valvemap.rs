//! Static map from PWM duty (%) to the averaged spool fraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::Mode;

/// Largest tolerated drop of the raw cubic below its running maximum on the
/// calibrated range. The calibrated cubics turn over slightly near full
/// duty; anything deeper is treated as a failed calibration.
pub const MONOTONE_TOLERANCE: f64 = 0.02;

pub const INFLATION_COEFFS: [f64; 4] = [-1.48, 8.96e-2, -1.09e-3, 4.38e-6];
pub const DEFLATION_COEFFS: [f64; 4] = [-2.27, 1.25e-1, -1.62e-3, 6.95e-6];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpoolMapRepr {
    /// `a[k]` multiplies `u^k`, duty in percent.
    a: [f64; 4],
    u_min: f64,
    u_max: f64,
    mode: Mode,
}

/// Calibrated cubic `x(u) = a0 + a1 u + a2 u² + a3 u³` clipped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpoolMapRepr", into = "SpoolMapRepr")]
pub struct SpoolMap {
    a: [f64; 4],
    u_min: f64,
    u_max: f64,
    mode: Mode,
    /// Interior local maximum `(u, raw)` when the cubic turns over inside the range.
    peak: Option<(f64, f64)>,
}

impl TryFrom<SpoolMapRepr> for SpoolMap {
    type Error = Error;
    fn try_from(r: SpoolMapRepr) -> Result<Self> {
        SpoolMap::new(r.a, r.u_min, r.u_max, r.mode)
    }
}

impl From<SpoolMap> for SpoolMapRepr {
    fn from(m: SpoolMap) -> Self {
        SpoolMapRepr {
            a: m.a,
            u_min: m.u_min,
            u_max: m.u_max,
            mode: m.mode,
        }
    }
}

impl SpoolMap {
    pub fn new(a: [f64; 4], u_min: f64, u_max: f64, mode: Mode) -> Result<Self> {
        if a.iter().any(|c| !c.is_finite()) {
            return Err(Error::Calibration("non-finite coefficient".into()));
        }
        if !(0.0 <= u_min && u_min < u_max && u_max <= 100.0) {
            return Err(Error::config(
                "maps.u_min",
                format!("duty range [{u_min}, {u_max}] must satisfy 0 <= u_min < u_max <= 100"),
            ));
        }
        let mut map = SpoolMap {
            a,
            u_min,
            u_max,
            mode,
            peak: None,
        };
        map.peak = map.interior_peak();
        let lo = map.raw(u_min);
        let hi = map.raw(u_max);
        if hi.is_nan() || lo.is_nan() || hi <= lo {
            return Err(Error::Calibration(format!(
                "cubic does not increase over [{u_min}, {u_max}]: {lo:.4} -> {hi:.4}"
            )));
        }
        if map.slope(u_min) < 0.0 {
            return Err(Error::Calibration(format!(
                "cubic decreasing at u_min = {u_min}"
            )));
        }
        let dip = map.max_dip();
        if dip > MONOTONE_TOLERANCE {
            return Err(Error::Calibration(format!(
                "cubic falls {dip:.4} below its running maximum on [{u_min}, {u_max}]"
            )));
        }
        Ok(map)
    }

    pub fn inflation_default() -> Self {
        Self::new(INFLATION_COEFFS, 20.0, 100.0, Mode::Inflation).expect("tabulated inflation map")
    }

    pub fn deflation_default() -> Self {
        Self::new(DEFLATION_COEFFS, 20.0, 100.0, Mode::Deflation).expect("tabulated deflation map")
    }

    pub fn coefficients(&self) -> [f64; 4] {
        self.a
    }

    pub fn u_min(&self) -> f64 {
        self.u_min
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Unclipped cubic.
    pub fn raw(&self, u: f64) -> f64 {
        let [a0, a1, a2, a3] = self.a;
        ((a3 * u + a2) * u + a1) * u + a0
    }

    fn slope(&self, u: f64) -> f64 {
        let [_, a1, a2, a3] = self.a;
        (3.0 * a3 * u + 2.0 * a2) * u + a1
    }

    /// Stationary points of the cubic inside the open calibrated range, ascending.
    fn stationary_points(&self) -> Vec<f64> {
        let [_, a1, a2, a3] = self.a;
        let (qa, qb, qc) = (3.0 * a3, 2.0 * a2, a1);
        let mut roots = Vec::with_capacity(2);
        if qa.abs() < 1e-300 {
            if qb.abs() > 1e-300 {
                roots.push(-qc / qb);
            }
        } else {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                roots.push((-qb - sq) / (2.0 * qa));
                roots.push((-qb + sq) / (2.0 * qa));
            }
        }
        roots.retain(|r| *r > self.u_min && *r < self.u_max);
        roots.sort_by(f64::total_cmp);
        roots
    }

    fn interior_peak(&self) -> Option<(f64, f64)> {
        let [_, _, a2, a3] = self.a;
        self.stationary_points()
            .into_iter()
            .find(|&u| 6.0 * a3 * u + 2.0 * a2 < 0.0)
            .map(|u| (u, self.raw(u)))
    }

    /// Depth of the worst drop of the raw cubic below its running maximum.
    pub fn max_dip(&self) -> f64 {
        let Some((_, peak)) = self.peak else {
            return 0.0;
        };
        let mut lowest = self.raw(self.u_max);
        for u in self.stationary_points() {
            lowest = lowest.min(self.raw(u));
        }
        (peak - lowest).max(0.0)
    }

    /// Running maximum of the raw cubic from `u_min`; non-decreasing.
    fn envelope(&self, u: f64) -> f64 {
        match self.peak {
            Some((u_peak, x_peak)) if u > u_peak => self.raw(u).max(x_peak),
            _ => self.raw(u),
        }
    }

    /// Spool fraction for duty `u` (%), clipped to `[0, 1]`.
    pub fn eval(&self, u: f64) -> f64 {
        self.raw(u).clamp(0.0, 1.0)
    }

    /// Smallest duty in `[u_min, u_max]` whose spool fraction reaches `x`.
    /// Saturates at the range ends when `x` is not attainable.
    pub fn invert(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        if x <= self.envelope(self.u_min).clamp(0.0, 1.0) {
            return self.u_min;
        }
        if x > self.envelope(self.u_max) {
            return self.u_max;
        }
        let (mut lo, mut hi) = (self.u_min, self.u_max);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.envelope(mid) >= x {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        hi
    }
}

pub fn eval_spool(u: f64, map: &SpoolMap) -> f64 {
    map.eval(u)
}

pub fn invert_spool(x: f64, map: &SpoolMap) -> f64 {
    map.invert(x)
}

/// One calibrated map per mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpoolMaps {
    pub inflation: SpoolMap,
    pub deflation: SpoolMap,
}

impl Default for SpoolMaps {
    fn default() -> Self {
        Self {
            inflation: SpoolMap::inflation_default(),
            deflation: SpoolMap::deflation_default(),
        }
    }
}

impl SpoolMaps {
    pub fn get(&self, m: Mode) -> &SpoolMap {
        match m {
            Mode::Inflation => &self.inflation,
            Mode::Deflation => &self.deflation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inflation.mode() != Mode::Inflation {
            return Err(Error::config(
                "maps.inflation.mode",
                "must be \"inflation\"",
            ));
        }
        if self.deflation.mode() != Mode::Deflation {
            return Err(Error::config(
                "maps.deflation.mode",
                "must be \"deflation\"",
            ));
        }
        Ok(())
    }
}
