//! Switched electro-pneumatic channel: plant model, spool maps, dual-mode
//! sliding-mode control, PID and predictive baselines, identification from
//! step traces, and a closed-loop benchmark harness.

pub mod cli;
pub mod control;
pub mod error;
pub mod experiment;
pub mod mpc;
pub mod plant;
pub mod sysid;
pub mod valvemap;

pub use error::{Error, Result};
pub use plant::{LoadModel, Mode, PlantParams, PlantState};
pub use valvemap::{SpoolMap, SpoolMaps};
