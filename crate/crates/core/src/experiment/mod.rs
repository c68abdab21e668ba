//! References, closed-loop scenarios and benchmark metrics.

pub mod metrics;
pub mod reference;
pub mod scenario;

pub use metrics::{compute_metrics, metrics_over, MetricsReport, WindowMetrics, WindowPolicy};
pub use reference::{reference_at, Reference, Stage, Window};
pub use scenario::{
    run_scenario, Command, Controller, Observation, PidController, SmcController, TickRecord,
    TimingConfig, Trajectory,
};
