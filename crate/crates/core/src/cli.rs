//! Command-line bindings: scenario runs, controller comparisons,
//! identification from trace directories and protocol synthesis.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::control::{PidConfig, SmcConfig, SupervisorConfig};
use crate::error::{Error, Result};
use crate::experiment::{
    compute_metrics, run_scenario, Controller, MetricsReport, PidController, Reference,
    SmcController, TimingConfig, WindowPolicy,
};
use crate::mpc::{MiNmpcController, MpcConfig, NmpcController};
use crate::plant::{LoadModel, Mode, PlantParams};
use crate::sysid::{self, SynthesisConfig};
use crate::valvemap::SpoolMaps;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    DmSmc,
    Pid,
    Nmpc,
    MiNmpc,
}

impl ControllerKind {
    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::DmSmc => "dm-smc",
            ControllerKind::Pid => "pid",
            ControllerKind::Nmpc => "nmpc",
            ControllerKind::MiNmpc => "mi-nmpc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Results land in `<dir>/<scenario name>/`.
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub plant: PlantParams,
    pub maps: SpoolMaps,
    pub load: LoadModel,
    pub controller: ControllerKind,
    /// Hysteresis supervisor shared by every controller that uses one.
    pub supervisor: SupervisorConfig,
    pub smc: SmcConfig,
    pub pid: PidConfig,
    pub mpc: MpcConfig,
    pub reference: Reference,
    pub timing: TimingConfig,
    pub output: OutputConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "multi-step".into(),
            plant: PlantParams::default(),
            maps: SpoolMaps::default(),
            load: LoadModel::Fixed,
            controller: ControllerKind::DmSmc,
            supervisor: SupervisorConfig::default(),
            smc: SmcConfig::default(),
            pid: PidConfig::default(),
            mpc: MpcConfig::default(),
            reference: Reference::multi_step_default(),
            timing: TimingConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty plain file name"));
        }
        self.plant.validate()?;
        self.maps.validate()?;
        self.load.validate()?;
        self.supervisor.validate()?;
        self.smc_config().validate()?;
        self.pid_config().validate()?;
        self.mpc.validate()?;
        self.reference.validate()?;
        self.timing.validate()
    }

    pub fn smc_config(&self) -> SmcConfig {
        SmcConfig {
            supervisor: self.supervisor,
            ..self.smc
        }
    }

    pub fn pid_config(&self) -> PidConfig {
        PidConfig {
            supervisor: self.supervisor,
            ..self.pid
        }
    }

    pub fn build_controller(&self, kind: ControllerKind) -> Box<dyn Controller> {
        let m0 = self.timing.initial_mode;
        match kind {
            ControllerKind::DmSmc => Box::new(SmcController::new(self.smc_config(), m0)),
            ControllerKind::Pid => Box::new(PidController::new(self.pid_config(), m0)),
            ControllerKind::Nmpc => Box::new(NmpcController::new(self.mpc, self.supervisor, m0)),
            ControllerKind::MiNmpc => Box::new(MiNmpcController::new(self.mpc, m0)),
        }
    }

    pub fn scenario_dir(&self) -> PathBuf {
        self.output.dir.join(&self.name)
    }
}

/// Runs one controller on the configured scenario and scores it.
pub fn simulate(
    cfg: &ScenarioConfig,
    kind: ControllerKind,
) -> Result<(crate::experiment::Trajectory, MetricsReport)> {
    let mut ctrl = cfg.build_controller(kind);
    let traj = run_scenario(
        &cfg.reference,
        ctrl.as_mut(),
        &cfg.timing,
        &cfg.plant,
        &cfg.maps,
        &cfg.load,
    )?;
    let metrics = compute_metrics(
        &traj,
        &cfg.reference,
        WindowPolicy::for_reference(&cfg.reference),
    )?;
    Ok((traj, metrics))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `trajectory.csv` and `metrics.json` under the scenario directory
/// and returns the metrics.
pub fn cmd_run(cfg: &ScenarioConfig) -> Result<MetricsReport> {
    let (traj, metrics) = simulate(cfg, cfg.controller)?;
    let dir = cfg.scenario_dir();
    fs::create_dir_all(&dir)?;
    traj.save_csv(&dir.join("trajectory.csv"))?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// Aligned text table, one row per controller.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>9} {:>9} {:>10} {:>10} {:>9} {:>9} {:>11}",
        "controller", "e_ss[kPa]", "AE[kPa]", "ITAE", "PWM-E", "Switches", "max|e|", "CT[ms]"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<10} {:>9.2} {:>9.2} {:>10.2} {:>10.2} {:>9.2} {:>9.2} {:>11.4}",
            r.controller,
            r.e_ss,
            r.ae,
            r.itae,
            r.pwm_e,
            r.switches,
            r.max_abs_e,
            r.ct_mean * 1e3
        );
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: String,
    pub seed: u64,
    pub reports: Vec<MetricsReport>,
}

/// Runs every controller on the shared scenario and seed. Per-controller
/// files go to `<scenario>/<controller>/`, the combined table to
/// `comparison.json` and `comparison.txt`.
pub fn cmd_compare(cfg: &ScenarioConfig, controllers: &[ControllerKind]) -> Result<Comparison> {
    if controllers.len() < 2 {
        return Err(Error::config(
            "controllers",
            "compare needs at least two controllers",
        ));
    }
    let dir = cfg.scenario_dir();
    let mut reports = Vec::with_capacity(controllers.len());
    for &kind in controllers {
        let (traj, metrics) = simulate(cfg, kind)?;
        let sub = dir.join(kind.label());
        fs::create_dir_all(&sub)?;
        traj.save_csv(&sub.join("trajectory.csv"))?;
        write_json(&sub.join("metrics.json"), &metrics)?;
        reports.push(metrics);
    }
    let cmp = Comparison {
        scenario: cfg.name.clone(),
        seed: cfg.timing.seed,
        reports,
    };
    write_json(&dir.join("comparison.json"), &cmp)?;
    fs::write(dir.join("comparison.txt"), comparison_table(&cmp.reports))?;
    Ok(cmp)
}

/// Plant and spool maps for identification and synthesis.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsConfig {
    pub plant: PlantParams,
    pub maps: SpoolMaps,
    pub synthesis: SynthesisConfig,
}

impl ParamsConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let cfg: ParamsConfig =
            serde_json::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.plant.validate()?;
        cfg.maps.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SysidReport {
    pub mode: Mode,
    pub conductances: Vec<NamedResult>,
    pub pairs: Vec<sysid::CalibrationPair>,
    pub map: crate::valvemap::SpoolMap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedResult {
    pub name: sysid::Conductance,
    #[serde(flatten)]
    pub result: sysid::IdResult,
}

pub fn cmd_sysid(traces_dir: &Path, mode: Mode, params: &ParamsConfig) -> Result<SysidReport> {
    let traces = sysid::read_trace_dir(traces_dir)?;
    let (lo, hi) = {
        let m = params.maps.get(mode);
        (m.u_min(), m.u_max())
    };
    let id = sysid::identify(&traces, mode, &params.plant, (lo, hi))?;
    let (leak, source) = match mode {
        Mode::Inflation => (sysid::Conductance::COa, sysid::Conductance::CPo),
        Mode::Deflation => (sysid::Conductance::CAo, sysid::Conductance::COn),
    };
    Ok(SysidReport {
        mode,
        conductances: vec![
            NamedResult {
                name: leak,
                result: id.leak,
            },
            NamedResult {
                name: source,
                result: id.source,
            },
        ],
        pairs: id.pairs,
        map: id.map,
    })
}

/// Writes the calibration protocol for both modes into `out`.
pub fn cmd_synthesize(params: &ParamsConfig, out: &Path) -> Result<usize> {
    let mut n = 0;
    for mode in [Mode::Inflation, Mode::Deflation] {
        let traces = sysid::synthesize_protocol(
            mode,
            &params.plant,
            params.maps.get(mode),
            &params.synthesis,
        )?;
        sysid::write_protocol(out, &traces)?;
        n += traces.len();
    }
    Ok(n)
}

#[derive(Debug, Parser)]
#[command(
    name = "bipneu",
    version,
    about = "Bipolar pneumatic channel simulation, control and identification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Inflation,
    Deflation,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Inflation => Mode::Inflation,
            ModeArg::Deflation => Mode::Deflation,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write its trajectory and metrics.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several controllers on the same scenario and tabulate them.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        controllers: Vec<ControllerKind>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Identify conductances and the spool map from a trace directory.
    Sysid {
        traces: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Plant parameters held fixed during identification.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path; defaults to `sysid_<mode>.json` in the trace directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate calibration traces for both modes from known parameters.
    Synthesize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the default scenario configuration.
    Defaults {
        /// Print the identification/synthesis parameters instead.
        #[arg(long)]
        params: bool,
    },
}

fn scenario_from(
    config: Option<&Path>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<ScenarioConfig> {
    let mut cfg = match config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(o) = out {
        cfg.output.dir = o;
    }
    if let Some(s) = seed {
        cfg.timing.seed = s;
    }
    Ok(cfg)
}

/// Exit status for an error: 2 configuration, 3 data, 4 solver.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig { .. } => 2,
        Error::BadData(_)
        | Error::Calibration(_)
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_) => 3,
        Error::Solver(_)
        | Error::NonFinite { .. }
        | Error::OutOfRange { .. }
        | Error::EndOfScenario { .. } => 4,
    }
}

/// Runs one command; its report text is appended to `stdout`.
fn execute(cli: Cli, stdout: &mut String) -> Result<()> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let cfg = scenario_from(config.as_deref(), out, seed)?;
            let m = cmd_run(&cfg)?;
            let _ = writeln!(
                stdout,
                "{} {}: AE {:.3} kPa, e_ss {:.3} kPa, ITAE {:.2}, PWM-E {:.1}, switches {:.2}, CT {:.4} ms -> {}",
                cfg.name,
                m.controller,
                m.ae,
                m.e_ss,
                m.itae,
                m.pwm_e,
                m.switches,
                m.ct_mean * 1e3,
                cfg.scenario_dir().display()
            );
        }
        Command::Compare {
            config,
            controllers,
            out,
            seed,
        } => {
            let cfg = scenario_from(config.as_deref(), out, seed)?;
            let cmp = cmd_compare(&cfg, &controllers)?;
            stdout.push_str(&comparison_table(&cmp.reports));
        }
        Command::Sysid {
            traces,
            mode,
            config,
            out,
        } => {
            let params = match config {
                Some(p) => ParamsConfig::load(&p)?,
                None => ParamsConfig::default(),
            };
            let mode: Mode = mode.into();
            let report = cmd_sysid(&traces, mode, &params)?;
            for c in &report.conductances {
                let _ = writeln!(
                    stdout,
                    "{:?}: {:.4e} m^3/(s*Pa), residual {:.1} Pa, {} evaluations",
                    c.name, c.result.value, c.result.residual, c.result.iterations
                );
            }
            let a = report.map.coefficients();
            let _ = writeln!(
                stdout,
                "spool map: a = [{:.4e}, {:.4e}, {:.4e}, {:.4e}] from {} segments",
                a[0],
                a[1],
                a[2],
                a[3],
                report.pairs.len()
            );
            let path = out.unwrap_or_else(|| {
                traces.join(format!(
                    "sysid_{}.json",
                    if mode == Mode::Inflation {
                        "inflation"
                    } else {
                        "deflation"
                    }
                ))
            });
            write_json(&path, &report)?;
        }
        Command::Synthesize { config, out, seed } => {
            let mut params = match config {
                Some(p) => ParamsConfig::load(&p)?,
                None => ParamsConfig::default(),
            };
            if let Some(s) = seed {
                params.synthesis.seed = s;
            }
            let n = cmd_synthesize(&params, &out)?;
            let _ = writeln!(stdout, "wrote {n} traces to {}", out.display());
        }
        Command::Defaults { params } => {
            let text = if params {
                serde_json::to_string_pretty(&ParamsConfig::default())?
            } else {
                serde_json::to_string_pretty(&ScenarioConfig::default())?
            };
            let _ = writeln!(stdout, "{text}");
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut stdout = String::new();
    let result = execute(cli, &mut stdout);
    // a closed pipe on the reader side is not an error of ours
    let _ = std::io::stdout().write_all(stdout.as_bytes());
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
