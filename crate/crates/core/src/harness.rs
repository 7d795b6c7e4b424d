//! Experiment runner: run configuration, the closed loop on the simulated
//! testbench, the tracking and modulation scenarios, and their outputs.
//!
//! Precedence of settings: built-in defaults, then the TOML run
//! configuration, then command-line flags. The top-level `seed` drives every
//! random stream (sensor, phantom, identification input, BO), and the
//! top-level `bpm` overrides `phantom.bpm`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bo::{self, BoConfig, BoError, BoRun, PeriodOutcome, PeriodRunner, PlantObjective};
use crate::metrics::{
    modulation_report, tracking_report, MetricsError, ModulationReport, TrackingReport,
};
use crate::model::{
    augment, identify_lti_with, AugmentedModel, Constraints, IdentOptions, Identification,
    LtiModel, ModelError, MIN_IDENT_SAMPLES,
};
use crate::mpc::{
    pid_step, ControllerKind, MpcConfig, MpcController, MpcError, MpcVariant, PidConfig, PidState,
    WarmStartStats,
};
use crate::observer::{
    observer_step, place_observer_poles, DisturbanceMemory, ObserverError, ObserverGain,
    ObserverState, PoleSpec,
};
use crate::qpsolver::QpStatus;
use crate::refgen::{
    build_reference, check_feasible, PulseGate, RefError, ReferenceParams, ReferenceShape,
    ReferenceTrajectory,
};
use crate::simbench::{
    BeatClock, PhantomConfig, SensorConfig, SimError, Testbench, TruthPlantParams, TruthPlantState,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("identification: {0}")]
    Model(#[from] ModelError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("observer: {0}")]
    Observer(#[from] ObserverError),
    #[error("controller: {0}")]
    Controller(#[from] MpcError),
    #[error("reference: {0}")]
    Reference(#[from] RefError),
    #[error("optimization: {0}")]
    Optimization(#[from] BoError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("safety: {0}")]
    Safety(String),
}

impl HarnessError {
    /// Machine-readable category printed by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Io(_) => "io",
            HarnessError::Model(_) => "identification",
            HarnessError::Sim(_) => "simulation",
            HarnessError::Observer(_) => "observer",
            HarnessError::Controller(_) => "controller",
            HarnessError::Reference(_) => "reference",
            HarnessError::Optimization(_) => "optimization",
            HarnessError::Metrics(_) => "metrics",
            HarnessError::Safety(_) => "safety",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Io(_) => 3,
            HarnessError::Model(_) => 4,
            HarnessError::Sim(_) => 5,
            HarnessError::Observer(_) => 6,
            HarnessError::Controller(_) => 7,
            HarnessError::Reference(_) => 8,
            HarnessError::Optimization(_) => 9,
            HarnessError::Metrics(_) => 10,
            HarnessError::Safety(_) => 11,
        }
    }
}

fn io_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Tracking,
    Modulation,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Tracking => "tracking",
            Scenario::Modulation => "modulation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingConfig {
    pub delay_s: f64,
    pub magnitude_mm: f64,
    pub periods: usize,
    /// Leading periods left out of the metrics.
    pub excluded_periods: usize,
    /// Constant offset added to the position sensor [mm].
    pub output_offset_mm: f64,
    pub controllers: Vec<ControllerKind>,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            delay_s: 0.1,
            magnitude_mm: 0.5,
            periods: 10,
            excluded_periods: 1,
            output_offset_mm: 0.0,
            controllers: ControllerKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModulationConfig {
    /// Periods at the baseline reference before anything is recorded.
    pub warmup_periods: usize,
    pub baseline_periods: usize,
    pub final_periods: usize,
    /// `p_amp_ref` is this multiple of the measured baseline amplitude.
    pub target_amplification: f64,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            warmup_periods: 3,
            baseline_periods: 10,
            final_periods: 10,
            target_amplification: 2.0,
        }
    }
}

/// Open-loop excitation used to identify the motor model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentConfig {
    pub samples: usize,
    /// Mean input [A]; moves the excitation towards mid-travel.
    pub bias_a: f64,
    /// PRBS level around the bias [A].
    pub amplitude_a: f64,
    pub min_hold: usize,
    pub max_hold: usize,
}

impl Default for IdentConfig {
    fn default() -> Self {
        Self {
            samples: 3000,
            bias_a: 0.65,
            amplitude_a: 0.5,
            min_hold: 2,
            max_hold: 10,
        }
    }
}

/// Observer poles of the experiments. With the disturbance pole at 0.8 the
/// period-to-period disturbance learning diverges on the truth plant.
pub const DEFAULT_LOOP_POLES: [f64; 3] = [0.5, 0.55, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub bpm: f64,
    /// Sampling period [s].
    pub dt: f64,
    pub seed: u64,
    /// Controller of the modulation scenario.
    pub controller: ControllerKind,
    pub out_dir: PathBuf,
    pub plant: TruthPlantParams,
    pub phantom: PhantomConfig,
    pub sensor: SensorConfig,
    pub mpc: MpcConfig,
    pub pid: PidConfig,
    pub observer: PoleSpec,
    pub shape: ReferenceShape,
    pub bo: BoConfig,
    pub tracking: TrackingConfig,
    pub modulation: ModulationConfig,
    pub identification: IdentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Tracking,
            bpm: 60.0,
            dt: 0.01,
            seed: 0,
            controller: ControllerKind::MpcOffsetFree,
            out_dir: PathBuf::from("runs"),
            plant: TruthPlantParams::default(),
            phantom: PhantomConfig::default(),
            sensor: SensorConfig::default(),
            mpc: MpcConfig::default(),
            pid: PidConfig::default(),
            observer: PoleSpec::real(DEFAULT_LOOP_POLES),
            shape: ReferenceShape::default(),
            bo: BoConfig::default(),
            tracking: TrackingConfig::default(),
            modulation: ModulationConfig::default(),
            identification: IdentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn tracking() -> Self {
        Self::default()
    }

    pub fn modulation(bpm: f64) -> Self {
        Self {
            scenario: Scenario::Modulation,
            bpm,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn clock(&self) -> Result<BeatClock, HarnessError> {
        Ok(BeatClock::new(self.bpm, self.dt)?)
    }

    /// Phantom settings with the run's heart rate and seed applied.
    pub fn effective_phantom(&self) -> PhantomConfig {
        PhantomConfig {
            bpm: self.bpm,
            seed: self.seed.wrapping_add(1),
            ..self.phantom
        }
    }

    pub fn effective_sensor(&self) -> SensorConfig {
        SensorConfig {
            seed: self.seed,
            ..self.sensor
        }
    }

    pub fn effective_bo(&self) -> BoConfig {
        BoConfig {
            seed: self.seed,
            ..self.bo
        }
    }

    fn ident_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn tracking_theta(&self) -> ReferenceParams {
        ReferenceParams::new(self.tracking.delay_s, self.tracking.magnitude_mm)
    }

    /// Checks every sub-configuration before any simulation runs.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |m: String| Err(HarnessError::Config(m));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return cfg(format!("dt = {}", self.dt));
        }
        let clock = self
            .clock()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.effective_phantom()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.sensor.position_noise_mm >= 0.0 && self.sensor.output_offset_mm.is_finite()) {
            return cfg("sensor noise must be nonnegative".into());
        }
        let c = &self.mpc.constraints;
        c.validate(self.shape.baseline)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.mpc
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.pid
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.shape
            .validate(&self.bo.bounds)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.bo
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let id = &self.identification;
        if id.samples < MIN_IDENT_SAMPLES || id.min_hold == 0 || id.min_hold > id.max_hold {
            return cfg(format!("identification settings {id:?}"));
        }
        let levels = [id.bias_a + id.amplitude_a, id.bias_a - id.amplitude_a];
        if !(id.amplitude_a > 0.0 && levels.iter().all(|&u| c.input.contains(u))) {
            return cfg(format!(
                "identification levels {levels:?} A outside the input bounds"
            ));
        }
        match self.scenario {
            Scenario::Tracking => {
                let t = &self.tracking;
                if t.controllers.is_empty() {
                    return cfg("tracking needs at least one controller".into());
                }
                if t.periods <= t.excluded_periods {
                    return cfg("tracking.periods must exceed tracking.excluded_periods".into());
                }
                let f = check_feasible(&self.tracking_theta(), &self.shape, c, &clock);
                if !f.feasible {
                    return cfg(format!("tracking reference infeasible: {:?}", f.violation));
                }
            }
            Scenario::Modulation => {
                if self.controller != ControllerKind::MpcOffsetFree {
                    return cfg("the modulation scenario runs the offset-free MPC only".into());
                }
                let m = &self.modulation;
                if m.baseline_periods < 3 || m.final_periods < 3 {
                    return cfg("baseline and final runs need at least 3 periods".into());
                }
                if !(m.target_amplification.is_finite() && m.target_amplification > 0.0) {
                    return cfg("target_amplification must be positive".into());
                }
            }
        }
        Ok(())
    }
}

/// One logged control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub time_s: f64,
    pub phase: usize,
    pub u: f64,
    pub y: f64,
    pub p: f64,
    pub trigger: bool,
    pub r: f64,
    pub dhat: f64,
    pub position: f64,
    pub velocity: f64,
    pub pulse_active: bool,
    pub qp_iterations: usize,
    pub slack: f64,
    pub fallback: bool,
}

pub const TRACE_COLUMNS: [&str; 15] = [
    "step",
    "time_s",
    "phase",
    "u_A",
    "y_mm",
    "p_mmHg",
    "trigger",
    "r_mm",
    "dhat_mm",
    "position_mm",
    "velocity_mm_s",
    "pulse_active",
    "qp_iterations",
    "slack_mm",
    "fallback",
];

pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(TRACE_COLUMNS).map_err(io_err)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            format!("{:.2}", r.time_s),
            r.phase.to_string(),
            format!("{:.9e}", r.u),
            format!("{:.9e}", r.y),
            format!("{:.9e}", r.p),
            (r.trigger as u8).to_string(),
            format!("{:.9e}", r.r),
            format!("{:.9e}", r.dhat),
            format!("{:.9e}", r.position),
            format!("{:.9e}", r.velocity),
            (r.pulse_active as u8).to_string(),
            r.qp_iterations.to_string(),
            format!("{:.9e}", r.slack),
            (r.fallback as u8).to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Realized input-bound violations and hard position-bound violations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct BoundCheck {
    pub input_violations: usize,
    pub position_violations: usize,
}

impl BoundCheck {
    pub fn is_clean(&self) -> bool {
        self.input_violations == 0 && self.position_violations == 0
    }
}

pub fn check_bounds(rows: &[TraceRow], constraints: &Constraints) -> BoundCheck {
    BoundCheck {
        input_violations: rows
            .iter()
            .filter(|r| !constraints.input.contains(r.u))
            .count(),
        position_violations: rows
            .iter()
            .filter(|r| !constraints.position.contains(r.position))
            .count(),
    }
}

fn assert_bounds(
    label: &str,
    rows: &[TraceRow],
    constraints: &Constraints,
) -> Result<BoundCheck, HarnessError> {
    let check = check_bounds(rows, constraints);
    if check.is_clean() {
        Ok(check)
    } else {
        Err(HarnessError::Safety(format!(
            "{label}: {} input-bound and {} position-bound violations in the trace",
            check.input_violations, check.position_violations
        )))
    }
}

/// Realized state-constraint violation: position touching or beyond the
/// travel limits, or velocity outside its bounds.
fn is_safety_event(state: &TruthPlantState, c: &Constraints) -> bool {
    let inside = state.position > c.position.lo && state.position < c.position.hi;
    !inside || !c.velocity.contains(state.velocity)
}

/// Open-loop PRBS experiment on the testbench; fits the model in
/// coordinates relative to the reference baseline and drops the offset.
pub fn identify_plant(cfg: &RunConfig) -> Result<Identification, HarnessError> {
    let id = cfg.identification;
    let origin = cfg.shape.baseline;
    let mut bench = Testbench::new(
        cfg.plant,
        cfg.effective_phantom(),
        cfg.effective_sensor(),
        cfg.dt,
        origin,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.ident_seed());
    let (mut us, mut ys) = (
        Vec::with_capacity(id.samples),
        Vec::with_capacity(id.samples),
    );
    let (mut level, mut hold) = (0.0, 0);
    for _ in 0..id.samples {
        if hold == 0 {
            level = id.bias_a
                + if rng.random_bool(0.5) {
                    id.amplitude_a
                } else {
                    -id.amplitude_a
                };
            hold = rng.random_range(id.min_hold..=id.max_hold);
        }
        hold -= 1;
        let m = bench.measure()?;
        us.push(level);
        ys.push(m.y - origin);
        bench.apply(level)?;
    }
    let ident = identify_lti_with(&us, &ys, cfg.dt, IdentOptions { intercept: true })?;
    log::info!(
        "identified model: a = {:?}, b = {:?}, offset {:.4e}, residual {:.3e}",
        ident.model.a,
        ident.model.b,
        ident.offset,
        ident.residual_rms
    );
    Ok(ident)
}

#[derive(Debug, Clone)]
enum Controller {
    Pid { cfg: PidConfig, state: PidState },
    Mpc(Box<MpcController>),
}

/// Testbench, observer, disturbance memory and controller stepped together.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    bench: Testbench,
    controller: Controller,
    kind: ControllerKind,
    aug: AugmentedModel,
    gain: ObserverGain,
    est: ObserverState,
    mem: DisturbanceMemory,
    traj: ReferenceTrajectory,
    gate: PulseGate,
    shape: ReferenceShape,
    constraints: Constraints,
    origin: f64,
    dt: f64,
    rows: Vec<TraceRow>,
}

impl ClosedLoop {
    pub fn new(
        cfg: &RunConfig,
        model: &LtiModel,
        kind: ControllerKind,
        traj: ReferenceTrajectory,
    ) -> Result<Self, HarnessError> {
        let origin = cfg.shape.baseline;
        let bench = Testbench::new(
            cfg.plant,
            cfg.effective_phantom(),
            cfg.effective_sensor(),
            cfg.dt,
            origin,
        )?;
        let t = bench.clock().period();
        if traj.period() != t {
            return Err(HarnessError::Config(format!(
                "reference period {} does not match the heartbeat period {t}",
                traj.period()
            )));
        }
        let aug = augment(model);
        let gain = place_observer_poles(&aug, &cfg.observer.poles())?;
        let controller = match kind {
            ControllerKind::Pid => Controller::Pid {
                cfg: cfg.pid,
                state: PidState::default(),
            },
            ControllerKind::Mpc => Controller::Mpc(Box::new(MpcController::new(
                *model,
                cfg.mpc,
                MpcVariant::Plain,
                origin,
            )?)),
            ControllerKind::MpcOffsetFree => Controller::Mpc(Box::new(MpcController::new(
                *model,
                cfg.mpc,
                MpcVariant::OffsetFree,
                origin,
            )?)),
        };
        Ok(Self {
            bench,
            controller,
            kind,
            aug,
            gain,
            est: ObserverState::default(),
            mem: DisturbanceMemory::new(t),
            traj,
            gate: PulseGate::new(&cfg.shape, cfg.dt),
            shape: cfg.shape,
            constraints: cfg.mpc.constraints,
            origin,
            dt: cfg.dt,
            rows: Vec::new(),
        })
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn period(&self) -> usize {
        self.bench.clock().period()
    }

    pub fn bench_mut(&mut self) -> &mut Testbench {
        &mut self.bench
    }

    pub fn memory(&self) -> &DisturbanceMemory {
        &self.mem
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn trajectory(&self) -> &ReferenceTrajectory {
        &self.traj
    }

    pub fn fallback_count(&self) -> usize {
        match &self.controller {
            Controller::Mpc(c) => c.fallback_count(),
            Controller::Pid { .. } => 0,
        }
    }

    pub fn warm_start_stats(&self) -> Option<WarmStartStats> {
        match &self.controller {
            Controller::Mpc(c) => Some(c.warm_start_stats()),
            Controller::Pid { .. } => None,
        }
    }

    /// Swaps the reference; only allowed at a period boundary.
    pub fn set_trajectory(&mut self, traj: ReferenceTrajectory) -> Result<(), HarnessError> {
        if self.bench.clock().phase() != 0 || traj.period() != self.period() {
            return Err(HarnessError::Config(
                "the reference may only change at a period boundary".into(),
            ));
        }
        self.traj = traj;
        Ok(())
    }

    pub fn step(&mut self) -> Result<TraceRow, HarnessError> {
        let m = self.bench.measure()?;
        self.gate.step(m.trigger);
        let r = self.traj.at(m.phase);
        let (u, qp_iterations, slack, fallback) = match &mut self.controller {
            Controller::Pid { cfg, state } => {
                (pid_step(state, cfg, r, m.y, self.dt), 0, 0.0, false)
            }
            Controller::Mpc(c) => {
                let out = c.step(&self.est, &self.mem, &self.traj, m.phase)?;
                if out.status == QpStatus::MaxIterations {
                    log::debug!("step {}: QP stopped at the iteration limit", m.step);
                }
                (out.u, out.iterations, out.slack, out.fallback)
            }
        };
        self.est = observer_step(&self.est, &self.gain, &self.aug, u, m.y - self.origin)?;
        self.mem.record(self.est.dhat);
        self.bench.apply(u)?;
        let row = TraceRow {
            step: m.step,
            time_s: m.step as f64 * self.dt,
            phase: m.phase,
            u,
            y: m.y,
            p: m.p,
            trigger: m.trigger,
            r,
            dhat: self.est.dhat,
            position: m.truth.position,
            velocity: m.truth.velocity,
            pulse_active: self.gate.active(),
            qp_iterations,
            slack,
            fallback,
        };
        self.rows.push(row);
        Ok(row)
    }

    pub fn run_periods(&mut self, periods: usize) -> Result<(), HarnessError> {
        for _ in 0..periods * self.period() {
            self.step()?;
        }
        Ok(())
    }

    fn clock(&self) -> Result<BeatClock, HarnessError> {
        Ok(BeatClock::with_period(self.period(), self.dt)?)
    }

    fn run_one_period(&mut self, settle_epsilon: f64) -> Result<PeriodOutcome, HarnessError> {
        let t = self.period();
        let mut pressures = Vec::with_capacity(t);
        let mut safety_events = 0;
        for _ in 0..t {
            let row = self.step()?;
            pressures.push(row.p);
            let state = self.bench.state();
            if is_safety_event(&state, &self.constraints) {
                safety_events += 1;
            }
        }
        Ok(PeriodOutcome {
            pressures,
            settled: self.mem.settled(settle_epsilon).unwrap_or(false),
            safety_events,
            time_s: self.rows.len() as f64 * self.dt,
        })
    }
}

impl PeriodRunner for ClosedLoop {
    fn feasible(&self, theta: &ReferenceParams) -> bool {
        self.clock()
            .map(|clock| check_feasible(theta, &self.shape, &self.constraints, &clock).feasible)
            .unwrap_or(false)
    }

    fn set_reference(&mut self, theta: &ReferenceParams) -> Result<(), BoError> {
        let clock = self.clock().map_err(|e| BoError::Loop(e.to_string()))?;
        let traj = build_reference(theta, &self.shape, &clock)
            .map_err(|e| BoError::Loop(e.to_string()))?;
        self.set_trajectory(traj)
            .map_err(|e| BoError::Loop(e.to_string()))
    }

    fn run_period(&mut self, settle_epsilon: f64) -> Result<PeriodOutcome, BoError> {
        self.run_one_period(settle_epsilon)
            .map_err(|e| BoError::Loop(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct ControllerRun {
    pub kind: ControllerKind,
    pub report: TrackingReport,
    pub rows: Vec<TraceRow>,
    pub bounds: BoundCheck,
    pub fallbacks: usize,
    /// `None` for PID.
    pub warm_start: Option<WarmStartStats>,
}

#[derive(Debug, Clone)]
pub struct TrackingOutcome {
    pub identification: Identification,
    pub reference: ReferenceTrajectory,
    pub runs: Vec<ControllerRun>,
}

impl TrackingOutcome {
    pub fn run(&self, kind: ControllerKind) -> Option<&ControllerRun> {
        self.runs.iter().find(|r| r.kind == kind)
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("controller,nrmse_percent,mate_mm,samples,input_violations,position_violations,fallbacks\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{},{},{},{}",
                r.kind.as_str(),
                r.report.nrmse,
                r.report.mate,
                r.report.samples,
                r.bounds.input_violations,
                r.bounds.position_violations,
                r.fallbacks
            );
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<18} {:>10} {:>10}\n",
            "Controller", "NRMSE [%]", "MATE [mm]"
        );
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{:<18} {:>10.1} {:>10.3}",
                r.kind.as_str(),
                r.report.nrmse,
                r.report.mate
            );
        }
        s
    }
}

/// Runs every configured controller on the same pulse reference and seeds.
pub fn run_tracking(cfg: &RunConfig) -> Result<TrackingOutcome, HarnessError> {
    cfg.validate()?;
    let identification = identify_plant(cfg)?;
    let clock = cfg.clock()?;
    let reference = build_reference(&cfg.tracking_theta(), &cfg.shape, &clock)?;
    let t = clock.period();
    let mut runs = Vec::with_capacity(cfg.tracking.controllers.len());
    for &kind in &cfg.tracking.controllers {
        let mut lp = ClosedLoop::new(cfg, &identification.model, kind, reference.clone())?;
        lp.bench_mut()
            .set_output_offset(cfg.tracking.output_offset_mm);
        lp.run_periods(cfg.tracking.periods)?;
        let rows = lp.rows().to_vec();
        let bounds = assert_bounds(kind.as_str(), &rows, &cfg.mpc.constraints)?;
        let scored = &rows[cfg.tracking.excluded_periods * t..];
        let r: Vec<f64> = scored.iter().map(|row| row.r).collect();
        let y: Vec<f64> = scored.iter().map(|row| row.y).collect();
        let report = tracking_report(&r, &y)?;
        log::info!(
            "{}: NRMSE {:.2}%, MATE {:.4} mm",
            kind.as_str(),
            report.nrmse,
            report.mate
        );
        runs.push(ControllerRun {
            kind,
            report,
            fallbacks: lp.fallback_count(),
            warm_start: lp.warm_start_stats(),
            rows,
            bounds,
        });
    }
    Ok(TrackingOutcome {
        identification,
        reference,
        runs,
    })
}

#[derive(Debug, Clone)]
pub struct ModulationOutcome {
    pub identification: Identification,
    pub period: usize,
    pub baseline_rows: Vec<TraceRow>,
    pub bo_rows: Vec<TraceRow>,
    pub final_rows: Vec<TraceRow>,
    pub bo: BoRun,
    pub bo_config: BoConfig,
    pub final_reference: ReferenceTrajectory,
    pub final_settle_periods: usize,
    pub report: ModulationReport,
    pub bounds: BoundCheck,
}

impl ModulationOutcome {
    pub fn summary_csv(&self, bpm: f64) -> String {
        let r = &self.report;
        let mut s = String::from(
            "bpm,delay_s,magnitude_mm,best_cost,baseline_amplitude_mmHg,actuated_amplitude_mmHg,amplification,\
             baseline_mean_mmHg,max_mean_increase_mmHg,max_relative_mean_increase_percent,final_settle_periods,\
             input_violations,position_violations\n",
        );
        let _ = writeln!(
            s,
            "{bpm},{:.6},{:.6},{:.9e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.bo.best_theta.delay,
            self.bo.best_theta.magnitude,
            self.bo.best_cost,
            r.baseline_amplitude,
            r.actuated_amplitude,
            r.amplification,
            r.baseline_mean,
            r.max_mean_increase,
            r.max_relative_mean_increase,
            self.final_settle_periods,
            self.bounds.input_violations,
            self.bounds.position_violations
        );
        s
    }
}

/// Baseline run, BO over the reference parameters, then a final run at θ*.
pub fn run_modulation(cfg: &RunConfig) -> Result<ModulationOutcome, HarnessError> {
    cfg.validate()?;
    let identification = identify_plant(cfg)?;
    let clock = cfg.clock()?;
    let t = clock.period();
    let m = cfg.modulation;
    let flat = ReferenceTrajectory::constant(cfg.shape.baseline, t, cfg.dt);
    let mut lp = ClosedLoop::new(
        cfg,
        &identification.model,
        ControllerKind::MpcOffsetFree,
        flat,
    )?;

    lp.run_periods(m.warmup_periods + m.baseline_periods)?;
    let baseline_rows = lp.rows()[m.warmup_periods * t..].to_vec();
    let pressures: Vec<f64> = baseline_rows.iter().map(|r| r.p).collect();
    let stats = crate::metrics::period_stats(&pressures, t)?;
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let bo_config = BoConfig {
        p_amp_ref: m.target_amplification * avg(&stats.amplitudes),
        p_mean_base: avg(&stats.means),
        ..cfg.effective_bo()
    };
    log::info!(
        "baseline amplitude {:.4} mmHg, mean {:.4} mmHg; target amplitude {:.4} mmHg",
        avg(&stats.amplitudes),
        bo_config.p_mean_base,
        bo_config.p_amp_ref
    );

    let bo_start = lp.rows().len();
    let mut objective = PlantObjective(lp);
    let run = bo::run(&bo_config, &mut objective)?;
    let mut lp = objective.0;
    let bo_rows = lp.rows()[bo_start..].to_vec();

    let final_reference = build_reference(&run.best_theta, &cfg.shape, &clock)?;
    lp.set_trajectory(final_reference.clone())?;
    let mut final_settle_periods = 0;
    while !lp.run_one_period(bo_config.settle_epsilon)?.settled {
        final_settle_periods += 1;
        if final_settle_periods >= bo_config.max_settle_periods {
            log::warn!("final run did not settle within {final_settle_periods} periods");
            break;
        }
    }
    let final_start = lp.rows().len();
    lp.run_periods(m.final_periods)?;
    let final_rows = lp.rows()[final_start..].to_vec();

    let bounds = assert_bounds("modulation", lp.rows(), &cfg.mpc.constraints)?;
    let base_p: Vec<f64> = baseline_rows.iter().map(|r| r.p).collect();
    let final_p: Vec<f64> = final_rows.iter().map(|r| r.p).collect();
    let report = modulation_report(&base_p, &final_p, t)?;
    log::info!(
        "θ* = ({:.4} s, {:.4} mm): amplification {:.3}, mean increase {:.3}%",
        run.best_theta.delay,
        run.best_theta.magnitude,
        report.amplification,
        report.max_relative_mean_increase
    );
    Ok(ModulationOutcome {
        identification,
        period: t,
        baseline_rows,
        bo_rows,
        final_rows,
        bo: run,
        bo_config,
        final_reference,
        final_settle_periods,
        report,
        bounds,
    })
}

/// Reproduction record written next to every run.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    scenario: &'static str,
    seed: u64,
    created_utc: String,
    identified_model: crate::model::ModelDocument,
    identification_offset_mm: f64,
    identification_condition: f64,
    config: &'a RunConfig,
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

fn create_file(path: &Path) -> Result<fs::File, HarnessError> {
    fs::File::create(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Creates `<out>/<scenario>/<timestamp>` with `traces/` and `gp/` inside.
fn run_directory(cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
    let base = cfg
        .out_dir
        .join(cfg.scenario.as_str())
        .join(chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string());
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    for sub in ["traces", "gp"] {
        fs::create_dir_all(dir.join(sub))
            .map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    }
    Ok(dir)
}

fn write_manifest(dir: &Path, cfg: &RunConfig, ident: &Identification) -> Result<(), HarnessError> {
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        scenario: cfg.scenario.as_str(),
        seed: cfg.seed,
        created_utc: chrono::Utc::now().to_rfc3339(),
        identified_model: ident.model.to_document(),
        identification_offset_mm: ident.offset,
        identification_condition: ident.condition,
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(io_err)?;
    write_text(&dir.join("manifest.json"), &json)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
    write_text(&dir.join("model.toml"), &ident.model.to_toml())
}

pub fn write_tracking(
    outcome: &TrackingOutcome,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<(), HarnessError> {
    write_manifest(dir, cfg, &outcome.identification)?;
    for run in &outcome.runs {
        write_trace_csv(
            &run.rows,
            &dir.join("traces")
                .join(format!("{}.csv", run.kind.as_str())),
        )?;
    }
    outcome
        .reference
        .write_csv(create_file(&dir.join("traces/reference.csv"))?)?;
    write_text(&dir.join("summary.csv"), &outcome.summary_csv())?;
    write_text(&dir.join("summary.txt"), &outcome.table())
}

pub fn write_modulation(
    outcome: &ModulationOutcome,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<(), HarnessError> {
    write_manifest(dir, cfg, &outcome.identification)?;
    write_trace_csv(&outcome.baseline_rows, &dir.join("traces/baseline.csv"))?;
    write_trace_csv(&outcome.bo_rows, &dir.join("traces/bo.csv"))?;
    write_trace_csv(&outcome.final_rows, &dir.join("traces/final.csv"))?;
    outcome
        .final_reference
        .write_csv(create_file(&dir.join("traces/reference_best.csv"))?)?;
    outcome
        .bo
        .write_trace_csv(create_file(&dir.join("gp/iterations.csv"))?)?;
    outcome
        .bo
        .dataset
        .write_csv(create_file(&dir.join("gp/dataset.csv"))?)
        .map_err(io_err)?;
    for g in &outcome.bo.grids {
        g.write_csv(create_file(
            &dir.join(format!("gp/grid_{:03}.csv", g.iteration)),
        )?)?;
    }
    write_text(&dir.join("summary.csv"), &outcome.summary_csv(cfg.bpm))?;
    write_text(&dir.join("summary.txt"), &outcome.report.table())
}

/// Runs the configured scenario and writes its output directory.
pub fn execute(cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
    cfg.validate()?;
    match cfg.scenario {
        Scenario::Tracking => {
            let outcome = run_tracking(cfg)?;
            let dir = run_directory(cfg)?;
            write_tracking(&outcome, cfg, &dir)?;
            print!("{}", outcome.table());
            Ok(dir)
        }
        Scenario::Modulation => {
            let outcome = run_modulation(cfg)?;
            let dir = run_directory(cfg)?;
            write_modulation(&outcome, cfg, &dir)?;
            print!("{}", outcome.report.table());
            Ok(dir)
        }
    }
}
