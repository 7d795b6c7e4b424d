//! Software test bench: a nonlinear motor truth model, a balloon and brain
//! phantom pressure map, a cardiac ICP waveform and an idealized heartbeat
//! trigger.
//!
//! Nothing in here is visible to the controllers except through
//! [`Testbench::measure`]; the nominal model used by the MPC is identified
//! from this plant, never read from its parameters.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Interval;

/// Physical travel of the motor [mm].
pub const TRAVEL: Interval = Interval::new(0.0, 2.6);
/// Largest plausible phantom pressure [mmHg].
pub const MAX_PLAUSIBLE_PRESSURE: f64 = 60.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("non-finite {0} rejected")]
    NonFinite(&'static str),
    #[error("sample period must be positive, got {0}")]
    InvalidPeriod(f64),
    #[error("position {0} mm is outside the travel range")]
    OutOfTravel(f64),
    #[error("heart rate {0} BPM is outside [30, 200]")]
    InvalidHeartRate(f64),
    #[error("beat period of {0} steps is shorter than 2")]
    PeriodTooShort(usize),
    #[error("phase {phase} out of range for period {period}")]
    InvalidPhase { phase: usize, period: usize },
    #[error("invalid phantom configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("implausible pressure {0} mmHg")]
    ImplausiblePressure(f64),
}

/// Parameters of the motor truth model.
///
/// Continuous dynamics, per unit moving mass:
/// `p'' = gain u - stiffness (p - rest) - damping p' - coulomb z + load_bias`
/// with friction state `z' = (tanh(p'/friction_velocity) - z) / friction_tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthPlantParams {
    /// Current-to-acceleration gain [mm/s² per A].
    pub gain: f64,
    /// Return-spring stiffness [1/s²].
    pub stiffness: f64,
    /// Viscous damping [1/s].
    pub damping: f64,
    /// Spring rest position [mm].
    pub rest_position: f64,
    /// Coulomb friction level [mm/s²].
    pub coulomb: f64,
    /// Velocity scale of the smooth sign [mm/s].
    pub friction_velocity: f64,
    /// Friction lag time constant [s].
    pub friction_tau: f64,
    /// Constant load [mm/s²].
    pub load_bias: f64,
    /// Integration substeps per sample.
    pub substeps: usize,
}

impl Default for TruthPlantParams {
    fn default() -> Self {
        Self {
            gain: 400.0,
            stiffness: 400.0,
            damping: 50.0,
            rest_position: 0.63,
            coulomb: 20.0,
            friction_velocity: 1.0,
            friction_tau: 0.005,
            load_bias: 12.0,
            substeps: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TruthPlantState {
    /// [mm]
    pub position: f64,
    /// [mm/s]
    pub velocity: f64,
    /// Lagged friction direction in [-1, 1].
    pub friction: f64,
}

impl TruthPlantState {
    pub fn at_rest(position: f64) -> Self {
        Self {
            position,
            velocity: 0.0,
            friction: 0.0,
        }
    }
}

/// Advances the motor by one sample of length `dt` under current `u`.
///
/// Semi-implicit Euler on `params.substeps` substeps; position is clamped
/// to [`TRAVEL`] with the velocity into the end stop removed.
pub fn truth_step(
    state: TruthPlantState,
    u: f64,
    dt: f64,
    params: &TruthPlantParams,
) -> Result<TruthPlantState, SimError> {
    if !u.is_finite() {
        return Err(SimError::NonFinite("input current"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(SimError::InvalidPeriod(dt));
    }
    let n = params.substeps.max(1);
    let h = dt / n as f64;
    let TruthPlantState {
        mut position,
        mut velocity,
        mut friction,
    } = state;
    for _ in 0..n {
        let target = (velocity / params.friction_velocity).tanh();
        friction += h * (target - friction) / params.friction_tau.max(h);
        let acc = params.gain * u
            - params.stiffness * (position - params.rest_position)
            - params.damping * velocity
            - params.coulomb * friction
            + params.load_bias;
        velocity += h * acc;
        position += h * velocity;
        if position <= TRAVEL.lo {
            position = TRAVEL.lo;
            velocity = velocity.max(0.0);
        } else if position >= TRAVEL.hi {
            position = TRAVEL.hi;
            velocity = velocity.min(0.0);
        }
    }
    Ok(TruthPlantState {
        position,
        velocity,
        friction,
    })
}

/// Brain phantom and balloon parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    /// Unactuated mean ICP [mmHg].
    pub mean_mmhg: f64,
    /// Unactuated peak-to-peak amplitude [mmHg].
    pub amplitude_mmhg: f64,
    pub bpm: f64,
    /// Exponential pressure-volume elastance [1/mL].
    pub elastance_per_ml: f64,
    /// Pressure scale of the pressure-volume curve [mmHg].
    pub pressure_scale_mmhg: f64,
    /// Motor travel before the balloon starts to inflate [mm].
    pub dead_travel_mm: f64,
    /// Initial slope of the volume map [mL/mm].
    pub volume_gain_ml_per_mm: f64,
    /// Balloon saturation volume [mL].
    pub max_volume_ml: f64,
    /// Time from the heartbeat trigger to the systolic peak [s].
    pub systolic_latency_s: f64,
    /// Actuation-to-pressure transport lag [steps].
    pub transport_lag_steps: usize,
    /// Pressure sensor noise [mmHg].
    pub noise_std_mmhg: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            mean_mmhg: 15.0,
            amplitude_mmhg: 1.0,
            bpm: 60.0,
            elastance_per_ml: 3.0,
            pressure_scale_mmhg: 0.02,
            dead_travel_mm: 0.63,
            volume_gain_ml_per_mm: 1.5,
            max_volume_ml: 2.5,
            systolic_latency_s: 0.25,
            transport_lag_steps: 2,
            noise_std_mmhg: 0.005,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let finite = [
            self.mean_mmhg,
            self.amplitude_mmhg,
            self.bpm,
            self.elastance_per_ml,
            self.pressure_scale_mmhg,
            self.dead_travel_mm,
            self.volume_gain_ml_per_mm,
            self.max_volume_ml,
            self.systolic_latency_s,
            self.noise_std_mmhg,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(SimError::NonFinite("phantom parameter"));
        }
        if !(30.0..=200.0).contains(&self.bpm) {
            return Err(SimError::InvalidHeartRate(self.bpm));
        }
        if self.mean_mmhg <= 0.0 {
            return Err(SimError::InvalidConfig("mean pressure must be positive"));
        }
        if self.amplitude_mmhg < 0.0 {
            return Err(SimError::InvalidConfig("amplitude must be nonnegative"));
        }
        if self.elastance_per_ml <= 0.0 || self.pressure_scale_mmhg <= 0.0 {
            return Err(SimError::InvalidConfig(
                "elastance and pressure scale must be positive",
            ));
        }
        if self.dead_travel_mm < 0.0 {
            return Err(SimError::InvalidConfig("dead travel must be nonnegative"));
        }
        if self.max_volume_ml <= 0.0 || self.volume_gain_ml_per_mm <= 0.0 {
            return Err(SimError::InvalidConfig(
                "balloon volume parameters must be positive",
            ));
        }
        if self.noise_std_mmhg < 0.0 {
            return Err(SimError::InvalidConfig("noise std must be nonnegative"));
        }
        Ok(())
    }
}

/// Position within one heartbeat period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeatClock {
    period: usize,
    phase: usize,
    dt: f64,
}

impl BeatClock {
    /// Period `T = round(60 / (bpm dt))`, starting at phase 0.
    pub fn new(bpm: f64, dt: f64) -> Result<Self, SimError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(SimError::InvalidPeriod(dt));
        }
        if !(30.0..=200.0).contains(&bpm) {
            return Err(SimError::InvalidHeartRate(bpm));
        }
        Self::with_period((60.0 / (bpm * dt)).round() as usize, dt)
    }

    pub fn with_period(period: usize, dt: f64) -> Result<Self, SimError> {
        if period < 2 {
            return Err(SimError::PeriodTooShort(period));
        }
        Ok(Self {
            period,
            phase: 0,
            dt,
        })
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn phase(&self) -> usize {
        self.phase
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn period_seconds(&self) -> f64 {
        self.period as f64 * self.dt
    }

    pub fn at_phase(mut self, phase: usize) -> Result<Self, SimError> {
        if phase >= self.period {
            return Err(SimError::InvalidPhase {
                phase,
                period: self.period,
            });
        }
        self.phase = phase;
        Ok(self)
    }

    /// Moves to the next step; returns true when a new period begins.
    pub fn advance(&mut self) -> bool {
        self.phase += 1;
        if self.phase == self.period {
            self.phase = 0;
            true
        } else {
            false
        }
    }
}

/// Idealized QRS event: true exactly at phase 0.
pub fn beat_trigger(clock: &BeatClock) -> bool {
    clock.phase == 0
}

/// Harmonic weights of the unnormalized pulse shape. The first harmonic
/// dominates; the higher ones sharpen the systolic peak.
const HARMONICS: [(f64, f64); 3] = [(1.0, 0.0), (0.35, 0.6), (0.12, 1.3)];

/// One period of the unactuated ICP, normalized over the sampled phases so
/// that its mean and peak-to-peak amplitude match the configuration exactly.
pub fn cardiac_table(period: usize, dt: f64, config: &PhantomConfig) -> Vec<f64> {
    let tp = period as f64 * dt;
    let raw: Vec<f64> = (0..period)
        .map(|k| {
            let t = k as f64 * dt - config.systolic_latency_s;
            HARMONICS
                .iter()
                .enumerate()
                .map(|(i, &(w, lag))| {
                    let h = (i + 1) as f64;
                    w * (2.0 * PI * h * t / tp - lag * (h - 1.0)).cos()
                })
                .sum()
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / period as f64;
    let (lo, hi) = min_max(&raw);
    let span = hi - lo;
    raw.iter()
        .map(|&v| {
            if config.amplitude_mmhg == 0.0 || span == 0.0 {
                config.mean_mmhg
            } else {
                config.mean_mmhg + config.amplitude_mmhg * (v - mean) / span
            }
        })
        .collect()
}

/// Unactuated ICP at `phase`.
pub fn cardiac_waveform(
    phase: usize,
    clock: &BeatClock,
    config: &PhantomConfig,
) -> Result<f64, SimError> {
    if phase >= clock.period() {
        return Err(SimError::InvalidPhase {
            phase,
            period: clock.period(),
        });
    }
    Ok(cardiac_table(clock.period(), clock.dt(), config)[phase])
}

/// Balloon volume [mL]: zero up to the dead travel, then a tanh-saturating
/// map bounded by the maximum volume.
pub fn balloon_volume(position: f64, config: &PhantomConfig) -> f64 {
    let excess = position - config.dead_travel_mm;
    if excess <= 0.0 {
        return 0.0;
    }
    config.max_volume_ml * (excess * config.volume_gain_ml_per_mm / config.max_volume_ml).tanh()
}

/// Pressure increment of the exponential pressure-volume relation [mmHg].
pub fn volume_pressure(volume: f64, config: &PhantomConfig) -> f64 {
    config.pressure_scale_mmhg * ((config.elastance_per_ml * volume).exp() - 1.0)
}

/// Noise-free phantom pressure for a motor position at a given phase.
pub fn phantom_pressure(
    position: f64,
    phase: usize,
    clock: &BeatClock,
    config: &PhantomConfig,
) -> Result<f64, SimError> {
    if !position.is_finite() {
        return Err(SimError::NonFinite("position"));
    }
    if !TRAVEL.contains(position) {
        return Err(SimError::OutOfTravel(position));
    }
    let base = cardiac_waveform(phase, clock, config)?;
    check_plausible(base + volume_pressure(balloon_volume(position, config), config))
}

fn check_plausible(p: f64) -> Result<f64, SimError> {
    if (0.0..=MAX_PLAUSIBLE_PRESSURE).contains(&p) {
        Ok(p)
    } else {
        Err(SimError::ImplausiblePressure(p))
    }
}

/// Stateful phantom with transport lag and seeded sensor noise.
#[derive(Debug, Clone)]
pub struct Phantom {
    config: PhantomConfig,
    cardiac: Vec<f64>,
    lag: VecDeque<f64>,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

impl Phantom {
    pub fn new(
        config: PhantomConfig,
        clock: &BeatClock,
        rest_position: f64,
    ) -> Result<Self, SimError> {
        config.validate()?;
        let noise = (config.noise_std_mmhg > 0.0)
            .then(|| Normal::new(0.0, config.noise_std_mmhg).expect("validated std"));
        Ok(Self {
            cardiac: cardiac_table(clock.period(), clock.dt(), &config),
            lag: std::iter::repeat_n(rest_position, config.transport_lag_steps).collect(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            noise,
            config,
        })
    }

    pub fn config(&self) -> &PhantomConfig {
        &self.config
    }

    pub fn cardiac(&self) -> &[f64] {
        &self.cardiac
    }

    /// Pressure sample for the current motor position; the balloon sees the
    /// position from `transport_lag_steps` samples earlier.
    pub fn sample(&mut self, position: f64, phase: usize) -> Result<f64, SimError> {
        if !TRAVEL.contains(position) {
            return Err(SimError::OutOfTravel(position));
        }
        self.lag.push_back(position);
        let effective = self
            .lag
            .pop_front()
            .expect("lag buffer holds at least one entry");
        let mut p = self.cardiac[phase]
            + volume_pressure(balloon_volume(effective, &self.config), &self.config);
        if let Some(dist) = &self.noise {
            p += dist.sample(&mut self.rng);
        }
        check_plausible(p)
    }
}

/// Measurement sensors and injected output disturbance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    /// Encoder noise [mm].
    pub position_noise_mm: f64,
    /// Constant additive output disturbance on the measured position [mm].
    pub output_offset_mm: f64,
    pub seed: u64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            position_noise_mm: 1e-4,
            output_offset_mm: 0.0,
            seed: 0,
        }
    }
}

/// One sample of everything the bench reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub step: usize,
    pub phase: usize,
    pub trigger: bool,
    /// Measured motor position [mm].
    pub y: f64,
    /// Phantom pressure [mmHg].
    pub p: f64,
    /// True motor state (for safety accounting; not for control).
    pub truth: TruthPlantState,
}

/// Motor, phantom and beat clock stepped together.
#[derive(Debug, Clone)]
pub struct Testbench {
    plant: TruthPlantParams,
    state: TruthPlantState,
    phantom: Phantom,
    clock: BeatClock,
    sensor: SensorConfig,
    sensor_rng: ChaCha8Rng,
    sensor_noise: Option<Normal<f64>>,
    step: usize,
}

impl Testbench {
    pub fn new(
        plant: TruthPlantParams,
        phantom: PhantomConfig,
        sensor: SensorConfig,
        dt: f64,
        initial_position: f64,
    ) -> Result<Self, SimError> {
        let clock = BeatClock::new(phantom.bpm, dt)?;
        if !TRAVEL.contains(initial_position) {
            return Err(SimError::OutOfTravel(initial_position));
        }
        let sensor_noise = (sensor.position_noise_mm > 0.0)
            .then(|| Normal::new(0.0, sensor.position_noise_mm).expect("validated std"));
        Ok(Self {
            state: TruthPlantState::at_rest(initial_position),
            phantom: Phantom::new(phantom, &clock, initial_position)?,
            clock,
            sensor_rng: ChaCha8Rng::seed_from_u64(sensor.seed),
            sensor_noise,
            sensor,
            plant,
            step: 0,
        })
    }

    pub fn clock(&self) -> &BeatClock {
        &self.clock
    }

    pub fn state(&self) -> TruthPlantState {
        self.state
    }

    pub fn phantom(&self) -> &Phantom {
        &self.phantom
    }

    pub fn set_output_offset(&mut self, offset_mm: f64) {
        self.sensor.output_offset_mm = offset_mm;
    }

    /// Samples the sensors at the current step.
    pub fn measure(&mut self) -> Result<Measurement, SimError> {
        let mut y = self.state.position + self.sensor.output_offset_mm;
        if let Some(dist) = &self.sensor_noise {
            y += dist.sample(&mut self.sensor_rng);
        }
        let p = self
            .phantom
            .sample(self.state.position, self.clock.phase())?;
        Ok(Measurement {
            step: self.step,
            phase: self.clock.phase(),
            trigger: beat_trigger(&self.clock),
            y,
            p,
            truth: self.state,
        })
    }

    /// Applies `u` for one sample and advances the beat clock.
    pub fn apply(&mut self, u: f64) -> Result<(), SimError> {
        self.state = truth_step(self.state, u, self.clock.dt(), &self.plant)?;
        self.clock.advance();
        self.step += 1;
        Ok(())
    }
}

pub(crate) fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}
