//! Heartbeat-gated pulse references.
//!
//! A pulse starts `delay` seconds after the trigger, rises linearly to
//! `baseline + magnitude`, holds, falls through the baseline to
//! `baseline - negative_magnitude` and recovers. Samples are taken at
//! `t = k dt` with each segment covering `(t_a, t_b]`, so a zero-length
//! segment produces a jump just after its breakpoint.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Constraints, Interval};
use crate::simbench::BeatClock;

#[derive(Debug, Error, PartialEq)]
pub enum RefError {
    #[error("invalid reference shape: {0}")]
    InvalidShape(String),
    #[error("invalid reference parameters (delay {delay}, magnitude {magnitude})")]
    InvalidParams { delay: f64, magnitude: f64 },
    #[error("pulse needs {needed:.3} s but the period leaves {available:.3} s")]
    ExceedsPeriod { needed: f64, available: f64 },
    #[error("csv: {0}")]
    Io(String),
}

/// Fixed shape constants of the pulse [s, mm].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceShape {
    pub baseline: f64,
    pub rise: f64,
    pub up: f64,
    pub fall: f64,
    pub down: f64,
    pub negative_magnitude: f64,
    /// Time after a trigger during which further triggers are ignored.
    pub total_length: f64,
}

impl Default for ReferenceShape {
    fn default() -> Self {
        Self {
            baseline: 0.63,
            rise: 0.10,
            up: 0.10,
            fall: 0.12,
            down: 0.06,
            negative_magnitude: 0.1,
            total_length: 0.60,
        }
    }
}

impl ReferenceShape {
    /// Rise, hold, fall and recovery together.
    pub fn pulse_duration(&self) -> f64 {
        self.rise + self.up + self.fall + self.down
    }

    pub fn validate(&self, bounds: &ThetaBounds) -> Result<(), RefError> {
        let fields = [
            ("baseline", self.baseline),
            ("rise", self.rise),
            ("up", self.up),
            ("fall", self.fall),
            ("down", self.down),
            ("negative_magnitude", self.negative_magnitude),
            ("total_length", self.total_length),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(RefError::InvalidShape(format!("{name} = {v}")));
            }
        }
        let needed = bounds.delay.hi + self.pulse_duration();
        if self.total_length < needed - 1e-12 {
            return Err(RefError::InvalidShape(format!(
                "total_length {} is shorter than longest delay plus pulse {needed}",
                self.total_length
            )));
        }
        Ok(())
    }

    /// Continuous-time profile `t` seconds after the trigger.
    pub fn value_at(&self, theta: &ReferenceParams, t: f64) -> f64 {
        let b = self.baseline;
        let peak = b + theta.magnitude;
        let trough = b - self.negative_magnitude;
        let t0 = theta.delay;
        let t1 = t0 + self.rise;
        let t2 = t1 + self.up;
        let t3 = t2 + self.fall;
        let t4 = t3 + self.down;
        let lerp =
            |from: f64, to: f64, start: f64, len: f64| from + (to - from) * (t - start) / len;
        if t <= t0 {
            b
        } else if t <= t1 {
            lerp(b, peak, t0, self.rise)
        } else if t <= t2 {
            peak
        } else if t <= t3 {
            lerp(peak, trough, t2, self.fall)
        } else if t <= t4 {
            lerp(trough, b, t3, self.down)
        } else {
            b
        }
    }
}

/// Tunable reference parameters θ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceParams {
    /// Trigger-to-pulse delay [s].
    pub delay: f64,
    /// Pulse height above baseline [mm].
    pub magnitude: f64,
}

impl ReferenceParams {
    pub const fn new(delay: f64, magnitude: f64) -> Self {
        Self { delay, magnitude }
    }
}

/// Axis-aligned box Θ of admissible parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThetaBounds {
    pub delay: Interval,
    pub magnitude: Interval,
}

impl Default for ThetaBounds {
    fn default() -> Self {
        Self {
            delay: Interval::new(0.0, 0.2),
            magnitude: Interval::new(0.2, 1.25),
        }
    }
}

impl ThetaBounds {
    pub fn validate(&self) -> Result<(), RefError> {
        let ok = |iv: Interval| iv.lo.is_finite() && iv.hi.is_finite() && iv.lo < iv.hi;
        if !(ok(self.delay)
            && ok(self.magnitude)
            && self.delay.lo >= 0.0
            && self.magnitude.lo >= 0.0)
        {
            return Err(RefError::InvalidShape(format!("parameter box {self:?}")));
        }
        Ok(())
    }

    pub fn contains(&self, theta: &ReferenceParams) -> bool {
        self.delay.contains(theta.delay) && self.magnitude.contains(theta.magnitude)
    }

    /// Maps θ to the unit square.
    pub fn to_unit(&self, theta: &ReferenceParams) -> [f64; 2] {
        [
            (theta.delay - self.delay.lo) / (self.delay.hi - self.delay.lo),
            (theta.magnitude - self.magnitude.lo) / (self.magnitude.hi - self.magnitude.lo),
        ]
    }

    pub fn from_unit(&self, x: [f64; 2]) -> ReferenceParams {
        ReferenceParams::new(
            self.delay.lo + x[0] * (self.delay.hi - self.delay.lo),
            self.magnitude.lo + x[1] * (self.magnitude.hi - self.magnitude.lo),
        )
    }

    /// Length of the box diagonal in raw units.
    pub fn diagonal(&self) -> f64 {
        (self.delay.hi - self.delay.lo).hypot(self.magnitude.hi - self.magnitude.lo)
    }
}

/// One period of reference samples starting at the trigger.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub samples: Vec<f64>,
    /// Phase of the trigger that started the pulse.
    pub trigger_phase: usize,
    pub dt: f64,
}

impl ReferenceTrajectory {
    /// Constant trajectory at `value`.
    pub fn constant(value: f64, period: usize, dt: f64) -> Self {
        Self {
            samples: vec![value; period],
            trigger_phase: 0,
            dt,
        }
    }

    pub fn period(&self) -> usize {
        self.samples.len()
    }

    /// Reference at absolute phase `phase`.
    pub fn at(&self, phase: usize) -> f64 {
        let t = self.period();
        self.samples[(phase + t - self.trigger_phase % t) % t]
    }

    /// `n` samples from `phase` on, repeating the period past its end.
    pub fn window(&self, phase: usize, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.at(phase + i)).collect()
    }

    pub fn peak(&self) -> f64 {
        self.samples
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Writes `phase,time_s,r_mm` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), RefError> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| RefError::Io(e.to_string());
        w.write_record(["phase", "time_s", "r_mm"]).map_err(io)?;
        for (k, r) in self.samples.iter().enumerate() {
            w.write_record([
                k.to_string(),
                format!("{:.4}", k as f64 * self.dt),
                format!("{r:.9}"),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| RefError::Io(e.to_string()))
    }
}

/// Time available for delay plus pulse: the pulse must end by the last
/// sample of the period so that sample is back at the baseline.
fn available_time(clock: &BeatClock) -> f64 {
    (clock.period() - 1) as f64 * clock.dt()
}

pub fn build_reference(
    theta: &ReferenceParams,
    shape: &ReferenceShape,
    clock: &BeatClock,
) -> Result<ReferenceTrajectory, RefError> {
    if !(theta.delay.is_finite()
        && theta.delay >= 0.0
        && theta.magnitude.is_finite()
        && theta.magnitude >= 0.0)
    {
        return Err(RefError::InvalidParams {
            delay: theta.delay,
            magnitude: theta.magnitude,
        });
    }
    let needed = theta.delay + shape.pulse_duration();
    let available = available_time(clock);
    if needed > available + 1e-12 {
        return Err(RefError::ExceedsPeriod { needed, available });
    }
    let dt = clock.dt();
    let samples = (0..clock.period())
        .map(|k| shape.value_at(theta, k as f64 * dt))
        .collect();
    Ok(ReferenceTrajectory {
        samples,
        trigger_phase: 0,
        dt,
    })
}

/// Starts a pulse iff the trigger fires while no pulse is running.
pub fn gate_trigger(trigger: bool, pulse_active: bool) -> bool {
    trigger && !pulse_active
}

/// Tracks whether a pulse is running and for how long.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseGate {
    length_steps: usize,
    elapsed: Option<usize>,
}

impl PulseGate {
    pub fn new(shape: &ReferenceShape, dt: f64) -> Self {
        Self {
            length_steps: (shape.total_length / dt).round().max(1.0) as usize,
            elapsed: None,
        }
    }

    pub fn active(&self) -> bool {
        self.elapsed.is_some()
    }

    /// Advances one sample; returns true when a new pulse starts now.
    pub fn step(&mut self, trigger: bool) -> bool {
        if let Some(e) = self.elapsed {
            self.elapsed = (e + 1 < self.length_steps).then_some(e + 1);
        }
        let start = gate_trigger(trigger, self.active());
        if start {
            self.elapsed = Some(0);
        }
        start
    }
}

/// First violated feasibility condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Violation {
    InvalidParams,
    Position { value: f64 },
    Velocity { segment: &'static str, slope: f64 },
    PeriodFit { needed: f64, available: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    pub violation: Option<Violation>,
}

impl Feasibility {
    fn from(violation: Option<Violation>) -> Self {
        Self {
            feasible: violation.is_none(),
            violation,
        }
    }
}

pub fn check_feasible(
    theta: &ReferenceParams,
    shape: &ReferenceShape,
    constraints: &Constraints,
    clock: &BeatClock,
) -> Feasibility {
    Feasibility::from(first_violation(theta, shape, constraints, clock))
}

fn first_violation(
    theta: &ReferenceParams,
    shape: &ReferenceShape,
    constraints: &Constraints,
    clock: &BeatClock,
) -> Option<Violation> {
    if !(theta.delay.is_finite()
        && theta.delay >= 0.0
        && theta.magnitude.is_finite()
        && theta.magnitude >= 0.0)
    {
        return Some(Violation::InvalidParams);
    }
    let peak = shape.baseline + theta.magnitude;
    let trough = shape.baseline - shape.negative_magnitude;
    for value in [shape.baseline, peak, trough] {
        if !constraints.position.contains(value) {
            return Some(Violation::Position { value });
        }
    }
    let slopes = [
        ("rise", theta.magnitude, shape.rise),
        (
            "fall",
            theta.magnitude + shape.negative_magnitude,
            shape.fall,
        ),
        ("down", shape.negative_magnitude, shape.down),
    ];
    for (segment, height, duration) in slopes {
        if height == 0.0 {
            continue;
        }
        let slope = if duration > 0.0 {
            height / duration
        } else {
            f64::INFINITY
        };
        if slope > constraints.velocity.hi || -slope < constraints.velocity.lo {
            return Some(Violation::Velocity { segment, slope });
        }
    }
    let available = available_time(clock);
    let needed = theta.delay + shape.pulse_duration();
    if needed > available + 1e-12 {
        return Some(Violation::PeriodFit { needed, available });
    }
    if shape.total_length > clock.period_seconds() + 1e-12 {
        return Some(Violation::PeriodFit {
            needed: shape.total_length,
            available: clock.period_seconds(),
        });
    }
    None
}
