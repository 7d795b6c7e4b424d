//! Tracking MPC with previous-period disturbance preview, and a PID
//! baseline.
//!
//! The MPC works in model coordinates (positions relative to an operating
//! point). Over a horizon of `N` steps it predicts
//! `ŷ_i = C x_i + C_d d̂_prev[(k + i) mod T]` for `i = 1..N` and minimizes
//! `Σ (ŷ_i - r_{k+i})² + ρ Σ u_i²` over the inputs `u_0..u_{N-1}`.
//! Input bounds are hard; position and velocity bounds on `x_1..x_N` are
//! relaxed by one nonnegative slack `s` with an L1 weight (plus a small
//! quadratic term so the Hessian stays positive definite).

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Constraints, Interval, LtiModel};
use crate::observer::{DisturbanceMemory, ObserverState};
use crate::qpsolver::{solve_qp, warm_start, QpError, QpProblem, QpSettings, QpSolution, QpStatus};
use crate::refgen::ReferenceTrajectory;
use crate::simbench::{truth_step, TruthPlantParams, TruthPlantState};

/// Quadratic weight on the slack; small against the L1 weight.
const SLACK_QUADRATIC: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum MpcError {
    #[error("invalid MPC configuration: {0}")]
    Config(String),
    #[error("invalid controller input: {0}")]
    Input(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Pid,
    Mpc,
    MpcOffsetFree,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [
        ControllerKind::Pid,
        ControllerKind::Mpc,
        ControllerKind::MpcOffsetFree,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::Pid => "pid",
            ControllerKind::Mpc => "mpc",
            ControllerKind::MpcOffsetFree => "mpc_offset_free",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                format!("unknown controller '{s}' (expected pid, mpc or mpc_offset_free)")
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Input regularization ρ.
    pub rho: f64,
    /// L1 weight of the state-constraint slack.
    pub slack_weight: f64,
    /// Bounds in absolute coordinates [mm, mm/s, A].
    pub constraints: Constraints,
    pub qp: QpSettings,
    /// Also solve every step from a cold start and record both iteration
    /// counts.
    pub compare_cold_start: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            rho: 1e-6,
            slack_weight: 1e4,
            constraints: Constraints::default(),
            qp: QpSettings::default(),
            compare_cold_start: false,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon == 0 {
            return Err(MpcError::Config("horizon must be at least 1".into()));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(MpcError::Config(format!("rho = {}", self.rho)));
        }
        if !(self.slack_weight.is_finite() && self.slack_weight > 0.0) {
            return Err(MpcError::Config(format!(
                "slack_weight = {}",
                self.slack_weight
            )));
        }
        Ok(())
    }
}

/// Condensed QP plus what is needed to interpret its solution.
#[derive(Debug, Clone)]
pub struct TrackingQp {
    /// Variables `[u_0, ..., u_{N-1}, s]`.
    pub problem: QpProblem,
    /// Constant dropped from the tracking cost: `Σ (f_i - r_i)²`.
    pub constant: f64,
    /// Output sensitivity `∂ŷ/∂u` (N×N).
    pub gamma: DMatrix<f64>,
    /// Predicted outputs under zero input (includes the preview).
    pub free_response: DVector<f64>,
    pub horizon: usize,
}

impl TrackingQp {
    /// Tracking cost `Σ (ŷ_i - r_i)² + ρ Σ u_i²` of a solution (the slack
    /// terms excluded).
    pub fn tracking_cost(&self, z: &DVector<f64>, reference: &[f64], rho: f64) -> f64 {
        let u = z.rows(0, self.horizon);
        let y = self.predicted_outputs(z);
        y.iter()
            .zip(reference)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            + rho * u.norm_squared()
    }

    pub fn predicted_outputs(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.gamma * z.rows(0, self.horizon) + &self.free_response
    }
}

/// Builds the condensed tracking QP at phase `k`. `x0`, `ref_window` and
/// the position bounds of `cfg` are all in model coordinates;
/// `ref_window[i]` is the reference for step `k + i + 1`.
pub fn build_tracking_qp(
    model: &LtiModel,
    x0: &Vector2<f64>,
    d_prev: &[f64],
    phase: usize,
    ref_window: &[f64],
    cfg: &MpcConfig,
) -> Result<TrackingQp, MpcError> {
    cfg.validate()?;
    let n = cfg.horizon;
    if ref_window.len() != n {
        return Err(MpcError::Input(format!(
            "reference window has {} entries, horizon is {n}",
            ref_window.len()
        )));
    }
    if d_prev.is_empty() {
        return Err(MpcError::Input("empty disturbance buffer".into()));
    }
    if x0
        .iter()
        .chain(ref_window)
        .chain(d_prev)
        .any(|v| !v.is_finite())
    {
        return Err(MpcError::Input(
            "non-finite state, reference or preview".into(),
        ));
    }
    let t = d_prev.len();

    // powers[i] = A^i, impulse[i] = A^i B
    let mut powers: Vec<Matrix2<f64>> = Vec::with_capacity(n + 1);
    powers.push(Matrix2::identity());
    for i in 0..n {
        let next = model.a * powers[i];
        powers.push(next);
    }
    let impulse: Vec<Vector2<f64>> = powers.iter().map(|p| p * model.b).collect();

    // State sensitivities for x_1..x_N, rows (pos, vel) per step.
    let mut su = DMatrix::zeros(2 * n, n);
    let mut free_state = DVector::zeros(2 * n);
    for i in 1..=n {
        let xf = powers[i] * x0;
        free_state[2 * (i - 1)] = xf[0];
        free_state[2 * (i - 1) + 1] = xf[1];
        for j in 0..i {
            let col = impulse[i - 1 - j];
            su[(2 * (i - 1), j)] = col[0];
            su[(2 * (i - 1) + 1, j)] = col[1];
        }
    }
    let mut gamma = DMatrix::zeros(n, n);
    let mut free_response = DVector::zeros(n);
    for i in 0..n {
        for j in 0..n {
            gamma[(i, j)] = model.c[0] * su[(2 * i, j)] + model.c[1] * su[(2 * i + 1, j)];
        }
        let preview = d_prev[(phase + i + 1) % t];
        free_response[i] = model.c[0] * free_state[2 * i]
            + model.c[1] * free_state[2 * i + 1]
            + model.cd * preview;
    }
    let residual = &free_response - DVector::from_column_slice(ref_window);

    let nz = n + 1;
    let mut h = DMatrix::zeros(nz, nz);
    let huu = (gamma.transpose() * &gamma + DMatrix::identity(n, n) * cfg.rho) * 2.0;
    h.view_mut((0, 0), (n, n))
        .copy_from(&((&huu + huu.transpose()) * 0.5));
    h[(n, n)] = 2.0 * SLACK_QUADRATIC;
    let mut g = DVector::zeros(nz);
    g.rows_mut(0, n)
        .copy_from(&(gamma.transpose() * &residual * 2.0));
    g[n] = cfg.slack_weight;

    let rows = n + 1 + 4 * n;
    let mut a = DMatrix::zeros(rows, nz);
    let mut lo = DVector::from_element(rows, f64::NEG_INFINITY);
    let mut hi = DVector::from_element(rows, f64::INFINITY);
    let c = &cfg.constraints;
    for j in 0..n {
        a[(j, j)] = 1.0;
        lo[j] = c.input.lo;
        hi[j] = c.input.hi;
    }
    a[(n, n)] = 1.0;
    lo[n] = 0.0;
    let mut row = n + 1;
    for i in 0..n {
        for (offset, bound) in [(0usize, c.position), (1, c.velocity)] {
            let r = 2 * i + offset;
            let free = free_state[r];
            // x - s <= hi
            for j in 0..n {
                a[(row, j)] = su[(r, j)];
                a[(row + 1, j)] = su[(r, j)];
            }
            a[(row, n)] = -1.0;
            hi[row] = bound.hi - free;
            // x + s >= lo
            a[(row + 1, n)] = 1.0;
            lo[row + 1] = bound.lo - free;
            row += 2;
        }
    }

    Ok(TrackingQp {
        problem: QpProblem::new(h, g, a, lo, hi)?,
        constant: residual.norm_squared(),
        gamma,
        free_response,
        horizon: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpcVariant {
    /// Preview ignored (zero disturbance prediction).
    Plain,
    /// Previous-period disturbance estimates used as preview.
    OffsetFree,
}

/// Result of one controller step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcOutput {
    /// Applied input [A].
    pub u: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub cold_iterations: Option<usize>,
    pub slack: f64,
    /// Disturbance preview for the next step [mm].
    pub preview: f64,
    /// True when the infeasible-QP fallback produced `u`.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WarmStartStats {
    pub steps: usize,
    /// Steps where the warm start needed no more iterations than a cold one.
    pub warm_not_worse: usize,
}

impl WarmStartStats {
    pub fn fraction(&self) -> f64 {
        if self.steps == 0 {
            1.0
        } else {
            self.warm_not_worse as f64 / self.steps as f64
        }
    }
}

/// Receding-horizon controller with warm starts.
#[derive(Debug, Clone)]
pub struct MpcController {
    model: LtiModel,
    cfg: MpcConfig,
    variant: MpcVariant,
    /// Absolute position of the model origin [mm].
    origin: f64,
    model_cfg: MpcConfig,
    previous: Option<DVector<f64>>,
    last_u: f64,
    stats: WarmStartStats,
    fallbacks: usize,
}

impl MpcController {
    pub fn new(
        model: LtiModel,
        cfg: MpcConfig,
        variant: MpcVariant,
        origin: f64,
    ) -> Result<Self, MpcError> {
        cfg.validate()?;
        if !origin.is_finite() {
            return Err(MpcError::Config(format!("origin = {origin}")));
        }
        let mut model_cfg = cfg;
        model_cfg.constraints.position = Interval::new(
            cfg.constraints.position.lo - origin,
            cfg.constraints.position.hi - origin,
        );
        Ok(Self {
            model,
            cfg,
            variant,
            origin,
            model_cfg,
            previous: None,
            last_u: 0.0,
            stats: WarmStartStats::default(),
            fallbacks: 0,
        })
    }

    pub fn variant(&self) -> MpcVariant {
        self.variant
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn warm_start_stats(&self) -> WarmStartStats {
        self.stats
    }

    pub fn fallback_count(&self) -> usize {
        self.fallbacks
    }

    /// Computes `u_k` from the estimate `est` (model coordinates), the
    /// disturbance memory and the absolute reference at phase `phase`.
    pub fn step(
        &mut self,
        est: &ObserverState,
        mem: &DisturbanceMemory,
        traj: &ReferenceTrajectory,
        phase: usize,
    ) -> Result<MpcOutput, MpcError> {
        let n = self.cfg.horizon;
        let window: Vec<f64> = traj
            .window(phase + 1, n)
            .iter()
            .map(|r| r - self.origin)
            .collect();
        let zeros;
        let preview: &[f64] = match self.variant {
            MpcVariant::OffsetFree => mem.previous_buffer(),
            MpcVariant::Plain => {
                zeros = vec![0.0; mem.period()];
                &zeros
            }
        };
        let qp = build_tracking_qp(
            &self.model,
            &est.xhat,
            preview,
            phase,
            &window,
            &self.model_cfg,
        )?;
        let solution = match &self.previous {
            Some(prev) => {
                let mut z0 = DVector::zeros(n + 1);
                for i in 0..n {
                    z0[i] = prev[(i + 1).min(n - 1)];
                }
                z0[n] = prev[n];
                warm_start(&qp.problem, &z0, &self.cfg.qp)?
            }
            None => solve_qp(&qp.problem, &self.cfg.qp)?,
        };
        let cold_iterations = if self.cfg.compare_cold_start {
            let cold = solve_qp(&qp.problem, &self.cfg.qp)?;
            self.stats.steps += 1;
            if solution.iterations <= cold.iterations {
                self.stats.warm_not_worse += 1;
            }
            Some(cold.iterations)
        } else {
            None
        };
        let preview_next = self.variant_preview(mem, phase + 1);
        let output = self.apply(solution, cold_iterations, preview_next);
        Ok(output)
    }

    fn variant_preview(&self, mem: &DisturbanceMemory, phase: usize) -> f64 {
        match self.variant {
            MpcVariant::OffsetFree => mem.previous(phase),
            MpcVariant::Plain => 0.0,
        }
    }

    fn apply(
        &mut self,
        solution: QpSolution,
        cold_iterations: Option<usize>,
        preview: f64,
    ) -> MpcOutput {
        let n = self.cfg.horizon;
        let fallback = solution.status == QpStatus::Infeasible;
        let u = if fallback {
            self.fallbacks += 1;
            log::warn!(
                "MPC QP infeasible; decaying previous input {:.4} A",
                self.last_u
            );
            self.previous = None;
            0.5 * self.last_u
        } else {
            if solution.status == QpStatus::MaxIterations {
                log::warn!("MPC QP hit the iteration limit; using the last iterate");
            }
            let u = self.cfg.constraints.input.clamp(solution.z[0]);
            self.previous = Some(solution.z.clone());
            u
        };
        self.last_u = u;
        MpcOutput {
            u,
            status: solution.status,
            iterations: solution.iterations,
            cold_iterations,
            slack: if fallback {
                0.0
            } else {
                solution.z[n].max(0.0)
            },
            preview,
            fallback,
        }
    }
}

/// PID gains and limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidConfig {
    /// [A/mm]
    pub kp: f64,
    /// [A/(mm s)]
    pub ki: f64,
    /// [A s/mm]
    pub kd: f64,
    /// Derivative filter time constant [s].
    pub derivative_filter: f64,
    /// Back-calculation gain [1/s].
    pub anti_windup: f64,
    pub saturation: Interval,
}

impl Default for PidConfig {
    /// Classic Ziegler–Nichols gains from [`ultimate_gain`] on the default
    /// truth plant (see `default_pid_gains_follow_tuning_rule`).
    fn default() -> Self {
        ZieglerNichols {
            ultimate_gain: DEFAULT_ULTIMATE_GAIN,
            ultimate_period: DEFAULT_ULTIMATE_PERIOD,
        }
        .classic(Constraints::default().input)
    }
}

/// Ultimate gain [A/mm] and period [s] measured on the default truth plant.
pub const DEFAULT_ULTIMATE_GAIN: f64 = 33.471;
pub const DEFAULT_ULTIMATE_PERIOD: f64 = 0.06;

impl PidConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        let finite = [
            self.kp,
            self.ki,
            self.kd,
            self.derivative_filter,
            self.anti_windup,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0);
        if !finite || !(self.saturation.lo < self.saturation.hi) {
            return Err(MpcError::Config(format!("PID configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidState {
    pub integral: f64,
    pub derivative: f64,
    pub last_error: Option<f64>,
}

/// One PID update: filtered derivative on the error, output clamped to the
/// saturation interval, back-calculation anti-windup.
pub fn pid_step(state: &mut PidState, cfg: &PidConfig, r: f64, y: f64, dt: f64) -> f64 {
    let e = r - y;
    let de = state.last_error.map_or(0.0, |prev| e - prev);
    let tf = cfg.derivative_filter;
    state.derivative = (tf * state.derivative + cfg.kd * de) / (tf + dt);
    let v = cfg.kp * e + state.integral + state.derivative;
    let u = cfg.saturation.clamp(v);
    state.integral += cfg.ki * e * dt + cfg.anti_windup * (u - v) * dt;
    state.last_error = Some(e);
    u
}

/// Ultimate-gain measurements for Ziegler–Nichols rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZieglerNichols {
    pub ultimate_gain: f64,
    pub ultimate_period: f64,
}

impl ZieglerNichols {
    /// Classic rule: `Kp = 0.6 Ku`, `Ti = Tu / 2`, `Td = Tu / 8`; derivative
    /// filter `Td / 10`; tracking time `sqrt(Ti Td)`.
    pub fn classic(&self, saturation: Interval) -> PidConfig {
        let kp = 0.6 * self.ultimate_gain;
        let ti = 0.5 * self.ultimate_period;
        let td = 0.125 * self.ultimate_period;
        PidConfig {
            kp,
            ki: if ti > 0.0 { kp / ti } else { 0.0 },
            kd: kp * td,
            derivative_filter: td / 10.0,
            anti_windup: if ti * td > 0.0 {
                1.0 / (ti * td).sqrt()
            } else {
                0.0
            },
            saturation,
        }
    }
}

/// Closed-loop P-only experiment on the truth plant: bisects for the
/// smallest gain whose response to a small step no longer decays, and
/// measures the oscillation period there.
pub fn ultimate_gain(
    plant: &TruthPlantParams,
    dt: f64,
    baseline: f64,
    saturation: Interval,
) -> ZieglerNichols {
    let step = 0.05;
    let steps = 600;
    let run = |kp: f64| -> Vec<f64> {
        let mut s = TruthPlantState::at_rest(baseline);
        let r = baseline + step;
        let mut errors = Vec::with_capacity(steps);
        for _ in 0..steps {
            let e = r - s.position;
            errors.push(e);
            let u = saturation.clamp(kp * e);
            s = truth_step(s, u, dt, plant).expect("finite input");
        }
        errors
    };
    let oscillation = |errors: &[f64], from: usize, to: usize| {
        let w = &errors[from..to];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        w.iter().map(|e| (e - mean).abs()).fold(0.0, f64::max)
    };
    let sustained = |kp: f64| {
        let e = run(kp);
        let early = oscillation(&e, steps / 3, 2 * steps / 3);
        let late = oscillation(&e, 2 * steps / 3, steps);
        early > 1e-9 && late >= 0.95 * early
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while !sustained(hi) {
        lo = hi;
        hi *= 2.0;
        assert!(hi < 1e9, "no ultimate gain found");
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if sustained(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let e = run(hi);
    let tail = &e[steps / 2..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let crossings: Vec<usize> = tail
        .windows(2)
        .enumerate()
        .filter(|(_, w)| (w[0] - mean) <= 0.0 && (w[1] - mean) > 0.0)
        .map(|(i, _)| i)
        .collect();
    let period = if crossings.len() >= 2 {
        (crossings[crossings.len() - 1] - crossings[0]) as f64 / (crossings.len() - 1) as f64 * dt
    } else {
        0.0
    };
    ZieglerNichols {
        ultimate_gain: hi,
        ultimate_period: period,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::augment;
    use crate::observer::{observer_step, place_observer_poles, PoleSpec};
    use crate::refgen::{build_reference, ReferenceParams, ReferenceShape};
    use crate::simbench::BeatClock;

    const DT: f64 = 0.01;

    fn nominal() -> LtiModel {
        let (a1, a2, b) = (1.575, -0.606, 0.031);
        let a11 = a1 + a2;
        let a12 = -a2 * DT;
        LtiModel::new(
            Matrix2::new(a11, a12, (a11 - 1.0) / DT, a12 / DT),
            Vector2::new(b, b / DT),
            DT,
        )
        .unwrap()
    }

    fn cfg(horizon: usize, rho: f64) -> MpcConfig {
        MpcConfig {
            horizon,
            rho,
            ..MpcConfig::default()
        }
    }

    #[test]
    fn steady_state_reference_is_a_fixed_point() {
        let m = nominal();
        let r = 0.3;
        let u_ss = (1.0 - m.a[(0, 0)]) * r / m.b[0];
        let x0 = Vector2::new(r, 0.0);
        let c = cfg(15, 0.0);
        let qp = build_tracking_qp(&m, &x0, &[0.0; 50], 3, &[r; 15], &c).unwrap();
        let s = solve_qp(&qp.problem, &c.qp).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!(qp.tracking_cost(&s.z, &[r; 15], 0.0) < 1e-14);
        for i in 0..15 {
            assert!(
                (s.z[i] - u_ss).abs() < 1e-7,
                "u[{i}] = {} vs {u_ss}",
                s.z[i]
            );
        }
    }

    #[test]
    fn one_step_horizon_matches_closed_form() {
        let m = nominal();
        let c = cfg(1, 1e-3);
        let x0 = Vector2::new(0.1, -2.0);
        let delta = 0.02;
        for r in [0.0, 0.2, 3.0] {
            let qp = build_tracking_qp(&m, &x0, &[delta; 4], 1, &[r], &c).unwrap();
            let s = solve_qp(&qp.problem, &c.qp).unwrap();
            let cb = (m.c * m.b)[0];
            let cax = (m.c * m.a * x0)[0];
            let expected = c
                .constraints
                .input
                .clamp(-cb * (cax + delta - r) / (cb * cb + c.rho));
            assert!(
                (s.z[0] - expected).abs() < 1e-9,
                "r={r}: {} vs {expected}",
                s.z[0]
            );
        }
    }

    #[test]
    fn preview_is_compensated_in_predicted_outputs() {
        let m = nominal();
        let c = cfg(10, 0.0);
        let delta = 0.05;
        let r = 0.2;
        let x0 = Vector2::new(r - delta, 0.0);
        let qp = build_tracking_qp(&m, &x0, &[delta; 20], 0, &[r; 10], &c).unwrap();
        let s = solve_qp(&qp.problem, &c.qp).unwrap();
        let y = qp.predicted_outputs(&s.z);
        for i in 0..10 {
            assert!((y[i] - r).abs() < 1e-8);
            let x_pos = y[i] - m.cd * delta;
            assert!((x_pos - (r - delta)).abs() < 1e-8);
        }
    }

    #[test]
    fn position_limit_engages_slack_only_when_needed() {
        let m = nominal();
        let mut c = cfg(15, 1e-6);
        c.constraints.position = Interval::new(-1.0, 0.25);
        let qp = build_tracking_qp(&m, &Vector2::zeros(), &[0.0; 30], 0, &[0.5; 15], &c).unwrap();
        let s = solve_qp(&qp.problem, &c.qp).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!(s.z[15] < 1e-8, "slack {}", s.z[15]);
        let y = qp.predicted_outputs(&s.z);
        assert!(y.iter().all(|v| *v <= 0.25 + 1e-8));
    }

    #[test]
    fn input_bounds_are_hard() {
        let m = nominal();
        let c = cfg(15, 1e-6);
        let qp = build_tracking_qp(&m, &Vector2::zeros(), &[0.0; 30], 0, &[2.0; 15], &c).unwrap();
        let s = solve_qp(&qp.problem, &c.qp).unwrap();
        assert!(s
            .z
            .rows(0, 15)
            .iter()
            .all(|u| (-10.0 - c.qp.tol..=10.0 + c.qp.tol).contains(u)));
    }

    #[test]
    fn rejects_wrong_window_length() {
        let m = nominal();
        let err = build_tracking_qp(&m, &Vector2::zeros(), &[0.0; 3], 0, &[0.0; 4], &cfg(5, 0.0));
        assert!(matches!(err, Err(MpcError::Input(_))));
    }

    const ORIGIN: f64 = 0.63;

    /// Closed loop on the nominal model (origin at the baseline) with an
    /// optional output offset. Returns absolute reference and output.
    fn nominal_loop(
        variant: MpcVariant,
        traj: &ReferenceTrajectory,
        periods: usize,
        offset: f64,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let m = nominal();
        let aug = augment(&m);
        let gain = place_observer_poles(&aug, &PoleSpec::default().poles()).unwrap();
        let t = traj.period();
        let mut ctrl = MpcController::new(m, MpcConfig::default(), variant, ORIGIN).unwrap();
        let mut mem = DisturbanceMemory::new(t);
        let mut est = ObserverState::default();
        let mut x = Vector2::zeros();
        let (mut rs, mut ys, mut us) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..periods * t {
            let phase = k % t;
            let y = (m.c * x)[0] + offset;
            let out = ctrl.step(&est, &mem, traj, phase).unwrap();
            est = observer_step(&est, &gain, &aug, out.u, y).unwrap();
            mem.record(est.dhat);
            rs.push(traj.at(phase));
            ys.push(y + ORIGIN);
            us.push(out.u);
            x = m.a * x + m.b * out.u;
        }
        (rs, ys, us)
    }

    #[test]
    fn regulation_at_baseline() {
        let traj = ReferenceTrajectory::constant(ORIGIN, 100, DT);
        let (_, ys, us) = nominal_loop(MpcVariant::OffsetFree, &traj, 1, 0.0);
        assert!(ys[10..].iter().all(|y| (y - ORIGIN).abs() < 1e-6));
        assert!(us.iter().all(|u| u.abs() < 1e-6));
    }

    #[test]
    fn nominal_pulse_tracking_is_tight() {
        let clock = BeatClock::new(60.0, DT).unwrap();
        let traj = build_reference(
            &ReferenceParams::new(0.1, 0.5),
            &ReferenceShape::default(),
            &clock,
        )
        .unwrap();
        let (rs, ys, _) = nominal_loop(MpcVariant::OffsetFree, &traj, 10, 0.0);
        let rmse = (rs
            .iter()
            .zip(&ys)
            .map(|(r, y)| (r - y).powi(2))
            .sum::<f64>()
            / rs.len() as f64)
            .sqrt();
        let range = 0.6;
        let nrmse = 100.0 * rmse / range;
        assert!(nrmse < 2.0, "nominal NRMSE {nrmse}%");
    }

    #[test]
    fn output_offset_removed_only_with_preview() {
        let clock = BeatClock::new(60.0, DT).unwrap();
        let traj = build_reference(
            &ReferenceParams::new(0.1, 0.5),
            &ReferenceShape::default(),
            &clock,
        )
        .unwrap();
        let t = traj.period();
        let plateau: Vec<usize> = (0..t).filter(|&k| (16..=30).contains(&k)).collect();
        let (_, ys, _) = nominal_loop(MpcVariant::OffsetFree, &traj, 4, 0.1);
        let (_, ys_plain, _) = nominal_loop(MpcVariant::Plain, &traj, 4, 0.1);
        for &k in &plateau {
            let idx = 3 * t + k;
            assert!(
                (ys[idx] - traj.at(k)).abs() < 1e-3,
                "offset-free error {}",
                ys[idx] - traj.at(k)
            );
            assert!((ys_plain[idx] - traj.at(k)).abs() > 0.05);
        }
    }

    #[test]
    fn zero_memory_makes_variants_identical() {
        let m = nominal();
        let traj = ReferenceTrajectory {
            samples: (0..50).map(|k| 0.3 * ((k as f64) * 0.2).sin()).collect(),
            trigger_phase: 0,
            dt: DT,
        };
        let mem = DisturbanceMemory::new(50);
        let mut a = MpcController::new(m, MpcConfig::default(), MpcVariant::Plain, 0.0).unwrap();
        let mut b =
            MpcController::new(m, MpcConfig::default(), MpcVariant::OffsetFree, 0.0).unwrap();
        for k in 0..50 {
            let est = ObserverState::new(0.01 * k as f64, 0.1, 0.02);
            let ua = a.step(&est, &mem, &traj, k).unwrap().u;
            let ub = b.step(&est, &mem, &traj, k).unwrap().u;
            assert_eq!(ua, ub);
        }
    }

    #[test]
    fn warm_start_rarely_needs_more_iterations() {
        let m = nominal();
        let clock = BeatClock::new(90.0, DT).unwrap();
        let traj = build_reference(
            &ReferenceParams::new(0.05, 1.2),
            &ReferenceShape::default(),
            &clock,
        )
        .unwrap();
        let c = MpcConfig {
            compare_cold_start: true,
            ..MpcConfig::default()
        };
        let mut ctrl = MpcController::new(m, c, MpcVariant::OffsetFree, ORIGIN).unwrap();
        let mem = DisturbanceMemory::new(clock.period());
        let mut x = Vector2::zeros();
        for k in 0..5 * clock.period() {
            let est = ObserverState::new(x[0], x[1], 0.0);
            let out = ctrl.step(&est, &mem, &traj, k % clock.period()).unwrap();
            x = m.a * x + m.b * out.u;
        }
        assert!(
            ctrl.warm_start_stats().fraction() >= 0.9,
            "{:?}",
            ctrl.warm_start_stats()
        );
    }

    #[test]
    fn fallback_decays_previous_input() {
        let mut ctrl =
            MpcController::new(nominal(), MpcConfig::default(), MpcVariant::Plain, 0.0).unwrap();
        ctrl.last_u = 4.0;
        let infeasible = QpSolution {
            z: DVector::zeros(16),
            objective: 0.0,
            status: QpStatus::Infeasible,
            iterations: 3,
            primal_residual: 1.0,
            dual_residual: 0.0,
            duality_gap: 0.0,
            multipliers: DVector::zeros(0),
            objective_trace: vec![],
            working_set: vec![],
        };
        let first = ctrl.apply(infeasible.clone(), None, 0.0);
        let second = ctrl.apply(infeasible, None, 0.0);
        assert!(first.fallback && second.fallback);
        assert_eq!((first.u, second.u), (2.0, 1.0));
        assert_eq!(ctrl.fallback_count(), 2);
    }

    #[test]
    fn pid_zero_error_gives_zero_input() {
        let mut s = PidState::default();
        assert_eq!(pid_step(&mut s, &PidConfig::default(), 0.7, 0.7, DT), 0.0);
    }

    #[test]
    fn pid_proportional_only_is_clipped() {
        let cfg = PidConfig {
            kp: 30.0,
            ki: 0.0,
            kd: 0.0,
            ..PidConfig::default()
        };
        for e in [0.1, -0.2, 0.5, -1.0] {
            let mut s = PidState::default();
            let u = pid_step(&mut s, &cfg, e, 0.0, DT);
            assert_eq!(u, (30.0 * e).clamp(-10.0, 10.0));
        }
    }

    #[test]
    fn anti_windup_bounds_integrator_while_saturated() {
        let cfg = PidConfig {
            kp: 5.0,
            ki: 50.0,
            kd: 0.0,
            anti_windup: 20.0,
            ..PidConfig::default()
        };
        let mut wound = PidState::default();
        let mut free = PidState::default();
        let no_aw = PidConfig {
            anti_windup: 0.0,
            ..cfg
        };
        for _ in 0..500 {
            pid_step(&mut wound, &cfg, 5.0, 0.0, DT);
            pid_step(&mut free, &no_aw, 5.0, 0.0, DT);
        }
        assert!(wound.integral < free.integral / 10.0);
        assert!(wound.integral.is_finite());
    }

    #[test]
    fn default_pid_gains_follow_tuning_rule() {
        let zn = ultimate_gain(
            &TruthPlantParams::default(),
            DT,
            0.63,
            Constraints::default().input,
        );
        assert!(
            (zn.ultimate_gain - DEFAULT_ULTIMATE_GAIN).abs() < 1e-3,
            "{zn:?}"
        );
        assert!(
            (zn.ultimate_period - DEFAULT_ULTIMATE_PERIOD).abs() < 1e-9,
            "{zn:?}"
        );
        let expected = zn.classic(Constraints::default().input);
        let d = PidConfig::default();
        assert!((d.kp - expected.kp).abs() < 1e-3 * expected.kp);
    }
}
