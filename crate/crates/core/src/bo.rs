//! Bayesian optimization of the reference parameters.
//!
//! The first `n_r` iterations sample θ uniformly from the feasible part of
//! the parameter box; later ones maximize `μ + β σ` of the GP over a dense
//! grid (row-major in delay, then magnitude; the lowest index wins ties).
//! Costs are rewards: larger is better, and θ* is the best observed θ.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{gp_fit, refit_hyperparams, BoDataset, GpError, GpHyperparams, GpPosterior};
use crate::refgen::{ReferenceParams, ThetaBounds};
use crate::simbench::min_max;

/// Cost assigned to evaluations aborted by a safety event.
pub const SAFETY_PENALTY: f64 = -1e6;

const MAX_REJECTION_DRAWS: usize = 100_000;

#[derive(Debug, Error)]
pub enum BoError {
    #[error("invalid BO configuration: {0}")]
    Config(String),
    #[error("no feasible parameter in the search box")]
    EmptyFeasibleSet,
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("closed loop: {0}")]
    Loop(String),
    #[error("output: {0}")]
    Io(String),
}

/// How the energy term of the cost treats pressure samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyMode {
    /// `(1/T) Σ (p_i - p_mean_base)²`
    Centered,
    /// `Σ p_i²`
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    /// n_m
    pub max_iterations: usize,
    /// n_r
    pub random_samples: usize,
    /// n_p
    pub eval_periods: usize,
    pub beta: f64,
    /// Settling threshold on the per-phase disturbance change [mm].
    pub settle_epsilon: f64,
    pub lambda: f64,
    pub energy: EnergyMode,
    /// Target peak-to-peak amplitude [mmHg].
    pub p_amp_ref: f64,
    /// Unactuated mean used by the centered energy term [mmHg].
    pub p_mean_base: f64,
    pub seed: u64,
    /// Acquisition grid points per dimension.
    pub grid: usize,
    pub max_settle_periods: usize,
    pub hyperparams: GpHyperparams,
    /// Refit hyperparameters every this many iterations (0 = never).
    pub refit_every: usize,
    pub bounds: ThetaBounds,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            random_samples: 5,
            eval_periods: 5,
            beta: 2.0,
            settle_epsilon: 0.01,
            lambda: 0.02,
            energy: EnergyMode::Centered,
            p_amp_ref: 2.0,
            p_mean_base: 15.0,
            seed: 0,
            grid: 64,
            max_settle_periods: 15,
            hyperparams: GpHyperparams::default(),
            refit_every: 0,
            bounds: ThetaBounds::default(),
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<(), BoError> {
        let fail = |m: &str| Err(BoError::Config(m.to_string()));
        if self.max_iterations == 0 {
            return fail("max_iterations must be positive");
        }
        if self.random_samples > self.max_iterations {
            return fail("random_samples exceeds max_iterations");
        }
        if self.eval_periods == 0 {
            return fail("eval_periods must be positive");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return fail("beta must be finite and nonnegative");
        }
        if !(self.settle_epsilon.is_finite() && self.settle_epsilon > 0.0) {
            return fail("settle_epsilon must be positive");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail("lambda must be nonnegative");
        }
        if !(self.p_amp_ref.is_finite() && self.p_mean_base.is_finite()) {
            return fail("pressure references must be finite");
        }
        if self.grid < 2 {
            return fail("grid needs at least 2 points per dimension");
        }
        self.hyperparams.validate()?;
        self.bounds
            .validate()
            .map_err(|e| BoError::Config(e.to_string()))?;
        Ok(())
    }

    fn energy_term(&self) -> EnergyTerm {
        match self.energy {
            EnergyMode::Centered => EnergyTerm::Centered(self.p_mean_base),
            EnergyMode::Raw => EnergyTerm::Raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnergyTerm {
    Raw,
    /// Mean squared deviation from the given baseline mean.
    Centered(f64),
}

/// `J = -(p_amp - p_amp_ref)² - λ E(p)` for one period of pressure samples.
pub fn cost_of_period(p: &[f64], p_amp_ref: f64, lambda: f64, energy: EnergyTerm) -> f64 {
    let (lo, hi) = min_max(p);
    let amp = if p.is_empty() { 0.0 } else { hi - lo };
    let e = match energy {
        EnergyTerm::Raw => p.iter().map(|v| v * v).sum::<f64>(),
        EnergyTerm::Centered(base) => {
            p.iter().map(|v| (v - base).powi(2)).sum::<f64>() / p.len().max(1) as f64
        }
    };
    -(amp - p_amp_ref).powi(2) - lambda * e
}

/// Result of one closed-loop period.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodOutcome {
    /// Pressure samples of the period [mmHg].
    pub pressures: Vec<f64>,
    /// Disturbance memory settled at the end of the period.
    pub settled: bool,
    pub safety_events: usize,
    /// Simulated time at the end of the period [s].
    pub time_s: f64,
}

/// Closed loop that can be driven one heartbeat period at a time.
pub trait PeriodRunner {
    fn feasible(&self, theta: &ReferenceParams) -> bool;
    fn set_reference(&mut self, theta: &ReferenceParams) -> Result<(), BoError>;
    fn run_period(&mut self, settle_epsilon: f64) -> Result<PeriodOutcome, BoError>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEvaluation {
    pub theta: ReferenceParams,
    pub period_costs: Vec<f64>,
    /// Mean of `period_costs`, the worst settling-period cost when the loop
    /// never settled, or [`SAFETY_PENALTY`].
    pub cost: f64,
    pub period_means: Vec<f64>,
    pub period_amplitudes: Vec<f64>,
    /// Periods run before the memory settled.
    pub settle_periods: usize,
    pub settled: bool,
    pub safety_events: usize,
    pub aborted: bool,
    pub time_s: f64,
}

/// Runs the loop with reference θ until the disturbance memory settles,
/// then averages the cost over `eval_periods` periods.
pub fn evaluate<R: PeriodRunner>(
    theta: &ReferenceParams,
    runner: &mut R,
    cfg: &BoConfig,
) -> Result<CostEvaluation, BoError> {
    let energy = cfg.energy_term();
    let cost = |p: &[f64]| cost_of_period(p, cfg.p_amp_ref, cfg.lambda, energy);
    let mut eval = CostEvaluation {
        theta: *theta,
        period_costs: Vec::new(),
        cost: f64::NAN,
        period_means: Vec::new(),
        period_amplitudes: Vec::new(),
        settle_periods: 0,
        settled: false,
        safety_events: 0,
        aborted: false,
        time_s: 0.0,
    };
    let abort = |mut eval: CostEvaluation, outcome: &PeriodOutcome| {
        log::warn!(
            "safety event while evaluating delay {:.4} s, magnitude {:.4} mm; assigning penalty",
            eval.theta.delay,
            eval.theta.magnitude
        );
        eval.safety_events += outcome.safety_events;
        eval.aborted = true;
        eval.cost = SAFETY_PENALTY;
        eval.time_s = outcome.time_s;
        eval
    };
    runner.set_reference(theta)?;
    let mut worst = f64::INFINITY;
    loop {
        let outcome = runner.run_period(cfg.settle_epsilon)?;
        if outcome.safety_events > 0 {
            return Ok(abort(eval, &outcome));
        }
        eval.time_s = outcome.time_s;
        if outcome.settled {
            eval.settled = true;
            break;
        }
        eval.settle_periods += 1;
        worst = worst.min(cost(&outcome.pressures));
        if eval.settle_periods >= cfg.max_settle_periods {
            log::warn!(
                "disturbance memory did not settle within {} periods",
                cfg.max_settle_periods
            );
            eval.cost = worst;
            return Ok(eval);
        }
    }
    for _ in 0..cfg.eval_periods {
        let outcome = runner.run_period(cfg.settle_epsilon)?;
        if outcome.safety_events > 0 {
            return Ok(abort(eval, &outcome));
        }
        let (lo, hi) = min_max(&outcome.pressures);
        eval.period_costs.push(cost(&outcome.pressures));
        eval.period_amplitudes.push(hi - lo);
        eval.period_means
            .push(outcome.pressures.iter().sum::<f64>() / outcome.pressures.len() as f64);
        eval.time_s = outcome.time_s;
    }
    eval.cost = eval.period_costs.iter().sum::<f64>() / eval.period_costs.len() as f64;
    Ok(eval)
}

/// Something BO can query: a closed loop or a synthetic function.
pub trait Objective {
    fn feasible(&self, theta: &ReferenceParams) -> bool;
    fn evaluate(
        &mut self,
        theta: &ReferenceParams,
        cfg: &BoConfig,
    ) -> Result<CostEvaluation, BoError>;
}

/// Closed-loop objective built on a [`PeriodRunner`].
pub struct PlantObjective<R>(pub R);

impl<R: PeriodRunner> Objective for PlantObjective<R> {
    fn feasible(&self, theta: &ReferenceParams) -> bool {
        self.0.feasible(theta)
    }

    fn evaluate(
        &mut self,
        theta: &ReferenceParams,
        cfg: &BoConfig,
    ) -> Result<CostEvaluation, BoError> {
        evaluate(theta, &mut self.0, cfg)
    }
}

/// `J(θ) = -‖θ - θ_true‖²` in raw units; every θ in the box is feasible.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticQuadratic {
    pub theta_true: ReferenceParams,
}

impl Objective for SyntheticQuadratic {
    fn feasible(&self, _theta: &ReferenceParams) -> bool {
        true
    }

    fn evaluate(
        &mut self,
        theta: &ReferenceParams,
        _cfg: &BoConfig,
    ) -> Result<CostEvaluation, BoError> {
        let j = -((theta.delay - self.theta_true.delay).powi(2)
            + (theta.magnitude - self.theta_true.magnitude).powi(2));
        Ok(CostEvaluation {
            theta: *theta,
            period_costs: vec![j],
            cost: j,
            period_means: Vec::new(),
            period_amplitudes: Vec::new(),
            settle_periods: 0,
            settled: true,
            safety_events: 0,
            aborted: false,
            time_s: 0.0,
        })
    }
}

/// Surrogate and acquisition over the grid for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionGrid {
    pub iteration: usize,
    pub resolution: usize,
    /// Row-major by delay index, then magnitude index.
    pub theta: Vec<ReferenceParams>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub acquisition: Vec<f64>,
    pub feasible: Vec<bool>,
}

impl AcquisitionGrid {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), BoError> {
        let io = |e: csv::Error| BoError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "delay_s",
            "magnitude_mm",
            "mu",
            "sigma",
            "acquisition",
            "feasible",
        ])
        .map_err(io)?;
        for i in 0..self.theta.len() {
            w.write_record([
                format!("{:.6}", self.theta[i].delay),
                format!("{:.6}", self.theta[i].magnitude),
                format!("{:.9e}", self.mean[i]),
                format!("{:.9e}", self.std[i]),
                format!("{:.9e}", self.acquisition[i]),
                (self.feasible[i] as u8).to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| BoError::Io(e.to_string()))
    }
}

/// Grid points of the parameter box, row-major by delay.
pub fn grid_points(bounds: &ThetaBounds, resolution: usize) -> Vec<ReferenceParams> {
    let step = 1.0 / (resolution - 1) as f64;
    (0..resolution)
        .flat_map(|i| (0..resolution).map(move |j| [i as f64 * step, j as f64 * step]))
        .map(|x| bounds.from_unit(x))
        .collect()
}

/// Evaluates the posterior and UCB on the grid and returns the argmax
/// among feasible points (lowest index on ties).
pub fn acquisition_grid(
    posterior: &GpPosterior,
    cfg: &BoConfig,
    feasible: &dyn Fn(&ReferenceParams) -> bool,
    iteration: usize,
) -> Result<(usize, AcquisitionGrid), BoError> {
    let theta = grid_points(&cfg.bounds, cfg.grid);
    let mut grid = AcquisitionGrid {
        iteration,
        resolution: cfg.grid,
        mean: Vec::with_capacity(theta.len()),
        std: Vec::with_capacity(theta.len()),
        acquisition: Vec::with_capacity(theta.len()),
        feasible: Vec::with_capacity(theta.len()),
        theta,
    };
    let mut best: Option<(usize, f64)> = None;
    for (idx, t) in grid.theta.iter().enumerate() {
        let (mu, sd) = posterior.predict(t);
        let acq = mu + cfg.beta * sd;
        let ok = feasible(t);
        grid.mean.push(mu);
        grid.std.push(sd);
        grid.acquisition.push(acq);
        grid.feasible.push(ok);
        if ok && best.is_none_or(|(_, b)| acq > b) {
            best = Some((idx, acq));
        }
    }
    let (idx, _) = best.ok_or(BoError::EmptyFeasibleSet)?;
    Ok((idx, grid))
}

/// Uniform draw from the feasible part of the box by rejection.
pub fn random_feasible(
    bounds: &ThetaBounds,
    rng: &mut ChaCha8Rng,
    feasible: &dyn Fn(&ReferenceParams) -> bool,
) -> Result<ReferenceParams, BoError> {
    for _ in 0..MAX_REJECTION_DRAWS {
        let theta = bounds.from_unit([rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)]);
        if feasible(&theta) {
            return Ok(theta);
        }
    }
    Err(BoError::EmptyFeasibleSet)
}

/// Proposal for iteration `n` (1-based).
pub struct Proposal {
    pub theta: ReferenceParams,
    pub grid: Option<AcquisitionGrid>,
    /// Surrogate prediction at θ before evaluation.
    pub predicted: (f64, f64),
}

pub fn propose(
    dataset: &BoDataset,
    cfg: &BoConfig,
    hyperparams: &GpHyperparams,
    iteration: usize,
    rng: &mut ChaCha8Rng,
    feasible: &dyn Fn(&ReferenceParams) -> bool,
) -> Result<Proposal, BoError> {
    let posterior = gp_fit(dataset, hyperparams, &cfg.bounds)?;
    if iteration <= cfg.random_samples {
        let theta = random_feasible(&cfg.bounds, rng, feasible)?;
        return Ok(Proposal {
            predicted: posterior.predict(&theta),
            theta,
            grid: None,
        });
    }
    let (idx, grid) = acquisition_grid(&posterior, cfg, feasible, iteration)?;
    Ok(Proposal {
        theta: grid.theta[idx],
        predicted: (grid.mean[idx], grid.std[idx]),
        grid: Some(grid),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub theta: ReferenceParams,
    pub predicted_mean: f64,
    pub predicted_std: f64,
    pub evaluation: CostEvaluation,
    pub best_cost: f64,
    pub best_theta: ReferenceParams,
}

#[derive(Debug, Clone)]
pub struct BoRun {
    pub best_theta: ReferenceParams,
    pub best_cost: f64,
    pub dataset: BoDataset,
    pub trace: Vec<IterationRecord>,
    pub grids: Vec<AcquisitionGrid>,
}

impl BoRun {
    /// Iteration trace with one row per evaluation.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<(), BoError> {
        let io = |e: csv::Error| BoError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "n",
            "delay_s",
            "magnitude_mm",
            "period_costs",
            "cost",
            "settle_periods",
            "settled",
            "safety_events",
            "best_cost",
            "best_delay_s",
            "best_magnitude_mm",
        ])
        .map_err(io)?;
        for r in &self.trace {
            let e = &r.evaluation;
            let costs: Vec<String> = e.period_costs.iter().map(|c| format!("{c:.9e}")).collect();
            w.write_record([
                r.iteration.to_string(),
                format!("{:.6}", r.theta.delay),
                format!("{:.6}", r.theta.magnitude),
                costs.join(";"),
                format!("{:.9e}", e.cost),
                e.settle_periods.to_string(),
                (e.settled as u8).to_string(),
                e.safety_events.to_string(),
                format!("{:.9e}", r.best_cost),
                format!("{:.6}", r.best_theta.delay),
                format!("{:.6}", r.best_theta.magnitude),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| BoError::Io(e.to_string()))
    }
}

/// The full optimization loop.
pub fn run<O: Objective>(cfg: &BoConfig, objective: &mut O) -> Result<BoRun, BoError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dataset = BoDataset::new();
    let mut trace = Vec::with_capacity(cfg.max_iterations);
    let mut grids = Vec::new();
    let mut hp = cfg.hyperparams;
    let mut best: Option<(ReferenceParams, f64)> = None;
    for n in 1..=cfg.max_iterations {
        if cfg.refit_every > 0 && n > cfg.random_samples && n % cfg.refit_every == 0 {
            hp = refit_hyperparams(&dataset, &hp, &cfg.bounds);
            log::info!("iteration {n}: refit lengthscales {:?}", hp.lengthscales);
        }
        let feasible = |t: &ReferenceParams| objective.feasible(t);
        let proposal = propose(&dataset, cfg, &hp, n, &mut rng, &feasible)?;
        let theta = proposal.theta;
        if !objective.feasible(&theta) {
            return Err(BoError::EmptyFeasibleSet);
        }
        let evaluation = objective.evaluate(&theta, cfg)?;
        dataset.push(n, theta, evaluation.cost, evaluation.time_s);
        if best.is_none_or(|(_, c)| evaluation.cost > c) {
            best = Some((theta, evaluation.cost));
        }
        let (best_theta, best_cost) = best.expect("at least one evaluation");
        log::info!(
            "iteration {n}: delay {:.4} s, magnitude {:.4} mm, J {:.5}, best {:.5}",
            theta.delay,
            theta.magnitude,
            evaluation.cost,
            best_cost
        );
        trace.push(IterationRecord {
            iteration: n,
            theta,
            predicted_mean: proposal.predicted.0,
            predicted_std: proposal.predicted.1,
            evaluation,
            best_cost,
            best_theta,
        });
        if let Some(g) = proposal.grid {
            grids.push(g);
        }
    }
    let (best_theta, best_cost) = best.expect("max_iterations is positive");
    Ok(BoRun {
        best_theta,
        best_cost,
        dataset,
        trace,
        grids,
    })
}
