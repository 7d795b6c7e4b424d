//! Gaussian-process surrogate with a squared-exponential kernel.
//!
//! Inputs are mapped to the unit square through the parameter box; outputs
//! are standardized to zero mean and unit (population) variance of the
//! current dataset. Penalty costs are first raised to a floor just below the
//! worst regular cost so a single `-1e6` does not flatten the rest of the
//! standardized data.

use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refgen::{ReferenceParams, ThetaBounds};

/// Costs at or below this value are treated as penalties.
pub const PENALTY_CUTOFF: f64 = -1e5;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GpError {
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error("non-finite cost or parameter in dataset")]
    NonFinite,
    #[error("Gram matrix not positive definite even with jitter {0:e}")]
    Factorization(f64),
    #[error("dataset csv: {0}")]
    Csv(String),
}

/// Kernel hyperparameters in standardized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpHyperparams {
    /// Per-dimension lengthscales (delay, magnitude) on the unit square.
    pub lengthscales: [f64; 2],
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Default for GpHyperparams {
    fn default() -> Self {
        Self {
            lengthscales: [0.2, 0.2],
            signal_variance: 1.0,
            noise_variance: 0.05 * 0.05,
        }
    }
}

impl GpHyperparams {
    pub fn validate(&self) -> Result<(), GpError> {
        let vals = [
            self.lengthscales[0],
            self.lengthscales[1],
            self.signal_variance,
            self.noise_variance,
        ];
        if vals.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(GpError::Hyperparams(format!("{self:?}")))
        }
    }

    /// `σ_f² exp(-½ Σ_d ((a_d - b_d) / ℓ_d)²)` on standardized inputs.
    pub fn kernel(&self, a: &[f64; 2], b: &[f64; 2]) -> f64 {
        let r2: f64 = (0..2)
            .map(|d| ((a[d] - b[d]) / self.lengthscales[d]).powi(2))
            .sum();
        self.signal_variance * (-0.5 * r2).exp()
    }
}

/// One evaluated parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub iteration: usize,
    pub delay_s: f64,
    pub magnitude_mm: f64,
    pub cost: f64,
    /// Simulated time at the end of the evaluation [s].
    pub timestamp_s: f64,
}

impl Observation {
    pub fn theta(&self) -> ReferenceParams {
        ReferenceParams::new(self.delay_s, self.magnitude_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoDataset {
    pub entries: Vec<Observation>,
}

impl BoDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, iteration: usize, theta: ReferenceParams, cost: f64, timestamp_s: f64) {
        self.entries.push(Observation {
            iteration,
            delay_s: theta.delay,
            magnitude_mm: theta.magnitude,
            cost,
            timestamp_s,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry with the largest cost (earliest on ties).
    pub fn best(&self) -> Option<&Observation> {
        self.entries
            .iter()
            .fold(None, |best: Option<&Observation>, o| match best {
                Some(b) if b.cost >= o.cost => Some(b),
                _ => Some(o),
            })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), GpError> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e).map_err(|e| GpError::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| GpError::Csv(e.to_string()))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, GpError> {
        let mut r = csv::Reader::from_reader(input);
        let entries = r
            .deserialize()
            .collect::<Result<Vec<Observation>, _>>()
            .map_err(|e| GpError::Csv(e.to_string()))?;
        Ok(Self { entries })
    }
}

/// Replaces penalty costs by a floor one regular-cost range below the worst
/// regular cost. Returns the input unchanged when nothing or everything is
/// a penalty.
pub fn clip_penalties(costs: &[f64]) -> Vec<f64> {
    let regular: Vec<f64> = costs
        .iter()
        .copied()
        .filter(|c| *c > PENALTY_CUTOFF)
        .collect();
    if regular.is_empty() || regular.len() == costs.len() {
        return costs.to_vec();
    }
    let lo = regular.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = regular.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = lo - (hi - lo).max(1e-3);
    costs
        .iter()
        .map(|&c| if c > PENALTY_CUTOFF { c } else { floor })
        .collect()
}

/// Fitted posterior (or the prior when the dataset is empty).
#[derive(Debug, Clone)]
pub struct GpPosterior {
    hp: GpHyperparams,
    bounds: ThetaBounds,
    inputs: Vec<[f64; 2]>,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
    y_mean: f64,
    y_scale: f64,
    jitter: f64,
}

impl GpPosterior {
    pub fn prior(hp: GpHyperparams, bounds: ThetaBounds) -> Result<Self, GpError> {
        hp.validate()?;
        Ok(Self {
            hp,
            bounds,
            inputs: Vec::new(),
            chol: None,
            alpha: DVector::zeros(0),
            y_mean: 0.0,
            y_scale: 1.0,
            jitter: 0.0,
        })
    }

    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.hp
    }

    /// Jitter added to the diagonal during factorization (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Output standardization `(mean, scale)`.
    pub fn output_scaling(&self) -> (f64, f64) {
        (self.y_mean, self.y_scale)
    }

    fn cross(&self, x: &[f64; 2]) -> DVector<f64> {
        DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|xi| self.hp.kernel(xi, x)),
        )
    }

    /// Posterior mean and latent variance in standardized output units.
    pub fn predict_standardized(&self, theta: &ReferenceParams) -> (f64, f64) {
        let x = self.bounds.to_unit(theta);
        let prior_var = self.hp.signal_variance;
        let Some(chol) = &self.chol else {
            return (0.0, prior_var);
        };
        let k = self.cross(&x);
        let mean = k.dot(&self.alpha);
        let v = chol
            .l_dirty()
            .solve_lower_triangular(&k)
            .expect("Cholesky factor is nonsingular");
        let var = prior_var - v.norm_squared();
        if var < -1e-9 {
            log::warn!("posterior variance {var:e} clamped to 0");
        }
        (mean, var.max(0.0))
    }

    /// Posterior mean and standard deviation of the cost.
    pub fn predict(&self, theta: &ReferenceParams) -> (f64, f64) {
        let (m, v) = self.predict_standardized(theta);
        (self.y_mean + self.y_scale * m, self.y_scale * v.sqrt())
    }

    /// Log marginal likelihood of the standardized outputs.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let Some(chol) = &self.chol else { return 0.0 };
        let n = self.inputs.len() as f64;
        let y = chol.l_dirty() * chol.l_dirty().transpose() * &self.alpha;
        let logdet: f64 = chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
            * 2.0;
        -0.5 * y.dot(&self.alpha) - 0.5 * logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Factorizes `K + σ_n² I` for the dataset.
pub fn gp_fit(
    data: &BoDataset,
    hp: &GpHyperparams,
    bounds: &ThetaBounds,
) -> Result<GpPosterior, GpError> {
    hp.validate()?;
    if data.is_empty() {
        return GpPosterior::prior(*hp, *bounds);
    }
    if data
        .entries
        .iter()
        .any(|o| !(o.cost.is_finite() && o.delay_s.is_finite() && o.magnitude_mm.is_finite()))
    {
        return Err(GpError::NonFinite);
    }
    let inputs: Vec<[f64; 2]> = data
        .entries
        .iter()
        .map(|o| bounds.to_unit(&o.theta()))
        .collect();
    let costs = clip_penalties(&data.entries.iter().map(|o| o.cost).collect::<Vec<_>>());
    let n = costs.len();
    let y_mean = costs.iter().sum::<f64>() / n as f64;
    let var = costs.iter().map(|c| (c - y_mean).powi(2)).sum::<f64>() / n as f64;
    let y_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    let y = DVector::from_iterator(n, costs.iter().map(|c| (c - y_mean) / y_scale));

    let gram = DMatrix::from_fn(n, n, |i, j| {
        hp.kernel(&inputs[i], &inputs[j]) + if i == j { hp.noise_variance } else { 0.0 }
    });
    let mut jitter = 0.0;
    let chol = loop {
        let mut m = gram.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            break c;
        }
        jitter = if jitter == 0.0 {
            JITTER_START
        } else {
            jitter * 10.0
        };
        if jitter > JITTER_MAX * (1.0 + 1e-9) {
            return Err(GpError::Factorization(JITTER_MAX));
        }
        log::warn!("Gram matrix factorization failed; retrying with jitter {jitter:e}");
    };
    let alpha = chol.solve(&y);
    Ok(GpPosterior {
        hp: *hp,
        bounds: *bounds,
        inputs,
        chol: Some(chol),
        alpha,
        y_mean,
        y_scale,
        jitter,
    })
}

/// Grid search of lengthscales and noise variance maximizing the log
/// marginal likelihood; the signal variance stays fixed.
pub fn refit_hyperparams(
    data: &BoDataset,
    base: &GpHyperparams,
    bounds: &ThetaBounds,
) -> GpHyperparams {
    const LENGTHS: [f64; 7] = [0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 1.0];
    const NOISES: [f64; 4] = [1e-4, 2.5e-3, 1e-2, 5e-2];
    let mut best = (f64::NEG_INFINITY, *base);
    for &l0 in &LENGTHS {
        for &l1 in &LENGTHS {
            for &nv in &NOISES {
                let hp = GpHyperparams {
                    lengthscales: [l0, l1],
                    noise_variance: nv,
                    ..*base
                };
                if let Ok(post) = gp_fit(data, &hp, bounds) {
                    let lml = post.log_marginal_likelihood();
                    if lml > best.0 {
                        best = (lml, hp);
                    }
                }
            }
        }
    }
    best.1
}
