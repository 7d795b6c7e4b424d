//! Tracking and modulation metrics.

use serde::Serialize;
use thiserror::Error;

use crate::simbench::min_max;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("reference has zero range; NRMSE undefined")]
    ZeroRange,
    #[error("need at least 3 whole periods of length {period}, got {samples} samples")]
    TooFewPeriods { period: usize, samples: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackingReport {
    /// [%]
    pub nrmse: f64,
    /// [mm]
    pub mate: f64,
    pub samples: usize,
}

fn check_lengths(r: &[f64], y: &[f64], needed: usize) -> Result<(), MetricsError> {
    if r.len() != y.len() {
        return Err(MetricsError::LengthMismatch(r.len(), y.len()));
    }
    if r.len() < needed {
        return Err(MetricsError::TooShort {
            needed,
            got: r.len(),
        });
    }
    Ok(())
}

fn rmse(r: &[f64], y: &[f64]) -> f64 {
    (r.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / r.len() as f64).sqrt()
}

/// `100 · RMSE(r − y) / (max r − min r)`.
pub fn nrmse(r: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_lengths(r, y, 2)?;
    let (lo, hi) = min_max(r);
    let range = hi - lo;
    if range <= 0.0 {
        return Err(MetricsError::ZeroRange);
    }
    Ok(100.0 * rmse(r, y) / range)
}

/// Maximum absolute tracking error.
pub fn mate(r: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_lengths(r, y, 1)?;
    Ok(r.iter()
        .zip(y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

pub fn tracking_report(r: &[f64], y: &[f64]) -> Result<TrackingReport, MetricsError> {
    Ok(TrackingReport {
        nrmse: nrmse(r, y)?,
        mate: mate(r, y)?,
        samples: r.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModulationReport {
    /// [mmHg]
    pub baseline_amplitude: f64,
    /// [mmHg]
    pub actuated_amplitude: f64,
    pub amplification: f64,
    /// [mmHg]
    pub baseline_mean: f64,
    /// [mmHg]
    pub max_mean_increase: f64,
    /// [%]
    pub max_relative_mean_increase: f64,
}

impl ModulationReport {
    /// Builds a report from already-aggregated values.
    pub fn from_values(
        baseline_amplitude: f64,
        actuated_amplitude: f64,
        baseline_mean: f64,
        max_actuated_mean: f64,
    ) -> Self {
        let increase = max_actuated_mean - baseline_mean;
        Self {
            baseline_amplitude,
            actuated_amplitude,
            amplification: actuated_amplitude / baseline_amplitude,
            baseline_mean,
            max_mean_increase: increase,
            max_relative_mean_increase: 100.0 * increase / baseline_mean,
        }
    }

    /// Fixed-width table with values rounded to three decimals.
    pub fn table(&self) -> String {
        let rows = [
            ("Baseline amplitude [mmHg]", self.baseline_amplitude),
            ("Actuated amplitude [mmHg]", self.actuated_amplitude),
            ("Amplification factor", self.amplification),
            ("Baseline mean ICP [mmHg]", self.baseline_mean),
            (
                "Max absolute mean ICP increase [mmHg]",
                self.max_mean_increase,
            ),
            (
                "Max relative mean ICP increase [%]",
                self.max_relative_mean_increase,
            ),
        ];
        rows.iter()
            .map(|(name, v)| format!("{name:<40} {v:>10.3}\n"))
            .collect()
    }
}

/// Amplitude and mean of each whole period.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodStats {
    pub amplitudes: Vec<f64>,
    pub means: Vec<f64>,
}

pub fn period_stats(trace: &[f64], period: usize) -> Result<PeriodStats, MetricsError> {
    let whole = trace.len() / period.max(1);
    if period == 0 || whole < 3 {
        return Err(MetricsError::TooFewPeriods {
            period,
            samples: trace.len(),
        });
    }
    if !trace.len().is_multiple_of(period) {
        log::warn!(
            "trace of {} samples is not a whole number of {period}-sample periods; trimming",
            trace.len()
        );
    }
    let (amplitudes, means) = trace[..whole * period]
        .chunks(period)
        .map(|c| {
            let (lo, hi) = min_max(c);
            (hi - lo, c.iter().sum::<f64>() / period as f64)
        })
        .unzip();
    Ok(PeriodStats { amplitudes, means })
}

/// Averages per-period amplitudes and takes the largest per-period mean
/// increase over the baseline mean.
pub fn modulation_report(
    baseline: &[f64],
    actuated: &[f64],
    period: usize,
) -> Result<ModulationReport, MetricsError> {
    let b = period_stats(baseline, period)?;
    let a = period_stats(actuated, period)?;
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let max_mean = a.means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ModulationReport::from_values(
        avg(&b.amplitudes),
        avg(&a.amplitudes),
        avg(&b.means),
        max_mean,
    ))
}
