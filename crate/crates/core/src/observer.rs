//! Luenberger observer on the disturbance-augmented model and the
//! per-phase disturbance memory used as preview by the MPC.

use nalgebra::{Complex, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::AugmentedModel;

/// Observability-matrix condition number above which the gain is computed
/// from the characteristic-coefficient system instead of Ackermann's formula.
const ACKERMANN_COND_LIMIT: f64 = 1e8;
/// Largest accepted deviation of the realized poles from the requested ones.
const POLE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum ObserverError {
    #[error(
        "(A_a, C_a) is not observable: observability rank {rank} < 3 (condition {condition:.3e})"
    )]
    Unobservable { rank: usize, condition: f64 },
    #[error("pole {0} is not strictly inside the unit circle")]
    UnstablePole(Complex<f64>),
    #[error("requested poles are not closed under conjugation")]
    NotConjugateClosed,
    #[error("pole placement missed the requested spectrum by {0:.3e}")]
    PlacementInaccurate(f64),
    #[error("non-finite observer input")]
    NonFinite,
    #[error("disturbance memory has not completed a period yet")]
    MemoryNotReady,
}

/// Observer gain `L = [L_x; L_d]` with the poles it was designed for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObserverGain {
    pub l: Vector3<f64>,
    pub poles: [Complex<f64>; 3],
    /// Condition number of the observability matrix at design time.
    pub condition: f64,
}

impl ObserverGain {
    /// Error dynamics matrix `A_a - L C_a`.
    pub fn error_dynamics(&self, model: &AugmentedModel) -> Matrix3<f64> {
        model.a - self.l * model.c
    }
}

/// Real poles from a config list (complex poles are given in conjugate pairs
/// as `[re, im]`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoleSpec(pub [[f64; 2]; 3]);

impl Default for PoleSpec {
    fn default() -> Self {
        Self([[0.5, 0.0], [0.55, 0.0], [0.8, 0.0]])
    }
}

impl PoleSpec {
    pub fn real(p: [f64; 3]) -> Self {
        Self([[p[0], 0.0], [p[1], 0.0], [p[2], 0.0]])
    }

    pub fn poles(&self) -> [Complex<f64>; 3] {
        self.0.map(|[re, im]| Complex::new(re, im))
    }
}

/// Observer gain placing `eig(A_a - L C_a)` at `poles`.
///
/// Uses Ackermann's formula on the dual pair, `L = phi(A_a) O^{-1} e_3`,
/// and falls back to matching characteristic-polynomial coefficients when
/// the observability matrix is poorly conditioned.
pub fn place_observer_poles(
    model: &AugmentedModel,
    poles: &[Complex<f64>; 3],
) -> Result<ObserverGain, ObserverError> {
    for &p in poles {
        if !(p.norm() < 1.0) {
            return Err(ObserverError::UnstablePole(p));
        }
    }
    for &p in poles {
        if p.im.abs() > 0.0 && !poles.iter().any(|q| (q - p.conj()).norm() < 1e-12) {
            return Err(ObserverError::NotConjugateClosed);
        }
    }

    let obs = model.observability_matrix();
    let sv = obs.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    let rank = sv.iter().filter(|&&s| s > smax * 1e-12).count();
    if smax == 0.0 || rank < 3 {
        return Err(ObserverError::Unobservable {
            rank: if smax == 0.0 { 0 } else { rank },
            condition,
        });
    }

    let coeffs = monic_coefficients(poles);
    let l = if condition <= ACKERMANN_COND_LIMIT {
        let phi = model.a.pow(3)
            + model.a.pow(2) * coeffs[0]
            + model.a * coeffs[1]
            + Matrix3::identity() * coeffs[2];
        let obs_inv = obs
            .try_inverse()
            .ok_or(ObserverError::Unobservable { rank, condition })?;
        phi * obs_inv * Vector3::new(0.0, 0.0, 1.0)
    } else {
        log::warn!("observability condition {condition:.3e}; using coefficient matching");
        coefficient_matching_gain(model, &coeffs)
            .ok_or(ObserverError::Unobservable { rank, condition })?
    };

    let gain = ObserverGain {
        l,
        poles: *poles,
        condition,
    };
    // Coefficients rather than eigenvalues: repeated poles make the computed
    // spectrum sensitive at the cube root of machine precision.
    let realized = char_coefficients(&gain.error_dynamics(model));
    let miss = (0..3)
        .map(|i| (realized[i] - coeffs[i]).abs())
        .fold(0.0, f64::max);
    if miss > POLE_TOLERANCE {
        return Err(ObserverError::PlacementInaccurate(miss));
    }
    Ok(gain)
}

/// `[c2, c1, c0]` of `z^3 + c2 z^2 + c1 z + c0 = prod(z - p_i)`.
fn monic_coefficients(poles: &[Complex<f64>; 3]) -> [f64; 3] {
    let [p1, p2, p3] = *poles;
    let c2 = -(p1 + p2 + p3);
    let c1 = p1 * p2 + p1 * p3 + p2 * p3;
    let c0 = -(p1 * p2 * p3);
    [c2.re, c1.re, c0.re]
}

/// Characteristic coefficients `[c2, c1, c0]` of a 3x3 matrix.
fn char_coefficients(m: &Matrix3<f64>) -> [f64; 3] {
    let minors = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)] + m[(0, 0)] * m[(2, 2)]
        - m[(0, 2)] * m[(2, 0)]
        + m[(1, 1)] * m[(2, 2)]
        - m[(1, 2)] * m[(2, 1)];
    [-m.trace(), minors, -m.determinant()]
}

/// Solves the affine map `L -> charpoly(A_a - L C_a)` for the target
/// coefficients.
fn coefficient_matching_gain(model: &AugmentedModel, target: &[f64; 3]) -> Option<Vector3<f64>> {
    let base = char_coefficients(&model.a);
    let mut sens = Matrix3::zeros();
    for j in 0..3 {
        let mut e = Vector3::zeros();
        e[j] = 1.0;
        let c = char_coefficients(&(model.a - e * model.c));
        for i in 0..3 {
            sens[(i, j)] = c[i] - base[i];
        }
    }
    let rhs = Vector3::new(
        target[0] - base[0],
        target[1] - base[1],
        target[2] - base[2],
    );
    sens.lu().solve(&rhs)
}

/// Largest distance from each requested pole to the nearest unused
/// eigenvalue of `m`.
pub fn spectrum_mismatch(m: &Matrix3<f64>, poles: &[Complex<f64>; 3]) -> f64 {
    let eigs = m.complex_eigenvalues();
    let mut used = [false; 3];
    let mut worst: f64 = 0.0;
    for p in poles {
        let (idx, dist) = (0..3)
            .filter(|&i| !used[i])
            .map(|i| (i, (eigs[i] - p).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("three eigenvalues");
        used[idx] = true;
        worst = worst.max(dist);
    }
    worst
}

/// Augmented estimate `(x_hat, d_hat)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObserverState {
    pub xhat: nalgebra::Vector2<f64>,
    pub dhat: f64,
}

impl ObserverState {
    pub fn new(position: f64, velocity: f64, dhat: f64) -> Self {
        Self {
            xhat: nalgebra::Vector2::new(position, velocity),
            dhat,
        }
    }

    pub fn stacked(&self) -> Vector3<f64> {
        Vector3::new(self.xhat[0], self.xhat[1], self.dhat)
    }

    fn from_stacked(z: Vector3<f64>) -> Self {
        Self::new(z[0], z[1], z[2])
    }

    /// Predicted output `C_a [x_hat; d_hat]`.
    pub fn output(&self, model: &AugmentedModel) -> f64 {
        (model.c * self.stacked())[0]
    }
}

/// One update of the predictor-form observer:
/// `z+ = A_a z + B_a u + L (y - C_a z)`.
pub fn observer_step(
    state: &ObserverState,
    gain: &ObserverGain,
    model: &AugmentedModel,
    u: f64,
    y: f64,
) -> Result<ObserverState, ObserverError> {
    if !(u.is_finite() && y.is_finite()) {
        return Err(ObserverError::NonFinite);
    }
    let z = state.stacked();
    let innovation = y - (model.c * z)[0];
    let next = model.a * z + model.b * u + gain.l * innovation;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(ObserverError::NonFinite);
    }
    Ok(ObserverState::from_stacked(next))
}

/// Disturbance estimates of the period in progress and of the last
/// completed period.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceMemory {
    current: Vec<f64>,
    previous: Vec<f64>,
    cursor: usize,
    completed: usize,
    last_change: Option<f64>,
}

impl DisturbanceMemory {
    /// Zero-initialized memory of period `t`.
    pub fn new(t: usize) -> Self {
        assert!(t > 0, "disturbance memory needs a positive period");
        Self {
            current: vec![0.0; t],
            previous: vec![0.0; t],
            cursor: 0,
            completed: 0,
            last_change: None,
        }
    }

    /// Memory whose previous period is `previous`, as if one period had
    /// already been recorded.
    pub fn with_previous(previous: Vec<f64>) -> Self {
        let t = previous.len();
        assert!(t > 0, "disturbance memory needs a positive period");
        Self {
            current: vec![0.0; t],
            previous,
            cursor: 0,
            completed: 1,
            last_change: None,
        }
    }

    pub fn period(&self) -> usize {
        self.previous.len()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn completed_periods(&self) -> usize {
        self.completed
    }

    /// Estimate recorded at `phase` in the last completed period.
    pub fn previous(&self, phase: usize) -> f64 {
        self.previous[phase % self.previous.len()]
    }

    pub fn previous_buffer(&self) -> &[f64] {
        &self.previous
    }

    pub fn current_buffer(&self) -> &[f64] {
        &self.current
    }

    /// Records `dhat` at the cursor. Returns true when this write completed
    /// a period, in which case the current buffer became the previous one.
    pub fn record(&mut self, dhat: f64) -> bool {
        self.current[self.cursor] = dhat;
        self.cursor += 1;
        if self.cursor < self.current.len() {
            return false;
        }
        let change = self
            .current
            .iter()
            .zip(&self.previous)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        self.last_change = Some(change);
        std::mem::swap(&mut self.current, &mut self.previous);
        self.cursor = 0;
        self.completed += 1;
        true
    }

    /// Largest per-phase change between the last two completed periods.
    pub fn last_change(&self) -> Option<f64> {
        self.last_change
    }

    /// True iff the last completed period differs from the one before it by
    /// at most `eps` at every phase.
    pub fn settled(&self, eps: f64) -> Result<bool, ObserverError> {
        self.last_change
            .map(|c| c <= eps)
            .ok_or(ObserverError::MemoryNotReady)
    }
}

/// Functional form of [`DisturbanceMemory::record`].
pub fn memory_update(mut mem: DisturbanceMemory, dhat: f64) -> DisturbanceMemory {
    mem.record(dhat);
    mem
}

/// Functional form of [`DisturbanceMemory::settled`].
pub fn settled(mem: &DisturbanceMemory, eps: f64) -> Result<bool, ObserverError> {
    mem.settled(eps)
}
