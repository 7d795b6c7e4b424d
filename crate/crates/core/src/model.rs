//! Discrete-time LTI plant models, disturbance augmentation and
//! least-squares identification.
//!
//! The nominal plant is a second-order position/velocity model
//!
//! ```text
//! x(k+1) = A x(k) + B u(k) + B_d d(k)
//! y(k)   = C x(k) + C_d d(k)
//! ```
//!
//! where the velocity state is the backward difference of position divided
//! by the sample period. The augmented model appends `d` as a constant state
//! so that an observer can estimate it.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, RowVector2, RowVector3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scaled condition number above which the identification regression is
/// treated as rank deficient.
const RANK_DEFICIENT_COND: f64 = 1e10;
/// Scaled condition number above which a weak-excitation warning is logged.
const WEAK_EXCITATION_COND: f64 = 1e6;
/// Shortest accepted identification record.
pub const MIN_IDENT_SAMPLES: usize = 50;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sample period must be positive and finite, got {0}")]
    InvalidPeriod(f64),
    #[error("model contains non-finite entries")]
    NonFinite,
    #[error("input and output records differ in length ({inputs} vs {outputs})")]
    LengthMismatch { inputs: usize, outputs: usize },
    #[error("identification needs at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("regression is rank deficient (scaled condition number {condition:.3e}); the input is not persistently exciting")]
    RankDeficient { condition: f64 },
    #[error("invalid interval [{lo}, {hi}] for {name}")]
    InvalidInterval {
        name: &'static str,
        lo: f64,
        hi: f64,
    },
    #[error("model document: {0}")]
    Document(String),
}

/// Second-order nominal plant with disturbance channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LtiModel {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub c: RowVector2<f64>,
    pub bd: Vector2<f64>,
    pub cd: f64,
    pub dt: f64,
}

impl LtiModel {
    /// Model with the output-disturbance convention `B_d = 0`, `C_d = 1`
    /// and `C` selecting position.
    pub fn new(a: Matrix2<f64>, b: Vector2<f64>, dt: f64) -> Result<Self, ModelError> {
        let model = Self {
            a,
            b,
            c: RowVector2::new(1.0, 0.0),
            bd: Vector2::zeros(),
            cd: 1.0,
            dt,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_disturbance(mut self, bd: Vector2<f64>, cd: f64) -> Self {
        self.bd = bd;
        self.cd = cd;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(ModelError::InvalidPeriod(self.dt));
        }
        let finite = self.a.iter().all(|v| v.is_finite())
            && self.b.iter().all(|v| v.is_finite())
            && self.c.iter().all(|v| v.is_finite())
            && self.bd.iter().all(|v| v.is_finite())
            && self.cd.is_finite();
        if !finite {
            return Err(ModelError::NonFinite);
        }
        Ok(())
    }

    /// Rank of the observability matrix `[C; C A]`.
    pub fn observability_rank(&self) -> usize {
        let mut obs = Matrix2::zeros();
        obs.set_row(0, &self.c);
        obs.set_row(1, &(self.c * self.a));
        numerical_rank(&DMatrix::from_iterator(2, 2, obs.iter().copied()))
    }

    /// Static output gain `C (I - A)^{-1} B`, when `A` has no unit eigenvalue.
    pub fn dc_gain(&self) -> Option<f64> {
        (Matrix2::identity() - self.a)
            .try_inverse()
            .map(|inv| (self.c * inv * self.b)[0])
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            a: [
                [self.a[(0, 0)], self.a[(0, 1)]],
                [self.a[(1, 0)], self.a[(1, 1)]],
            ],
            b: [self.b[0], self.b[1]],
            c: [self.c[0], self.c[1]],
            bd: [self.bd[0], self.bd[1]],
            cd: self.cd,
            dt: self.dt,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_document()).expect("model document always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let doc: ModelDocument =
            toml::from_str(text).map_err(|e| ModelError::Document(e.to_string()))?;
        doc.try_into()
    }
}

/// Text form of [`LtiModel`]: matrices as row-major nested arrays.
///
/// Field names (`a`, `b`, `c`, `bd`, `cd`, `dt`) are part of the stable
/// file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
    pub c: [f64; 2],
    pub bd: [f64; 2],
    pub cd: f64,
    pub dt: f64,
}

impl TryFrom<ModelDocument> for LtiModel {
    type Error = ModelError;

    fn try_from(doc: ModelDocument) -> Result<Self, Self::Error> {
        let model = LtiModel {
            a: Matrix2::new(doc.a[0][0], doc.a[0][1], doc.a[1][0], doc.a[1][1]),
            b: Vector2::new(doc.b[0], doc.b[1]),
            c: RowVector2::new(doc.c[0], doc.c[1]),
            bd: Vector2::new(doc.bd[0], doc.bd[1]),
            cd: doc.cd,
            dt: doc.dt,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Plant model augmented with a constant disturbance state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedModel {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    pub c: RowVector3<f64>,
}

impl AugmentedModel {
    pub fn observability_matrix(&self) -> Matrix3<f64> {
        let mut obs = Matrix3::zeros();
        obs.set_row(0, &self.c);
        obs.set_row(1, &(self.c * self.a));
        obs.set_row(2, &(self.c * self.a * self.a));
        obs
    }

    pub fn observability_rank(&self) -> usize {
        let obs = self.observability_matrix();
        numerical_rank(&DMatrix::from_iterator(3, 3, obs.iter().copied()))
    }

    /// Upper-left plant blocks `(A, B, C)`.
    pub fn plant_blocks(&self) -> (Matrix2<f64>, Vector2<f64>, RowVector2<f64>) {
        (
            self.a.fixed_view::<2, 2>(0, 0).into_owned(),
            self.b.fixed_rows::<2>(0).into_owned(),
            self.c.fixed_columns::<2>(0).into_owned(),
        )
    }

    /// Disturbance blocks `(B_d, C_d)`.
    pub fn disturbance_blocks(&self) -> (Vector2<f64>, f64) {
        (self.a.fixed_view::<2, 1>(0, 2).into_owned(), self.c[2])
    }
}

/// Builds `A_a = [[A, B_d], [0, 1]]`, `B_a = [B; 0]`, `C_a = [C, C_d]`.
pub fn augment(model: &LtiModel) -> AugmentedModel {
    let mut a = Matrix3::zeros();
    a.fixed_view_mut::<2, 2>(0, 0).copy_from(&model.a);
    a.fixed_view_mut::<2, 1>(0, 2).copy_from(&model.bd);
    a[(2, 2)] = 1.0;
    let b = Vector3::new(model.b[0], model.b[1], 0.0);
    let c = RowVector3::new(model.c[0], model.c[1], model.cd);
    AugmentedModel { a, b, c }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

/// State and input bounds of the actuator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Constraints {
    /// Motor position [mm].
    pub position: Interval,
    /// Motor velocity [mm/s].
    pub velocity: Interval,
    /// Motor current [A].
    pub input: Interval,
}

impl Default for Constraints {
    fn default() -> Self {
        Self {
            position: Interval::new(0.0, 2.6),
            velocity: Interval::new(-100.0, 100.0),
            input: Interval::new(-10.0, 10.0),
        }
    }
}

impl Constraints {
    pub fn validate(&self, baseline_position: f64) -> Result<(), ModelError> {
        for (name, iv) in [
            ("position", self.position),
            ("velocity", self.velocity),
            ("input", self.input),
        ] {
            if !(iv.lo < iv.hi) {
                return Err(ModelError::InvalidInterval {
                    name,
                    lo: iv.lo,
                    hi: iv.hi,
                });
            }
        }
        if !self.position.contains(baseline_position)
            || !self.velocity.contains(0.0)
            || !self.input.contains(0.0)
        {
            return Err(ModelError::InvalidInterval {
                name: "baseline operating point",
                lo: self.position.lo,
                hi: self.position.hi,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentOptions {
    /// Fit an additive constant in the position regression and discard it
    /// from the returned model (detrending around an operating point).
    pub intercept: bool,
}

/// Result of [`identify_lti_with`].
#[derive(Debug, Clone)]
pub struct Identification {
    pub model: LtiModel,
    /// Fitted constant of the position regression (zero without intercept).
    pub offset: f64,
    /// Condition number of the column-normalized regressor matrix.
    pub condition: f64,
    /// RMS one-step-ahead position prediction error.
    pub residual_rms: f64,
}

/// Least-squares fit of a second-order position model from input/output data.
pub fn identify_lti(inputs: &[f64], outputs: &[f64], dt: f64) -> Result<LtiModel, ModelError> {
    identify_lti_with(inputs, outputs, dt, IdentOptions::default()).map(|id| id.model)
}

/// Fits `y(k+1) = a11 y(k) + a12 v(k) + b1 u(k) [+ c]` with
/// `v(k) = (y(k) - y(k-1)) / dt`; the velocity row follows from the state
/// definition as `(row1 - e1) / dt`.
pub fn identify_lti_with(
    inputs: &[f64],
    outputs: &[f64],
    dt: f64,
    opts: IdentOptions,
) -> Result<Identification, ModelError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(ModelError::InvalidPeriod(dt));
    }
    if inputs.len() != outputs.len() {
        return Err(ModelError::LengthMismatch {
            inputs: inputs.len(),
            outputs: outputs.len(),
        });
    }
    let n = inputs.len();
    if n < MIN_IDENT_SAMPLES {
        return Err(ModelError::TooFewSamples {
            min: MIN_IDENT_SAMPLES,
            got: n,
        });
    }
    if inputs.iter().chain(outputs).any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite);
    }

    let cols = if opts.intercept { 4 } else { 3 };
    let rows = n - 2;
    let mut phi = DMatrix::zeros(rows, cols);
    let mut target = DVector::zeros(rows);
    for (r, k) in (1..n - 1).enumerate() {
        let vel = (outputs[k] - outputs[k - 1]) / dt;
        phi[(r, 0)] = outputs[k];
        phi[(r, 1)] = vel;
        phi[(r, 2)] = inputs[k];
        if opts.intercept {
            phi[(r, 3)] = 1.0;
        }
        target[r] = outputs[k + 1];
    }

    // Column normalization makes the condition number a statement about
    // excitation rather than units.
    let norms: Vec<f64> = (0..cols).map(|j| phi.column(j).norm()).collect();
    if norms.contains(&0.0) {
        return Err(ModelError::RankDeficient {
            condition: f64::INFINITY,
        });
    }
    let mut scaled = phi.clone();
    for (j, &s) in norms.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if condition > RANK_DEFICIENT_COND {
        return Err(ModelError::RankDeficient { condition });
    }
    if condition > WEAK_EXCITATION_COND {
        log::warn!("weak excitation in identification data (condition {condition:.3e})");
    }
    let theta_scaled = svd
        .solve(&target, 0.0)
        .map_err(|e| ModelError::Document(e.to_string()))?;
    let theta: Vec<f64> = (0..cols).map(|j| theta_scaled[j] / norms[j]).collect();

    let resid = &target - &phi * DVector::from_column_slice(&theta);
    let residual_rms = (resid.norm_squared() / rows as f64).sqrt();

    let (a11, a12, b1) = (theta[0], theta[1], theta[2]);
    let a = Matrix2::new(a11, a12, (a11 - 1.0) / dt, a12 / dt);
    let b = Vector2::new(b1, b1 / dt);
    let model = LtiModel::new(a, b, dt)?;
    Ok(Identification {
        model,
        offset: if opts.intercept { theta[3] } else { 0.0 },
        condition,
        residual_rms,
    })
}

pub(crate) fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    let tol = smax * 1e-10 * m.nrows().max(m.ncols()) as f64;
    sv.iter().filter(|&&s| s > tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const DT: f64 = 0.01;

    /// A second-order system written in backward-difference velocity
    /// coordinates, built from ARX coefficients.
    fn reference_system(alpha1: f64, alpha2: f64, beta: f64) -> (Matrix2<f64>, Vector2<f64>) {
        let a11 = alpha1 + alpha2;
        let a12 = -alpha2 * DT;
        (
            Matrix2::new(a11, a12, (a11 - 1.0) / DT, a12 / DT),
            Vector2::new(beta, beta / DT),
        )
    }

    fn prbs(n: usize, hold: usize, amp: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = Vec::with_capacity(n);
        let mut level = amp;
        for k in 0..n {
            if k % hold == 0 && rng.random_bool(0.5) {
                level = -level;
            }
            u.push(level);
        }
        u
    }

    fn simulate(a: &Matrix2<f64>, b: &Vector2<f64>, u: &[f64]) -> Vec<f64> {
        let mut x = Vector2::new(0.0, 0.0);
        let mut y = Vec::with_capacity(u.len());
        for &uk in u {
            y.push(x[0]);
            x = a * x + b * uk;
        }
        y
    }

    #[test]
    fn augment_block_structure() {
        let m = LtiModel::new(
            Matrix2::new(1.0, 0.01, 0.0, 0.98),
            Vector2::new(0.0, 0.005),
            DT,
        )
        .unwrap();
        let aug = augment(&m);
        assert_eq!(
            aug.a,
            Matrix3::new(1.0, 0.01, 0.0, 0.0, 0.98, 0.0, 0.0, 0.0, 1.0)
        );
        assert_eq!(aug.b, Vector3::new(0.0, 0.005, 0.0));
        assert_eq!(aug.c, RowVector3::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn augment_input_disturbance() {
        let m = LtiModel::new(
            Matrix2::new(1.0, 0.01, 0.0, 0.98),
            Vector2::new(0.0, 0.005),
            DT,
        )
        .unwrap()
        .with_disturbance(Vector2::new(1.0, 0.0), 0.0);
        let aug = augment(&m);
        assert_eq!(aug.a.column(2).into_owned(), Vector3::new(1.0, 0.0, 1.0));
        assert_eq!(aug.c, RowVector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn augment_identity_case() {
        let m = LtiModel::new(Matrix2::identity(), Vector2::zeros(), DT).unwrap();
        let aug = augment(&m);
        assert_eq!(aug.a, Matrix3::identity());
        assert_eq!(aug.c, RowVector3::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn augment_round_trip() {
        let (a, b) = reference_system(1.8, -0.85, 0.002);
        let m = LtiModel::new(a, b, DT)
            .unwrap()
            .with_disturbance(Vector2::new(0.3, -0.2), 0.7);
        let aug = augment(&m);
        let (a2, b2, c2) = aug.plant_blocks();
        let (bd2, cd2) = aug.disturbance_blocks();
        assert_eq!((a2, b2, c2, bd2, cd2), (m.a, m.b, m.c, m.bd, m.cd));
    }

    #[test]
    fn stable_plant_gives_observable_augmentation() {
        let (a, b) = reference_system(1.8, -0.85, 0.002);
        let m = LtiModel::new(a, b, DT).unwrap();
        assert_eq!(m.observability_rank(), 2);
        assert_eq!(augment(&m).observability_rank(), 3);
    }

    #[test]
    fn integrating_plant_loses_output_disturbance_observability() {
        let m = LtiModel::new(
            Matrix2::new(1.0, 0.01, 0.0, 0.98),
            Vector2::new(0.0, 0.005),
            DT,
        )
        .unwrap();
        assert_eq!(augment(&m).observability_rank(), 2);
    }

    #[test]
    fn identify_noiseless_recovers_truth() {
        let (a, b) = reference_system(1.82, -0.86, 0.0025);
        let u = prbs(1000, 7, 1.0, 3);
        let y = simulate(&a, &b, &u);
        let m = identify_lti(&u, &y, DT).unwrap();
        for (est, truth) in m.a.iter().zip(a.iter()) {
            assert!((est - truth).abs() < 1e-6, "{est} vs {truth}");
        }
        for (est, truth) in m.b.iter().zip(b.iter()) {
            assert!((est - truth).abs() < 1e-6, "{est} vs {truth}");
        }
        assert_eq!(m.bd, Vector2::zeros());
        assert_eq!(m.cd, 1.0);
    }

    #[test]
    fn identify_zero_excitation_is_rank_deficient() {
        let u = vec![0.0; 200];
        let y = vec![0.0; 200];
        let err = identify_lti(&u, &y, DT).unwrap_err();
        assert!(matches!(err, ModelError::RankDeficient { .. }));
    }

    #[test]
    fn identify_rejects_short_or_mismatched_records() {
        assert!(matches!(
            identify_lti(&[0.0; 10], &[0.0; 10], DT),
            Err(ModelError::TooFewSamples { .. })
        ));
        assert!(matches!(
            identify_lti(&[0.0; 60], &[0.0; 61], DT),
            Err(ModelError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn identify_with_output_noise_worst_case_over_seeds() {
        // Actuator-like system: poles 0.905 and 0.670, static gain about 1 mm/A.
        let (a, b) = reference_system(1.575, -0.606, 0.031);
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let u = prbs(1000, 7, 1.0, 100 + seed);
            let mut y = simulate(&a, &b, &u);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 1e-3).unwrap();
            for v in &mut y {
                *v += noise.sample(&mut rng);
            }
            let m = identify_lti(&u, &y, DT).unwrap();
            for (est, truth) in m.a.iter().zip(a.iter()) {
                worst = worst.max((est - truth).abs());
            }
        }
        assert!(worst < 1e-2, "worst elementwise A error {worst}");
    }

    #[test]
    fn identify_is_scale_consistent() {
        let (a, b) = reference_system(1.82, -0.86, 0.0025);
        let alpha = 4.0;
        let u = prbs(800, 5, 1.0, 9);
        let y = simulate(&a, &b, &u);
        let scaled_u: Vec<f64> = u.iter().map(|v| v * alpha).collect();
        let base = identify_lti(&u, &y, DT).unwrap();
        let scaled = identify_lti(&scaled_u, &y, DT).unwrap();
        for (s, b0) in scaled.b.iter().zip(base.b.iter()) {
            assert!((s - b0 / alpha).abs() < 1e-9);
        }
    }

    #[test]
    fn intercept_absorbs_operating_point() {
        let (a, b) = reference_system(1.82, -0.86, 0.0025);
        let u = prbs(1000, 7, 1.0, 5);
        let y: Vec<f64> = simulate(&a, &b, &u).iter().map(|v| v + 0.63).collect();
        let id = identify_lti_with(&u, &y, DT, IdentOptions { intercept: true }).unwrap();
        for (est, truth) in id.model.a.iter().zip(a.iter()) {
            assert!((est - truth).abs() < 1e-6);
        }
        assert!((id.offset - 0.63 * (1.0 - (1.82 - 0.86))).abs() < 1e-6);
    }

    #[test]
    fn document_round_trip() {
        let (a, b) = reference_system(1.82, -0.86, 0.0025);
        let m = LtiModel::new(a, b, DT).unwrap();
        let text = m.to_toml();
        assert!(text.contains("bd") && text.contains("dt"));
        assert_eq!(LtiModel::from_toml(&text).unwrap(), m);
    }

    #[test]
    fn constraints_table_defaults() {
        let c = Constraints::default();
        assert_eq!(c.position, Interval::new(0.0, 2.6));
        assert_eq!(c.velocity, Interval::new(-100.0, 100.0));
        assert_eq!(c.input, Interval::new(-10.0, 10.0));
        c.validate(0.63).unwrap();
        assert!(c.validate(3.0).is_err());
    }

    #[test]
    fn rejects_bad_period() {
        assert!(LtiModel::new(Matrix2::identity(), Vector2::zeros(), 0.0).is_err());
        assert!(LtiModel::new(Matrix2::identity(), Vector2::zeros(), f64::NAN).is_err());
    }
}
