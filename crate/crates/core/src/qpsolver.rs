//! Dense strictly convex QP solver.
//!
//! Solves
//!
//! ```text
//! minimize    ½ zᵀ H z + gᵀ z
//! subject to  lo ≤ G z ≤ hi
//! ```
//!
//! with the Goldfarb–Idnani dual active-set method. Each two-sided row is
//! split into one-sided constraints `G_i z ≥ lo_i` and `-G_i z ≥ -hi_i`
//! (infinite sides are skipped). The method starts from the unconstrained
//! minimizer and adds the most violated constraint (lowest index on ties)
//! until the iterate is primal feasible; it never needs a feasible start.
//! One iteration is one change of the working set (an add or a drop).
//! The objective is nondecreasing along the iterates, which
//! [`QpSolution::objective_trace`] records.
//!
//! Warm starts seed the working set with the constraints active at a given
//! point and prune multipliers of the wrong sign before the main loop.
//! Infeasibility is declared when the violated constraint is linearly
//! dependent on the working set and no multiplier can be reduced to make
//! room for it (no finite dual step exists).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Hessian is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("Hessian is not positive definite")]
    NotConvex,
    #[error("row {0} has lo > hi")]
    InvalidBounds(usize),
    #[error("problem data contains NaN or infinite matrix entries")]
    NonFinite,
    #[error("problem document: {0}")]
    Document(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIterations => "max_iterations",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        g: DVector<f64>,
        a: DMatrix<f64>,
        lo: DVector<f64>,
        hi: DVector<f64>,
    ) -> Result<Self, QpError> {
        let p = Self { h, g, a, lo, hi };
        p.validate()?;
        Ok(p)
    }

    /// Box-constrained problem `lo ≤ z ≤ hi`.
    pub fn boxed(
        h: DMatrix<f64>,
        g: DVector<f64>,
        lo: DVector<f64>,
        hi: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = g.len();
        Self::new(h, g, DMatrix::identity(n, n), lo, hi)
    }

    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> Result<Self, QpError> {
        let n = g.len();
        Self::new(
            h,
            g,
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            DVector::zeros(0),
        )
    }

    pub fn num_vars(&self) -> usize {
        self.g.len()
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.g.len();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(QpError::Dimension(format!(
                "H is {}x{}, expected {n}x{n}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        let m = self.a.nrows();
        if self.a.ncols() != n || self.lo.len() != m || self.hi.len() != m {
            return Err(QpError::Dimension(format!(
                "G is {}x{}, lo {}, hi {}; expected {m}x{n}",
                self.a.nrows(),
                self.a.ncols(),
                self.lo.len(),
                self.hi.len()
            )));
        }
        if self
            .h
            .iter()
            .chain(self.g.iter())
            .chain(self.a.iter())
            .any(|v| !v.is_finite())
        {
            return Err(QpError::NonFinite);
        }
        let asym = (&self.h - self.h.transpose()).amax();
        if asym > 1e-10 {
            return Err(QpError::NotSymmetric(asym));
        }
        for i in 0..m {
            if self.lo[i].is_nan() || self.hi[i].is_nan() || self.lo[i] > self.hi[i] {
                return Err(QpError::InvalidBounds(i));
            }
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }

    /// Largest bound violation of `z`.
    pub fn primal_violation(&self, z: &DVector<f64>) -> f64 {
        let gz = &self.a * z;
        (0..self.num_rows())
            .map(|i| (self.lo[i] - gz[i]).max(gz[i] - self.hi[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn to_document(&self) -> QpDocument {
        let rows = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        QpDocument {
            h: rows(&self.h),
            g: self.g.iter().copied().collect(),
            a: rows(&self.a),
            lo: self.lo.iter().copied().collect(),
            hi: self.hi.iter().copied().collect(),
        }
    }

    /// TOML dump; infinite bounds are written as `inf` / `-inf`.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_document()).expect("QP document always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, QpError> {
        let doc: QpDocument = toml::from_str(text).map_err(|e| QpError::Document(e.to_string()))?;
        doc.try_into()
    }
}

/// Row-major text form of a [`QpProblem`] for offline debugging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpDocument {
    pub h: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl TryFrom<QpDocument> for QpProblem {
    type Error = QpError;

    fn try_from(doc: QpDocument) -> Result<Self, Self::Error> {
        let n = doc.g.len();
        let mat = |rows: &[Vec<f64>], what: &str| -> Result<DMatrix<f64>, QpError> {
            if rows.iter().any(|r| r.len() != n) {
                return Err(QpError::Dimension(format!(
                    "{what} rows must have {n} entries"
                )));
            }
            Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
        };
        QpProblem::new(
            mat(&doc.h, "H")?,
            DVector::from_vec(doc.g),
            mat(&doc.a, "G")?,
            DVector::from_vec(doc.lo),
            DVector::from_vec(doc.hi),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    /// Primal feasibility tolerance.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    /// Largest bound violation.
    pub primal_residual: f64,
    /// `‖H z + g − Gᵀ y‖∞`.
    pub dual_residual: f64,
    /// Primal minus dual objective.
    pub duality_gap: f64,
    /// Row multipliers: positive when the lower bound is active, negative
    /// when the upper bound is active.
    pub multipliers: DVector<f64>,
    /// Objective after the start and after every iteration.
    pub objective_trace: Vec<f64>,
    /// Rows active at the solution (one-sided index `2 i` lower, `2 i + 1` upper).
    pub working_set: Vec<usize>,
}

/// Cold-start solve.
pub fn solve_qp(p: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    Solver::new(p, settings)?.run(Vec::new())
}

/// Solve seeded with the constraints active (within a small tolerance) at
/// `z0`. `z0` need not be feasible.
pub fn warm_start(
    p: &QpProblem,
    z0: &DVector<f64>,
    settings: &QpSettings,
) -> Result<QpSolution, QpError> {
    if z0.len() != p.num_vars() {
        return Err(QpError::Dimension(format!(
            "warm start has {} entries, expected {}",
            z0.len(),
            p.num_vars()
        )));
    }
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(QpError::NonFinite);
    }
    let solver = Solver::new(p, settings)?;
    let gz = &p.a * z0;
    let mut seed = Vec::new();
    for i in 0..p.num_rows() {
        let scale = 1e-7 * (1.0 + p.a.row(i).amax() * z0.amax());
        if p.lo[i].is_finite() && (gz[i] - p.lo[i]).abs() <= scale {
            seed.push(2 * i);
        } else if p.hi[i].is_finite() && (gz[i] - p.hi[i]).abs() <= scale {
            seed.push(2 * i + 1);
        }
    }
    solver.run(seed)
}

struct Solver<'a> {
    p: &'a QpProblem,
    settings: QpSettings,
    hinv: DMatrix<f64>,
    unconstrained: DVector<f64>,
}

impl<'a> Solver<'a> {
    fn new(p: &'a QpProblem, settings: &QpSettings) -> Result<Self, QpError> {
        p.validate()?;
        let chol = Cholesky::new(p.h.clone()).ok_or(QpError::NotConvex)?;
        let hinv = chol.inverse();
        let unconstrained = -(&hinv * &p.g);
        Ok(Self {
            p,
            settings: *settings,
            hinv,
            unconstrained,
        })
    }

    /// Normal and right-hand side of one-sided constraint `j`:
    /// `normal(j)ᵀ z ≥ rhs(j)`.
    fn normal(&self, j: usize) -> DVector<f64> {
        let row = self.p.a.row(j / 2).transpose();
        if j.is_multiple_of(2) {
            row
        } else {
            -row
        }
    }

    fn rhs(&self, j: usize) -> f64 {
        if j.is_multiple_of(2) {
            self.p.lo[j / 2]
        } else {
            -self.p.hi[j / 2]
        }
    }

    fn normals(&self, active: &[usize]) -> DMatrix<f64> {
        let mut n = DMatrix::zeros(self.p.num_vars(), active.len());
        for (c, &j) in active.iter().enumerate() {
            n.set_column(c, &self.normal(j));
        }
        n
    }

    /// Factor of `Nᵀ H⁻¹ N`, or `None` when the normals are (nearly)
    /// linearly dependent.
    fn schur(&self, n: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
        let s = n.transpose() * &self.hinv * n;
        let chol = Cholesky::new(s.clone())?;
        let diag = chol.l_dirty().diagonal();
        let (dmin, dmax) = diag.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), &d| {
            (lo.min(d), hi.max(d))
        });
        (dmin > 1e-7 * dmax).then_some(chol)
    }

    /// Minimizer with the working set held at equality, and its multipliers.
    fn equality_solution(&self, active: &[usize]) -> Option<(DVector<f64>, Vec<f64>)> {
        if active.is_empty() {
            return Some((self.unconstrained.clone(), Vec::new()));
        }
        let n = self.normals(active);
        let chol = self.schur(&n)?;
        let b = DVector::from_iterator(active.len(), active.iter().map(|&j| self.rhs(j)));
        let lambda = chol.solve(&(b + n.transpose() * &self.hinv * &self.p.g));
        let z = &self.hinv * (&n * &lambda - &self.p.g);
        Some((z, lambda.iter().copied().collect()))
    }

    fn slack(&self, j: usize, z: &DVector<f64>) -> f64 {
        self.normal(j).dot(z) - self.rhs(j)
    }

    fn most_violated(&self, z: &DVector<f64>, active: &[usize]) -> Option<(usize, f64)> {
        let gz = &self.p.a * z;
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.p.num_rows() {
            for (j, viol) in [
                (2 * i, self.p.lo[i] - gz[i]),
                (2 * i + 1, gz[i] - self.p.hi[i]),
            ] {
                if viol.is_finite()
                    && viol > self.settings.tol
                    && !active.contains(&j)
                    && best.is_none_or(|(_, v)| viol > v)
                {
                    best = Some((j, viol));
                }
            }
        }
        best
    }

    fn run(&self, seed: Vec<usize>) -> Result<QpSolution, QpError> {
        let mut iterations = 0usize;
        let mut active: Vec<usize> = Vec::new();
        for j in seed {
            if active.len() == self.p.num_vars() || active.iter().any(|&a| a / 2 == j / 2) {
                continue;
            }
            active.push(j);
            if self.schur(&self.normals(&active)).is_none() {
                active.pop();
            }
        }
        let (mut z, mut lambda) = loop {
            let (z, lambda) = self
                .equality_solution(&active)
                .expect("working set kept linearly independent");
            match lambda
                .iter()
                .enumerate()
                .filter(|(_, &l)| l < -1e-12)
                .min_by(|a, b| a.1.total_cmp(b.1))
            {
                Some((k, _)) => {
                    active.remove(k);
                    iterations += 1;
                }
                None => break (z, lambda.iter().map(|l| l.max(0.0)).collect::<Vec<_>>()),
            }
        };
        let mut trace = vec![self.p.objective(&z)];

        let status = 'outer: loop {
            let Some((p_idx, _)) = self.most_violated(&z, &active) else {
                break QpStatus::Optimal;
            };
            let a_p = self.normal(p_idx);
            let mut lambda_p = 0.0;
            loop {
                if iterations >= self.settings.max_iter {
                    break 'outer QpStatus::MaxIterations;
                }
                let hinv_ap = &self.hinv * &a_p;
                let (dz, r) = if active.is_empty() {
                    (hinv_ap.clone(), DVector::zeros(0))
                } else {
                    let n = self.normals(&active);
                    let chol = self
                        .schur(&n)
                        .expect("working set kept linearly independent");
                    let r = chol.solve(&(n.transpose() * &hinv_ap));
                    (&hinv_ap - &self.hinv * (&n * &r), r)
                };
                let mut t1 = f64::INFINITY;
                let mut drop_k = None;
                for (k, &rk) in r.iter().enumerate() {
                    if rk > 1e-12 {
                        let t = lambda[k] / rk;
                        if t < t1 {
                            t1 = t;
                            drop_k = Some(k);
                        }
                    }
                }
                let curvature = a_p.dot(&dz);
                let t2 = if curvature > 1e-12 * a_p.dot(&hinv_ap).max(f64::MIN_POSITIVE) {
                    -self.slack(p_idx, &z) / curvature
                } else {
                    f64::INFINITY
                };
                let t = t1.min(t2);
                if !t.is_finite() {
                    break 'outer QpStatus::Infeasible;
                }
                for (k, l) in lambda.iter_mut().enumerate() {
                    *l = (*l - t * r[k]).max(0.0);
                }
                lambda_p += t;
                iterations += 1;
                if t2.is_finite() {
                    z += &dz * t;
                }
                if t2 <= t1 {
                    active.push(p_idx);
                    lambda.push(lambda_p);
                    // Re-solve on the new working set to keep rounding from
                    // accumulating across iterations.
                    if let Some((z_eq, l_eq)) = self.equality_solution(&active) {
                        if l_eq.iter().all(|&l| l >= -1e-9) {
                            z = z_eq;
                            lambda = l_eq.iter().map(|l| l.max(0.0)).collect();
                        }
                    }
                    trace.push(self.p.objective(&z));
                    break;
                }
                let k = drop_k.expect("partial step drops a constraint");
                active.remove(k);
                lambda.remove(k);
                trace.push(self.p.objective(&z));
            }
        };

        Ok(self.finish(z, &active, &lambda, status, iterations, trace))
    }

    fn finish(
        &self,
        z: DVector<f64>,
        active: &[usize],
        lambda: &[f64],
        status: QpStatus,
        iterations: usize,
        objective_trace: Vec<f64>,
    ) -> QpSolution {
        let mut multipliers = DVector::zeros(self.p.num_rows());
        let mut n_lambda = DVector::zeros(self.p.num_vars());
        let mut b_lambda = 0.0;
        for (&j, &l) in active.iter().zip(lambda) {
            multipliers[j / 2] += if j % 2 == 0 { l } else { -l };
            n_lambda += self.normal(j) * l;
            b_lambda += self.rhs(j) * l;
        }
        let objective = self.p.objective(&z);
        let stationarity = &self.p.h * &z + &self.p.g - &n_lambda;
        let w = &n_lambda - &self.p.g;
        let dual_objective = -0.5 * w.dot(&(&self.hinv * &w)) + b_lambda;
        QpSolution {
            primal_residual: self.p.primal_violation(&z),
            dual_residual: stationarity.amax(),
            duality_gap: objective - dual_objective,
            objective,
            status,
            iterations,
            multipliers,
            objective_trace,
            working_set: active.to_vec(),
            z,
        }
    }
}
