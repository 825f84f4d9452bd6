//! Entropic optimal transport between images and classes.
//!
//! Every solver returns a [`TransportPlan`] held in log domain. The solution of
//! `max ⟨M, P⟩ + τ H(P)` over plans with row sums `1/N` and column sums `q` has
//! the form `P = diag(u) · exp(M/τ) · diag(v)`; all three solvers only ever add
//! a constant to a full row or column of `log P`, so that structure holds at
//! every iteration, not just at convergence.

mod greenkhorn;
mod sinkhorn;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp_nonempty, Matrix};

pub use greenkhorn::stable_greenkhorn;
pub use sinkhorn::{sinkhorn_linear, sinkhorn_log};

/// Target column mass `q` over the K classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMarginal(Vec<f64>);

impl ClassMarginal {
    const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::data("class marginal is empty"));
        }
        if let Some((j, v)) = q.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::data(format!("class marginal entry {j} is {v}; entries must be finite and >= 0")));
        }
        let sum: f64 = q.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::data(format!("class marginal sums to {sum}, expected 1")));
        }
        Ok(Self(q))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    SinkhornLinear,
    SinkhornLog,
    StableGreenkhorn,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [
        Algorithm::SinkhornLinear,
        Algorithm::SinkhornLog,
        Algorithm::StableGreenkhorn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::SinkhornLinear => "sinkhorn_linear",
            Algorithm::SinkhornLog => "sinkhorn_log",
            Algorithm::StableGreenkhorn => "stable_greenkhorn",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown algorithm '{s}' (expected sinkhorn_linear, sinkhorn_log or stable_greenkhorn)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverConfig {
    pub tau_ot: f64,
    /// Sweeps for the Sinkhorn solvers, single line updates for Stable Greenkhorn.
    pub max_iterations: usize,
    pub tolerance: f64,
    pub algorithm: Algorithm,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tau_ot: 0.01,
            max_iterations: 100_000,
            tolerance: 1e-6,
            algorithm: Algorithm::StableGreenkhorn,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_ot > 0.0) || !self.tau_ot.is_finite() {
            return Err(Error::usage(format!("tau_ot must be a positive number, got {}", self.tau_ot)));
        }
        if self.max_iterations == 0 {
            return Err(Error::usage("max_iterations must be >= 1"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::usage(format!("tolerance must be >= 0, got {}", self.tolerance)));
        }
        Ok(())
    }
}

/// A coupling between N images and K classes, stored as `log P`.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub(crate) log_p: Matrix,
    pub(crate) col_target: ClassMarginal,
    pub(crate) iterations_used: usize,
    pub(crate) converged: bool,
    pub(crate) final_row_violation: f64,
    pub(crate) final_col_violation: f64,
}

impl TransportPlan {
    /// Wraps an arbitrary log-domain coupling; violations are computed fresh.
    pub fn from_log(log_p: Matrix, col_target: ClassMarginal) -> Result<Self> {
        if log_p.cols() != col_target.len() {
            return Err(Error::data(format!(
                "plan has {} columns but the class marginal has {} entries",
                log_p.cols(),
                col_target.len()
            )));
        }
        if log_p.rows() == 0 {
            return Err(Error::data("transport plan needs at least one row"));
        }
        if log_p.data().iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::data("log plan contains NaN or +inf"));
        }
        let mut plan = Self {
            log_p,
            col_target,
            iterations_used: 0,
            converged: false,
            final_row_violation: 0.0,
            final_col_violation: 0.0,
        };
        plan.refresh_violations();
        Ok(plan)
    }

    pub(crate) fn finish(log_p: Matrix, q: &ClassMarginal, iterations: usize, tolerance: f64) -> Self {
        let mut plan = Self {
            log_p,
            col_target: q.clone(),
            iterations_used: iterations,
            converged: false,
            final_row_violation: 0.0,
            final_col_violation: 0.0,
        };
        plan.refresh_violations();
        plan.converged = plan.final_row_violation <= tolerance && plan.final_col_violation <= tolerance;
        plan
    }

    fn refresh_violations(&mut self) {
        let (r, c) = marginal_violations(self);
        self.final_row_violation = r;
        self.final_col_violation = c;
    }

    pub fn log_p(&self) -> &Matrix {
        &self.log_p
    }

    /// `P` in the linear domain.
    pub fn plan(&self) -> Matrix {
        self.log_p.map(f64::exp)
    }

    pub fn rows(&self) -> usize {
        self.log_p.rows()
    }

    pub fn cols(&self) -> usize {
        self.log_p.cols()
    }

    pub fn row_target(&self) -> f64 {
        1.0 / self.log_p.rows() as f64
    }

    pub fn col_target(&self) -> &ClassMarginal {
        &self.col_target
    }

    pub fn iterations_used(&self) -> usize {
        self.iterations_used
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn final_row_violation(&self) -> f64 {
        self.final_row_violation
    }

    pub fn final_col_violation(&self) -> f64 {
        self.final_col_violation
    }
}

/// Row-stochastic guide distributions, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels(Matrix);

impl PseudoLabels {
    /// Wraps a matrix whose rows are probability vectors.
    pub fn new(p: Matrix) -> Result<Self> {
        for (i, row) in p.row_iter().enumerate() {
            if row.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::data(format!("pseudo-label row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::data(format!("pseudo-label row {i} sums to {s}, expected 1")));
            }
        }
        Ok(Self(p))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Runs the configured algorithm.
pub fn solve(m: &Matrix, cfg: &SolverConfig, q: &ClassMarginal) -> Result<TransportPlan> {
    match cfg.algorithm {
        Algorithm::SinkhornLinear => sinkhorn_linear(m, cfg, q),
        Algorithm::SinkhornLog => sinkhorn_log(m, cfg, q),
        Algorithm::StableGreenkhorn => stable_greenkhorn(m, cfg, q),
    }
}

pub(crate) fn check_inputs(m: &Matrix, cfg: &SolverConfig, q: &ClassMarginal) -> Result<()> {
    cfg.validate()?;
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::data(format!("similarity matrix must be non-empty, got {}x{}", m.rows(), m.cols())));
    }
    if m.cols() != q.len() {
        return Err(Error::data(format!(
            "similarity matrix has {} columns but the class marginal has {} entries",
            m.cols(),
            q.len()
        )));
    }
    if let Some(pos) = m.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::data(format!(
            "similarity matrix entry [{}][{}] is not finite",
            pos / m.cols(),
            pos % m.cols()
        )));
    }
    Ok(())
}

pub(crate) fn log_row_sums(log_p: &Matrix) -> Vec<f64> {
    log_p.row_iter().map(|r| log_sum_exp_nonempty(r.iter().copied())).collect()
}

pub(crate) fn log_col_sum(log_p: &Matrix, j: usize) -> f64 {
    let cols = log_p.cols();
    log_sum_exp_nonempty(log_p.data()[j..].iter().step_by(cols).copied())
}

/// L∞ deviation of the row sums from `1/N` and of the column sums from `q`.
pub fn marginal_violations(plan: &TransportPlan) -> (f64, f64) {
    let target = plan.row_target();
    let row = log_row_sums(&plan.log_p)
        .into_iter()
        .map(|l| (l.exp() - target).abs())
        .fold(0.0, f64::max);
    let col = plan
        .col_target
        .as_slice()
        .iter()
        .enumerate()
        .map(|(j, &qj)| (log_col_sum(&plan.log_p, j).exp() - qj).abs())
        .fold(0.0, f64::max);
    (row, col)
}

/// `⟨M, P⟩ + τ H(P)` with `H(P) = -Σ P ln P` and `0 ln 0 = 0`.
pub fn entropic_objective(plan: &TransportPlan, m: &Matrix, tau: f64) -> Result<f64> {
    if plan.log_p.shape() != m.shape() {
        return Err(Error::data(format!(
            "plan shape {:?} differs from similarity shape {:?}",
            plan.log_p.shape(),
            m.shape()
        )));
    }
    let mut linear = 0.0;
    let mut entropy = 0.0;
    for (&l, &mij) in plan.log_p.data().iter().zip(m.data()) {
        if l == f64::NEG_INFINITY {
            continue;
        }
        let p = l.exp();
        linear += mij * p;
        entropy -= p * l;
    }
    Ok(linear + tau * entropy)
}

/// Normalizes every plan row to a probability vector.
pub fn pseudo_labels(plan: &TransportPlan) -> Result<PseudoLabels> {
    let mut out = Matrix::zeros(plan.rows(), plan.cols());
    for (i, lse) in log_row_sums(&plan.log_p).into_iter().enumerate() {
        if lse == f64::NEG_INFINITY {
            return Err(Error::data(format!("transport plan row {i} has zero mass")));
        }
        for (o, &l) in out.row_mut(i).iter_mut().zip(plan.log_p.row(i)) {
            *o = (l - lse).exp();
        }
    }
    Ok(PseudoLabels(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan_from_linear(p: &[&[f64]], q: Vec<f64>) -> TransportPlan {
        let m = Matrix::from_rows(p).unwrap();
        TransportPlan::from_log(m.map(f64::ln), ClassMarginal::new(q).unwrap()).unwrap()
    }

    #[test]
    fn marginal_checks() {
        assert!(ClassMarginal::new(vec![0.5, 0.5]).is_ok());
        assert!(ClassMarginal::new(vec![0.6, 0.6]).is_err());
        assert!(ClassMarginal::new(vec![1.5, -0.5]).is_err());
        assert!(ClassMarginal::new(vec![]).is_err());
        assert_eq!(ClassMarginal::uniform(4).as_slice(), &[0.25; 4]);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("greenkhorn".parse::<Algorithm>().is_err());
    }

    #[test]
    fn config_validation() {
        let ok = SolverConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SolverConfig { tau_ot: 0.0, ..ok }.validate().is_err());
        assert!(SolverConfig { max_iterations: 0, ..ok }.validate().is_err());
        assert!(SolverConfig { tolerance: -1.0, ..ok }.validate().is_err());
    }

    #[test]
    fn violations_of_feasible_plans() {
        let p = plan_from_linear(&[&[0.25, 0.25], &[0.25, 0.25]], vec![0.5, 0.5]);
        assert_eq!(marginal_violations(&p), (0.0, 0.0));
        let p = plan_from_linear(&[&[1.0]], vec![1.0]);
        assert_eq!(marginal_violations(&p), (0.0, 0.0));
        let p = plan_from_linear(&[&[0.5, 0.5]], vec![0.5, 0.5]);
        assert_eq!(marginal_violations(&p), (0.0, 0.0));
        let p = plan_from_linear(&[&[0.5, 0.25]], vec![0.5, 0.5]);
        let (r, c) = marginal_violations(&p);
        assert!((r - 0.25).abs() < 1e-15 && (c - 0.25).abs() < 1e-15);
    }

    #[test]
    fn objective_examples() {
        let p = plan_from_linear(&[&[1.0]], vec![1.0]);
        let m = Matrix::from_rows(&[[0.5]]).unwrap();
        assert!((entropic_objective(&p, &m, 1.0).unwrap() - 0.5).abs() < 1e-15);

        let p = plan_from_linear(&[&[0.25, 0.25], &[0.25, 0.25]], vec![0.5, 0.5]);
        let m = Matrix::zeros(2, 2);
        assert!((entropic_objective(&p, &m, 1.0).unwrap() - 4f64.ln()).abs() < 1e-15);

        // zero entries contribute nothing to the entropy
        let p = plan_from_linear(&[&[0.5, 0.0], &[0.0, 0.5]], vec![0.5, 0.5]);
        assert!((entropic_objective(&p, &m, 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(entropic_objective(&p, &Matrix::zeros(1, 2), 1.0).is_err());
    }

    #[test]
    fn pseudo_label_examples() {
        let p = plan_from_linear(&[&[0.25, 0.25], &[0.25, 0.25]], vec![0.5, 0.5]);
        let l = pseudo_labels(&p).unwrap();
        for &x in l.matrix().data() {
            assert!((x - 0.5).abs() < 1e-15);
        }

        let p = plan_from_linear(
            &[&[0.249, 0.001], &[0.001, 0.249], &[0.125, 0.125], &[0.125, 0.125]],
            vec![0.5, 0.5],
        );
        let l = pseudo_labels(&p).unwrap();
        assert!((l.matrix()[(0, 0)] - 0.996).abs() < 1e-12);
        assert!((l.matrix()[(0, 1)] - 0.004).abs() < 1e-12);

        let log_p = Matrix::from_rows(&[[0.0, 0.0], [f64::NEG_INFINITY, f64::NEG_INFINITY]]).unwrap();
        let p = TransportPlan::from_log(log_p, ClassMarginal::uniform(2)).unwrap();
        let err = pseudo_labels(&p).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn from_log_rejects_bad_values() {
        let q = ClassMarginal::uniform(2);
        let bad = Matrix::from_rows(&[[0.0, f64::NAN]]).unwrap();
        assert!(TransportPlan::from_log(bad, q.clone()).is_err());
        let bad = Matrix::from_rows(&[[0.0, f64::INFINITY]]).unwrap();
        assert!(TransportPlan::from_log(bad, q.clone()).is_err());
        let wrong_width = Matrix::zeros(1, 3);
        assert!(TransportPlan::from_log(wrong_width, q).is_err());
    }
}
