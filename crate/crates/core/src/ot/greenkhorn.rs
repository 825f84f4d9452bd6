//! Stable Greenkhorn: greedy single-line rescaling carried out entirely on `log P`.
//!
//! Each iteration compares the worst absolute row deviation `|Σⱼ P_ij − 1/N|`
//! with the worst column deviation `|Σᵢ P_ij − q_j|` and rescales only that one
//! line onto its target. Rows win strictly greater comparisons; ties go to the
//! column. Within rows (or columns) the lowest index wins a tie.
//!
//! Line sums are kept as log-sums so that starting points such as
//! `exp(1000)` never leave the representable range. They are refreshed
//! incrementally after each update and recomputed from scratch every
//! [`FULL_REFRESH_PERIOD`] iterations and before declaring convergence.

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp_nonempty, Matrix};

use super::{check_inputs, log_col_sum, log_row_sums, ClassMarginal, SolverConfig, TransportPlan};

const FULL_REFRESH_PERIOD: usize = 1_000;

/// Above this share of a line's mass, a shrinking update is followed by an
/// exact recomputation of the crossed sum instead of an incremental one.
const CANCELLATION_SHARE: f64 = 0.5;

pub fn stable_greenkhorn(m: &Matrix, cfg: &SolverConfig, q: &ClassMarginal) -> Result<TransportPlan> {
    check_inputs(m, cfg, q)?;
    let mut state = State::new(m, cfg.tau_ot, q);
    let log_tol = if cfg.tolerance > 0.0 {
        cfg.tolerance.ln()
    } else {
        f64::NEG_INFINITY
    };

    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        if iterations > 0 && iterations % FULL_REFRESH_PERIOD == 0 {
            state.refresh();
        }
        let mut pick = state.select();
        if pick.row_violation <= log_tol && pick.col_violation <= log_tol {
            state.refresh();
            pick = state.select();
            if pick.row_violation <= log_tol && pick.col_violation <= log_tol {
                break;
            }
        }
        state.apply(pick.line());
        iterations += 1;
    }

    if state.log_p.data().iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::Internal(
            "stable_greenkhorn produced NaN or +inf in the log plan".into(),
        ));
    }
    Ok(TransportPlan::finish(state.log_p, q, iterations, cfg.tolerance))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Line {
    Row(usize),
    Col(usize),
}

struct Selection {
    row: usize,
    row_violation: f64,
    col: Option<usize>,
    col_violation: f64,
}

impl Selection {
    fn line(&self) -> Line {
        match self.col {
            Some(j) if self.row_violation <= self.col_violation => Line::Col(j),
            _ => Line::Row(self.row),
        }
    }
}

struct State {
    log_p: Matrix,
    log_rows: Vec<f64>,
    log_cols: Vec<f64>,
    log_row_target: f64,
    log_q: Vec<f64>,
    /// Columns with zero target mass are emptied once and never scanned.
    active: Vec<bool>,
}

impl State {
    fn new(m: &Matrix, tau: f64, q: &ClassMarginal) -> Self {
        let mut log_p = m.scale(1.0 / tau);
        let log_q: Vec<f64> = q.as_slice().iter().map(|x| x.ln()).collect();
        let active: Vec<bool> = log_q.iter().map(|l| *l > f64::NEG_INFINITY).collect();
        for (j, _) in active.iter().enumerate().filter(|(_, a)| !**a) {
            for i in 0..log_p.rows() {
                log_p[(i, j)] = f64::NEG_INFINITY;
            }
        }
        let mut state = Self {
            log_row_target: -(m.rows() as f64).ln(),
            log_rows: Vec::new(),
            log_cols: Vec::new(),
            log_p,
            log_q,
            active,
        };
        state.refresh();
        state
    }

    fn refresh(&mut self) {
        self.log_rows = log_row_sums(&self.log_p);
        self.log_cols = (0..self.log_p.cols())
            .map(|j| log_col_sum(&self.log_p, j))
            .collect();
    }

    /// Greedy scan on log-deviations, which orders lines exactly like the
    /// linear deviations but stays finite when the sums themselves would not.
    fn select(&self) -> Selection {
        let (row, row_violation) = argmax(
            self.log_rows
                .iter()
                .map(|&s| log_abs_diff(s, self.log_row_target)),
        )
        .expect("at least one row");
        let col = argmax(
            self.log_cols
                .iter()
                .zip(&self.log_q)
                .zip(&self.active)
                .map(|((&s, &t), &a)| if a { log_abs_diff(s, t) } else { f64::NEG_INFINITY }),
        );
        let (col, col_violation) = match col {
            Some((j, v)) if self.active[j] => (Some(j), v),
            _ => (None, f64::NEG_INFINITY),
        };
        Selection {
            row,
            row_violation,
            col,
            col_violation,
        }
    }

    fn apply(&mut self, line: Line) {
        let k = self.log_p.cols();
        match line {
            Line::Row(r) => {
                let current = log_sum_exp_nonempty(self.log_p.row(r).iter().copied());
                let shift = self.log_row_target - current;
                for j in 0..k {
                    let old = self.log_p[(r, j)];
                    self.log_p[(r, j)] = old + shift;
                    if self.active[j] {
                        self.log_cols[j] = self.crossed_sum(self.log_cols[j], old, shift, Line::Col(j));
                    }
                }
                self.log_rows[r] = self.log_row_target;
            }
            Line::Col(c) => {
                let current = log_col_sum(&self.log_p, c);
                let shift = self.log_q[c] - current;
                for i in 0..self.log_p.rows() {
                    let old = self.log_p[(i, c)];
                    self.log_p[(i, c)] = old + shift;
                    self.log_rows[i] = self.crossed_sum(self.log_rows[i], old, shift, Line::Row(i));
                }
                self.log_cols[c] = self.log_q[c];
            }
        }
    }

    /// Log-sum of `line` after one of its entries moved from `old` to `old + shift`.
    fn crossed_sum(&self, sum: f64, old: f64, shift: f64, line: Line) -> f64 {
        if old == f64::NEG_INFINITY || shift == 0.0 {
            return sum;
        }
        let log_share = old - sum;
        if shift > 0.0 {
            // sum + ln(1 + share·(e^shift − 1))
            sum + softplus(log_share + log_expm1(shift))
        } else if log_share.exp() <= CANCELLATION_SHARE {
            sum + (log_share.exp() * shift.exp_m1()).ln_1p()
        } else {
            match line {
                Line::Row(i) => log_sum_exp_nonempty(self.log_p.row(i).iter().copied()),
                Line::Col(j) => log_col_sum(&self.log_p, j),
            }
        }
    }
}

/// `ln |e^a − e^b|`, `-inf` when equal.
fn log_abs_diff(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == lo {
        return f64::NEG_INFINITY;
    }
    hi + (-(lo - hi).exp_m1()).ln()
}

/// `ln(e^x − 1)` for `x > 0` without overflowing.
fn log_expm1(x: f64) -> f64 {
    if x > 1.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// First index of the maximum; `None` for an empty iterator.
fn argmax(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best
}
