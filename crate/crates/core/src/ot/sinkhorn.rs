use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp_nonempty, Matrix};

use super::{check_inputs, log_col_sum, ClassMarginal, SolverConfig, TransportPlan};

/// Classic alternating row/column scaling of `A = exp(M/τ)` in the linear domain.
///
/// This is the fragile baseline: it fails with [`Error::Overflow`] as soon as
/// an entry of `A` is not a normal positive float, and with [`Error::Numeric`]
/// when scaling later drives a plan entry out of the normal range.
pub fn sinkhorn_linear(m: &Matrix, cfg: &SolverConfig, q: &ClassMarginal) -> Result<TransportPlan> {
    check_inputs(m, cfg, q)?;
    let (n, k) = m.shape();
    let row_target = 1.0 / n as f64;
    let targets = q.as_slice();

    let mut p = Matrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            let exponent = m[(i, j)] / cfg.tau_ot;
            let a = exponent.exp();
            if !a.is_normal() {
                return Err(Error::Overflow {
                    solver: "sinkhorn_linear",
                    row: i,
                    col: j,
                    exponent,
                });
            }
            p[(i, j)] = a;
        }
    }

    let mut col_sums = vec![0.0; k];
    let mut sweeps = 0;
    while sweeps < cfg.max_iterations {
        sweeps += 1;
        for i in 0..n {
            let row = p.row_mut(i);
            let s: f64 = row.iter().sum();
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Numeric(format!(
                    "sinkhorn_linear: row {i} sums to {s} at sweep {sweeps}; use sinkhorn_log or stable_greenkhorn"
                )));
            }
            let scale = row_target / s;
            row.iter_mut().for_each(|x| *x *= scale);
        }

        col_sums.iter_mut().for_each(|c| *c = 0.0);
        for row in p.row_iter() {
            for (c, x) in col_sums.iter_mut().zip(row) {
                *c += x;
            }
        }
        for (j, &s) in col_sums.iter().enumerate() {
            if targets[j] > 0.0 && (!(s > 0.0) || !s.is_finite()) {
                return Err(Error::Numeric(format!(
                    "sinkhorn_linear: column {j} sums to {s} at sweep {sweeps}; use sinkhorn_log or stable_greenkhorn"
                )));
            }
        }
        let scales: Vec<f64> = col_sums
            .iter()
            .zip(targets)
            .map(|(&s, &qj)| if qj > 0.0 { qj / s } else { 0.0 })
            .collect();
        for i in 0..n {
            for (x, s) in p.row_mut(i).iter_mut().zip(&scales) {
                *x *= s;
            }
        }

        if let Some((i, j, x)) = first_lost_entry(&p, targets) {
            return Err(Error::Numeric(format!(
                "sinkhorn_linear: plan entry ({i}, {j}) became {x:e} at sweep {sweeps} (not a normal float); \
                 use sinkhorn_log or stable_greenkhorn"
            )));
        }

        // columns are exact after the column step, so only rows can be off
        let row_violation = p
            .row_iter()
            .map(|r| (r.iter().sum::<f64>() - row_target).abs())
            .fold(0.0, f64::max);
        if row_violation <= cfg.tolerance {
            break;
        }
    }

    Ok(TransportPlan::finish(p.map(f64::ln), q, sweeps, cfg.tolerance))
}

/// First entry of an active column that scaling pushed out of the normal range.
fn first_lost_entry(p: &Matrix, targets: &[f64]) -> Option<(usize, usize, f64)> {
    p.row_iter().enumerate().find_map(|(i, row)| {
        row.iter()
            .zip(targets)
            .position(|(x, &qj)| qj > 0.0 && !x.is_normal())
            .map(|j| (i, j, row[j]))
    })
}

/// Sinkhorn with every normalization carried out through log-sum-exp on `log P`.
pub fn sinkhorn_log(m: &Matrix, cfg: &SolverConfig, q: &ClassMarginal) -> Result<TransportPlan> {
    check_inputs(m, cfg, q)?;
    let (n, k) = m.shape();
    let log_row_target = -(n as f64).ln();
    let log_q: Vec<f64> = q.as_slice().iter().map(|x| x.ln()).collect();

    let mut log_p = m.scale(1.0 / cfg.tau_ot);
    for (j, &lq) in log_q.iter().enumerate() {
        if lq == f64::NEG_INFINITY {
            for i in 0..n {
                log_p[(i, j)] = f64::NEG_INFINITY;
            }
        }
    }

    let mut col_shift = vec![0.0; k];
    let mut sweeps = 0;
    while sweeps < cfg.max_iterations {
        sweeps += 1;
        for i in 0..n {
            let row = log_p.row_mut(i);
            let shift = log_row_target - log_sum_exp_nonempty(row.iter().copied());
            row.iter_mut().for_each(|x| *x += shift);
        }
        for (j, s) in col_shift.iter_mut().enumerate() {
            *s = if log_q[j] == f64::NEG_INFINITY {
                0.0
            } else {
                log_q[j] - log_col_sum(&log_p, j)
            };
        }
        for i in 0..n {
            for (x, s) in log_p.row_mut(i).iter_mut().zip(&col_shift) {
                *x += s;
            }
        }

        let row_violation = log_p
            .row_iter()
            .map(|r| (log_sum_exp_nonempty(r.iter().copied()).exp() - 1.0 / n as f64).abs())
            .fold(0.0, f64::max);
        if row_violation <= cfg.tolerance {
            break;
        }
    }

    if log_p.data().iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::Internal("sinkhorn_log produced a non-finite log plan".into()));
    }
    Ok(TransportPlan::finish(log_p, q, sweeps, cfg.tolerance))
}
