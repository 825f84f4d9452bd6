//! Multimodal proxy learning.
//!
//! Proxies `W` (K × d) are fitted so that the class distribution
//! `softmax(x · Wᵀ / τ)` of every image matches its pseudo-label, measured by
//! `KL(label ‖ softmax)` averaged over the dataset. Descent is full-batch with
//! momentum; rows are projected back onto the unit sphere after each step.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize_rows, norm, Matrix};
use crate::ot::PseudoLabels;
use crate::retrieval::TextProxies;

const UNIT_TOLERANCE: f64 = 1e-9;

/// Learned per-class proxies with unit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyWeights(Matrix);

impl ProxyWeights {
    pub fn new(w: Matrix) -> Result<Self> {
        for (j, row) in w.row_iter().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::data(format!("proxy row {j} has norm {n}, expected 1")));
            }
        }
        Ok(Self(w))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LearnConfig {
    pub tau_learn: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub loss_tolerance: f64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            tau_learn: 0.01,
            learning_rate: 0.02,
            momentum: 0.9,
            max_epochs: 500,
            loss_tolerance: 1e-7,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_learn > 0.0) || !self.tau_learn.is_finite() {
            return Err(Error::usage(format!("tau_learn must be > 0, got {}", self.tau_learn)));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::usage(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::usage(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.loss_tolerance >= 0.0) {
            return Err(Error::usage(format!(
                "loss tolerance must be >= 0, got {}",
                self.loss_tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnTrace {
    /// `losses[0]` is the loss at the initial proxies, `losses[e]` after epoch `e`.
    pub losses: Vec<f64>,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
}

fn check_shapes(w: &Matrix, images: &Matrix, labels: &Matrix) -> Result<()> {
    if images.cols() != w.cols() {
        return Err(Error::data(format!(
            "images have dimension {} but proxies have {}",
            images.cols(),
            w.cols()
        )));
    }
    if labels.rows() != images.rows() || labels.cols() != w.rows() {
        return Err(Error::data(format!(
            "labels are {}x{}, expected {}x{} (images x classes)",
            labels.rows(),
            labels.cols(),
            images.rows(),
            w.rows()
        )));
    }
    Ok(())
}

/// Row-wise log-softmax of `x · wᵀ / τ`.
fn log_class_distribution(w: &Matrix, images: &Matrix, tau: f64) -> Result<Matrix> {
    let mut z = images.mul_transpose(w)?;
    for i in 0..z.rows() {
        let row = z.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max / tau + row.iter().map(|v| (v / tau - max / tau).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v = *v / tau - lse);
    }
    Ok(z)
}

/// Mean over images of `KL(label ‖ softmax(x · wᵀ / τ))`.
pub fn loss(w: &Matrix, images: &Matrix, labels: &PseudoLabels, tau: f64) -> Result<f64> {
    let q = labels.matrix();
    check_shapes(w, images, q)?;
    if images.rows() == 0 {
        return Ok(0.0);
    }
    let log_p = log_class_distribution(w, images, tau)?;
    let mut total = 0.0;
    for (lp, qr) in log_p.row_iter().zip(q.row_iter()) {
        total += qr
            .iter()
            .zip(lp)
            .filter(|(&qj, _)| qj > 0.0)
            .map(|(&qj, &l)| qj * (qj.ln() - l))
            .sum::<f64>();
    }
    Ok((total / images.rows() as f64).max(0.0))
}

/// Analytic gradient of [`loss`] with respect to `w`:
/// `(1 / (Nτ)) Σᵢ (softmax_ij − label_ij) xᵢ` for row `j`.
pub fn gradient(w: &Matrix, images: &Matrix, labels: &PseudoLabels, tau: f64) -> Result<Matrix> {
    let q = labels.matrix();
    check_shapes(w, images, q)?;
    let mut grad = Matrix::zeros(w.rows(), w.cols());
    if images.rows() == 0 {
        return Ok(grad);
    }
    let log_p = log_class_distribution(w, images, tau)?;
    let scale = 1.0 / (images.rows() as f64 * tau);
    for i in 0..images.rows() {
        let x = images.row(i);
        for j in 0..w.rows() {
            let coeff = (log_p[(i, j)].exp() - q[(i, j)]) * scale;
            if coeff != 0.0 {
                for (g, xv) in grad.row_mut(j).iter_mut().zip(x) {
                    *g += coeff * xv;
                }
            }
        }
    }
    Ok(grad)
}

pub fn learn(
    images: &Matrix,
    labels: &PseudoLabels,
    init: &TextProxies,
    cfg: &LearnConfig,
) -> Result<(ProxyWeights, LearnTrace)> {
    cfg.validate()?;
    check_shapes(&init.w, images, labels.matrix())?;

    let mut w = init.w.clone();
    let mut velocity = Matrix::zeros(w.rows(), w.cols());
    let mut prev = loss(&w, images, labels, cfg.tau_learn)?;
    let mut losses = vec![prev];
    let mut stop_reason = StopReason::MaxEpochs;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        let grad = gradient(&w, images, labels, cfg.tau_learn)?;
        for ((v, g), x) in velocity
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(w.data_mut())
        {
            *v = cfg.momentum * *v - cfg.learning_rate * g;
            *x += *v;
        }
        w = l2_normalize_rows(&w).map_err(|_| {
            Error::Numeric(format!(
                "a proxy collapsed to zero at epoch {epoch} (learning rate {})",
                cfg.learning_rate
            ))
        })?;

        let current = loss(&w, images, labels, cfg.tau_learn)?;
        if !current.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became {current} at epoch {epoch} (learning rate {})",
                cfg.learning_rate
            )));
        }
        losses.push(current);
        epochs_run = epoch;
        if prev - current < cfg.loss_tolerance {
            stop_reason = StopReason::Converged;
            break;
        }
        prev = current;
    }

    Ok((
        ProxyWeights(w),
        LearnTrace {
            losses,
            epochs_run,
            stop_reason,
        },
    ))
}

/// Index of the largest inner product per image; ties go to the lowest index.
pub fn classify(images: &Matrix, w: &Matrix) -> Result<Vec<usize>> {
    if images.rows() > 0 && images.cols() != w.cols() {
        return Err(Error::data(format!(
            "images have dimension {} but proxies have {}",
            images.cols(),
            w.cols()
        )));
    }
    if w.rows() == 0 {
        return Err(Error::usage("cannot classify against zero proxies"));
    }
    Ok(images
        .row_iter()
        .map(|x| {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, wj) in w.row_iter().enumerate() {
                let s = dot(x, wj);
                if s > best.1 {
                    best = (j, s);
                }
            }
            best.0
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax_rows;
    use crate::retrieval::Provenance;

    fn labels(rows: &[&[f64]]) -> PseudoLabels {
        PseudoLabels::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn axes() -> Matrix {
        Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()
    }

    #[test]
    fn loss_closed_form() {
        let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let l = loss(&axes(), &x, &labels(&[&[1.0, 0.0]]), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((l - ((e + 1.0) / e).ln()).abs() < 1e-15);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn loss_vanishes_at_matching_labels() {
        let x = Matrix::from_rows(&[[0.6, 0.8], [1.0, 0.0], [0.0, -1.0]]).unwrap();
        let w = axes();
        let q = softmax_rows(&x.mul_transpose(&w).unwrap(), 0.5).unwrap();
        let q = PseudoLabels::new(q).unwrap();
        assert!(loss(&w, &x, &q, 0.5).unwrap() <= 1e-12);
        let g = gradient(&w, &x, &q, 0.5).unwrap();
        assert!(g.data().iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let x = Matrix::from_rows(&[[0.6, 0.8], [1.0, 0.0], [0.0, -1.0]]).unwrap();
        let q = labels(&[&[0.9, 0.1], &[0.2, 0.8], &[0.5, 0.5]]);
        let perm = [2, 0, 1];
        let xp = x.select_rows(&perm);
        let qp = PseudoLabels::new(q.matrix().select_rows(&perm)).unwrap();
        let a = loss(&axes(), &x, &q, 0.3).unwrap();
        let b = loss(&axes(), &xp, &qp, 0.3).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn gradient_scales_inversely_with_tau_for_fixed_distributions() {
        // scaling logits by the same factor as tau keeps both distributions fixed
        let x = Matrix::from_rows(&[[0.6, 0.8], [1.0, 0.0]]).unwrap();
        let q = labels(&[&[0.9, 0.1], &[0.3, 0.7]]);
        let w = Matrix::from_rows(&[[0.5, 0.25], [-0.1, 0.4]]).unwrap();
        let g1 = gradient(&w, &x, &q, 0.5).unwrap();
        let g2 = gradient(&w.scale(2.0), &x, &q, 1.0).unwrap();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((a - 2.0 * b).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(loss(&axes(), &x, &labels(&[&[1.0, 0.0]]), 1.0).is_err());
        let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(loss(&axes(), &x, &labels(&[&[1.0, 0.0], &[0.0, 1.0]]), 1.0).is_err());
    }

    #[test]
    fn fixed_point_when_labels_match_init() {
        let x = Matrix::from_rows(&[[0.6, 0.8], [1.0, 0.0], [0.0, -1.0]]).unwrap();
        let init = TextProxies {
            w: axes(),
            provenance: Provenance::RetrievedMean,
        };
        let cfg = LearnConfig::default();
        let q = PseudoLabels::new(
            softmax_rows(&x.mul_transpose(&init.w).unwrap(), cfg.tau_learn).unwrap(),
        )
        .unwrap();
        let (w, trace) = learn(&x, &q, &init, &cfg).unwrap();
        assert!(w.matrix().max_abs_diff(&init.w) <= 1e-9);
        assert_eq!(trace.epochs_run, 1);
        assert_eq!(trace.stop_reason, StopReason::Converged);
    }

    #[test]
    fn zero_step_keeps_init() {
        let x = Matrix::from_rows(&[[0.6, 0.8], [1.0, 0.0]]).unwrap();
        let init = TextProxies {
            w: axes(),
            provenance: Provenance::RetrievedMean,
        };
        let cfg = LearnConfig {
            learning_rate: 0.0,
            momentum: 0.0,
            loss_tolerance: 0.0,
            max_epochs: 7,
            ..LearnConfig::default()
        };
        let (w, trace) = learn(&x, &labels(&[&[0.0, 1.0], &[1.0, 0.0]]), &init, &cfg).unwrap();
        assert_eq!(w.matrix(), &init.w);
        assert_eq!(trace.epochs_run, 7);
        assert_eq!(trace.stop_reason, StopReason::MaxEpochs);
    }

    #[test]
    fn config_validation() {
        let ok = LearnConfig::default();
        assert!(ok.validate().is_ok());
        assert!(LearnConfig { tau_learn: 0.0, ..ok }.validate().is_err());
        assert!(LearnConfig { momentum: 1.0, ..ok }.validate().is_err());
        assert!(LearnConfig { learning_rate: -0.1, ..ok }.validate().is_err());
    }

    #[test]
    fn classify_examples() {
        let w = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[[0.0, 0.0, 1.0], [0.2, 0.9, 0.1], [0.5, 0.5, 0.0]]).unwrap();
        assert_eq!(classify(&x, &w).unwrap(), vec![2, 1, 0]);
        assert_eq!(classify(&x.scale(3.7), &w).unwrap(), vec![2, 1, 0]);
        assert_eq!(classify(&Matrix::zeros(0, 3), &w).unwrap(), Vec::<usize>::new());
        assert!(classify(&Matrix::zeros(1, 2), &w).is_err());
    }
}
