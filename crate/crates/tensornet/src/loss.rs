//! Classification losses with analytic gradients.

use crate::{Result, Tensor, TensorNetError};

/// Probabilities are clamped into this range before any logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean binary cross entropy over a batch of predicted probabilities in
/// (0,1). Returns the loss and its gradient w.r.t. the predictions.
pub fn bce_loss(pred: &Tensor, labels: &[f64]) -> Result<(f64, Tensor)> {
    let n = pred.numel();
    if n != labels.len() || n == 0 {
        return Err(TensorNetError::ShapeMismatch {
            context: "bce_loss".into(),
            expected: vec![labels.len()],
            got: vec![n],
        });
    }
    let mut grad = Tensor::zeros(pred.shape());
    let gd = grad.data_mut();
    let mut loss = 0.0;
    let inv = 1.0 / n as f64;
    for (i, (&p_raw, &y)) in pred.data().iter().zip(labels).enumerate() {
        let p = clamp_prob(p_raw);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        // zero gradient where the clamp is active, matching the objective
        if p_raw > PROB_CLAMP && p_raw < 1.0 - PROB_CLAMP {
            gd[i] = inv * (-(y / p) + (1.0 - y) / (1.0 - p));
        }
    }
    Ok((loss * inv, grad))
}

/// Mean sigmoid cross entropy from logits against a {0,1} target grid.
/// Numerically stable formulation; gradient is (sigmoid(x) - z) / count.
pub fn voxel_ce_loss(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape() != target.shape() {
        return Err(TensorNetError::ShapeMismatch {
            context: "voxel_ce_loss".into(),
            expected: target.shape().to_vec(),
            got: logits.shape().to_vec(),
        });
    }
    let n = logits.numel();
    let inv = 1.0 / n as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let gd = grad.data_mut();
    let mut loss = 0.0;
    for (i, (&x, &z)) in logits.data().iter().zip(target.data()).enumerate() {
        loss += x.max(0.0) - x * z + (1.0 + (-x.abs()).exp()).ln();
        let s = if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        };
        gd[i] = inv * (s - z);
    }
    Ok((loss * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    #[test]
    fn bce_half_prediction_is_ln2() {
        let pred = Tensor::from_vec(&[1, 1], vec![0.5]).unwrap();
        let (loss, _) = bce_loss(&pred, &[1.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_exact_prediction_is_tiny() {
        let pred = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let (loss, _) = bce_loss(&pred, &[1.0, 0.0]).unwrap();
        assert!(loss <= 1e-6, "loss {loss}");
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let preds = vec![0.3, 0.71, 0.05, 0.999];
        let labels = vec![1.0, 0.0, 0.0, 1.0];
        let pred = Tensor::from_vec(&[1, 4], preds.clone()).unwrap();
        let (_, grad) = bce_loss(&pred, &labels).unwrap();
        let f = |x: &[f64]| {
            let t = Tensor::from_vec(&[1, 4], x.to_vec()).unwrap();
            bce_loss(&t, &labels).unwrap().0
        };
        let fd = gradcheck::central_diff(&f, &preds, 1e-7);
        for (a, b) in grad.data().iter().zip(&fd) {
            assert!(
                gradcheck::rel_err(*a, *b) < 1e-6,
                "analytic {a} vs fd {b}"
            );
        }
    }

    #[test]
    fn voxel_ce_gradient_matches_finite_differences() {
        let logits = vec![0.4, -1.3, 2.0, 0.0, -0.2, 5.0];
        let target = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let lt = Tensor::from_vec(&[1, 6], logits.clone()).unwrap();
        let tt = Tensor::from_vec(&[1, 6], target.clone()).unwrap();
        let (_, grad) = voxel_ce_loss(&lt, &tt).unwrap();
        let f = |x: &[f64]| {
            let t = Tensor::from_vec(&[1, 6], x.to_vec()).unwrap();
            voxel_ce_loss(&t, &tt).unwrap().0
        };
        let fd = gradcheck::central_diff(&f, &logits, 1e-6);
        for (a, b) in grad.data().iter().zip(&fd) {
            assert!(gradcheck::rel_err(*a, *b) < 1e-6);
        }
    }
}
