//! Supervised and consistency heatmap losses, and their weighted total.

use ndarray::{Array4, ArrayView2, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

/// A masked MSE value. `all_masked` flags the degenerate case where no joint
/// contributed and the loss was reported as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss<T> {
    pub value: T,
    pub all_masked: bool,
}

/// Mean squared error over the cells of every joint whose `joint_mask` entry
/// is true. `joint_mask` is `(batch, joints)`.
pub fn masked_mse<T: Real>(
    pred: ArrayView4<'_, T>,
    target: ArrayView4<'_, T>,
    joint_mask: ArrayView2<'_, bool>,
) -> Result<MaskedLoss<T>> {
    Ok(masked_mse_grad(pred, target, joint_mask, false)?.0)
}

/// As [`masked_mse`], also returning d loss / d pred when `with_grad`.
pub fn masked_mse_grad<T: Real>(
    pred: ArrayView4<'_, T>,
    target: ArrayView4<'_, T>,
    joint_mask: ArrayView2<'_, bool>,
    with_grad: bool,
) -> Result<(MaskedLoss<T>, Option<Array4<T>>)> {
    if pred.shape() != target.shape() {
        return Err(Error::param(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    let (n, k, h, w) = pred.dim();
    if joint_mask.dim() != (n, k) {
        return Err(Error::param(format!(
            "joint mask is {:?}, expected ({n}, {k})",
            joint_mask.dim()
        )));
    }
    let active = joint_mask.iter().filter(|&&m| m).count();
    if active == 0 {
        let grad = with_grad.then(|| Array4::zeros(pred.raw_dim()));
        return Ok((
            MaskedLoss {
                value: T::zero(),
                all_masked: true,
            },
            grad,
        ));
    }
    let denom = T::lit((active * h * w) as f64);
    let mut sum = T::zero();
    for b in 0..n {
        for j in 0..k {
            if !joint_mask[[b, j]] {
                continue;
            }
            Zip::from(pred.index_axis(Axis(0), b).index_axis(Axis(0), j))
                .and(target.index_axis(Axis(0), b).index_axis(Axis(0), j))
                .for_each(|&p, &t| sum = sum + (p - t) * (p - t));
        }
    }
    let grad = with_grad.then(|| {
        let two = T::lit(2.0);
        let mut g = Array4::zeros(pred.raw_dim());
        for b in 0..n {
            for j in 0..k {
                if !joint_mask[[b, j]] {
                    continue;
                }
                Zip::from(g.index_axis_mut(Axis(0), b).index_axis_mut(Axis(0), j))
                    .and(pred.index_axis(Axis(0), b).index_axis(Axis(0), j))
                    .and(target.index_axis(Axis(0), b).index_axis(Axis(0), j))
                    .for_each(|g, &p, &t| *g = two * (p - t) / denom);
            }
        }
        g
    });
    Ok((
        MaskedLoss {
            value: sum / denom,
            all_masked: false,
        },
        grad,
    ))
}

/// Heatmap regression loss against ground-truth targets.
pub fn supervised_loss<T: Real>(
    pred: ArrayView4<'_, T>,
    target: ArrayView4<'_, T>,
    joint_mask: ArrayView2<'_, bool>,
) -> Result<MaskedLoss<T>> {
    masked_mse(pred, target, joint_mask)
}

/// Student-vs-teacher loss; `pseudo` must already be in the student's frame.
pub fn consistency_loss<T: Real>(
    student_pred: ArrayView4<'_, T>,
    pseudo: ArrayView4<'_, T>,
    valid_mask: ArrayView2<'_, bool>,
) -> Result<MaskedLoss<T>> {
    masked_mse(student_pred, pseudo, valid_mask)
}

/// The three loss terms, their weights and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_s: f64,
    pub l_u: f64,
    pub l_m: f64,
    pub lambda_u: f64,
    pub lambda_m: f64,
    pub total: f64,
}

pub fn total_loss(l_s: f64, l_u: f64, l_m: f64, lambda_u: f64, lambda_m: f64) -> LossBundle {
    LossBundle {
        l_s,
        l_u,
        l_m,
        lambda_u,
        lambda_m,
        total: l_s + lambda_u * l_u + lambda_m * l_m,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::{synthesize_targets, KeypointSet};
    use ndarray::Array2;

    fn target_batch() -> Array4<f64> {
        let kp = KeypointSet::visible(vec![[20.0, 12.0]]).unwrap();
        let s = synthesize_targets(&kp, 2.0, (16, 16), 2.0).unwrap();
        s.into_array().mapv(f64::from).insert_axis(Axis(0))
    }

    #[test]
    fn zero_at_perfect_fit() {
        let t = target_batch();
        let m = Array2::from_elem((1, 1), true);
        let l = supervised_loss(t.view(), t.view(), m.view()).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(!l.all_masked);
    }

    #[test]
    fn zero_prediction_gives_mean_squared_target() {
        let t = target_batch();
        let z = Array4::zeros(t.raw_dim());
        let m = Array2::from_elem((1, 1), true);
        let l = supervised_loss(z.view(), t.view(), m.view()).unwrap();
        // closed form: sum over the truncated Gaussian disc of exp(-d^2/sigma^2)
        let mut oracle = 0.0;
        for dy in -6i32..=6 {
            for dx in -6i32..=6 {
                let d2 = (dx * dx + dy * dy) as f64;
                let (x, y) = (10 + dx, 6 + dy);
                if d2 <= 36.0 && (0..16).contains(&x) && (0..16).contains(&y) {
                    let g = ((-d2 / 8.0).exp() as f32) as f64;
                    oracle += g * g;
                }
            }
        }
        oracle /= 256.0;
        assert!((l.value - oracle).abs() < 1e-12, "{} vs {}", l.value, oracle);
    }

    #[test]
    fn masked_joint_does_not_contribute() {
        let t = ndarray::concatenate(Axis(1), &[target_batch().view(), target_batch().view()]).unwrap();
        let mut corrupted = t.clone();
        corrupted.index_axis_mut(Axis(1), 1).fill(5.0);
        let m = ndarray::arr2(&[[true, false]]);
        assert_eq!(consistency_loss(corrupted.view(), t.view(), m.view()).unwrap().value, 0.0);
    }

    #[test]
    fn all_masked_returns_zero_with_flag() {
        let t = target_batch();
        let m = Array2::from_elem((1, 1), false);
        let l = supervised_loss(Array4::zeros(t.raw_dim()).view(), t.view(), m.view()).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.all_masked);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let t = target_batch();
        let m = Array2::from_elem((1, 1), true);
        assert!(supervised_loss(Array4::zeros((1, 1, 8, 8)).view(), t.view(), m.view()).is_err());
        let bad = Array2::from_elem((1, 2), true);
        assert!(supervised_loss(t.view(), t.view(), bad.view()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let t = target_batch();
        let mut p = t.mapv(|v| 0.3 * v + 0.05);
        let m = Array2::from_elem((1, 1), true);
        let (_, g) = masked_mse_grad(p.view(), t.view(), m.view(), true).unwrap();
        let g = g.unwrap();
        let h = 1e-6;
        for idx in [[0, 0, 6, 10], [0, 0, 0, 0], [0, 0, 8, 9]] {
            let orig = p[idx];
            p[idx] = orig + h;
            let up = masked_mse(p.view(), t.view(), m.view()).unwrap().value;
            p[idx] = orig - h;
            let dn = masked_mse(p.view(), t.view(), m.view()).unwrap().value;
            p[idx] = orig;
            assert!(((up - dn) / (2.0 * h) - g[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.5, 2.0, 3.0, 0.0, 0.0).total, 1.5);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 1.0, 1.0).total, 6.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.5, 0.25).total, 1.0 + 1.0 + 0.75);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.5, 0.25).total, 2.75);
    }
}
