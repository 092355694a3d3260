use nalgebra::{DMatrix, DVector};

use super::{softmax_rows, RecognitionError};
use crate::map::LandmarkLabel;

const LOG_FLOOR: f64 = 1e-12;

/// Per-keypoint loss weights: keypoints with a landmark label get `m0 / m`,
/// outliers get `1 - m0 / m`, where `m0` counts label-0 keypoints.
pub fn inlier_weights(labels: &[LandmarkLabel]) -> Vec<f64> {
    let m = labels.len() as f64;
    let m0 = labels.iter().filter(|&&l| l == 0).count() as f64;
    let w_in = m0 / m;
    labels.iter().map(|&l| if l == 0 { 1.0 - w_in } else { w_in }).collect()
}

/// Weighted cross entropy `-(1/m) Σ w_i log S[i, y_i]` over softmax outputs.
pub fn weighted_ce_loss(probs: &DMatrix<f64>, labels: &[LandmarkLabel]) -> Result<f64, RecognitionError> {
    if probs.nrows() != labels.len() {
        return Err(RecognitionError::ShapeMismatch(format!(
            "{} probability rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= probs.ncols()) {
        return Err(RecognitionError::ShapeMismatch(format!("label {l} outside {} classes", probs.ncols())));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let w = inlier_weights(labels);
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -w[i] * probs[(i, y as usize)].max(LOG_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    /// `C × H`, same layout as the head weight.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

fn head_probs(
    features: &DMatrix<f64>,
    labels: &[LandmarkLabel],
    weight: &DMatrix<f64>,
    bias: &DVector<f64>,
) -> Result<DMatrix<f64>, RecognitionError> {
    if features.ncols() != weight.ncols() || weight.nrows() != bias.len() || features.nrows() != labels.len() {
        return Err(RecognitionError::ShapeMismatch(format!(
            "features {:?}, head {:?}, bias {}, labels {}",
            features.shape(),
            weight.shape(),
            bias.len(),
            labels.len()
        )));
    }
    let mut logits = features * weight.transpose();
    for mut r in logits.row_iter_mut() {
        r += bias.transpose();
    }
    Ok(softmax_rows(&logits))
}

/// Loss of a linear classifier head followed by softmax.
pub fn linear_head_loss(
    features: &DMatrix<f64>,
    labels: &[LandmarkLabel],
    weight: &DMatrix<f64>,
    bias: &DVector<f64>,
) -> Result<f64, RecognitionError> {
    weighted_ce_loss(&head_probs(features, labels, weight, bias)?, labels)
}

/// Analytic gradient of [`linear_head_loss`] with respect to the head.
/// The per-logit gradient is `(w_i / m) (softmax_i - onehot(y_i))`.
pub fn linear_head_gradient(
    features: &DMatrix<f64>,
    labels: &[LandmarkLabel],
    weight: &DMatrix<f64>,
    bias: &DVector<f64>,
) -> Result<HeadGradient, RecognitionError> {
    let probs = head_probs(features, labels, weight, bias)?;
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= weight.nrows()) {
        return Err(RecognitionError::ShapeMismatch(format!("label {l} outside {} classes", weight.nrows())));
    }
    let m = labels.len();
    if m == 0 {
        return Ok(HeadGradient {
            weight: DMatrix::zeros(weight.nrows(), weight.ncols()),
            bias: DVector::zeros(bias.len()),
        });
    }
    let w = inlier_weights(labels);
    let mut dz = probs;
    for (i, &y) in labels.iter().enumerate() {
        dz[(i, y as usize)] -= 1.0;
        let s = w[i] / m as f64;
        dz.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    Ok(HeadGradient {
        weight: dz.transpose() * features,
        bias: dz.row_sum().transpose(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_rule() {
        assert_eq!(inlier_weights(&[0, 1, 2, 1]), vec![0.75, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn one_hot_correct_is_zero() {
        let mut s = DMatrix::zeros(3, 3);
        let labels = [2, 0, 1];
        for (i, &l) in labels.iter().enumerate() {
            s[(i, l as usize)] = 1.0;
        }
        assert_eq!(weighted_ce_loss(&s, &labels).unwrap(), 0.0);
    }

    #[test]
    fn uniform_fixture() {
        let s = DMatrix::from_element(4, 3, 1.0 / 3.0);
        let loss = weighted_ce_loss(&s, &[0, 1, 2, 1]).unwrap();
        assert!((loss - 0.375 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn floor_bounds_log() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let loss = weighted_ce_loss(&s, &[1, 0]).unwrap();
        assert!((loss - 0.5 * (0.5 * 2.0 * -LOG_FLOOR.ln())).abs() < 1e-9);
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, h: usize, c: usize) -> (DMatrix<f64>, Vec<LandmarkLabel>, DMatrix<f64>, DVector<f64>) {
        let f = DMatrix::from_fn(n, h, |_, _| rng.random_range(-1.0..1.0));
        let mut labels: Vec<LandmarkLabel> = (0..n).map(|_| rng.random_range(0..c as LandmarkLabel)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let w = DMatrix::from_fn(c, h, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(c, |_, _| rng.random_range(-1.0..1.0));
        (f, labels, w, b)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = 1e-5;
        for _ in 0..20 {
            let (f, y, w, b) = random_instance(&mut rng, 16, 8, 4);
            let g = linear_head_gradient(&f, &y, &w, &b).unwrap();
            for idx in 0..w.len() {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[idx] += eps;
                wm[idx] -= eps;
                let fd = (linear_head_loss(&f, &y, &wp, &b).unwrap() - linear_head_loss(&f, &y, &wm, &b).unwrap()) / (2.0 * eps);
                assert!((fd - g.weight[idx]).abs() <= 1e-5 * fd.abs().max(g.weight[idx].abs()).max(1e-3));
            }
            for idx in 0..b.len() {
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp[idx] += eps;
                bm[idx] -= eps;
                let fd = (linear_head_loss(&f, &y, &w, &bp).unwrap() - linear_head_loss(&f, &y, &w, &bm).unwrap()) / (2.0 * eps);
                assert!((fd - g.bias[idx]).abs() <= 1e-5 * fd.abs().max(g.bias[idx].abs()).max(1e-3));
            }
        }
    }

    #[test]
    fn perfect_head_has_vanishing_gradient() {
        // features are one-hot class indicators, head is a large identity
        let labels: Vec<LandmarkLabel> = vec![0, 1, 2, 3, 1, 0];
        let f = DMatrix::from_fn(6, 4, |i, j| if labels[i] as usize == j { 1.0 } else { 0.0 });
        let w = DMatrix::identity(4, 4) * 60.0;
        let g = linear_head_gradient(&f, &labels, &w, &DVector::zeros(4)).unwrap();
        assert!(g.weight.norm() < 1e-8 && g.bias.norm() < 1e-8);
    }

    #[test]
    fn all_outliers_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (f, _, w, b) = random_instance(&mut rng, 5, 3, 3);
        let g = linear_head_gradient(&f, &[0; 5], &w, &b).unwrap();
        assert_eq!(g.weight.norm(), 0.0);
        assert_eq!(g.bias.norm(), 0.0);
    }

    #[test]
    fn shape_errors() {
        let f = DMatrix::zeros(2, 3);
        assert!(linear_head_gradient(&f, &[0, 1], &DMatrix::zeros(2, 4), &DVector::zeros(2)).is_err());
        assert!(weighted_ce_loss(&DMatrix::zeros(2, 2), &[0, 5]).is_err());
    }
}
