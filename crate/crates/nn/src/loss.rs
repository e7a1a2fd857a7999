//! Training objectives. Losses are accumulated in f64.

use crate::error::{NnError, Result};
use crate::exec::softmax_channels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-pixel class indices for a batch, `N × H × W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub shape: [usize; 3],
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], labels: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != labels.len() {
            return Err(NnError::Invalid(format!("label map {shape:?} with {} labels", labels.len())));
        }
        Ok(Self { shape, labels })
    }
}

/// Mean softmax cross-entropy over an `N × K` logit batch and its gradient.
pub fn loss_softmax_ce<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let [n, k] = match *logits.shape() {
        [n, k] => [n, k],
        _ => return Err(NnError::Invalid(format!("logits must be N×K, got {:?}", logits.shape()))),
    };
    if labels.len() != n {
        return Err(NnError::Invalid(format!("{} labels for batch of {n}", labels.len())));
    }
    pixel_ce_core(logits, labels, n, k, 1)
}

/// Per-pixel softmax cross-entropy averaged over every pixel of an `N × K × H × W` map.
pub fn loss_pixel_ce<T: Scalar>(logit_map: &Tensor<T>, mask: &LabelMap) -> Result<(f64, Tensor<T>)> {
    let [n, k, h, w] = match *logit_map.shape() {
        [n, k, h, w] => [n, k, h, w],
        _ => return Err(NnError::Invalid(format!("logit map must be N×K×H×W, got {:?}", logit_map.shape()))),
    };
    if mask.shape != [n, h, w] {
        return Err(NnError::Shape {
            layer: 0,
            detail: format!("mask {:?} vs logits spatial [{n}, {h}, {w}]", mask.shape),
        });
    }
    pixel_ce_core(logit_map, &mask.labels, n, k, h * w)
}

fn pixel_ce_core<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    n: usize,
    k: usize,
    plane: usize,
) -> Result<(f64, Tensor<T>)> {
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(NnError::Label { label, classes: k });
    }
    let mut probs = vec![T::zero(); logits.len()];
    softmax_channels(logits.data(), &mut probs, n, k, plane);
    let count = (n * plane) as f64;
    let mut loss = 0.0f64;
    let mut grad = Tensor::new(logits.shape().to_vec(), probs)?;
    let g = grad.data_mut();
    for s in 0..n {
        for p in 0..plane {
            let label = labels[s * plane + p];
            let base = s * k * plane + p;
            // log-softmax evaluated directly keeps the loss finite for saturated logits.
            let x = &logits.data()[s * k * plane..(s + 1) * k * plane];
            let max = (0..k).map(|c| x[c * plane + p].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..k).map(|c| (x[c * plane + p].as_f64() - max).exp()).sum::<f64>().ln();
            loss += lse - x[label * plane + p].as_f64();
            g[base + label * plane] -= T::one();
        }
    }
    let scale = T::of_f64(1.0 / count);
    g.iter_mut().for_each(|v| *v *= scale);
    let loss = loss / count;
    if !loss.is_finite() {
        return Err(NnError::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}

/// Numerically stable binary cross-entropy on a logit: returns `(loss, dloss/dlogit)`.
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    let sig = 1.0 / (1.0 + (-logit).exp());
    (loss, sig - target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_class_is_ln2() {
        let logits = Tensor::<f64>::zeros(vec![3, 2]);
        let (loss, _) = loss_softmax_ce(&logits, &[0, 1, 1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn peaked_logits_drive_loss_to_zero() {
        let logits = Tensor::<f64>::from_f64(vec![1, 3], &[60.0, 0.0, 0.0]).unwrap();
        let (loss, _) = loss_softmax_ce(&logits, &[0]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn hand_evaluated_three_class() {
        let logits = Tensor::<f64>::from_f64(vec![1, 3], &[1.0, 0.0, 0.0]).unwrap();
        let (loss, grad) = loss_softmax_ce(&logits, &[0]).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0)).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((grad.data()[0] - (e / (e + 2.0) - 1.0)).abs() < 1e-12);
        assert!((grad.data()[1] - 1.0 / (e + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let logits = Tensor::<f64>::zeros(vec![1, 2]);
        assert!(matches!(loss_softmax_ce(&logits, &[2]), Err(NnError::Label { label: 2, classes: 2 })));
    }

    #[test]
    fn pixel_uniform_is_ln2_and_saturated_is_zero() {
        let map = LabelMap::new([1, 2, 2], vec![0, 1, 1, 0]).unwrap();
        let (loss, _) = loss_pixel_ce(&Tensor::<f64>::zeros(vec![1, 2, 2, 2]), &map).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        // channel 0 then channel 1 planes
        let sat = Tensor::<f64>::from_f64(vec![1, 2, 2, 2], &[50.0, -50.0, -50.0, 50.0, -50.0, 50.0, 50.0, -50.0]).unwrap();
        let (loss, _) = loss_pixel_ce(&sat, &map).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn pixel_ce_matches_brute_force_sum() {
        let values = [0.3, -1.2, 2.0, 0.0, 1.5, 0.7, -0.4, 0.9, 0.1, -2.0, 0.6, 1.1];
        let logits = Tensor::<f64>::from_f64(vec![1, 3, 2, 2], &values).unwrap();
        let labels = vec![2, 0, 1, 2];
        let map = LabelMap::new([1, 2, 2], labels.clone()).unwrap();
        let (loss, _) = loss_pixel_ce(&logits, &map).unwrap();
        let mut brute = 0.0;
        for p in 0..4 {
            let z: Vec<f64> = (0..3).map(|c| values[c * 4 + p]).collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            brute += -(z[labels[p]].exp() / denom).ln();
        }
        assert!((loss - brute / 4.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_spatial_mismatch_rejected() {
        let map = LabelMap::new([1, 3, 2], vec![0; 6]).unwrap();
        assert!(loss_pixel_ce(&Tensor::<f64>::zeros(vec![1, 2, 2, 2]), &map).is_err());
    }

    #[test]
    fn bce_matches_definition() {
        let (l, g) = bce_with_logit(0.3, 1.0);
        let s = 1.0 / (1.0 + (-0.3f64).exp());
        assert!((l + s.ln()).abs() < 1e-12);
        assert!((g - (s - 1.0)).abs() < 1e-12);
        let (l0, _) = bce_with_logit(-800.0, 0.0);
        assert!(l0.is_finite() && l0 < 1e-300);
    }
}
