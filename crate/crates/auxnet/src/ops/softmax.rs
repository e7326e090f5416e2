//! Softmax cross-entropy over logits, numerically stable via log-sum-exp.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Returns `(mean NLL loss, probabilities [B,C])`.
pub fn softmax_xent_forward<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::shape(
            "softmax_xent",
            format!("logits must be [B,C], got {shape:?}"),
        ));
    }
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::shape(
            "softmax_xent",
            format!("{} labels for batch {b}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidConfig(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let x = logits.data();
    let mut probs = Tensor::zeros(vec![b, c]);
    let mut loss = T::zero();
    {
        let pd = probs.data_mut();
        for bi in 0..b {
            let row = &x[bi * c..(bi + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for &v in row {
                sum = sum + (v - max).exp();
            }
            let log_z = max + sum.ln();
            loss = loss + (log_z - row[labels[bi]]);
            let p_row = &mut pd[bi * c..(bi + 1) * c];
            for (p, &v) in p_row.iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
    }
    Ok((loss / T::from_f64(b as f64), probs))
}

/// Gradient of `weight * mean NLL` with respect to the logits.
pub fn softmax_xent_backward<T: Element>(
    probs: &Tensor<T>,
    labels: &[usize],
    weight: T,
) -> Result<Tensor<T>> {
    let (b, c) = (probs.shape()[0], probs.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape(
            "softmax_xent_backward",
            format!("{} labels for batch {b}", labels.len()),
        ));
    }
    let scale = weight / T::from_f64(b as f64);
    let mut grad = probs.clone();
    {
        let g = grad.data_mut();
        for (bi, &label) in labels.iter().enumerate() {
            let row = &mut g[bi * c..(bi + 1) * c];
            row[label] = row[label] - T::one();
            for v in row.iter_mut() {
                *v = *v * scale;
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rand_tensor, Rng64};

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::zeros(vec![3usize, 10]);
        let (loss, probs) = softmax_xent_forward::<f64>(&logits, &[0, 5, 9]).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-12);
        for row in probs.data().chunks(10) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn saturated_true_class_has_tiny_loss() {
        let mut logits = Tensor::zeros(vec![1usize, 4]);
        logits.data_mut()[2] = 50.0f64;
        let (loss, _) = softmax_xent_forward(&logits, &[2]).unwrap();
        assert!(loss < 1e-6);
        assert!(loss >= 0.0);
    }

    #[test]
    fn matches_log_sum_exp_oracle() {
        let mut rng = Rng64::new(31);
        let logits: Tensor<f64> = rand_tensor(&mut rng, &[4, 3]);
        let labels = [2usize, 0, 1, 1];
        let (loss, _) = softmax_xent_forward(&logits, &labels).unwrap();
        // independent oracle: direct log-sum-exp, no max-shift
        let mut expect = 0.0;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &logits.data()[bi * 3..(bi + 1) * 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += z.ln() - row[label];
        }
        expect /= 4.0;
        assert!((loss - expect).abs() < 1e-6, "{loss} vs {expect}");
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = Tensor::zeros(vec![1usize, 3]);
        assert!(softmax_xent_forward::<f64>(&logits, &[3]).is_err());
    }
}
