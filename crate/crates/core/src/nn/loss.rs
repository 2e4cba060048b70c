use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::layers::FeatureTap;
use crate::tensor::Tensor4;

fn check_logits(logits: &Tensor4, labels: &[usize]) -> Result<(usize, usize)> {
    let [n, k, h, w] = logits.shape();
    if h != 1 || w != 1 {
        return Err(Error::shape(format!("logits must be (N, K, 1, 1), got {:?}", logits.shape())));
    }
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::arg(format!("label {bad} out of range for {k} classes")));
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok((n, k))
}

/// Row-wise softmax of `(N, K, 1, 1)` logits.
pub fn softmax_rows(logits: &Tensor4) -> Vec<Vec<f64>> {
    let k = logits.shape()[1];
    logits.data().chunks(k).map(crate::nn::layers::softmax).collect()
}

/// Mean negative log-likelihood over the batch.
pub fn cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let (n, k) = check_logits(logits, labels)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for (s, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = &mut grad[s * k..(s + 1) * k];
        for (gi, z) in g.iter_mut().zip(row) {
            *gi = (z - log_z).exp() / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, Tensor4::from_raw(logits.shape(), grad)))
}

/// Number of rows whose argmax equals the label (first maximum wins).
pub fn correct_count(logits: &Tensor4, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == label
        })
        .count()
}

fn pair_taps<'a>(
    decomposed: &'a [FeatureTap],
    original: &'a [FeatureTap],
) -> Result<impl Iterator<Item = (&'a FeatureTap, &'a FeatureTap)>> {
    if decomposed.len() != original.len() {
        return Err(Error::shape(format!(
            "{} decomposed taps vs {} original taps",
            decomposed.len(),
            original.len()
        )));
    }
    for (a, b) in decomposed.iter().zip(original) {
        if a.layer_id != b.layer_id {
            return Err(Error::shape(format!("tap `{}` paired with `{}`", a.layer_id, b.layer_id)));
        }
        if a.activation.shape() != b.activation.shape() {
            return Err(Error::shape(format!(
                "tap `{}`: {:?} vs {:?}",
                a.layer_id,
                a.activation.shape(),
                b.activation.shape()
            )));
        }
    }
    Ok(decomposed.iter().zip(original))
}

/// Sum over layers of the mean squared difference between paired taps.
pub fn approach_loss(decomposed: &[FeatureTap], original: &[FeatureTap]) -> Result<f64> {
    Ok(pair_taps(decomposed, original)?
        .map(|(a, b)| {
            let n = a.activation.len() as f64;
            a.activation
                .data()
                .iter()
                .zip(b.activation.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / n
        })
        .sum())
}

/// `scale ·` gradient of [`approach_loss`] with respect to the decomposed taps.
pub fn approach_loss_grads(
    decomposed: &[FeatureTap],
    original: &[FeatureTap],
    scale: f64,
) -> Result<BTreeMap<String, Tensor4>> {
    Ok(pair_taps(decomposed, original)?
        .map(|(a, b)| {
            let c = 2.0 * scale / a.activation.len() as f64;
            let g = a
                .activation
                .data()
                .iter()
                .zip(b.activation.data())
                .map(|(x, y)| c * (x - y))
                .collect();
            (a.layer_id.clone(), Tensor4::from_raw(a.activation.shape(), g))
        })
        .collect())
}

pub fn weight_loss(ce: f64, approach: f64, lambda: f64) -> f64 {
    ce + lambda * approach
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let t = Tensor4::zeros([3, 7, 1, 1]);
        let l = cross_entropy(&t, &[0, 3, 6]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_logits_go_to_zero() {
        let mut t = Tensor4::zeros([1, 3, 1, 1]);
        t.set([0, 1, 0, 0], 200.0);
        assert!(cross_entropy(&t, &[1]).unwrap() < 1e-80);
    }

    #[test]
    fn label_out_of_range() {
        let t = Tensor4::zeros([1, 3, 1, 1]);
        assert!(matches!(cross_entropy(&t, &[3]), Err(Error::Argument(_))));
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let t = Tensor4::from_fn([2, 4, 1, 1], |i| (i[0] * 4 + i[1]) as f64 * 0.3 - 1.0);
        let (_, g) = cross_entropy_with_grad(&t, &[1, 2]).unwrap();
        for row in g.data().chunks(4) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn constant_offset_taps() {
        let a = Tensor4::from_fn([2, 2, 2, 2], |i| i[3] as f64);
        let b = Tensor4::from_raw(a.shape(), a.data().iter().map(|v| v + 0.5).collect());
        let taps = |t: &Tensor4| {
            vec![
                FeatureTap { layer_id: "x".into(), activation: t.clone() },
                FeatureTap { layer_id: "y".into(), activation: t.clone() },
            ]
        };
        let l = approach_loss(&taps(&a), &taps(&b)).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
        assert_eq!(approach_loss(&taps(&a), &taps(&a)).unwrap(), 0.0);
    }

    #[test]
    fn weight_loss_arith() {
        assert_eq!(weight_loss(1.0, 2.0, 0.5), 2.0);
        assert_eq!(weight_loss(1.25, 9.0, 0.0), 1.25);
    }
}
