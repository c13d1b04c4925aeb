//! Softmax cross-entropy, evaluated in doubles by whoever sees the logits.

use crate::error::{ensure, Error, Result};
use crate::ring::{RingParams, RingTensor};

/// Mean cross-entropy of a `(batch, classes)` logit matrix and the gradient
/// `(softmax - onehot) / batch` with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[u8], classes: usize) -> Result<(f64, Vec<f64>)> {
    let batch = labels.len();
    ensure!(
        batch > 0 && logits.len() == batch * classes,
        Error::Shape(format!("{} logits for {batch} labels of {classes} classes", logits.len()))
    );
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (b, &t) in labels.iter().enumerate() {
        ensure!(
            (t as usize) < classes,
            Error::Data(format!("label {t} outside 0..{classes}"))
        );
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + max - row[t as usize];
        for (c, e) in exps.iter().enumerate() {
            let onehot = if c == t as usize { 1.0 } else { 0.0 };
            grad[b * classes + c] = (e / sum - onehot) / batch as f64;
        }
    }
    Ok((loss / batch as f64, grad))
}

/// Loss of revealed ring logits and the output gradient encoded at scale f.
pub fn loss_and_gradient(ring: &RingParams, logits: &RingTensor, labels: &[u8]) -> Result<(f64, RingTensor)> {
    ensure!(
        logits.shape.len() == 2,
        Error::Shape(format!("logits of shape {:?}", logits.shape))
    );
    let (loss, grad) = softmax_cross_entropy(&logits.decode(), labels, logits.shape[1])?;
    let g = RingTensor::encode(ring, &logits.shape, &grad, ring.frac_bits)?;
    Ok((loss, g))
}

pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<u8> {
    logits
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0 as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let (loss, _) = softmax_cross_entropy(&[0.7; 30], &[0, 4, 9], 10).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits() {
        let mut z = vec![0.0; 10];
        z[3] = 60.0;
        let (loss, g) = softmax_cross_entropy(&z, &[3], 10).unwrap();
        assert!(loss < 1e-20);
        assert!(g.iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (b, c) = (32, 10);
        let z: Vec<f64> = (0..b * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t: Vec<u8> = (0..b).map(|_| rng.random_range(0..c as u8)).collect();
        let (_, g) = softmax_cross_entropy(&z, &t, c).unwrap();
        let h = 1e-6;
        for i in 0..z.len() {
            let mut up = z.clone();
            let mut down = z.clone();
            up[i] += h;
            down[i] -= h;
            let numeric = (softmax_cross_entropy(&up, &t, c).unwrap().0 - softmax_cross_entropy(&down, &t, c).unwrap().0) / (2.0 * h);
            assert!(
                (numeric - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-3),
                "entry {i}: numeric {numeric} analytic {}",
                g[i]
            );
        }
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(softmax_cross_entropy(&[0.0; 10], &[10], 10), Err(Error::Data(_))));
    }

    #[test]
    fn argmax_picks_first_max() {
        assert_eq!(argmax_rows(&[1.0, 3.0, 3.0, -1.0, -2.0, -3.0], 3), vec![1, 0]);
    }
}
