//! Eager (untaped) versions of the primitive ops.

use super::kernels;
use super::{NumericsError, Tensor};

/// Matrix product of `a: [m, k]` and `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    Tensor::new(&[m, n], out)
}

/// Softmax along the last axis of `logits + mask`.
///
/// Entries with a `-inf` mask come out exactly zero. A row with every
/// entry masked comes out all zeros; the second return value counts such
/// rows.
pub fn softmax_masked(logits: &Tensor, mask: &Tensor) -> Result<(Tensor, usize), NumericsError> {
    if logits.shape() != mask.shape() || logits.rank() == 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "softmax_masked",
            left: logits.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    if let Some(bad) = mask.data().iter().find(|m| **m > 0.0 || m.is_nan()) {
        return Err(NumericsError::Domain {
            op: "softmax_masked",
            detail: format!("mask entry {bad} outside [-inf, 0]"),
        });
    }
    let cols = *logits.shape().last().expect("rank >= 1");
    let mut out = vec![0.0; logits.len()];
    let mut flagged = 0;
    if cols > 0 {
        for ((l, m), o) in logits
            .data()
            .chunks(cols)
            .zip(mask.data().chunks(cols))
            .zip(out.chunks_mut(cols))
        {
            flagged += usize::from(kernels::softmax_masked_row(l, m, o));
        }
    }
    Ok((Tensor::new(logits.shape(), out)?, flagged))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| kernels::sigmoid(x.data()[i]))
}

pub fn log_sigmoid(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| kernels::log_sigmoid(x.data()[i]))
}

/// Mean negative log-likelihood of `targets` under `logits: [n, vocab]`.
pub fn cross_entropy_lm(logits: &Tensor, targets: &[usize]) -> Result<f64, NumericsError> {
    if logits.rank() != 2 || logits.shape()[0] != targets.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "cross_entropy_lm",
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    let vocab = logits.shape()[1];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(NumericsError::Index {
                op: "cross_entropy_lm",
                index: t,
                bound: vocab,
            });
        }
        let row = logits.row(i);
        total += kernels::log_sum_exp(row) - row[t];
    }
    Ok(total / targets.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_small() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.at2(i, p) * b.at2(p, j);
                }
                assert!((c.at2(i, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, NumericsError::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_masked_examples() {
        let t = |v: Vec<f64>| Tensor::new(&[v.len()], v).unwrap();
        let (p, _) = softmax_masked(&t(vec![0.0, 0.0]), &t(vec![0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let (p, _) = softmax_masked(&t(vec![5.0, 1.0]), &t(vec![0.0, f64::NEG_INFINITY])).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
        let logits = [1.0, 2.0, 3.0];
        let mask = [0.0, 0.5f64.ln(), 0.0];
        let (p, flagged) = softmax_masked(&t(logits.to_vec()), &t(mask.to_vec())).unwrap();
        assert_eq!(flagged, 0);
        let denom: f64 = logits.iter().zip(&mask).map(|(l, m)| (l + m).exp()).sum();
        for i in 0..3 {
            assert!((p.data()[i] - (logits[i] + mask[i]).exp() / denom).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_all_masked_row_is_zero_and_flagged() {
        let logits = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = Tensor::new(&[2, 2], vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, 0.0]).unwrap();
        let (p, flagged) = softmax_masked(&logits, &mask).unwrap();
        assert_eq!(flagged, 1);
        assert_eq!(&p.data()[..2], &[0.0, 0.0]);
        assert!(p.is_finite());
    }

    #[test]
    fn softmax_rejects_positive_mask() {
        let t = Tensor::zeros(&[2]);
        let m = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        assert!(softmax_masked(&t, &m).is_err());
    }

    #[test]
    fn sigmoid_values() {
        let x = Tensor::new(&[3], vec![0.0, -5.0, -100.0]).unwrap();
        let s = sigmoid(&x);
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 0.0067).abs() < 1e-4);
        let ls = log_sigmoid(&x);
        // ln(sigmoid(-100)) = -100 - ln(1 + e^-100)
        assert!((ls.data()[2] + 100.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[3, 4]);
        let l = cross_entropy_lm(&uniform, &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let mut sure = Tensor::zeros(&[2, 4]);
        sure.data_mut()[2] = 1e4;
        sure.data_mut()[4 + 1] = 1e4;
        assert!(cross_entropy_lm(&sure, &[2, 1]).unwrap().abs() < 1e-6);
        assert!(matches!(
            cross_entropy_lm(&uniform, &[0, 4, 1]),
            Err(NumericsError::Index { .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random(&[5, 7], &mut rng);
        let targets = [0, 6, 3, 3, 1];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total -= (row[t].exp() / z).ln();
        }
        let l = cross_entropy_lm(&logits, &targets).unwrap();
        assert!((l - total / 5.0).abs() <= 1e-10);
    }
}
