use crate::error::{param, Error, Result};
use crate::tensor::Tensor;

/// Denominator guard of the cosine classifier.
pub const COSINE_EPS: f64 = 1e-8;

/// `y = x W^T + b` with a fixed left-to-right summation order.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || w.shape().len() != 2 || b.shape().len() != 1 {
        return param("linear_forward expects x: N x Din, W: Dout x Din, b: Dout");
    }
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    if w.shape()[1] != din || b.len() != dout {
        return param(format!(
            "linear_forward shape mismatch: x {:?}, W {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let mut out = Vec::with_capacity(n * dout);
    for i in 0..n {
        let xi = x.row(i);
        for o in 0..dout {
            out.push(b.data()[o] + dot(xi, w.row(o)));
        }
    }
    Tensor::new(vec![n, dout], out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Max-subtracted softmax of one row.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Softmax over the trailing dimension.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let c = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    if c > 0 {
        for row in logits.data().chunks(c) {
            out.extend(softmax_row(row));
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn smooth_l1_scalar(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Elementwise Huber-style loss with unit transition point.
pub fn smooth_l1(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape().to_vec(), |i| smooth_l1_scalar(x.data()[i]))
}

/// Derivative of the elementwise smooth-L1.
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// `alpha * cos(f, w)` for every feature row against every weight row. Norms
/// are floored at [`COSINE_EPS`] so zero rows give zero logits.
pub fn cosine_logits(feat: &Tensor, w: &Tensor, alpha: f64) -> Result<Tensor> {
    if feat.shape().len() != 2 || w.shape().len() != 2 || feat.shape()[1] != w.shape()[1] {
        return param(format!(
            "cosine_logits shape mismatch: feat {:?}, W {:?}",
            feat.shape(),
            w.shape()
        ));
    }
    let (n, c) = (feat.rows(), w.rows());
    let wn: Vec<f64> = (0..c).map(|k| norm(w.row(k)).max(COSINE_EPS)).collect();
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let f = feat.row(i);
        let fnorm = norm(f).max(COSINE_EPS);
        for k in 0..c {
            out.push(alpha * dot(f, w.row(k)) / (fnorm * wn[k]));
        }
    }
    Tensor::new(vec![n, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_identity_and_bias() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(linear_forward(&x, &eye, &zero).unwrap(), x);
        let b = Tensor::vector(vec![0.5, -1.0]);
        let y = linear_forward(&Tensor::zeros(vec![3, 2]), &eye, &b).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
        assert!(linear_forward(&x, &Tensor::zeros(vec![2, 3]), &zero).is_err());
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (x, w, b) = (r(6), r(12), r(4));
        let y = linear_forward(
            &Tensor::matrix(2, 3, x.clone()).unwrap(),
            &Tensor::matrix(4, 3, w.clone()).unwrap(),
            &Tensor::vector(b.clone()),
        )
        .unwrap();
        for i in 0..2 {
            for o in 0..4 {
                let mut acc = b[o];
                for k in 0..3 {
                    acc += x[i * 3 + k] * w[o * 3 + k];
                }
                assert!((y.data()[i * 4 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&Tensor::vector(vec![0.3; 4])).unwrap();
        assert!(u.data().iter().all(|p| (p - 0.25).abs() < 1e-15));
        let p = softmax(&Tensor::vector(vec![0.0, 2f64.ln()])).unwrap();
        assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let a = softmax(&Tensor::matrix(1, 3, vec![1.0, -2.0, 5.0]).unwrap()).unwrap();
        let b = softmax(&Tensor::matrix(1, 3, vec![101.0, 98.0, 105.0]).unwrap()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            softmax(&Tensor::vector(vec![f64::NAN, 1.0])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn smooth_l1_cases() {
        let y = smooth_l1(&Tensor::vector(vec![0.0, 0.5, -2.0]));
        assert_eq!(y.data(), &[0.0, 0.125, 1.5]);
    }

    #[test]
    fn cosine_cases() {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let f = Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap();
        let z = cosine_logits(&f, &w, 20.0).unwrap();
        assert!((z.data()[0] - 20.0).abs() < 1e-6);
        assert!(z.data()[1].abs() < 1e-15);
        let f10 = Tensor::matrix(1, 2, vec![20.0, 0.0]).unwrap();
        let z10 = cosine_logits(&f10, &w, 20.0).unwrap();
        assert!((z.data()[0] - z10.data()[0]).abs() < 1e-9);
        let zero = cosine_logits(&Tensor::zeros(vec![1, 2]), &w, 20.0).unwrap();
        assert_eq!(zero.data(), &[0.0, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn cosine_rescaling_invariance(
            f in proptest::collection::vec(-5.0..5.0f64, 8),
            w in proptest::collection::vec(-1.0..1.0f64, 24),
            scale in 0.01..100.0f64,
        ) {
            proptest::prop_assume!(norm(&f) > 1e-3);
            let wt = Tensor::matrix(3, 8, w).unwrap();
            let a = cosine_logits(&Tensor::matrix(1, 8, f.clone()).unwrap(), &wt, 20.0).unwrap();
            let fs: Vec<f64> = f.iter().map(|v| v * scale).collect();
            let b = cosine_logits(&Tensor::matrix(1, 8, fs).unwrap(), &wt, 20.0).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                proptest::prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift(
            z in proptest::collection::vec(-50.0..50.0f64, 1..12),
            c in -100.0..100.0f64,
        ) {
            let p = softmax_row(&z);
            proptest::prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let zs: Vec<f64> = z.iter().map(|v| v + c).collect();
            for (a, b) in p.iter().zip(softmax_row(&zs)) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
