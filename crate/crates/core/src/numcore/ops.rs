//! Softmax, top-k selection and EMA statistics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{invalid, Result};

/// Max-shifted softmax of one slice, written into `out`.
pub fn softmax_slice(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn logsumexp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// Softmax over the last axis.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if !logits.all_finite() {
        return Err(invalid("softmax over non-finite logits"));
    }
    let mut out = Tensor::zeros(logits.shape());
    for r in 0..logits.rows() {
        softmax_slice(logits.row(r), out.row_mut(r));
    }
    Ok(out)
}

/// The `k` largest entries as `(index, value)`, ordered by value descending
/// with ties resolved toward the lower index.
pub fn topk_slice(values: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > values.len() {
        return Err(invalid(format!("topk k={k} outside 1..={}", values.len())));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(invalid("topk over NaN"));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(idx.into_iter().take(k).map(|i| (i, values[i])).collect())
}

pub fn topk(values: &Tensor, k: usize) -> Result<Vec<(usize, f64)>> {
    if values.shape().len() != 1 {
        return Err(invalid(format!("topk expects a vector, got {:?}", values.shape())));
    }
    topk_slice(values.data(), k)
}

/// Running mean and mean absolute deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub mean: f64,
    pub deviation: f64,
}

pub fn ema_update(state: EmaState, x: f64, decay: f64) -> Result<EmaState> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(invalid(format!("ema decay {decay} outside (0, 1)")));
    }
    let mean = decay * state.mean + (1.0 - decay) * x;
    let deviation = decay * state.deviation + (1.0 - decay) * (x - mean).abs();
    Ok(EmaState { mean, deviation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngStream;
    use proptest::prelude::*;

    #[test]
    fn softmax_cases() {
        let u = softmax(&Tensor::vector(vec![0.0; 4]).unwrap()).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);

        let x = [1.0f64, 2.0, 3.0];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let s = softmax(&Tensor::vector(x.to_vec()).unwrap()).unwrap();
        for (p, v) in s.data().iter().zip(x) {
            assert!((p - v.exp() / z).abs() < 1e-12);
        }
        assert!(softmax(&Tensor::vector(vec![f64::NAN, 0.0]).unwrap()).is_err());
    }

    #[test]
    fn topk_ties_and_full() {
        let v = Tensor::vector(vec![0.1, 0.4, 0.4, 0.1]).unwrap();
        assert_eq!(topk(&v, 2).unwrap(), vec![(1, 0.4), (2, 0.4)]);
        let all = topk(&v, 4).unwrap();
        assert_eq!(all.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2, 0, 3]);
        assert!(topk(&v, 0).is_err());
        assert!(topk(&v, 5).is_err());
    }

    #[test]
    fn topk_matches_full_sort_oracle() {
        let mut rng = RngStream::new(3, 3);
        for _ in 0..50 {
            let v: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let got = topk_slice(&v, 4).unwrap();
            for (j, (i, val)) in got.iter().enumerate() {
                assert_eq!(*val, sorted[j]);
                assert_eq!(v[*i], *val);
            }
        }
    }

    #[test]
    fn ema_cases() {
        let s = ema_update(EmaState { mean: 5.0, deviation: 0.0 }, 5.0, 0.3).unwrap();
        assert_eq!(s, EmaState { mean: 5.0, deviation: 0.0 });
        let s = ema_update(EmaState::default(), 10.0, 0.9).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-12 && (s.deviation - 0.9).abs() < 1e-12);
        assert!(ema_update(EmaState::default(), 1.0, 1.0).is_err());
        assert!(ema_update(EmaState::default(), 1.0, 0.0).is_err());
    }

    #[test]
    fn ema_matches_reference_loop() {
        let mut rng = RngStream::new(11, 0);
        let xs: Vec<f64> = (0..100).map(|_| rng.normal() * 3.0 + 1.0).collect();
        let (mut m, mut d) = (0.0f64, 0.0f64);
        let mut s = EmaState::default();
        for &x in &xs {
            let (decay, w) = (0.8, 1.0 - 0.8);
            m = decay * m + w * x;
            d = decay * d + w * (x - m).abs();
            s = ema_update(s, x, 0.8).unwrap();
        }
        assert_eq!(s.mean.to_bits(), m.to_bits());
        assert_eq!(s.deviation.to_bits(), d.to_bits());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(x in prop::collection::vec(-30.0f64..30.0, 1..12), c in -50.0f64..50.0) {
            let a = softmax(&Tensor::vector(x.clone()).unwrap()).unwrap();
            let b = softmax(&Tensor::vector(x.iter().map(|v| v + c).collect()).unwrap()).unwrap();
            let sum: f64 = a.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn topk_is_deterministic(x in prop::collection::vec(-5i32..5, 1..20), k in 1usize..20) {
            let v: Vec<f64> = x.iter().map(|&i| i as f64).collect();
            let k = k.min(v.len());
            let a = topk_slice(&v, k).unwrap();
            let b = topk_slice(&v, k).unwrap();
            prop_assert_eq!(&a, &b);
            for w in a.windows(2) {
                prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
            }
        }
    }
}
