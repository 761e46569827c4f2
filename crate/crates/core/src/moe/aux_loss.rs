//! Auxiliary router losses and load diagnostics.
//!
//! Balance loss: `N · Σ_i f_i · P_i`, where `f_i` is the fraction of
//! token-slots routed to expert `i` and `P_i` the mean gate probability.
//! Router z-loss: mean over tokens of `logsumexp(ŝ_t)²`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::{logsumexp, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxLossReport {
    pub balance_loss: f64,
    pub z_loss: f64,
    /// `f_i`: fraction of token-slots routed to each expert; sums to 1.
    pub expert_load: Vec<f64>,
    /// `P_i`: mean softmax probability per expert.
    pub mean_gate: Vec<f64>,
}

/// Per-expert slot counts. Every token contributes exactly `k` slots.
pub fn slot_counts(indices: &[Vec<usize>], n_experts: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; n_experts];
    for sel in indices {
        for &i in sel {
            if i >= n_experts {
                return Err(invalid(format!("expert index {i} >= {n_experts}")));
            }
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Returns `(L_bal, f, P)`.
pub fn balance_loss(probs: &Tensor, indices: &[Vec<usize>]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (t, n) = probs.dims2()?;
    if t == 0 || indices.len() != t {
        return Err(invalid(format!("balance loss needs {t} selections, got {}", indices.len())));
    }
    let k = indices[0].len();
    if k == 0 || indices.iter().any(|s| s.len() != k) {
        return Err(invalid("ragged or empty selections"));
    }
    let counts = slot_counts(indices, n)?;
    let slots = (t * k) as f64;
    let f: Vec<f64> = counts.iter().map(|&c| c as f64 / slots).collect();
    let mut p = vec![0.0; n];
    for r in 0..t {
        for (pi, &v) in p.iter_mut().zip(probs.row(r)) {
            *pi += v;
        }
    }
    p.iter_mut().for_each(|v| *v /= t as f64);
    let loss = n as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    Ok((loss, f, p))
}

pub fn z_loss(logits: &Tensor) -> Result<f64> {
    let (t, _) = logits.dims2()?;
    if !logits.all_finite() {
        return Err(invalid("z-loss over non-finite logits"));
    }
    Ok((0..t).map(|r| logsumexp(logits.row(r)).powi(2)).sum::<f64>() / t as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub load: Vec<f64>,
    /// `max load / min load`; infinite when some expert received nothing.
    pub max_min_ratio: f64,
    /// Shannon entropy (nats) of the load distribution.
    pub entropy: f64,
}

/// Routing fractions and balance diagnostics over a window of per-token
/// selections.
pub fn expert_load_stats(window: &[Vec<usize>], n_experts: usize) -> Result<LoadStats> {
    if window.is_empty() {
        return Err(invalid("empty selection window"));
    }
    let counts = slot_counts(window, n_experts)?;
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(invalid("selection window holds no slots"));
    }
    let load: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(load_summary(load))
}

pub fn load_summary(load: Vec<f64>) -> LoadStats {
    let max = load.iter().copied().fold(0.0, f64::max);
    let min = load.iter().copied().fold(f64::INFINITY, f64::min);
    let max_min_ratio = if min > 0.0 { max / min } else { f64::INFINITY };
    let entropy = -load.iter().filter(|&&l| l > 0.0).map(|&l| l * l.ln()).sum::<f64>();
    LoadStats { load, max_min_ratio, entropy }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{softmax, topk_slice, RngStream};

    #[test]
    fn uniform_gates_and_loads_give_one() {
        let n = 4;
        let probs = Tensor::from_fn(&[8, n], |_| 0.25);
        let indices: Vec<Vec<usize>> = (0..8).map(|t| vec![t % n]).collect();
        let (l, f, _) = balance_loss(&probs, &indices).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_collapse_gives_n() {
        let probs = Tensor::from_fn(&[5, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let indices = vec![vec![0]; 5];
        let (l, f, p) = balance_loss(&probs, &indices).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(f, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn random_batch_matches_counting_oracle() {
        let mut rng = RngStream::new(21, 0);
        let (t, n, k) = (64, 8, 2);
        let logits = Tensor::from_fn(&[t, n], |_| rng.normal());
        let probs = softmax(&logits).unwrap();
        let indices: Vec<Vec<usize>> = (0..t)
            .map(|r| topk_slice(probs.row(r), k).unwrap().into_iter().map(|p| p.0).collect())
            .collect();
        let (l, _, _) = balance_loss(&probs, &indices).unwrap();
        // brute force: per expert, count slots and sum probabilities directly
        let mut oracle = 0.0;
        for i in 0..n {
            let mut count = 0usize;
            let mut psum = 0.0;
            for r in 0..t {
                count += indices[r].iter().filter(|&&j| j == i).count();
                psum += probs.get2(r, i);
            }
            oracle += (count as f64 / (t * k) as f64) * (psum / t as f64);
        }
        assert!((l - n as f64 * oracle).abs() < 1e-12);
    }

    #[test]
    fn z_loss_cases() {
        let l = z_loss(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert!((l - 2f64.ln().powi(2)).abs() < 1e-15);
        assert!((l - 0.4805).abs() < 1e-4);
        assert_eq!(z_loss(&Tensor::from_rows(&[vec![0.0]]).unwrap()).unwrap(), 0.0);

        let mut rng = RngStream::new(8, 0);
        let x = Tensor::from_fn(&[7, 5], |_| rng.normal() * 3.0);
        let direct: f64 = (0..7)
            .map(|r| x.row(r).iter().map(|v| v.exp()).sum::<f64>().ln().powi(2))
            .sum::<f64>()
            / 7.0;
        assert!((z_loss(&x).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn load_stats_cases() {
        let n = 4;
        let uniform: Vec<Vec<usize>> = (0..40).map(|t| vec![t % n]).collect();
        let s = expert_load_stats(&uniform, n).unwrap();
        assert!((s.entropy - (n as f64).ln()).abs() < 1e-12);
        assert_eq!(s.max_min_ratio, 1.0);

        let collapsed = vec![vec![2]; 10];
        let s = expert_load_stats(&collapsed, n).unwrap();
        assert_eq!(s.entropy, 0.0);
        assert!(s.max_min_ratio.is_infinite());
        assert!(expert_load_stats(&[], n).is_err());

        let mut rng = RngStream::new(4, 4);
        let window: Vec<Vec<usize>> = (0..100).map(|_| vec![rng.below(n), rng.below(n)]).collect();
        let s = expert_load_stats(&window, n).unwrap();
        for i in 0..n {
            let c = window.iter().flatten().filter(|&&j| j == i).count();
            assert!((s.load[i] - c as f64 / 200.0).abs() < 1e-15);
        }
    }
}
