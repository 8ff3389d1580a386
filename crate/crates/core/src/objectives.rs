//! Training objectives and the KL primitive shared with evaluation.
//!
//! Each loss has a plain-slice form used for evaluation and tests, and a
//! graph form (`*_var`) used during training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to the second argument of [`kl_divergence`].
pub const KL_EPSILON: f64 = 1e-8;

const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub sparsity_weight: f64,
    pub diversity_weight: f64,
    pub reconstruction_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sparsity_weight: 0.0,
            diversity_weight: 100.0,
            reconstruction_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sparsity_weight,
            self.diversity_weight,
            self.reconstruction_weight,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::contract(
                "loss weights must be finite and non-negative",
            ));
        }
        if self.reconstruction_weight <= 0.0 {
            return Err(Error::contract("reconstruction weight must be positive"));
        }
        Ok(())
    }
}

pub(crate) fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::contract(format!(
            "{what} has negative or non-finite components"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::contract(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Raises every component to at least [`KL_EPSILON`] and renormalizes.
/// Vectors that need no flooring are returned unchanged.
pub fn floor_distribution(q: &[f64]) -> Vec<f64> {
    if q.iter().all(|&v| v >= KL_EPSILON) {
        return q.to_vec();
    }
    let floored: Vec<f64> = q.iter().map(|&v| v.max(KL_EPSILON)).collect();
    let sum: f64 = floored.iter().sum();
    floored.into_iter().map(|v| v / sum).collect()
}

/// `KL(p || q)` with `0 * log(0 / q) = 0` and `q` floored by [`floor_distribution`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::contract(format!(
            "kl_divergence: length mismatch {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_simplex(p, "kl_divergence: p")?;
    check_simplex(q, "kl_divergence: q")?;
    let q = floor_distribution(q);
    Ok(kl_unchecked(p, &q))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

/// `1 - max_i sigma_i`.
pub fn sparsity_loss(sigma: &[f64]) -> f64 {
    1.0 - sigma.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Mean over the rows of `KL(sigma_j || uniform)`.
pub fn diversity_loss(sigmas: &Tensor) -> Result<f64> {
    let m = sigmas.rows();
    if m == 0 {
        return Err(Error::contract("diversity_loss: no frames"));
    }
    let n = sigmas.cols();
    let uniform = vec![1.0 / n as f64; n];
    let mut total = 0.0;
    for (j, row) in sigmas.row_iter().enumerate() {
        check_simplex(row, &format!("diversity_loss: row {j}"))?;
        total += kl_unchecked(row, &uniform);
    }
    Ok(total / m as f64)
}

/// Mean squared error over all entries.
pub fn reconstruction_loss(predicted: &Tensor, target: &Tensor) -> Result<f64> {
    if predicted.shape() != target.shape() {
        return Err(Error::contract(format!(
            "reconstruction_loss: shape {:?} vs {:?}",
            predicted.shape(),
            target.shape()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::contract("reconstruction_loss: empty sequences"));
    }
    let sse: f64 = predicted
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / predicted.len() as f64)
}

pub fn total_loss(recon: f64, sparsity: f64, diversity: f64, weights: &LossWeights) -> f64 {
    recon * weights.reconstruction_weight
        + sparsity * weights.sparsity_weight
        + diversity * weights.diversity_weight
}

/// Weighted sum over rows of `KL(sigma_r || uniform)`.
///
/// `log_sigma` must be the log of `sigma` (typically from `log_softmax`,
/// which stays finite where `sigma` underflows).
pub fn diversity_loss_var(
    g: &mut Graph,
    sigma: Var,
    log_sigma: Var,
    row_weights: &[f64],
) -> Result<Var> {
    let n = g.value(sigma).cols() as f64;
    let neg_entropy = g.mul(sigma, log_sigma)?;
    let s = g.weighted_sum(neg_entropy, row_weights)?;
    let total_w: f64 = row_weights.iter().sum();
    g.affine(s, 1.0, n.ln() * total_w)
}

/// Weighted sum over rows of `1 - max(sigma_r)`.
pub fn sparsity_loss_var(g: &mut Graph, sigma: Var, row_weights: &[f64]) -> Result<Var> {
    let m = g.row_max(sigma)?;
    let s = g.weighted_sum(m, row_weights)?;
    let total_w: f64 = row_weights.iter().sum();
    g.affine(s, -1.0, total_w)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::LN_2;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;

    #[test]
    fn kl_of_identical_is_zero() {
        assert_eq!(
            kl_divergence(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(),
            0.0
        );
        // floored q differs from p by at most ~epsilon
        assert!(kl_divergence(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-7);
    }

    #[test]
    fn kl_analytic_values() {
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-12);
        // 0.8 ln 1.6 + 0.2 ln 0.4, evaluated at 30 digits
        let expected = 0.192_744_757_021_757_43;
        assert!((kl_divergence(&[0.8, 0.2], &[0.5, 0.5]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_floor_keeps_result_finite() {
        let v = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(v.is_finite() && v > 8.0);
    }

    #[test]
    fn kl_errors() {
        assert!(matches!(
            kl_divergence(&[1.0], &[0.5, 0.5]),
            Err(Error::Contract(_))
        ));
        assert!(kl_divergence(&[0.7, 0.7], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn sparsity_values() {
        assert_eq!(sparsity_loss(&[0.0, 1.0, 0.0]), 0.0);
        assert_eq!(sparsity_loss(&[0.25; 4]), 0.75);
        assert!((sparsity_loss(&[0.6, 0.3, 0.1]) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn diversity_values() {
        let uniform = Tensor::filled(3, 5, 0.2);
        assert!(diversity_loss(&uniform).unwrap().abs() < 1e-15);
        let one_hot = Tensor::row_vector(&[1.0, 0.0]);
        assert!((diversity_loss(&one_hot).unwrap() - LN_2).abs() < 1e-15);
        let mixed = Tensor::from_rows(&[[1.0, 0.0], [0.5, 0.5]]).unwrap();
        assert!((diversity_loss(&mixed).unwrap() - LN_2 / 2.0).abs() < 1e-15);
        assert!(diversity_loss(&Tensor::zeros(0, 3)).is_err());
    }

    #[test]
    fn reconstruction_values() {
        let t = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(reconstruction_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(
            reconstruction_loss(&Tensor::scalar(0.0), &Tensor::scalar(2.0)).unwrap(),
            4.0
        );
        assert!(reconstruction_loss(&t, &Tensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn reconstruction_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = Tensor::from_fn(3, 2, |_, _| rng.random_range(-2.0..2.0));
        let b = Tensor::from_fn(3, 2, |_, _| rng.random_range(-2.0..2.0));
        let mut oracle = 0.0;
        for r in 0..3 {
            for c in 0..2 {
                oracle += (a.get(r, c) - b.get(r, c)).powi(2) / 6.0;
            }
        }
        assert!((reconstruction_loss(&a, &b).unwrap() - oracle).abs() < 1e-14);
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert!((total_loss(1.0, 0.37, 0.01, &w) - 2.0).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 123.0, 0.0, &w), 0.0);
        assert!(w.validate().is_ok());
        let bad = LossWeights {
            diversity_weight: -1.0,
            ..w
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn graph_forms_agree_with_plain_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor::from_fn(4, 5, |_, _| rng.random_range(-2.0..2.0));
        let mut g = Graph::new();
        let l = g.constant(logits);
        let s = g.softmax(l).unwrap();
        let ls = g.log_softmax(l).unwrap();
        let w = [0.25; 4];
        let d = diversity_loss_var(&mut g, s, ls, &w).unwrap();
        let sp = sparsity_loss_var(&mut g, s, &w).unwrap();
        let sigma = g.value(s).clone();
        assert!((g.value(d).item() - diversity_loss(&sigma).unwrap()).abs() < 1e-12);
        let plain_sp: f64 = sigma.row_iter().map(sparsity_loss).sum::<f64>() / 4.0;
        assert!((g.value(sp).item() - plain_sp).abs() < 1e-12);
    }

    #[test]
    fn graph_losses_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::from_fn(3, 4, |_, _| rng.random_range(-2.0..2.0));
            let pred = Tensor::from_fn(3, 2, |_, _| rng.random_range(-2.0..2.0));
            let target = Tensor::from_fn(3, 2, |_, _| rng.random_range(-2.0..2.0));
            let report = grad_check(&[logits, pred], 1e-4, 1e-4, |g, p| {
                let s = g.softmax(p[0])?;
                let ls = g.log_softmax(p[0])?;
                let w = [1.0 / 3.0; 3];
                let d = diversity_loss_var(g, s, ls, &w)?;
                let sp = sparsity_loss_var(g, s, &w)?;
                let t = g.constant(target.clone());
                let r = g.mse(p[1], t)?;
                let a = g.add(d, sp)?;
                g.add(a, r)
            })
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("degenerate", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(p in simplex(5), q in simplex(5)) {
            let v = kl_divergence(&p, &q).unwrap();
            prop_assert!(v >= 0.0);
            if v == 0.0 {
                let fq = floor_distribution(&q);
                for (a, b) in p.iter().zip(&fq) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn diversity_bounded_by_log_n(rows in prop::collection::vec(simplex(6), 1..6)) {
            let t = Tensor::from_rows(&rows).unwrap();
            let d = diversity_loss(&t).unwrap();
            prop_assert!(d >= 0.0 && d <= 6f64.ln() + 1e-12);
        }

        #[test]
        fn sparsity_in_range(p in simplex(7)) {
            let s = sparsity_loss(&p);
            prop_assert!(s >= -1e-12 && s <= 1.0 - 1.0 / 7.0 + 1e-12);
        }
    }
}
