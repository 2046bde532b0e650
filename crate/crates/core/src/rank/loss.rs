//! Listwise contrastive loss over one positive and N negatives.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `-log(s_0 / Σ s_i)` with `s_i = exp(sim_i / λ)`; `scores[0]` is the
/// positive.
pub fn listwise_loss_generic<T: Scalar>(scores: &[T], lambda: T) -> Result<T> {
    if scores.len() < 2 {
        return Err(Error::Contract(
            "listwise loss needs at least one negative".into(),
        ));
    }
    if lambda.is_nan() || lambda <= T::zero() {
        return Err(Error::Contract(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let logits: Vec<T> = scores.iter().map(|&s| s / lambda).collect();
    let (top, max) =
        logits
            .iter()
            .copied()
            .enumerate()
            .fold((0, T::neg_infinity()), |(bi, bv), (i, v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
    // log Σ exp(l_i - max) = log1p(Σ_{i≠top} exp(l_i - max))
    let rest: T = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &l)| (l - max).exp())
        .sum();
    Ok(rest.ln_1p() - (logits[0] - max))
}

pub fn listwise_loss(positive: f64, negatives: &[f64], lambda: f64) -> Result<f64> {
    let scores: Vec<f64> = std::iter::once(positive)
        .chain(negatives.iter().copied())
        .collect();
    listwise_loss_generic(&scores, lambda)
}

/// `dL/dsim_i = (softmax_i - [i = 0]) / λ`.
pub fn listwise_loss_grad<T: Scalar>(scores: &[T], lambda: T) -> Vec<T> {
    let logits: Vec<T> = scores.iter().map(|&s| s / lambda).collect();
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.iter()
        .enumerate()
        .map(|(i, &e)| {
            let p = e / total;
            let target = if i == 0 { T::one() } else { T::zero() };
            (p - target) / lambda
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scores_give_log_two() {
        assert!((listwise_loss(0.3, &[0.3], 0.07).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn separated_scores() {
        let expected = (-1.0f64 / 0.07).exp().ln_1p();
        assert!((listwise_loss(1.0, &[0.0], 0.07).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 6.2e-7).abs() < 1e-8);
    }

    #[test]
    fn empty_negatives_rejected() {
        assert!(matches!(
            listwise_loss(1.0, &[], 0.07),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradient_matches_differences() {
        let scores = [0.2f64, -0.4, 0.6, 0.1];
        let g = listwise_loss_grad(&scores, 0.07);
        for i in 0..scores.len() {
            let mut p = scores;
            p[i] += 1e-7;
            let mut m = scores;
            m[i] -= 1e-7;
            let num = (listwise_loss_generic(&p, 0.07).unwrap()
                - listwise_loss_generic(&m, 0.07).unwrap())
                / 2e-7;
            assert!((g[i] - num).abs() < 1e-5 * num.abs().max(1.0));
        }
    }
}
