//! Unbiased evaluation on MAR test data: MSE, AUC via rank statistics with
//! ties counted one half, and per-user nDCG@K with the 2^r - 1 gain.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbones::Backbone;
use crate::data::RatingDataset;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mse: f64,
    pub auc: f64,
    /// K -> nDCG@K.
    pub ndcg_at_k: BTreeMap<usize, f64>,
    pub num_users_evaluated: usize,
    pub num_ratings: usize,
}

pub fn mse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(CoreError::ContractViolation("empty input".into()));
    }
    let s: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(s / predictions.len() as f64)
}

/// Probability that a random positive outranks a random negative, ties
/// counted one half; computed with average ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::UndefinedEstimate(
            "AUC needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    // Average ranks within tie groups (ranks are 1-based).
    let mut rank_sum_pos = 0.0;
    let mut idx = 0usize;
    while idx < order.len() {
        let mut end = idx + 1;
        while end < order.len() && scores[order[end]] == scores[order[idx]] {
            end += 1;
        }
        let avg_rank = (idx + 1 + end) as f64 / 2.0;
        for &o in &order[idx..end] {
            if labels[o] {
                rank_sum_pos += avg_rank;
            }
        }
        idx = end;
    }
    Ok((rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// Mean over users (with nonzero ideal DCG) of DCG@k / IDCG@k, gain
/// 2^rating - 1, discount log2(rank + 1). Per-user lists are
/// (score, rating, item_index); score ties break by item index ascending.
pub fn ndcg_at_k(per_user: &[Vec<(f64, f64, usize)>], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(CoreError::Domain(format!("k must be >= 1, got {k}")));
    }
    let gain = |r: f64| 2f64.powf(r) - 1.0;
    let mut total = 0.0;
    let mut users = 0usize;
    for items in per_user {
        if items.is_empty() {
            continue;
        }
        let mut by_score: Vec<&(f64, f64, usize)> = items.iter().collect();
        by_score.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.2.cmp(&b.2))
        });
        let dcg: f64 = by_score
            .iter()
            .take(k)
            .enumerate()
            .map(|(pos, item)| gain(item.1) / ((pos + 2) as f64).log2())
            .sum();
        let mut ideal: Vec<f64> = items.iter().map(|it| it.1).collect();
        ideal.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(pos, &r)| gain(r) / ((pos + 2) as f64).log2())
            .sum();
        if idcg > 0.0 {
            total += dcg / idcg;
            users += 1;
        }
    }
    if users == 0 {
        return Err(CoreError::UndefinedEstimate("no user with nonzero ideal DCG".into()));
    }
    Ok(total / users as f64)
}

/// Score a test set with a prediction model (clamped to the rating scale)
/// and compute all metrics. Binarization: rating >= `positive_threshold`.
pub fn evaluate_model(
    model: &Backbone,
    test: &RatingDataset,
    ks: &[usize],
    positive_threshold: f64,
) -> Result<EvalResult> {
    let (lo, hi) = test.rating_scale;
    let mut preds = Vec::with_capacity(test.observed.len());
    let mut truths = Vec::with_capacity(test.observed.len());
    let mut labels = Vec::with_capacity(test.observed.len());
    let mut per_user: Vec<Vec<(f64, f64, usize)>> = vec![Vec::new(); test.num_users];
    for &(u, i, r) in &test.observed {
        let p = model.predict(u, i)?.clamp(lo, hi);
        preds.push(p);
        truths.push(r);
        labels.push(r >= positive_threshold);
        per_user[u].push((p, r, i));
    }
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        ndcg.insert(k, ndcg_at_k(&per_user, k)?);
    }
    Ok(EvalResult {
        mse: mse(&preds, &truths)?,
        auc: auc(&preds, &labels)?,
        ndcg_at_k: ndcg,
        num_users_evaluated: per_user.iter().filter(|v| !v.is_empty()).count(),
        num_ratings: test.observed.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    /// O(n^2) pairwise AUC: mean over (pos, neg) pairs of win + tie/2.
    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    #[test]
    fn mse_hand_values() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mse(&[1.0, 4.0], &[2.0, 2.0]).unwrap() - 2.5).abs() < 1e-15);
        assert!(mse(&[], &[]).is_err());
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn auc_hand_values() {
        // perfect separation, reversed, and all tied
        assert_eq!(auc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.9], &[true, true, false]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]).unwrap(), 0.5);
        // one tie across classes counts one half: pairs (0.7>0.2)=1,
        // (0.7=0.7)=0.5 -> 0.75
        assert_eq!(auc(&[0.7, 0.2, 0.7], &[true, false, false]).unwrap(), 0.75);
    }

    #[test]
    fn auc_needs_both_classes() {
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auc(&[0.1, 0.2], &[false, false]).is_err());
        assert!(auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = rng_from_seed(42);
        for _ in 0..100 {
            let n = 2 + (rng.random::<u64>() % 29) as usize;
            // quantized scores force frequent ties
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.random::<f64>() * 5.0).round() / 5.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
            labels[0] = true;
            labels[n - 1] = false;
            let fast = auc(&scores, &labels).unwrap();
            let slow = pairwise_auc(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "{scores:?} {labels:?}");
        }
    }

    #[test]
    fn auc_is_invariant_to_monotone_transforms() {
        let scores = vec![0.1, 0.4, 0.4, 0.9, 2.0];
        let labels = vec![false, true, false, true, true];
        let base = auc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
        assert!((auc(&warped, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn ndcg_perfect_ranking_is_one() {
        let user = vec![vec![(0.9, 5.0, 0), (0.5, 3.0, 1), (0.1, 1.0, 2)]];
        for k in [1, 2, 3, 10] {
            assert!((ndcg_at_k(&user, k).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ndcg_hand_value() {
        // ranking by score: r=1, r=3, r=2 against ideal 3, 2, 1
        let user = vec![vec![(0.5, 3.0, 0), (0.9, 1.0, 1), (0.1, 2.0, 2)]];
        assert!((ndcg_at_k(&user, 3).unwrap() - 0.7363636171343382).abs() < 1e-12);
    }

    #[test]
    fn ndcg_truncates_at_k() {
        // top-1 by score has rating 1; ideal top-1 is 3
        let user = vec![vec![(0.5, 3.0, 0), (0.9, 1.0, 1)]];
        let expected = (2f64.powf(1.0) - 1.0) / (2f64.powf(3.0) - 1.0);
        assert!((ndcg_at_k(&user, 1).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ndcg_score_ties_break_by_item_index() {
        // tied scores: item 0 (r=1) precedes item 1 (r=3)
        let user = vec![vec![(0.5, 1.0, 0), (0.5, 3.0, 1)]];
        let a = ndcg_at_k(&user, 1).unwrap();
        assert!((a - 1.0 / 7.0).abs() < 1e-12);
        let swapped = vec![vec![(0.5, 1.0, 1), (0.5, 3.0, 0)]];
        assert!((ndcg_at_k(&swapped, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ndcg_averages_over_scoreable_users() {
        // second user has all-zero gains and is skipped; third is empty
        let users = vec![
            vec![(0.9, 5.0, 0), (0.5, 3.0, 1)],
            vec![(0.9, 0.0, 0)],
            vec![],
        ];
        assert!((ndcg_at_k(&users, 2).unwrap() - 1.0).abs() < 1e-12);
        assert!(ndcg_at_k(&vec![vec![(0.9, 0.0, 0)]], 2).is_err());
        assert!(ndcg_at_k(&users, 0).is_err());
    }

    #[test]
    fn evaluate_model_clamps_and_binarizes() {
        let test = RatingDataset::new(
            2,
            2,
            vec![(0, 0, 5.0), (0, 1, 1.0), (1, 0, 4.0), (1, 1, 2.0)],
            (1.0, 5.0),
            None,
            None,
        )
        .unwrap();
        let mut model = Backbone::new_mf(2, 2, 0, 1);
        {
            // per-item biases: item 0 scores 9 (clamped to 5), item 1 scores 1
            let p = model.params_mut();
            p[3] = 9.0;
            p[4] = 1.0;
        }
        let res = evaluate_model(&model, &test, &[1, 2], 4.0).unwrap();
        // preds clamp to (5, 1, 5, 1); truths (5, 1, 4, 2)
        assert!((res.mse - (0.0 + 0.0 + 1.0 + 1.0) / 4.0).abs() < 1e-12);
        // labels: 5 -> pos, 1 -> neg, 4 -> pos, 2 -> neg; perfect separation
        assert_eq!(res.auc, 1.0);
        assert!((res.ndcg_at_k[&1] - 1.0).abs() < 1e-12);
        assert_eq!(res.num_users_evaluated, 2);
        assert_eq!(res.num_ratings, 4);
    }
}
