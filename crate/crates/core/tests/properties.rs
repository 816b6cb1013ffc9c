//! Property-based invariants across the library surface.

use mrrec_core::*;
use proptest::prelude::*;

fn score_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n..=n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_invariant_under_monotone_transform(
        scores in score_vec(12),
        labels in prop::collection::vec(any::<bool>(), 12..=12),
        scale in 0.1f64..4.0,
        shift in -10.0f64..10.0,
    ) {
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let base = eval::auc(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| scale * s + shift).collect();
        prop_assert!((eval::auc(&affine, &labels).unwrap() - base).abs() < 1e-9);
        let warped: Vec<f64> = scores.iter().map(|s| (s / 25.0).tanh()).collect();
        prop_assert!((eval::auc(&warped, &labels).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn auc_flips_under_negation(
        scores in score_vec(10),
        labels in prop::collection::vec(any::<bool>(), 10..=10),
    ) {
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        // distinct scores so negation mirrors the ranking exactly
        let distinct: Vec<f64> = scores.iter().enumerate().map(|(i, s)| s + i as f64 * 1e-3).collect();
        let base = eval::auc(&distinct, &labels).unwrap();
        let negated: Vec<f64> = distinct.iter().map(|s| -s).collect();
        prop_assert!((eval::auc(&negated, &labels).unwrap() - (1.0 - base)).abs() < 1e-9);
    }

    #[test]
    fn ndcg_invariant_under_positive_affine_scores(
        ratings in prop::collection::vec(0.0f64..5.0, 8..=8),
        scores in score_vec(8),
        k in 1usize..10,
        scale in 0.1f64..3.0,
        shift in -5.0f64..5.0,
    ) {
        prop_assume!(ratings.iter().any(|&r| r > 0.0));
        let user: Vec<(f64, f64, usize)> = scores
            .iter()
            .zip(&ratings)
            .enumerate()
            .map(|(i, (&s, &r))| (s, r, i))
            .collect();
        let base = eval::ndcg_at_k(&[user.clone()], k).unwrap();
        let affine: Vec<(f64, f64, usize)> =
            user.iter().map(|&(s, r, i)| (scale * s + shift, r, i)).collect();
        prop_assert!((eval::ndcg_at_k(&[affine], k).unwrap() - base).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&base));
    }

    #[test]
    fn propensity_estimates_stay_in_clip_range(
        ratings in prop::collection::vec(1u8..=5, 6..=30),
        clip in 0.01f64..0.3,
    ) {
        let num_items = 10;
        let obs: Vec<(usize, usize, f64)> = ratings
            .iter()
            .enumerate()
            .map(|(n, &r)| (n / num_items, n % num_items, r as f64))
            .collect();
        let num_users = obs.iter().map(|&(u, _, _)| u).max().unwrap() + 1;
        let ds = RatingDataset::new(num_users, num_items, obs, (1.0, 5.0), None, None).unwrap();
        for model in [
            propensity::fit_naive_bayes_uniform(&ds, clip).unwrap(),
            propensity::fit_user_frequency(&ds, clip).unwrap(),
        ] {
            for v in model.estimate_matrix(&ds) {
                prop_assert!(v >= clip - 1e-15 && v <= 1.0 + 1e-15, "estimate {v} clip {clip}");
            }
        }
    }

    #[test]
    fn eta_solve_shrinks_with_lambda_and_stays_finite(
        rows in prop::collection::vec(
            (0.5f64..5.0, -1.0f64..1.0, -2.0f64..2.0),
            3..=20
        ),
        lambda in 0.0f64..10.0,
    ) {
        let feats: Vec<FeatureVector> =
            rows.iter().map(|&(a, b, _)| FeatureVector(vec![a, b])).collect();
        let errs: Vec<f64> = rows.iter().map(|&(_, _, e)| e).collect();
        if let Ok(sol) = estimators::solve_eta(&feats, &errs, lambda) {
            prop_assert!(sol.eta.iter().all(|v| v.is_finite()));
            let bumped = estimators::solve_eta(&feats, &errs, lambda + 50.0).unwrap();
            // heavier ridge cannot blow the solution up
            prop_assert!(bumped.eta.iter().map(|v| v * v).sum::<f64>()
                <= sol.eta.iter().map(|v| v * v).sum::<f64>() + 1e-9);
        }
    }

    #[test]
    fn split_partitions_observations(
        n in 2usize..60,
        fraction in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let val_size = (fraction * n as f64).round() as usize;
        prop_assume!(val_size > 0 && val_size < n);
        let num_items = 8;
        let obs: Vec<(usize, usize, f64)> = (0..n)
            .map(|c| (c / num_items, c % num_items, 1.0 + (c % 5) as f64))
            .collect();
        let ds = RatingDataset::new(n / num_items + 1, num_items, obs.clone(), (1.0, 5.0), None, None)
            .unwrap();
        let (train, val) = data::split_train_validation(&ds, fraction, seed).unwrap();
        prop_assert_eq!(train.observed.len() + val.observed.len(), n);
        prop_assert_eq!(val.observed.len(), (fraction * n as f64).round() as usize);
        let mut merged: Vec<_> = train.observed.iter().chain(&val.observed).copied().collect();
        merged.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut orig = obs;
        orig.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        prop_assert_eq!(merged, orig);
    }

    #[test]
    fn triplet_serialization_round_trips(
        cells in prop::collection::btree_set((0usize..6, 0usize..7), 1..20),
        ratings in prop::collection::vec(1u8..=5, 20..=20),
    ) {
        let obs: Vec<(usize, usize, f64)> = cells
            .iter()
            .zip(&ratings)
            .map(|(&(u, i), &r)| (u, i, r as f64))
            .collect();
        let ds = RatingDataset::new(6, 7, obs, (1.0, 5.0), None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.tsv");
        data::save_ratings(&ds, &path, RatingFormat::TripletTsv).unwrap();
        let back = data::load_ratings(&path, RatingFormat::TripletTsv).unwrap();
        let mut orig = ds.observed.clone();
        orig.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        prop_assert_eq!(back.observed, orig);
    }
}
