use std::collections::BTreeSet;

use goweb::manifold::{poincare_distance, project_to_ball, BallPoint};
use goweb::metrics::{classification_metrics, clustering_agreement, rank_metrics};
use goweb::taxonomy::{closure_pairs, GoalTaxonomy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ball_point(dim: usize) -> impl Strategy<Value = BallPoint> {
    prop::collection::vec(-2.0f64..2.0, dim).prop_map(|v| project_to_ball(&v, 1e-5))
}

proptest! {
    #[test]
    fn distance_triangle_inequality((u, v, w) in (1usize..6).prop_flat_map(|d| (ball_point(d), ball_point(d), ball_point(d)))) {
        let uv = poincare_distance(&u, &v).unwrap();
        let vw = poincare_distance(&v, &w).unwrap();
        let uw = poincare_distance(&u, &w).unwrap();
        prop_assert!(uw <= uv + vw + 1e-7 * (1.0 + uw));
    }

    #[test]
    fn rank_metrics_bounded_and_monotone(perm in Just((0u32..30).collect::<Vec<_>>()).prop_shuffle(), truth in prop::collection::btree_set(0u32..40, 1..6)) {
        let r = rank_metrics(&perm, &truth).unwrap();
        for m in [r.mrr10, r.hr1, r.hr5, r.hr10, r.ndcg5, r.ndcg10] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
        prop_assert!(r.hr1 <= r.hr5 && r.hr5 <= r.hr10);
        prop_assert!(r.mrr10 <= r.hr10);
    }

    #[test]
    fn classification_metrics_bounded(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
        let (pred, labels): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let r = classification_metrics(&pred, &labels).unwrap();
        for m in [r.f1, r.precision, r.recall, r.accuracy] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn clustering_invariant_under_relabeling(labels in prop::collection::vec((0u32..4, 0u32..4), 2..40), shift in 1u32..4) {
        let (a, b): (Vec<u32>, Vec<u32>) = labels.into_iter().unzip();
        let relabeled: Vec<u32> = a.iter().map(|x| (x + shift) % 4 + 10).collect();
        let r1 = clustering_agreement(&a, &b).unwrap();
        let r2 = clustering_agreement(&relabeled, &b).unwrap();
        prop_assert!((r1.nmi - r2.nmi).abs() < 1e-12);
        prop_assert!((r1.ami - r2.ami).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&r1.nmi));
    }
}

#[test]
fn ami_of_random_partitions_averages_zero() {
    let truth: Vec<u32> = (0..60).map(|i| i % 4).collect();
    let mean = (0..100u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred: Vec<u32> = (0..60).map(|_| rng.random_range(0..4)).collect();
            clustering_agreement(&pred, &truth).unwrap().ami
        })
        .sum::<f64>()
        / 100.0;
    assert!(mean.abs() < 0.05, "mean AMI {mean}");
}

#[test]
fn taxonomy_json_round_trip() {
    let t = GoalTaxonomy::example();
    let text = serde_json::to_string(&t.to_document()).unwrap();
    let back = GoalTaxonomy::from_json(&text).unwrap();
    assert_eq!(back.ids(), t.ids());
    assert_eq!(closure_pairs(&back), closure_pairs(&t));
    let leaves: BTreeSet<_> = t.leaves().into_iter().collect();
    assert_eq!(leaves.len(), 16);
}
