use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{GowebError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankMetricsReport {
    #[serde(rename = "MRR@10")]
    pub mrr10: f64,
    #[serde(rename = "HR@1")]
    pub hr1: f64,
    #[serde(rename = "HR@5")]
    pub hr5: f64,
    #[serde(rename = "HR@10")]
    pub hr10: f64,
    #[serde(rename = "NDCG@5")]
    pub ndcg5: f64,
    #[serde(rename = "NDCG@10")]
    pub ndcg10: f64,
}

impl RankMetricsReport {
    pub fn mean(reports: &[RankMetricsReport]) -> RankMetricsReport {
        if reports.is_empty() {
            return RankMetricsReport::default();
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&RankMetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        RankMetricsReport {
            mrr10: avg(|r| r.mrr10),
            hr1: avg(|r| r.hr1),
            hr5: avg(|r| r.hr5),
            hr10: avg(|r| r.hr10),
            ndcg5: avg(|r| r.ndcg5),
            ndcg10: avg(|r| r.ndcg10),
        }
    }
}

fn ndcg_at(hits: &[bool], k: usize, n_truth: usize) -> f64 {
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = hits.iter().take(k).enumerate().filter(|(_, h)| **h).map(|(i, _)| discount(i)).sum();
    let idcg: f64 = (0..k.min(n_truth)).map(discount).sum();
    dcg / idcg
}

/// Metrics of one ranked list against a set of relevant items (binary gains).
pub fn rank_metrics<T: Ord>(ranking: &[T], truth: &BTreeSet<T>) -> Result<RankMetricsReport> {
    if truth.is_empty() {
        return Err(GowebError::Empty("relevant set"));
    }
    let mut seen = BTreeSet::new();
    if !ranking.iter().all(|r| seen.insert(r)) {
        return Err(GowebError::Config("ranking contains duplicates".into()));
    }
    let hits: Vec<bool> = ranking.iter().take(10).map(|r| truth.contains(r)).collect();
    let first = hits.iter().position(|h| *h);
    let hr = |k: usize| if first.is_some_and(|p| p < k) { 1.0 } else { 0.0 };
    Ok(RankMetricsReport {
        mrr10: first.map(|p| 1.0 / (p + 1) as f64).unwrap_or(0.0),
        hr1: hr(1),
        hr5: hr(5),
        hr10: hr(10),
        ndcg5: ndcg_at(&hits, 5, truth.len()),
        ndcg10: ndcg_at(&hits, 10, truth.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&'static str]) -> BTreeSet<&'static str> {
        items.iter().copied().collect()
    }

    #[test]
    fn definitional_examples() {
        let r = rank_metrics(&["b", "a", "c"], &set(&["a"])).unwrap();
        assert_eq!((r.mrr10, r.hr1, r.hr5), (0.5, 0.0, 1.0));
        assert!((r.ndcg5 - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((r.ndcg5 - 0.6309).abs() < 1e-4);
        let top = rank_metrics(&["a", "b"], &set(&["a"])).unwrap();
        assert_eq!(top, RankMetricsReport { mrr10: 1.0, hr1: 1.0, hr5: 1.0, hr10: 1.0, ndcg5: 1.0, ndcg10: 1.0 });
    }

    #[test]
    fn errors_and_misses() {
        assert!(rank_metrics(&["a"], &BTreeSet::new()).is_err());
        assert!(rank_metrics(&["a", "a"], &set(&["a"])).is_err());
        let miss: Vec<String> = (0..20).map(|i| format!("x{i}")).collect();
        let r = rank_metrics(&miss, &["x15".to_string()].into_iter().collect()).unwrap();
        assert_eq!(r, RankMetricsReport::default());
    }

    #[test]
    fn mean_of_reports() {
        let a = rank_metrics(&["a"], &set(&["a"])).unwrap();
        let b = RankMetricsReport::default();
        assert_eq!(RankMetricsReport::mean(&[a, b]).mrr10, 0.5);
    }
}
