//! Behavioural analyses: goal confusion structure, revisitation durations and
//! single-goal sessions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{GowebError, Result};
use crate::session_model::BrowsingSession;
use crate::taxonomy::{GoalId, GoalTaxonomy};

const MINUTE: f64 = 60.0;
const HOUR: f64 = 3600.0;
const DAY: f64 = 24.0 * HOUR;
const WEEK: f64 = 7.0 * DAY;

/// Upper-inclusive bucket edges in seconds: 1m, 10m, 30m, 1h, 4h, 7h, 12h,
/// 1d, 3d, 1w, 2w, 4w, 8w. Thirteen edges give fourteen buckets.
pub const BUCKET_BOUNDARIES: [f64; 13] =
    [MINUTE, 10.0 * MINUTE, 30.0 * MINUTE, HOUR, 4.0 * HOUR, 7.0 * HOUR, 12.0 * HOUR, DAY, 3.0 * DAY, WEEK, 2.0 * WEEK, 4.0 * WEEK, 8.0 * WEEK];
pub const BUCKET_COUNT: usize = 14;

/// 1-based bucket of a positive duration in seconds.
pub fn bucket_index(duration: f64) -> usize {
    1 + BUCKET_BOUNDARIES.iter().filter(|&&b| b < duration).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationScale {
    Hours,
    Days,
    Weeks,
}

impl DurationScale {
    pub fn of_bucket(bucket: usize) -> DurationScale {
        match bucket {
            0..=6 => DurationScale::Hours,
            7..=10 => DurationScale::Days,
            _ => DurationScale::Weeks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevisitEvent {
    pub page_id: String,
    pub t_prev: i64,
    pub t_next: i64,
}

/// Cross-session revisits: for every page seen in an earlier session of the
/// same user, the gap from its latest earlier visit to its first visit in the
/// current session. Sessions must be grouped by user in time order.
pub fn extract_revisit_events(sessions: &[BrowsingSession]) -> Vec<RevisitEvent> {
    let mut last_seen: BTreeMap<(&str, &str), i64> = BTreeMap::new();
    let mut events = Vec::new();
    for s in sessions {
        let mut first_here: BTreeMap<&str, i64> = BTreeMap::new();
        let mut last_here: BTreeMap<&str, i64> = BTreeMap::new();
        for v in &s.visits {
            first_here.entry(v.page.page_id.as_str()).or_insert(v.ts);
            last_here.insert(v.page.page_id.as_str(), v.ts);
        }
        for (page, &t) in &first_here {
            if let Some(&prev) = last_seen.get(&(s.user_id.as_str(), *page)) {
                events.push(RevisitEvent { page_id: page.to_string(), t_prev: prev, t_next: t });
            }
        }
        for (page, t) in last_here {
            last_seen.insert((s.user_id.as_str(), page), t);
        }
    }
    events
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationReport {
    pub boundaries_secs: Vec<f64>,
    pub total: Vec<u64>,
    pub per_category: BTreeMap<GoalId, Vec<u64>>,
    /// Categories ranked by the share of their revisits at each scale.
    pub ranking: BTreeMap<DurationScale, Vec<(GoalId, f64)>>,
}

/// Histograms revisit gaps over the fourteen buckets, overall and per goal
/// category; events whose page has no category only count towards `total`.
pub fn revisit_duration_buckets(events: &[RevisitEvent], category_of_page: &BTreeMap<String, GoalId>) -> Result<DurationReport> {
    let mut total = vec![0u64; BUCKET_COUNT];
    let mut per_category: BTreeMap<GoalId, Vec<u64>> = BTreeMap::new();
    for e in events {
        let d = (e.t_next - e.t_prev) as f64;
        if d <= 0.0 {
            return Err(GowebError::NonPositiveDuration(d));
        }
        let b = bucket_index(d) - 1;
        total[b] += 1;
        if let Some(c) = category_of_page.get(&e.page_id) {
            per_category.entry(*c).or_insert_with(|| vec![0; BUCKET_COUNT])[b] += 1;
        }
    }
    let mut ranking = BTreeMap::new();
    for scale in [DurationScale::Hours, DurationScale::Days, DurationScale::Weeks] {
        let mut shares: Vec<(GoalId, f64)> = per_category
            .iter()
            .map(|(c, h)| {
                let all: u64 = h.iter().sum();
                let at: u64 = h.iter().enumerate().filter(|(i, _)| DurationScale::of_bucket(i + 1) == scale).map(|(_, n)| n).sum();
                (*c, at as f64 / all as f64)
            })
            .collect();
        shares.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranking.insert(scale, shares);
    }
    Ok(DurationReport { boundaries_secs: BUCKET_BOUNDARIES.to_vec(), total, per_category, ranking })
}

/// For each category: sessions whose visits all belong to it, divided by
/// sessions that contain it.
pub fn single_goal_session_rate(sessions: &[Vec<GoalId>]) -> BTreeMap<GoalId, f64> {
    let mut containing: BTreeMap<GoalId, usize> = BTreeMap::new();
    let mut single: BTreeMap<GoalId, usize> = BTreeMap::new();
    for s in sessions {
        let cats: BTreeSet<GoalId> = s.iter().copied().collect();
        for c in &cats {
            *containing.entry(*c).or_default() += 1;
        }
        if cats.len() == 1 {
            *single.entry(*cats.iter().next().expect("one element")).or_default() += 1;
        }
    }
    containing.into_iter().map(|(c, n)| (c, *single.get(&c).unwrap_or(&0) as f64 / n as f64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    /// Row/column order: root, then each category followed by its leaves.
    pub order: Vec<GoalId>,
    pub counts: Vec<Vec<u64>>,
    /// Row-normalized counts (rows without samples stay zero).
    pub matrix: Vec<Vec<f64>>,
    pub errors: u64,
    pub within_category_errors: u64,
    /// Fraction of errors whose prediction shares the true goal's category;
    /// 1 when there are no errors.
    pub within_category_rate: f64,
}

pub fn goal_confusion_matrix(pred: &[GoalId], truth: &[GoalId], taxonomy: &GoalTaxonomy) -> Result<ConfusionReport> {
    if pred.len() != truth.len() {
        return Err(GowebError::DimMismatch { expected: truth.len(), got: pred.len() });
    }
    let mut order = vec![taxonomy.root()];
    for c in taxonomy.categories() {
        order.push(c);
        order.extend(taxonomy.children(c));
    }
    let pos: BTreeMap<GoalId, usize> = order.iter().enumerate().map(|(i, g)| (*g, i)).collect();
    let n = order.len();
    let mut counts = vec![vec![0u64; n]; n];
    let (mut errors, mut within) = (0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        let pi = *pos.get(&p).ok_or(GowebError::UnknownGoal(p.0))?;
        let ti = *pos.get(&t).ok_or(GowebError::UnknownGoal(t.0))?;
        counts[ti][pi] += 1;
        if p != t {
            errors += 1;
            let (cp, ct) = (taxonomy.category_of(p), taxonomy.category_of(t));
            if cp.is_some() && cp == ct {
                within += 1;
            }
        }
    }
    let matrix = counts
        .iter()
        .map(|row| {
            let s: u64 = row.iter().sum();
            row.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
        })
        .collect();
    let within_category_rate = if errors == 0 { 1.0 } else { within as f64 / errors as f64 };
    Ok(ConfusionReport { order, counts, matrix, errors, within_category_errors: within, within_category_rate })
}
