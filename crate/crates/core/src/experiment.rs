//! Evaluation protocol glue: time splits, candidate sets, task instances and
//! averaged task metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{apply_frequency_filters, segment_sessions, split_warm_cold, EventRecord, SplitSpec, WarmColdSplit, SESSION_GAP_SECS};
use crate::error::{GowebError, Result};
use crate::metrics::{classification_metrics, clustering_agreement, rank_metrics, ClsMetricsReport, ClusterMetricsReport, RankMetricsReport};
use crate::nn::ParamSet;
use crate::page_encoder::{GoalEstimatorModel, WebPage};
use crate::session_model::{BrowsingSession, GoalRepCache, ModelMode, SessionModel, SessionModelConfig, UserHistory, VisitSequence};
use crate::tasks::{
    build_candidate_set, derive_revisit_labels, histories_for, kmeans_pp, make_rec_instance, page_frequencies, CandidateSet, RecInstance,
    RecommenderModel, RevisitInstance, RevisitModel, REVISIT_THRESHOLD,
};
use crate::taxonomy::GoalId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Fraction of sessions (by start time) in the training period.
    pub train_fraction: f64,
    /// Fraction in the test period; later sessions only inform revisit labels.
    pub test_fraction: f64,
    pub min_page_count: usize,
    pub min_session_len: usize,
    pub p_pop: usize,
    pub k_cand: usize,
    pub history_limit: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            train_fraction: 0.75,
            test_fraction: 0.25,
            min_page_count: 10,
            min_session_len: 10,
            p_pop: 10,
            k_cand: 50_000,
            history_limit: 200,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.test_fraction > 0.0 && self.train_fraction + self.test_fraction <= 1.0) {
            return Err(GowebError::Config(format!(
                "train_fraction {} and test_fraction {} must be positive with sum at most 1",
                self.train_fraction, self.test_fraction
            )));
        }
        if self.k_cand == 0 || self.history_limit == 0 {
            return Err(GowebError::Config("k_cand and history_limit must be positive".into()));
        }
        Ok(())
    }
}

/// Sessionizes events at the 30-minute gap, then applies the protocol's
/// page and session-length filters.
pub fn sessions_from_events(events: &[EventRecord], protocol: &ProtocolConfig) -> Result<Vec<BrowsingSession>> {
    Ok(apply_frequency_filters(&segment_sessions(events, SESSION_GAP_SECS)?, protocol.min_page_count, protocol.min_session_len))
}

/// Split at start-time quantiles: training covers the first
/// `train_fraction` of sessions, testing the next `test_fraction`.
pub fn split_by_fraction(sessions: &[BrowsingSession], train_fraction: f64, test_fraction: f64) -> Result<SplitSpec> {
    let mut starts: Vec<i64> = sessions.iter().filter_map(BrowsingSession::start).collect();
    if starts.len() < 2 {
        return Err(GowebError::Empty("sessions to split"));
    }
    starts.sort_unstable();
    let n = starts.len();
    let quantile = |f: f64| ((n as f64 * f).round() as usize).min(n);
    let t0 = starts[0];
    let end = starts[n - 1] + 1;
    let t1 = starts[quantile(train_fraction).clamp(1, n - 1)].clamp(t0 + 1, end - 1);
    let t2 = match quantile(train_fraction + test_fraction) {
        i if i >= n => end,
        i => starts[i].max(t1 + 1),
    };
    Ok(SplitSpec { t0, t1, t2 })
}

/// Everything the tasks need beyond the models.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub split: WarmColdSplit,
    pub candidates: CandidateSet,
    /// Per session id. Training sessions see the user's earlier training
    /// sessions; test sessions see all of the user's training sessions.
    pub histories: BTreeMap<String, Arc<UserHistory>>,
    /// Per session id, revisit labels derived from the whole corpus.
    pub labels: BTreeMap<String, Vec<bool>>,
}

pub fn prepare_task_data(
    sessions: &[BrowsingSession],
    spec: &SplitSpec,
    protocol: &ProtocolConfig,
    estimator: &GoalEstimatorModel,
    cache: &mut GoalRepCache,
) -> Result<TaskData> {
    protocol.validate()?;
    let split = split_warm_cold(sessions, spec)?;
    let candidates = build_candidate_set(&page_frequencies(&split.train), protocol.p_pop, protocol.k_cand);
    let mut histories = BTreeMap::new();
    for (s, h) in split.train.iter().zip(histories_for(&split.train, estimator, cache, protocol.history_limit)) {
        histories.insert(s.session_id.clone(), h);
    }
    let mut by_user: BTreeMap<&str, Vec<BrowsingSession>> = BTreeMap::new();
    for s in &split.train {
        by_user.entry(s.user_id.as_str()).or_default().push(s.clone());
    }
    let mut full: BTreeMap<&str, Arc<UserHistory>> = BTreeMap::new();
    for s in split.test_warm.iter().chain(&split.test_cold) {
        let h = full
            .entry(s.user_id.as_str())
            .or_insert_with(|| {
                let past = by_user.get(s.user_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                Arc::new(UserHistory::from_sessions(s.user_id.clone(), past, estimator, cache, protocol.history_limit))
            })
            .clone();
        histories.insert(s.session_id.clone(), h);
    }
    let labels = sessions.iter().map(|s| s.session_id.clone()).zip(derive_revisit_labels(sessions)).collect();
    Ok(TaskData { split, candidates, histories, labels })
}

fn history_of(data: &TaskData, s: &BrowsingSession, empty_history: bool) -> Arc<UserHistory> {
    if empty_history {
        return Arc::new(UserHistory::empty(s.user_id.clone()));
    }
    data.histories.get(&s.session_id).cloned().unwrap_or_else(|| Arc::new(UserHistory::empty(s.user_id.clone())))
}

pub fn rec_instances(
    sessions: &[BrowsingSession],
    data: &TaskData,
    estimator: &GoalEstimatorModel,
    cache: &mut GoalRepCache,
    empty_history: bool,
) -> Vec<RecInstance> {
    sessions.iter().filter_map(|s| make_rec_instance(s, history_of(data, s, empty_history), &data.candidates, estimator, cache)).collect()
}

pub fn revisit_instances(
    sessions: &[BrowsingSession],
    data: &TaskData,
    estimator: &GoalEstimatorModel,
    cache: &mut GoalRepCache,
    empty_history: bool,
) -> Result<Vec<RevisitInstance>> {
    sessions
        .iter()
        .map(|s| {
            let labels =
                data.labels.get(&s.session_id).cloned().ok_or_else(|| GowebError::Config(format!("no labels for session {}", s.session_id)))?;
            Ok(RevisitInstance {
                user_id: s.user_id.clone(),
                visits: VisitSequence::new(s.pages(), estimator, cache),
                labels,
                history: history_of(data, s, empty_history),
            })
        })
        .collect()
}

/// Mean ranking metrics over instances.
pub fn evaluate_recommender(model: &RecommenderModel, instances: &[RecInstance]) -> Result<RankMetricsReport> {
    if instances.is_empty() {
        return Err(GowebError::Empty("evaluation instances"));
    }
    let reports = instances
        .iter()
        .map(|inst| {
            let ranking = model.rank(&model.recommend_scores(inst)?);
            let truth: BTreeSet<String> = inst.truth.iter().map(|&i| model.candidates.pages()[i].clone()).collect();
            rank_metrics(&ranking, &truth)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankMetricsReport::mean(&reports))
}

/// Pooled binary metrics over every visit at the 0.5 threshold.
pub fn evaluate_revisit(model: &RevisitModel, instances: &[RevisitInstance]) -> Result<ClsMetricsReport> {
    let (mut pred, mut labels) = (Vec::new(), Vec::new());
    for inst in instances {
        let probs = model.revisit_probabilities(&inst.visits, &inst.history)?;
        pred.extend(probs.iter().map(|p| *p >= REVISIT_THRESHOLD));
        labels.extend_from_slice(&inst.labels);
    }
    if labels.is_empty() {
        return Err(GowebError::Empty("evaluation instances"));
    }
    classification_metrics(&pred, &labels)
}

/// Content-only page embeddings from a freshly initialized session model;
/// the baseline representation for goal clustering.
pub struct ContentBaseline {
    model: SessionModel,
    params: ParamSet,
}

impl ContentBaseline {
    pub fn new(config: &SessionModelConfig, goal_dim: usize, seed: u64) -> Result<Self> {
        let model = SessionModel::new(SessionModelConfig { mode: ModelMode::ContentOnly, ..config.clone() }, goal_dim)?;
        let mut params = ParamSet::new();
        model.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(ContentBaseline { model, params })
    }

    pub fn embed(&self, page: &WebPage) -> Vec<f64> {
        self.model.page_content_embedding(&self.params, page)
    }
}

/// Per-session K-means++ on `features` with `k` set to the number of true
/// goals in the session; NMI and AMI averaged over sessions with at least
/// two visits. True labels come from `page_goal`; sessions with an unlabeled
/// page are an error.
pub fn evaluate_clustering(
    sessions: &[BrowsingSession],
    page_goal: &BTreeMap<String, GoalId>,
    mut features: impl FnMut(&WebPage) -> Vec<f64>,
    seed: u64,
) -> Result<ClusterMetricsReport> {
    let (mut nmi, mut ami, mut n) = (0.0, 0.0, 0usize);
    for s in sessions.iter().filter(|s| s.len() >= 2) {
        let points: Vec<Vec<f64>> = s.visits.iter().map(|v| features(&v.page)).collect();
        let result = kmeans_pp(&points, session_cluster_count(s, page_goal)?, seed)?;
        let labels = session_truth(s, page_goal)?;
        let report = clustering_agreement(&result.assignments, &labels)?;
        nmi += report.nmi;
        ami += report.ami;
        n += 1;
    }
    if n == 0 {
        return Err(GowebError::Empty("sessions with two or more visits"));
    }
    Ok(ClusterMetricsReport { nmi: nmi / n as f64, ami: ami / n as f64 })
}

/// True goal of every visit in the session.
pub fn session_truth(s: &BrowsingSession, page_goal: &BTreeMap<String, GoalId>) -> Result<Vec<GoalId>> {
    s.visits
        .iter()
        .map(|v| page_goal.get(&v.page.page_id).copied().ok_or_else(|| GowebError::Config(format!("no goal label for page {}", v.page.page_id))))
        .collect()
}

/// Number of distinct true goals in the session.
pub fn session_cluster_count(s: &BrowsingSession, page_goal: &BTreeMap<String, GoalId>) -> Result<usize> {
    Ok(session_truth(s, page_goal)?.into_iter().collect::<BTreeSet<_>>().len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::page_encoder::WebPage;
    use crate::session_model::Visit;

    fn s(id: &str, user: &str, start: i64) -> BrowsingSession {
        BrowsingSession { session_id: id.into(), user_id: user.into(), visits: vec![Visit { page: WebPage::new("p", "h", "t"), ts: start }] }
    }

    #[test]
    fn quantile_split() {
        let sessions: Vec<BrowsingSession> = (0..8).map(|i| s(&i.to_string(), "u", i * 100)).collect();
        let spec = split_by_fraction(&sessions, 0.75, 0.25).unwrap();
        assert_eq!(spec, SplitSpec { t0: 0, t1: 600, t2: 701 });
        let split = split_warm_cold(&sessions, &spec).unwrap();
        assert_eq!((split.train.len(), split.test_warm.len(), split.test_cold.len()), (6, 2, 0));
        let spec = split_by_fraction(&sessions, 0.5, 0.25).unwrap();
        assert_eq!(spec, SplitSpec { t0: 0, t1: 400, t2: 600 });
        assert!(split_by_fraction(&sessions[..1], 0.5, 0.5).is_err());
    }
}
