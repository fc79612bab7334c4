//! In-session recommendation, revisitation prediction and goal-based
//! grouping of visits.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GowebError, Result};
use crate::nn::ops::{binary_cross_entropy_logit, softmax, tanh_backward, tanh_forward};
use crate::nn::{adam_step, sigmoid, AdamConfig, Linear, Matrix, ParamSet};
use crate::page_encoder::{ContentVectors, GoalEstimatorModel};
use crate::session_model::{BrowsingSession, EncodingGrad, GoalRepCache, SessionModel, SessionModelConfig, UserHistory, VisitSequence};

/// Pages eligible for recommendation, most frequent first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct CandidateSet {
    pages: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for CandidateSet {
    fn from(pages: Vec<String>) -> Self {
        let index = pages.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        CandidateSet { pages, index }
    }
}

impl From<CandidateSet> for Vec<String> {
    fn from(c: CandidateSet) -> Self {
        c.pages
    }
}

impl CandidateSet {
    pub fn pages(&self) -> &[String] {
        &self.pages
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn position(&self, page_id: &str) -> Option<usize> {
        self.index.get(page_id).copied()
    }
}

/// Drops the `p_pop` most frequent pages and keeps the next `k_cand`; ties
/// are broken by page id.
pub fn build_candidate_set(freqs: &BTreeMap<String, u64>, p_pop: usize, k_cand: usize) -> CandidateSet {
    let mut ranked: Vec<(&String, u64)> = freqs.iter().map(|(p, c)| (p, *c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    CandidateSet::from(ranked.into_iter().skip(p_pop).take(k_cand).map(|(p, _)| p.clone()).collect::<Vec<_>>())
}

pub fn page_frequencies(sessions: &[BrowsingSession]) -> BTreeMap<String, u64> {
    let mut freqs = BTreeMap::new();
    for s in sessions {
        for v in &s.visits {
            *freqs.entry(v.page.page_id.clone()).or_insert(0) += 1;
        }
    }
    freqs
}

/// For each session (grouped by user, in time order), the history built
/// from the same user's earlier sessions in the slice.
pub fn histories_for(sessions: &[BrowsingSession], estimator: &GoalEstimatorModel, cache: &mut GoalRepCache, limit: usize) -> Vec<Arc<UserHistory>> {
    let mut out = Vec::with_capacity(sessions.len());
    let mut start = 0;
    for i in 0..sessions.len() {
        if sessions[i].user_id != sessions[start].user_id {
            start = i;
        }
        let h = UserHistory::from_sessions(sessions[i].user_id.clone(), &sessions[start..i], estimator, cache, limit);
        out.push(Arc::new(h));
    }
    out
}

#[derive(Clone, Debug)]
pub struct RecInstance {
    pub user_id: String,
    pub observed: VisitSequence,
    /// Candidate indices of the pages visited in the second half.
    pub truth: BTreeSet<usize>,
    pub history: Arc<UserHistory>,
}

/// First `ceil(n/2)` visits observed, the remaining ones restricted to the
/// candidate set as ground truth; `None` when that truth is empty.
pub fn make_rec_instance(
    session: &BrowsingSession,
    history: Arc<UserHistory>,
    candidates: &CandidateSet,
    estimator: &GoalEstimatorModel,
    cache: &mut GoalRepCache,
) -> Option<RecInstance> {
    let n = session.len();
    if n < 2 {
        return None;
    }
    let cut = n.div_ceil(2);
    let truth: BTreeSet<usize> = session.visits[cut..].iter().filter_map(|v| candidates.position(&v.page.page_id)).collect();
    if truth.is_empty() {
        return None;
    }
    let pages = session.visits[..cut].iter().map(|v| v.page.clone()).collect();
    Some(RecInstance { user_id: session.user_id.clone(), observed: VisitSequence::new(pages, estimator, cache), truth, history })
}

/// Labels each visit true iff the same user visits that page in a strictly
/// later session. Sessions must be grouped by user in time order.
pub fn derive_revisit_labels(sessions: &[BrowsingSession]) -> Vec<Vec<bool>> {
    let mut out = vec![Vec::new(); sessions.len()];
    let mut future: BTreeSet<&str> = BTreeSet::new();
    for i in (0..sessions.len()).rev() {
        if i + 1 < sessions.len() && sessions[i + 1].user_id != sessions[i].user_id {
            future.clear();
        }
        out[i] = sessions[i].visits.iter().map(|v| future.contains(v.page.page_id.as_str())).collect();
        future.extend(sessions[i].visits.iter().map(|v| v.page.page_id.as_str()));
    }
    out
}

#[derive(Clone, Debug)]
pub struct RevisitInstance {
    pub user_id: String,
    pub visits: VisitSequence,
    pub labels: Vec<bool>,
    pub history: Arc<UserHistory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TaskTrainConfig {
    fn default() -> Self {
        TaskTrainConfig { hidden: 128, epochs: 10, batch_size: 32, adam: AdamConfig::default(), seed: 0 }
    }
}

impl TaskTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(GowebError::Config("hidden, epochs and batch_size must be positive".into()));
        }
        self.adam.validate()
    }
}

/// A model trained by per-instance gradient accumulation.
pub trait TaskModel {
    type Instance;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Loss of one instance; gradients are accumulated scaled by `weight`.
    fn accumulate(&mut self, inst: &Self::Instance, weight: f64) -> Result<f64>;
}

/// Mini-batch Adam over shuffled instances; returns the mean loss per epoch.
pub fn train_task<M: TaskModel>(model: &mut M, data: &[M::Instance], cfg: &TaskTrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(GowebError::Empty("training instances"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut t = 0u64;
    model.params_mut().zero_grad();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                total += model.accumulate(&data[i], w)?;
            }
            t += 1;
            adam_step(model.params_mut(), &cfg.adam, t);
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(GowebError::Numerical(format!("training diverged in epoch {epoch}")));
        }
        log::info!("epoch {epoch}: loss {mean:.6}");
        losses.push(mean);
    }
    Ok(losses)
}

/// `F_out(tanh(F_hidden(z)))`.
#[derive(Clone, Debug)]
struct Head {
    hidden: Linear,
    out: Linear,
}

struct HeadCache {
    input: Matrix,
    act: Matrix,
}

impl Head {
    fn new(prefix: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Head { hidden: Linear::new(format!("{prefix}.hidden"), in_dim, hidden), out: Linear::new(format!("{prefix}.out"), hidden, out_dim) }
    }

    fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) {
        self.hidden.init(ps, rng);
        self.out.init(ps, rng);
    }

    fn names(&self) -> Vec<String> {
        vec![self.hidden.w(), self.hidden.b(), self.out.w(), self.out.b()]
    }

    fn forward(&self, ps: &ParamSet, z: Matrix) -> (Matrix, HeadCache) {
        let act = tanh_forward(&self.hidden.forward(ps, &z));
        let y = self.out.forward(ps, &act);
        (y, HeadCache { input: z, act })
    }

    fn backward(&self, ps: &mut ParamSet, cache: &HeadCache, dy: &Matrix) -> Matrix {
        let dact = self.out.backward(ps, &cache.act, dy);
        let dpre = tanh_backward(&cache.act, &dact);
        self.hidden.backward(ps, &cache.input, &dpre)
    }
}

fn concat(a: &[f64], b: Option<&Vec<f64>>) -> Vec<f64> {
    let mut z = a.to_vec();
    if let Some(b) = b {
        z.extend_from_slice(b);
    }
    z
}

fn head_input_dim(session: &SessionModel, base: usize) -> usize {
    if session.mode().uses_personal() {
        base + session.goal_dim
    } else {
        base
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskCheckpoint {
    pub session: SessionModelConfig,
    pub goal_dim: usize,
    pub hidden: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<CandidateSet>,
    pub params: BTreeMap<String, Matrix>,
}

/// Scores every candidate from `[v_s, r_u]` (or `v_s` without personalization).
#[derive(Clone, Debug)]
pub struct RecommenderModel {
    pub session: SessionModel,
    pub params: ParamSet,
    pub candidates: CandidateSet,
    hidden: usize,
    head: Head,
}

impl RecommenderModel {
    pub fn new(config: SessionModelConfig, goal_dim: usize, candidates: CandidateSet, hidden: usize, seed: u64) -> Result<Self> {
        if candidates.is_empty() {
            return Err(GowebError::Empty("candidate set"));
        }
        let session = SessionModel::new(config, goal_dim)?;
        let head = Head::new("rec", head_input_dim(&session, session.d_model()), hidden, candidates.len());
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        session.init(&mut params, &mut rng);
        head.init(&mut params, &mut rng);
        Ok(RecommenderModel { session, params, candidates, hidden, head })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.session.param_names();
        n.extend(self.head.names());
        n
    }

    pub fn attach_vectors(&mut self, vectors: ContentVectors) -> Result<()> {
        self.session.attach_vectors(vectors)
    }

    pub fn recommend_scores(&self, inst: &RecInstance) -> Result<Vec<f64>> {
        Ok(self.forward(&self.params, inst)?.0)
    }

    /// Candidate page ids by descending score, ties by page id.
    pub fn rank(&self, scores: &[f64]) -> Vec<String> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        let pages = self.candidates.pages();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| pages[a].cmp(&pages[b])));
        idx.into_iter().map(|i| pages[i].clone()).collect()
    }

    fn forward(&self, ps: &ParamSet, inst: &RecInstance) -> Result<(Vec<f64>, crate::session_model::EncodeCache, HeadCache)> {
        let (enc, cache) = self.session.encode(ps, &inst.observed, &inst.history)?;
        let z = concat(&enc.session_rep, enc.personal_rep.as_ref());
        let (y, hc) = self.head.forward(ps, Matrix::row_vector(z));
        Ok((y.into_vec(), cache, hc))
    }

    /// Mean cross-entropy over the true future candidates.
    pub fn loss_with(&self, ps: &ParamSet, inst: &RecInstance) -> Result<f64> {
        let (logits, _, _) = self.forward(ps, inst)?;
        Ok(multi_positive_ce(&logits, &inst.truth)?.0)
    }

    pub fn to_checkpoint(&self) -> TaskCheckpoint {
        TaskCheckpoint {
            session: self.session.config.clone(),
            goal_dim: self.session.goal_dim,
            hidden: self.hidden,
            candidates: Some(self.candidates.clone()),
            params: self.params.snapshot(),
        }
    }

    pub fn from_checkpoint(ckpt: TaskCheckpoint) -> Result<Self> {
        let candidates = ckpt.candidates.ok_or_else(|| GowebError::Config("checkpoint has no candidate set".into()))?;
        let mut model = RecommenderModel::new(ckpt.session, ckpt.goal_dim, candidates, ckpt.hidden, 0)?;
        let params = ParamSet::from_snapshot(ckpt.params);
        params.check_layout(&model.params)?;
        model.params = params;
        Ok(model)
    }
}

fn multi_positive_ce(logits: &[f64], truth: &BTreeSet<usize>) -> Result<(f64, Vec<f64>)> {
    if truth.is_empty() {
        return Err(GowebError::Empty("ground truth"));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= logits.len()) {
        return Err(GowebError::OutOfRange { index: t, len: logits.len() });
    }
    let p = softmax(logits);
    let inv = 1.0 / truth.len() as f64;
    let loss = truth.iter().map(|&t| -p[t].max(f64::MIN_POSITIVE).ln()).sum::<f64>() * inv;
    let mut grad = p;
    for &t in truth {
        grad[t] -= inv;
    }
    Ok((loss, grad))
}

impl TaskModel for RecommenderModel {
    type Instance = RecInstance;

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn accumulate(&mut self, inst: &RecInstance, weight: f64) -> Result<f64> {
        let (logits, cache, hc) = self.forward(&self.params, inst)?;
        let (loss, mut grad) = multi_positive_ce(&logits, &inst.truth)?;
        grad.iter_mut().for_each(|g| *g *= weight);
        let dz = self.head.backward(&mut self.params, &hc, &Matrix::row_vector(grad)).into_vec();
        let d_model = self.session.d_model();
        let eg = EncodingGrad {
            visit_reps: None,
            session_rep: Some(dz[..d_model].to_vec()),
            personal_rep: self.session.mode().uses_personal().then(|| dz[d_model..].to_vec()),
        };
        self.session.backward(&mut self.params, &cache, &eg);
        Ok(loss)
    }
}

/// `sigma(F_rev(tanh(F_hidden([v_p, r_u]))))` per visit.
#[derive(Clone, Debug)]
pub struct RevisitModel {
    pub session: SessionModel,
    pub params: ParamSet,
    hidden: usize,
    head: Head,
}

/// Decision threshold on revisit probabilities.
pub const REVISIT_THRESHOLD: f64 = 0.5;

impl RevisitModel {
    pub fn new(config: SessionModelConfig, goal_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let session = SessionModel::new(config, goal_dim)?;
        let head = Head::new("rev", head_input_dim(&session, session.d_model()), hidden, 1);
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        session.init(&mut params, &mut rng);
        head.init(&mut params, &mut rng);
        Ok(RevisitModel { session, params, hidden, head })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.session.param_names();
        n.extend(self.head.names());
        n
    }

    pub fn attach_vectors(&mut self, vectors: ContentVectors) -> Result<()> {
        self.session.attach_vectors(vectors)
    }

    fn forward(
        &self,
        ps: &ParamSet,
        visits: &VisitSequence,
        history: &UserHistory,
    ) -> Result<(Vec<f64>, crate::session_model::EncodeCache, HeadCache)> {
        let (enc, cache) = self.session.encode(ps, visits, history)?;
        let rows: Vec<Vec<f64>> = (0..visits.len()).map(|i| concat(enc.visit_reps.row(i), enc.personal_rep.as_ref())).collect();
        let (y, hc) = self.head.forward(ps, Matrix::from_rows(&rows)?);
        Ok((y.into_vec(), cache, hc))
    }

    /// Revisit probability of every visit in the session.
    pub fn revisit_probabilities(&self, visits: &VisitSequence, history: &UserHistory) -> Result<Vec<f64>> {
        Ok(self.forward(&self.params, visits, history)?.0.into_iter().map(sigmoid).collect())
    }

    pub fn revisit_probability(&self, index: usize, visits: &VisitSequence, history: &UserHistory) -> Result<f64> {
        if index >= visits.len() {
            return Err(GowebError::OutOfRange { index, len: visits.len() });
        }
        Ok(self.revisit_probabilities(visits, history)?[index])
    }

    pub fn loss_with(&self, ps: &ParamSet, inst: &RevisitInstance) -> Result<f64> {
        let (logits, _, _) = self.forward(ps, &inst.visits, &inst.history)?;
        Ok(mean_bce(&logits, &inst.labels)?.0)
    }

    pub fn to_checkpoint(&self) -> TaskCheckpoint {
        TaskCheckpoint {
            session: self.session.config.clone(),
            goal_dim: self.session.goal_dim,
            hidden: self.hidden,
            candidates: None,
            params: self.params.snapshot(),
        }
    }

    pub fn from_checkpoint(ckpt: TaskCheckpoint) -> Result<Self> {
        let mut model = RevisitModel::new(ckpt.session, ckpt.goal_dim, ckpt.hidden, 0)?;
        let params = ParamSet::from_snapshot(ckpt.params);
        params.check_layout(&model.params)?;
        model.params = params;
        Ok(model)
    }
}

fn mean_bce(logits: &[f64], labels: &[bool]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(GowebError::DimMismatch { expected: logits.len(), got: labels.len() });
    }
    let inv = 1.0 / logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let (l, g) = binary_cross_entropy_logit(z, y);
        loss += l * inv;
        grad.push(g * inv);
    }
    Ok((loss, grad))
}

impl TaskModel for RevisitModel {
    type Instance = RevisitInstance;

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn accumulate(&mut self, inst: &RevisitInstance, weight: f64) -> Result<f64> {
        let (logits, cache, hc) = self.forward(&self.params, &inst.visits, &inst.history)?;
        let (loss, mut grad) = mean_bce(&logits, &inst.labels)?;
        grad.iter_mut().for_each(|g| *g *= weight);
        let n = logits.len();
        let dz = self.head.backward(&mut self.params, &hc, &Matrix::new(n, 1, grad)?);
        let d_model = self.session.d_model();
        let dv = dz.col_block(0, d_model);
        let personal = self.session.mode().uses_personal().then(|| {
            let mut dr = vec![0.0; self.session.goal_dim];
            for i in 0..n {
                dr.iter_mut().zip(&dz.row(i)[d_model..]).for_each(|(a, b)| *a += b);
            }
            dr
        });
        let eg = EncodingGrad { visit_reps: Some(dv), session_rep: None, personal_rep: personal };
        self.session.backward(&mut self.params, &cache, &eg);
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    /// Cost after seeding, then after each Lloyd iteration.
    pub costs: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn cost(&self) -> f64 {
        *self.costs.last().expect("at least the seeding cost")
    }
}

const MAX_LLOYD: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// K-means++ (D^2 seeding) followed by Lloyd iterations until assignments
/// stop changing or 100 iterations pass.
pub fn kmeans_pp(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(GowebError::TooManyClusters { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && r < *d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            if d2[chosen] == 0.0 {
                chosen = (0..n).rev().find(|&i| d2[i] > 0.0).expect("positive total");
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    let mut costs = vec![points.iter().map(|p| nearest(p, &centers).1).sum::<f64>()];
    let mut iterations = 0;
    while iterations < MAX_LLOYD {
        iterations += 1;
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        let cost = points.iter().zip(&next).map(|(p, &a)| sq_dist(p, &centers[a])).sum();
        costs.push(cost);
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
    }
    Ok(KMeansResult { assignments, centers, costs, iterations })
}

/// Groups the visits of a session by clustering their visit goal representations.
pub fn cluster_session_goals(visits: &VisitSequence, k: usize, seed: u64) -> Result<KMeansResult> {
    kmeans_pp(&visits.goal_reps, k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goal_embed::GoalEmbeddingTable;
    use crate::manifold::BallPoint;
    use crate::nn::gradcheck::{check_params, FD_STEP};
    use crate::page_encoder::{ContentSpec, EstimatorConfig, WebPage};
    use crate::session_model::{ModelMode, Visit};
    use crate::taxonomy::GoalId;

    fn freqs(items: &[(&str, u64)]) -> BTreeMap<String, u64> {
        items.iter().map(|(p, c)| (p.to_string(), *c)).collect()
    }

    #[test]
    fn candidate_examples() {
        let f = freqs(&[("a", 5), ("b", 4), ("c", 3), ("d", 2)]);
        assert_eq!(build_candidate_set(&f, 1, 2).pages(), &["b", "c"]);
        assert_eq!(build_candidate_set(&f, 1, 10).pages(), &["b", "c", "d"]);
        assert_eq!(build_candidate_set(&f, 0, 2).pages(), &["a", "b"]);
        let tie = freqs(&[("z", 3), ("y", 3), ("x", 1)]);
        assert_eq!(build_candidate_set(&tie, 0, 3).pages(), &["y", "z", "x"]);
    }

    fn sess(user: &str, pages: &[&str]) -> BrowsingSession {
        BrowsingSession {
            session_id: format!("{user}-{}", pages.join("")),
            user_id: user.into(),
            visits: pages.iter().enumerate().map(|(i, p)| Visit { page: WebPage::new(*p, "h", p), ts: i as i64 }).collect(),
        }
    }

    #[test]
    fn revisit_label_examples() {
        let s = vec![sess("u", &["a", "b"]), sess("u", &["c"]), sess("u", &["a"]), sess("v", &["x", "x"]), sess("w", &["a"])];
        let l = derive_revisit_labels(&s);
        assert_eq!(l, vec![vec![true, false], vec![false], vec![false], vec![false, false], vec![false]]);
        assert_eq!(derive_revisit_labels(&s), l);
    }

    fn estimator(dim: usize) -> GoalEstimatorModel {
        let goals = GoalEmbeddingTable::new(
            (0..3).map(|g| (GoalId(g), BallPoint::new((0..dim).map(|j| 0.1 * ((g as usize + j) % 3) as f64).collect()).unwrap())).collect(),
        )
        .unwrap();
        let cfg = EstimatorConfig { host_buckets: 5, host_dim: 3, content: ContentSpec::Hashed { buckets: 9, dim: 3 }, ..Default::default() };
        let mut est = GoalEstimatorModel::new(goals, &cfg);
        for name in est.encoder.param_names() {
            est.params.value_mut(&name).scale(10.0);
        }
        est
    }

    fn small(mode: ModelMode) -> SessionModelConfig {
        SessionModelConfig {
            mode,
            content_dim: 4,
            heads: 2,
            host_buckets: 5,
            host_dim: 2,
            content: ContentSpec::Hashed { buckets: 9, dim: 3 },
            history_limit: 200,
        }
    }

    fn sharpen(ps: &mut ParamSet, names: &[String]) {
        for n in names {
            ps.value_mut(n).scale(10.0);
        }
    }

    #[test]
    fn rec_instance_and_head_gradients() {
        let est = estimator(4);
        let mut cache = GoalRepCache::new();
        let all = vec![sess("u", &["a", "b", "c"]), sess("u", &["d", "e", "a", "b", "f", "c"])];
        let hist = histories_for(&all, &est, &mut cache, 200);
        assert!(hist[0].is_empty());
        assert_eq!(hist[1].pages, vec!["a", "b", "c"]);
        let cands = CandidateSet::from(vec!["a".to_string(), "b".into(), "c".into(), "f".into()]);
        let inst = make_rec_instance(&all[1], hist[1].clone(), &cands, &est, &mut cache).unwrap();
        assert_eq!(inst.observed.len(), 3);
        assert_eq!(inst.truth, [1usize, 2, 3].into_iter().collect());
        assert!(make_rec_instance(&sess("u", &["a", "z"]), hist[0].clone(), &cands, &est, &mut cache).is_none());

        for mode in [ModelMode::Full, ModelMode::NonPersonal, ModelMode::ContentOnly] {
            let mut m = RecommenderModel::new(small(mode), 4, cands.clone(), 5, 1).unwrap();
            let names = m.param_names();
            sharpen(&mut m.params, &names);
            let scores = m.recommend_scores(&inst).unwrap();
            assert_eq!(scores.len(), 4);
            let ranking = m.rank(&scores);
            assert_eq!(ranking.iter().collect::<BTreeSet<_>>().len(), 4);
            m.params.zero_grad();
            m.accumulate(&inst, 1.0).unwrap();
            let r = check_params(&m.params, &|p: &ParamSet| m.loss_with(p, &inst).unwrap(), &names, FD_STEP, 1e-4);
            assert!(r.passed, "{mode:?} {r:?}");
        }
    }

    #[test]
    fn revisit_head_gradients_and_range() {
        let est = estimator(4);
        let mut cache = GoalRepCache::new();
        let visits =
            VisitSequence::new(vec![WebPage::new("a", "h1", "x y"), WebPage::new("b", "h2", "y z"), WebPage::new("c", "h1", "q")], &est, &mut cache);
        let history = Arc::new(UserHistory {
            user_id: "u".into(),
            pages: vec!["p".into(), "q".into()],
            goal_reps: vec![vec![0.3, -0.2, 0.1, 0.5], vec![-0.4, 0.2, 0.6, 0.0]],
        });
        let inst = RevisitInstance { user_id: "u".into(), visits: visits.clone(), labels: vec![true, false, true], history: history.clone() };
        for mode in [ModelMode::Full, ModelMode::NonPersonal, ModelMode::ContentOnly] {
            let mut m = RevisitModel::new(small(mode), 4, 5, 2).unwrap();
            let names = m.param_names();
            sharpen(&mut m.params, &names);
            for p in m.revisit_probabilities(&visits, &history).unwrap() {
                assert!(p > 0.0 && p < 1.0);
            }
            assert!(m.revisit_probability(3, &visits, &history).is_err());
            m.params.zero_grad();
            m.accumulate(&inst, 1.0).unwrap();
            let r = check_params(&m.params, &|p: &ParamSet| m.loss_with(p, &inst).unwrap(), &names, FD_STEP, 1e-4);
            assert!(r.passed, "{mode:?} {r:?}");
        }
        let mut m = RevisitModel::new(small(ModelMode::Full), 4, 5, 2).unwrap();
        m.params.value_mut("rev.out.w").fill(0.0);
        m.params.value_mut("rev.out.b").fill(0.0);
        assert_eq!(m.revisit_probability(0, &visits, &history).unwrap(), 0.5);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let est = estimator(4);
        let mut cache = GoalRepCache::new();
        let sessions: Vec<BrowsingSession> =
            (0..6).map(|i| if i % 2 == 0 { sess("u", &["a", "b", "c", "d"]) } else { sess("u", &["e", "f", "g", "h"]) }).collect();
        let hist = histories_for(&sessions, &est, &mut cache, 200);
        let cands = CandidateSet::from(["a", "b", "c", "d", "e", "f", "g", "h"].iter().map(|s| s.to_string()).collect::<Vec<_>>());
        let data: Vec<RecInstance> =
            sessions.iter().zip(&hist).filter_map(|(s, h)| make_rec_instance(s, h.clone(), &cands, &est, &mut cache)).collect();
        let cfg = TaskTrainConfig { hidden: 8, epochs: 10, batch_size: 2, adam: AdamConfig::with_lr(0.02), seed: 4 };
        let run = || {
            let mut m = RecommenderModel::new(small(ModelMode::Full), 4, cands.clone(), 8, 0).unwrap();
            let losses = train_task(&mut m, &data, &cfg).unwrap();
            (losses, m.params.snapshot())
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
        assert!(l1[9] < l1[0], "{l1:?}");
        let ckpt = RecommenderModel::new(small(ModelMode::Full), 4, cands.clone(), 8, 0).unwrap().to_checkpoint();
        let json = serde_json::to_string(&ckpt).unwrap();
        let back = RecommenderModel::from_checkpoint(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint(), ckpt);
    }

    #[test]
    fn kmeans_examples() {
        let pts: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.1, 5.0], vec![0.0, 0.1]];
        let r = kmeans_pp(&pts, 2, 1).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[0], r.assignments[4]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        let all = kmeans_pp(&pts, 5, 3).unwrap();
        assert_eq!(all.cost(), 0.0);
        assert_eq!(all.assignments.iter().collect::<BTreeSet<_>>().len(), 5);
        assert!(matches!(kmeans_pp(&pts, 6, 0), Err(GowebError::TooManyClusters { .. })));
        assert_eq!(kmeans_pp(&pts, 2, 9).unwrap(), kmeans_pp(&pts, 2, 9).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn lloyd_cost_never_increases(raw in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 3..30), k in 1usize..4, seed in 0u64..1000) {
                let k = k.min(raw.len());
                let r = kmeans_pp(&raw, k, seed).unwrap();
                for w in r.costs.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-9);
                }
                prop_assert!(r.assignments.iter().all(|&a| a < k));
            }
        }
    }
}
