//! Goal-aware visit, session and personal representations.
//!
//! Each visit is featurized as `x_p = [r_p, w_p]`: the frozen estimator's
//! visit goal representation next to a trainable content embedding. Visit
//! representations come from multi-head self-attention over the session,
//! the session representation from context-vector pooling, and the personal
//! goal representation from two-stage dot-product attention: the current
//! visits are summarized into a focal goal `r_s`, which then attends over
//! the user's past pages.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GowebError, Result};
use crate::nn::matrix::dot;
use crate::nn::ops::{softmax, softmax_backward};
use crate::nn::{ContextPool, Linear, Matrix, MultiHeadAttention, ParamSet};
use crate::page_encoder::{ContentSpec, ContentVectors, GoalEstimatorModel, PageCache, PageEncoder, PageEncoderSpec, WebPage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub page: WebPage,
    pub ts: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrowsingSession {
    pub session_id: String,
    pub user_id: String,
    pub visits: Vec<Visit>,
}

impl BrowsingSession {
    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn start(&self) -> Option<i64> {
        self.visits.first().map(|v| v.ts)
    }

    pub fn pages(&self) -> Vec<WebPage> {
        self.visits.iter().map(|v| v.page.clone()).collect()
    }
}

/// Visit goal representations keyed by page id, computed once per page.
#[derive(Clone, Debug, Default)]
pub struct GoalRepCache {
    reps: BTreeMap<String, Vec<f64>>,
}

impl GoalRepCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rep(&mut self, estimator: &GoalEstimatorModel, page: &WebPage) -> Vec<f64> {
        self.reps.entry(page.page_id.clone()).or_insert_with(|| estimator.estimate_visit_goal(page)).clone()
    }

    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }
}

/// The distinct pages a user visited before the current session, with their
/// stored visit goal representations, oldest first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub pages: Vec<String>,
    pub goal_reps: Vec<Vec<f64>>,
}

impl UserHistory {
    pub fn empty(user_id: impl Into<String>) -> Self {
        UserHistory { user_id: user_id.into(), ..Default::default() }
    }

    /// Keeps the `limit` most recently visited distinct pages of `past`.
    pub fn from_sessions(
        user_id: impl Into<String>,
        past: &[BrowsingSession],
        estimator: &GoalEstimatorModel,
        cache: &mut GoalRepCache,
        limit: usize,
    ) -> Self {
        let mut last: BTreeMap<&str, (usize, &WebPage)> = BTreeMap::new();
        let mut order = 0usize;
        for s in past {
            for v in &s.visits {
                last.insert(v.page.page_id.as_str(), (order, &v.page));
                order += 1;
            }
        }
        let mut recent: Vec<(usize, &WebPage)> = last.into_values().collect();
        recent.sort_by_key(|(o, _)| *o);
        let skip = recent.len().saturating_sub(limit);
        let kept = &recent[skip..];
        UserHistory {
            user_id: user_id.into(),
            pages: kept.iter().map(|(_, p)| p.page_id.clone()).collect(),
            goal_reps: kept.iter().map(|(_, p)| cache.rep(estimator, p)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.goal_reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goal_reps.is_empty()
    }
}

/// A session ready for encoding: its pages and their visit goal representations.
#[derive(Clone, Debug, PartialEq)]
pub struct VisitSequence {
    pub pages: Vec<WebPage>,
    pub goal_reps: Vec<Vec<f64>>,
}

impl VisitSequence {
    pub fn new(pages: Vec<WebPage>, estimator: &GoalEstimatorModel, cache: &mut GoalRepCache) -> Self {
        let goal_reps = pages.iter().map(|p| cache.rep(estimator, p)).collect();
        VisitSequence { pages, goal_reps }
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn prefix(&self, n: usize) -> VisitSequence {
        VisitSequence { pages: self.pages[..n].to_vec(), goal_reps: self.goal_reps[..n].to_vec() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// `x_p = [r_p, w_p]` with the personal representation.
    #[default]
    Full,
    /// Goal-aware visits, no personal representation.
    NonPersonal,
    /// `x_p = w_p` only, no goal information anywhere.
    ContentOnly,
}

impl ModelMode {
    pub fn uses_goals(self) -> bool {
        self != ModelMode::ContentOnly
    }

    pub fn uses_personal(self) -> bool {
        self == ModelMode::Full
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionModelConfig {
    pub mode: ModelMode,
    pub content_dim: usize,
    pub heads: usize,
    pub host_buckets: usize,
    pub host_dim: usize,
    pub content: ContentSpec,
    pub history_limit: usize,
}

impl Default for SessionModelConfig {
    fn default() -> Self {
        SessionModelConfig {
            mode: ModelMode::Full,
            content_dim: 128,
            heads: 8,
            host_buckets: 4096,
            host_dim: 64,
            content: ContentSpec::Hashed { buckets: 1 << 14, dim: 128 },
            history_limit: 200,
        }
    }
}

impl SessionModelConfig {
    pub fn validate(&self, goal_dim: usize) -> Result<()> {
        if self.content_dim == 0 || self.host_buckets == 0 || self.host_dim == 0 || self.content.dim() == 0 {
            return Err(GowebError::Config("session model dimensions must be positive".into()));
        }
        if self.history_limit == 0 {
            return Err(GowebError::Config("history_limit must be positive".into()));
        }
        let d = self.d_model(goal_dim);
        if self.heads == 0 || d % self.heads != 0 {
            return Err(GowebError::Config(format!("d_model {d} is not divisible into {} heads", self.heads)));
        }
        Ok(())
    }

    pub fn d_model(&self, goal_dim: usize) -> usize {
        if self.mode.uses_goals() {
            goal_dim + self.content_dim
        } else {
            self.content_dim
        }
    }
}

/// Representations of one session.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionEncoding {
    pub x: Matrix,
    pub visit_reps: Matrix,
    pub session_rep: Vec<f64>,
    /// Absent unless the mode uses it.
    pub personal_rep: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct PersonalCache {
    inputs: Matrix,
    projected: Matrix,
    alpha: Vec<f64>,
    r_s: Vec<f64>,
    history: Vec<Vec<f64>>,
    beta: Vec<f64>,
}

impl PersonalCache {
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn focal_goal(&self) -> &[f64] {
        &self.r_s
    }
}

#[derive(Clone, Debug)]
pub struct EncodeCache {
    pages: Vec<PageCache>,
    mha: crate::nn::attention::MhaCache,
    pool: crate::nn::attention::PoolCache,
    personal: Option<PersonalCache>,
}

impl EncodeCache {
    pub fn personal(&self) -> Option<&PersonalCache> {
        self.personal.as_ref()
    }

    pub fn pool_weights(&self) -> &[Vec<f64>] {
        &self.pool.weights
    }
}

/// Gradients arriving at the outputs of [`SessionModel::encode`].
#[derive(Clone, Debug, Default)]
pub struct EncodingGrad {
    pub visit_reps: Option<Matrix>,
    pub session_rep: Option<Vec<f64>>,
    pub personal_rep: Option<Vec<f64>>,
}

/// Architecture of the shared representation layers; parameters live in an
/// external [`ParamSet`].
#[derive(Clone, Debug)]
pub struct SessionModel {
    pub config: SessionModelConfig,
    pub goal_dim: usize,
    content: PageEncoder,
    visits: MultiHeadAttention,
    pool: ContextPool,
    fs: Linear,
}

const CS: &str = "personal.cs";

impl SessionModel {
    pub fn new(config: SessionModelConfig, goal_dim: usize) -> Result<Self> {
        config.validate(goal_dim)?;
        let d_model = config.d_model(goal_dim);
        let content = PageEncoder::new(
            "content",
            PageEncoderSpec {
                host_buckets: config.host_buckets,
                host_dim: config.host_dim,
                content: config.content.clone(),
                out_dim: config.content_dim,
            },
        );
        Ok(SessionModel {
            content,
            visits: MultiHeadAttention::new("visit", d_model, config.heads)?,
            pool: ContextPool::new("session", d_model, config.heads)?,
            fs: Linear::new("personal.fs", goal_dim, goal_dim),
            config,
            goal_dim,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model(self.goal_dim)
    }

    pub fn mode(&self) -> ModelMode {
        self.config.mode
    }

    pub fn attach_vectors(&mut self, vectors: ContentVectors) -> Result<()> {
        self.content.attach_vectors(vectors)
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) {
        self.content.init(ps, rng);
        self.visits.init(ps, rng);
        self.pool.init(ps, rng);
        if self.mode().uses_personal() {
            self.fs.init(ps, rng);
            ps.insert_uniform(CS, 1, self.goal_dim, rng);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.content.param_names();
        names.extend(self.visits.param_names());
        names.extend(self.pool.param_names());
        if self.mode().uses_personal() {
            names.extend([self.fs.w(), self.fs.b(), CS.to_string()]);
        }
        names
    }

    /// `w_p`, the trainable content embedding of a page.
    pub fn page_content_embedding(&self, ps: &ParamSet, page: &WebPage) -> Vec<f64> {
        self.content.encode(ps, page)
    }

    /// Row `i` is `[r_p_i; w_p_i]`, or `w_p_i` in content-only mode.
    pub fn visit_features(&self, ps: &ParamSet, seq: &VisitSequence) -> Result<(Matrix, Vec<PageCache>)> {
        if seq.is_empty() {
            return Err(GowebError::Empty("session"));
        }
        let mut rows = Vec::with_capacity(seq.len());
        let mut caches = Vec::with_capacity(seq.len());
        for (page, r_p) in seq.pages.iter().zip(&seq.goal_reps) {
            let (w_p, cache) = self.content.forward(ps, page);
            let mut row = Vec::with_capacity(self.d_model());
            if self.mode().uses_goals() {
                if r_p.len() != self.goal_dim {
                    return Err(GowebError::DimMismatch { expected: self.goal_dim, got: r_p.len() });
                }
                row.extend_from_slice(r_p);
            }
            row.extend(w_p);
            rows.push(row);
            caches.push(cache);
        }
        Ok((Matrix::from_rows(&rows)?, caches))
    }

    pub fn gvisit_reps(&self, ps: &ParamSet, x: &Matrix, mask: &[bool]) -> Result<Matrix> {
        Ok(self.visits.forward(ps, x, mask)?.0)
    }

    pub fn gsession_rep(&self, ps: &ParamSet, x: &Matrix, mask: &[bool]) -> Result<Vec<f64>> {
        Ok(self.pool.forward(ps, x, mask)?.0)
    }

    /// Encodes a session given precomputed features `x`; the personal stage
    /// reads the goal columns of `x` as the current visit goal representations.
    pub fn encode_features(
        &self,
        ps: &ParamSet,
        x: &Matrix,
        history: &UserHistory,
    ) -> Result<(SessionEncoding, crate::nn::attention::MhaCache, crate::nn::attention::PoolCache, Option<PersonalCache>)> {
        let mask = vec![true; x.rows()];
        let (visit_reps, mha) = self.visits.forward(ps, x, &mask)?;
        let (session_rep, pool) = self.pool.forward(ps, x, &mask)?;
        let (personal_rep, personal) = if self.mode().uses_personal() {
            let current = x.col_block(0, self.goal_dim);
            let (r_u, cache) = self.personal_forward(ps, &current, &history.goal_reps)?;
            (Some(r_u), Some(cache))
        } else {
            (None, None)
        };
        Ok((SessionEncoding { x: x.clone(), visit_reps, session_rep, personal_rep }, mha, pool, personal))
    }

    pub fn encode(&self, ps: &ParamSet, seq: &VisitSequence, history: &UserHistory) -> Result<(SessionEncoding, EncodeCache)> {
        let (x, pages) = self.visit_features(ps, seq)?;
        let (enc, mha, pool, personal) = self.encode_features(ps, &x, history)?;
        Ok((enc, EncodeCache { pages, mha, pool, personal }))
    }

    /// Backpropagates to `x`, accumulating parameter gradients of the
    /// attention and personal layers.
    pub fn backward_features(
        &self,
        ps: &mut ParamSet,
        mha: &crate::nn::attention::MhaCache,
        pool: &crate::nn::attention::PoolCache,
        personal: Option<&PersonalCache>,
        n: usize,
        grad: &EncodingGrad,
    ) -> Matrix {
        let mut dx = Matrix::zeros(n, self.d_model());
        if let Some(dv) = &grad.visit_reps {
            dx.add_assign(&self.visits.backward(ps, mha, dv));
        }
        if let Some(ds) = &grad.session_rep {
            dx.add_assign(&self.pool.backward(ps, pool, ds));
        }
        if let (Some(dr), Some(cache)) = (&grad.personal_rep, personal) {
            let dcur = self.personal_backward(ps, cache, dr);
            for i in 0..n {
                dx.row_mut(i)[..self.goal_dim].iter_mut().zip(dcur.row(i)).for_each(|(a, b)| *a += b);
            }
        }
        dx
    }

    /// Full backward pass, including the content encoder. Goal columns are
    /// estimator outputs and receive no update.
    pub fn backward(&self, ps: &mut ParamSet, cache: &EncodeCache, grad: &EncodingGrad) {
        let n = cache.pages.len();
        let dx = self.backward_features(ps, &cache.mha, &cache.pool, cache.personal.as_ref(), n, grad);
        let offset = if self.mode().uses_goals() { self.goal_dim } else { 0 };
        for (i, pc) in cache.pages.iter().enumerate() {
            self.content.backward(ps, pc, &dx.row(i)[offset..]);
        }
    }

    /// Focal goal `r_s = sum_i alpha_i r_i` with `alpha = softmax(c_s . F_s(r_i))`,
    /// then `r_u = sum_j beta_j h_j` with `beta = softmax(r_s . h_j)`.
    /// An empty history gives the zero vector.
    pub fn personal_goal_rep(&self, ps: &ParamSet, current: &[Vec<f64>], history: &UserHistory) -> Result<Vec<f64>> {
        let inputs = Matrix::from_rows(current)?;
        Ok(self.personal_forward(ps, &inputs, &history.goal_reps)?.0)
    }

    fn personal_forward(&self, ps: &ParamSet, inputs: &Matrix, history: &[Vec<f64>]) -> Result<(Vec<f64>, PersonalCache)> {
        if inputs.rows() == 0 {
            return Err(GowebError::Empty("session"));
        }
        if inputs.cols() != self.goal_dim {
            return Err(GowebError::DimMismatch { expected: self.goal_dim, got: inputs.cols() });
        }
        if let Some(h) = history.iter().find(|h| h.len() != self.goal_dim) {
            return Err(GowebError::DimMismatch { expected: self.goal_dim, got: h.len() });
        }
        let projected = self.fs.forward(ps, inputs);
        let cs = ps.value(CS).row(0);
        let logits: Vec<f64> = (0..projected.rows()).map(|i| dot(cs, projected.row(i))).collect();
        let alpha = softmax(&logits);
        let mut r_s = vec![0.0; self.goal_dim];
        for (i, a) in alpha.iter().enumerate() {
            r_s.iter_mut().zip(inputs.row(i)).for_each(|(o, v)| *o += a * v);
        }
        let mut r_u = vec![0.0; self.goal_dim];
        let beta = if history.is_empty() {
            Vec::new()
        } else {
            let scores: Vec<f64> = history.iter().map(|h| dot(&r_s, h)).collect();
            let beta = softmax(&scores);
            for (b, h) in beta.iter().zip(history) {
                r_u.iter_mut().zip(h).for_each(|(o, v)| *o += b * v);
            }
            beta
        };
        let cache = PersonalCache { inputs: inputs.clone(), projected, alpha, r_s, history: history.to_vec(), beta };
        Ok((r_u, cache))
    }

    fn personal_backward(&self, ps: &mut ParamSet, cache: &PersonalCache, dr_u: &[f64]) -> Matrix {
        let n = cache.inputs.rows();
        let mut dinputs = Matrix::zeros(n, self.goal_dim);
        if cache.history.is_empty() {
            return dinputs;
        }
        let dbeta: Vec<f64> = cache.history.iter().map(|h| dot(dr_u, h)).collect();
        let dscores = softmax_backward(&cache.beta, &dbeta);
        let mut dr_s = vec![0.0; self.goal_dim];
        for (d, h) in dscores.iter().zip(&cache.history) {
            dr_s.iter_mut().zip(h).for_each(|(o, v)| *o += d * v);
        }
        let dalpha: Vec<f64> = (0..n).map(|i| dot(&dr_s, cache.inputs.row(i))).collect();
        for i in 0..n {
            let a = cache.alpha[i];
            dinputs.row_mut(i).iter_mut().zip(&dr_s).for_each(|(o, g)| *o += a * g);
        }
        let dlogits = softmax_backward(&cache.alpha, &dalpha);
        let cs = ps.value(CS).row(0).to_vec();
        let mut dprojected = Matrix::zeros(n, self.goal_dim);
        {
            let gcs = ps.grad_mut(CS);
            for i in 0..n {
                gcs.row_mut(0).iter_mut().zip(cache.projected.row(i)).for_each(|(o, z)| *o += dlogits[i] * z);
                dprojected.row_mut(i).iter_mut().zip(&cs).for_each(|(o, c)| *o = dlogits[i] * c);
            }
        }
        dinputs.add_assign(&self.fs.backward(ps, &cache.inputs, &dprojected));
        dinputs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_params, check_values, FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(mode: ModelMode) -> SessionModelConfig {
        SessionModelConfig {
            mode,
            content_dim: 6,
            heads: 2,
            host_buckets: 7,
            host_dim: 3,
            content: ContentSpec::Hashed { buckets: 11, dim: 4 },
            history_limit: 200,
        }
    }

    fn setup(mode: ModelMode) -> (SessionModel, ParamSet) {
        let model = SessionModel::new(small_config(mode), 4).unwrap();
        let mut ps = ParamSet::new();
        model.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(3));
        for name in model.param_names() {
            ps.value_mut(&name).scale(8.0);
        }
        (model, ps)
    }

    fn seq(n: usize) -> VisitSequence {
        let pages = (0..n).map(|i| WebPage::new(format!("p{i}"), format!("h{}.com", i % 2), &format!("title word{i} shared"))).collect();
        let goal_reps = (0..n).map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.7).sin() * 0.8).collect()).collect();
        VisitSequence { pages, goal_reps }
    }

    fn history(m: usize) -> UserHistory {
        UserHistory {
            user_id: "u".into(),
            pages: (0..m).map(|j| format!("h{j}")).collect(),
            goal_reps: (0..m).map(|j| (0..4).map(|k| ((j * 3 + k) as f64 * 1.3).cos() * 0.9).collect()).collect(),
        }
    }

    #[test]
    fn feature_layout() {
        let (model, ps) = setup(ModelMode::Full);
        let s = seq(3);
        let (x, _) = model.visit_features(&ps, &s).unwrap();
        assert_eq!(x.shape(), (3, 10));
        for i in 0..3 {
            assert_eq!(&x.row(i)[..4], s.goal_reps[i].as_slice());
            assert_eq!(&x.row(i)[4..], model.page_content_embedding(&ps, &s.pages[i]).as_slice());
        }
        let (ablation, aps) = setup(ModelMode::ContentOnly);
        let (xa, _) = ablation.visit_features(&aps, &s).unwrap();
        assert_eq!(xa.shape(), (3, 6));
        assert!(model.visit_features(&ps, &seq(0)).is_err());
        assert_eq!(SessionModelConfig::default().d_model(64), 192);
    }

    #[test]
    fn single_visit_and_duplicates() {
        let (model, ps) = setup(ModelMode::Full);
        let s = seq(1);
        let (enc, _) = model.encode(&ps, &s, &history(0)).unwrap();
        // one visit: attention weight 1, so v_p = x W_V W_O
        let wv = ps.value("visit.wv");
        let wo = ps.value("visit.wo");
        let expected = enc.x.matmul(wv).matmul(wo);
        for (a, b) in enc.visit_reps.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let x1 = enc.x.clone();
        let x3 = Matrix::from_rows(&[x1.row(0).to_vec(), x1.row(0).to_vec(), x1.row(0).to_vec()]).unwrap();
        let v1 = model.gsession_rep(&ps, &x1, &[true]).unwrap();
        let v3 = model.gsession_rep(&ps, &x3, &[true; 3]).unwrap();
        for (a, b) in v1.iter().zip(&v3) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(enc.personal_rep, Some(vec![0.0; 4]));
    }

    #[test]
    fn permutation_equivariance() {
        let (model, ps) = setup(ModelMode::Full);
        let (x, _) = model.visit_features(&ps, &seq(4)).unwrap();
        let perm = [2usize, 0, 3, 1];
        let xp = Matrix::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let v = model.gvisit_reps(&ps, &x, &[true; 4]).unwrap();
        let vp = model.gvisit_reps(&ps, &xp, &[true; 4]).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in vp.row(k).iter().zip(v.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn personal_examples() {
        let (model, mut ps) = setup(ModelMode::Full);
        let cur = seq(3).goal_reps;
        let one = history(1);
        let r = model.personal_goal_rep(&ps, &cur, &one).unwrap();
        assert_eq!(r, one.goal_reps[0]);

        let same = UserHistory { goal_reps: vec![vec![0.1, -0.2, 0.3, 0.4]; 5], ..history(5) };
        let r = model.personal_goal_rep(&ps, &cur, &same).unwrap();
        for (a, b) in r.iter().zip(&same.goal_reps[0]) {
            assert!((a - b).abs() < 1e-15);
        }

        ps.value_mut(CS).fill(0.0);
        let inputs = Matrix::from_rows(&cur).unwrap();
        let (_, cache) = model.personal_forward(&ps, &inputs, &history(4).goal_reps).unwrap();
        assert!(cache.alpha().iter().all(|a| (a - 1.0 / 3.0).abs() < 1e-15));
        for j in 0..4 {
            let mean = cur.iter().map(|r| r[j]).sum::<f64>() / 3.0;
            assert!((cache.focal_goal()[j] - mean).abs() < 1e-15);
        }
        assert!((cache.beta().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn history_keeps_most_recent_distinct_pages() {
        let goals = crate::goal_embed::GoalEmbeddingTable::new(vec![
            (crate::taxonomy::GoalId(0), crate::manifold::BallPoint::new(vec![0.0; 4]).unwrap()),
            (crate::taxonomy::GoalId(1), crate::manifold::BallPoint::new(vec![0.5, 0.0, 0.0, 0.0]).unwrap()),
        ])
        .unwrap();
        let cfg = crate::page_encoder::EstimatorConfig {
            host_buckets: 5,
            host_dim: 2,
            content: ContentSpec::Hashed { buckets: 5, dim: 2 },
            ..Default::default()
        };
        let est = GoalEstimatorModel::new(goals, &cfg);
        let mk = |ids: &[&str]| BrowsingSession {
            session_id: "s".into(),
            user_id: "u".into(),
            visits: ids.iter().enumerate().map(|(i, p)| Visit { page: WebPage::new(*p, "h", p), ts: i as i64 }).collect(),
        };
        let past = vec![mk(&["a", "b", "c"]), mk(&["d", "a"])];
        let mut cache = GoalRepCache::new();
        let h = UserHistory::from_sessions("u", &past, &est, &mut cache, 3);
        assert_eq!(h.pages, vec!["c", "d", "a"]);
        assert_eq!(h.goal_reps[2], est.estimate_visit_goal(&WebPage::new("a", "h", "a")));
        assert_eq!(cache.len(), 3);
    }

    fn scalar_loss(enc: &SessionEncoding) -> (f64, EncodingGrad) {
        let wv: Vec<f64> = (0..enc.visit_reps.as_slice().len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let ws: Vec<f64> = (0..enc.session_rep.len()).map(|i| (i as f64 * 0.53).cos()).collect();
        let wu: Vec<f64> = (0..4).map(|i| 1.0 + i as f64 * 0.5).collect();
        let mut loss = dot(enc.visit_reps.as_slice(), &wv) + dot(&enc.session_rep, &ws);
        let mut grad = EncodingGrad {
            visit_reps: Some(Matrix::new(enc.visit_reps.rows(), enc.visit_reps.cols(), wv).unwrap()),
            session_rep: Some(ws),
            personal_rep: None,
        };
        if let Some(r) = &enc.personal_rep {
            loss += dot(r, &wu);
            grad.personal_rep = Some(wu);
        }
        (loss, grad)
    }

    #[test]
    fn gradients_reach_both_halves_of_the_input() {
        let (model, mut ps) = setup(ModelMode::Full);
        let h = history(5);
        let (x, _) = model.visit_features(&ps, &seq(3)).unwrap();
        let (enc, mha, pool, personal) = model.encode_features(&ps, &x, &h).unwrap();
        let (_, grad) = scalar_loss(&enc);
        let dx = model.backward_features(&mut ps, &mha, &pool, personal.as_ref(), 3, &grad);
        assert!(dx.col_block(0, 4).as_slice().iter().any(|v| v.abs() > 1e-6));
        assert!(dx.col_block(4, 6).as_slice().iter().any(|v| v.abs() > 1e-6));
        let f = |v: &[f64]| {
            let xm = Matrix::new(3, 10, v.to_vec()).unwrap();
            scalar_loss(&model.encode_features(&ps, &xm, &h).unwrap().0).0
        };
        let r = check_values(x.as_slice(), dx.as_slice(), f, FD_STEP, 1e-4);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn parameter_gradients_match_fd() {
        for mode in [ModelMode::Full, ModelMode::NonPersonal, ModelMode::ContentOnly] {
            let (model, mut ps) = setup(mode);
            let s = seq(3);
            let h = history(4);
            let (enc, cache) = model.encode(&ps, &s, &h).unwrap();
            let (_, grad) = scalar_loss(&enc);
            model.backward(&mut ps, &cache, &grad);
            let loss = |p: &ParamSet| scalar_loss(&model.encode(p, &s, &h).unwrap().0).0;
            let r = check_params(&ps, &loss, &model.param_names(), FD_STEP, 1e-4);
            assert!(r.passed, "{mode:?}: {r:?}");
        }
    }
}
