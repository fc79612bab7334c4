//! Page encoders and the weakly supervised goal estimator.
//!
//! A page is encoded from its host (hashed into a learned embedding table)
//! and its title (a content vector), concatenated and projected by a fully
//! connected layer. The same architecture produces both the content
//! embedding `w_p` and, trained against goal labels, the visit goal
//! representation `r_p`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GowebError, Result};
use crate::goal_embed::GoalEmbeddingTable;
use crate::manifold::BallPoint;
use crate::metrics::{multiclass_report, MulticlassReport};
use crate::nn::{adam_step, AdamConfig, Linear, Matrix, ParamSet};
use crate::taxonomy::{GoalId, GoalTaxonomy};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WebPage {
    pub page_id: String,
    pub host: String,
    pub title_tokens: Vec<String>,
}

impl WebPage {
    pub fn new(page_id: impl Into<String>, host: impl Into<String>, title: &str) -> Self {
        WebPage { page_id: page_id.into(), host: host.into(), title_tokens: tokenize(title) }
    }
}

pub fn tokenize(title: &str) -> Vec<String> {
    title.split_whitespace().map(str::to_lowercase).collect()
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn host_bucket(host: &str, buckets: usize) -> usize {
    (fnv1a(host.to_lowercase().as_bytes()) % buckets as u64) as usize
}

/// Buckets of every unigram and bigram of a token list (bigrams are hashed
/// with a separator byte that cannot occur inside a token).
pub fn content_buckets(tokens: &[String], buckets: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len() * 2);
    for t in tokens {
        out.push((fnv1a(t.as_bytes()) % buckets as u64) as usize);
    }
    for w in tokens.windows(2) {
        let mut key = Vec::with_capacity(w[0].len() + w[1].len() + 1);
        key.extend_from_slice(w[0].as_bytes());
        key.push(0x1f);
        key.extend_from_slice(w[1].as_bytes());
        out.push((fnv1a(&key) % buckets as u64) as usize);
    }
    out
}

/// Mean of the bucket embeddings of a title's unigrams and bigrams; zero for
/// an empty title.
pub fn encode_content_default(tokens: &[String], table: &Matrix, buckets: usize) -> Vec<f64> {
    mean_rows(table, &content_buckets(tokens, buckets))
}

fn mean_rows(table: &Matrix, rows: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; table.cols()];
    if rows.is_empty() {
        return out;
    }
    for &r in rows {
        out.iter_mut().zip(table.row(r)).for_each(|(o, v)| *o += v);
    }
    let inv = 1.0 / rows.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// How title content becomes a vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContentSpec {
    /// Learned hashed bag of unigrams and bigrams.
    Hashed { buckets: usize, dim: usize },
    /// Fixed vectors supplied per page id (missing pages encode as zero).
    Precomputed { dim: usize },
}

impl ContentSpec {
    pub fn dim(&self) -> usize {
        match self {
            ContentSpec::Hashed { dim, .. } | ContentSpec::Precomputed { dim } => *dim,
        }
    }
}

pub type ContentVectors = Arc<BTreeMap<String, Vec<f64>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageEncoderSpec {
    pub host_buckets: usize,
    pub host_dim: usize,
    pub content: ContentSpec,
    pub out_dim: usize,
}

/// Host embedding + content vector, projected by one fully connected layer.
#[derive(Clone, Debug)]
pub struct PageEncoder {
    pub spec: PageEncoderSpec,
    prefix: String,
    proj: Linear,
    precomputed: Option<ContentVectors>,
}

#[derive(Clone, Debug)]
pub struct PageCache {
    host_bucket: usize,
    content_rows: Vec<usize>,
    input: Matrix,
}

impl PageEncoder {
    pub fn new(prefix: impl Into<String>, spec: PageEncoderSpec) -> Self {
        let prefix = prefix.into();
        let proj = Linear::new(format!("{prefix}.proj"), spec.host_dim + spec.content.dim(), spec.out_dim);
        PageEncoder { spec, prefix, proj, precomputed: None }
    }

    pub fn attach_vectors(&mut self, vectors: ContentVectors) -> Result<()> {
        let dim = self.spec.content.dim();
        if let Some((id, v)) = vectors.iter().find(|(_, v)| v.len() != dim) {
            return Err(GowebError::shape("content vectors", format!("page {id} has {} values, expected {dim}", v.len())));
        }
        self.precomputed = Some(vectors);
        Ok(())
    }

    fn host_table(&self) -> String {
        format!("{}.host", self.prefix)
    }

    fn content_table(&self) -> String {
        format!("{}.content", self.prefix)
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) {
        ps.insert_uniform(self.host_table(), self.spec.host_buckets, self.spec.host_dim, rng);
        if let ContentSpec::Hashed { buckets, dim } = self.spec.content {
            ps.insert_uniform(self.content_table(), buckets, dim, rng);
        }
        self.proj.init(ps, rng);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![self.host_table(), self.proj.w(), self.proj.b()];
        if matches!(self.spec.content, ContentSpec::Hashed { .. }) {
            names.push(self.content_table());
        }
        names
    }

    fn content_vector(&self, ps: &ParamSet, page: &WebPage) -> (Vec<f64>, Vec<usize>) {
        match self.spec.content {
            ContentSpec::Hashed { buckets, .. } => {
                let rows = content_buckets(&page.title_tokens, buckets);
                (mean_rows(ps.value(&self.content_table()), &rows), rows)
            }
            ContentSpec::Precomputed { dim } => {
                let v = self.precomputed.as_ref().and_then(|m| m.get(&page.page_id)).cloned().unwrap_or_else(|| vec![0.0; dim]);
                (v, Vec::new())
            }
        }
    }

    pub fn forward(&self, ps: &ParamSet, page: &WebPage) -> (Vec<f64>, PageCache) {
        let hb = host_bucket(&page.host, self.spec.host_buckets);
        let (content, rows) = self.content_vector(ps, page);
        let mut input = ps.value(&self.host_table()).row(hb).to_vec();
        input.extend(content);
        let input = Matrix::row_vector(input);
        let out = self.proj.forward(ps, &input).into_vec();
        (out, PageCache { host_bucket: hb, content_rows: rows, input })
    }

    pub fn encode(&self, ps: &ParamSet, page: &WebPage) -> Vec<f64> {
        self.forward(ps, page).0
    }

    pub fn backward(&self, ps: &mut ParamSet, cache: &PageCache, dout: &[f64]) {
        let din = self.proj.backward(ps, &cache.input, &Matrix::row_vector(dout.to_vec())).into_vec();
        let (dhost, dcontent) = din.split_at(self.spec.host_dim);
        ps.grad_mut(&self.host_table()).row_mut(cache.host_bucket).iter_mut().zip(dhost).for_each(|(g, d)| *g += d);
        if !cache.content_rows.is_empty() {
            let inv = 1.0 / cache.content_rows.len() as f64;
            let table = self.content_table();
            let grad = ps.grad_mut(&table);
            for &r in &cache.content_rows {
                grad.row_mut(r).iter_mut().zip(dcontent).for_each(|(g, d)| *g += inv * d);
            }
        }
    }
}

/// `r_p (x) r_g = |r_p| |r_g| cos(theta)`, i.e. the Euclidean inner product.
pub fn goal_similarity(r_p: &[f64], r_g: &BallPoint) -> Result<f64> {
    if r_p.len() != r_g.dim() {
        return Err(GowebError::DimMismatch { expected: r_g.dim(), got: r_p.len() });
    }
    Ok(crate::manifold::dot(r_p, r_g.coords()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoalPrediction {
    pub goal: GoalId,
    /// Softmax over similarity logits, in the table's id order.
    pub distribution: Vec<(GoalId, f64)>,
}

fn similarity_logits(r_p: &[f64], table: &GoalEmbeddingTable) -> Result<Vec<f64>> {
    table.points().iter().map(|g| goal_similarity(r_p, g)).collect()
}

/// The most similar goal (ties to the smallest id) and the softmax
/// distribution over all goals.
pub fn classify_goal(r_p: &[f64], table: &GoalEmbeddingTable) -> Result<GoalPrediction> {
    if table.is_empty() {
        return Err(GowebError::Empty("goal table"));
    }
    let logits = similarity_logits(r_p, table)?;
    let best = argmax(&logits);
    let probs = crate::nn::softmax(&logits);
    Ok(GoalPrediction { goal: table.ids()[best], distribution: table.ids().iter().copied().zip(probs).collect() })
}

/// Index of the first maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakLabelRecord {
    pub page: WebPage,
    pub goal: GoalId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub host_buckets: usize,
    pub host_dim: usize,
    pub content: ContentSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub eval_fraction: f64,
    /// When set, the trained output layer is rescaled so the mean `|r_p|`
    /// over the training pages equals this value.
    pub output_norm: Option<f64>,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            host_buckets: 4096,
            host_dim: 64,
            content: ContentSpec::Hashed { buckets: 1 << 14, dim: 128 },
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
            eval_fraction: 0.1,
            output_norm: Some(2.0),
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.host_buckets == 0 || self.host_dim == 0 || self.content.dim() == 0 || self.batch_size == 0 {
            return Err(GowebError::Config("estimator sizes must be positive".into()));
        }
        if let ContentSpec::Hashed { buckets: 0, .. } = self.content {
            return Err(GowebError::Config("content bucket count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(GowebError::Config(format!("eval_fraction {} must lie in [0, 1)", self.eval_fraction)));
        }
        if let Some(n) = self.output_norm {
            if !(n.is_finite() && n > 0.0) {
                return Err(GowebError::Config(format!("output_norm {n} must be positive")));
            }
        }
        Ok(())
    }
}

/// Maps a page into the goal space; the goal table is frozen.
#[derive(Clone, Debug)]
pub struct GoalEstimatorModel {
    pub encoder: PageEncoder,
    pub params: ParamSet,
    pub goals: GoalEmbeddingTable,
    goal_matrix: Matrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorCheckpoint {
    pub config: EstimatorConfig,
    pub goals: Vec<(GoalId, Vec<f64>)>,
    pub params: BTreeMap<String, Matrix>,
}

impl GoalEstimatorModel {
    pub fn new(goals: GoalEmbeddingTable, cfg: &EstimatorConfig) -> Self {
        let spec = PageEncoderSpec { host_buckets: cfg.host_buckets, host_dim: cfg.host_dim, content: cfg.content.clone(), out_dim: goals.dim() };
        let encoder = PageEncoder::new("goal", spec);
        let mut params = ParamSet::new();
        encoder.init(&mut params, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        Self::assemble(encoder, params, goals)
    }

    fn assemble(encoder: PageEncoder, params: ParamSet, goals: GoalEmbeddingTable) -> Self {
        let rows: Vec<Vec<f64>> = goals.points().iter().map(|p| p.coords().to_vec()).collect();
        let goal_matrix = Matrix::from_rows(&rows).expect("uniform dims");
        GoalEstimatorModel { encoder, params, goals, goal_matrix }
    }

    pub fn goal_dim(&self) -> usize {
        self.goals.dim()
    }

    /// `r_p = F_G([emb_host(h_p); content(c_p)])`, not projected into the ball.
    pub fn estimate_visit_goal(&self, page: &WebPage) -> Vec<f64> {
        self.encoder.encode(&self.params, page)
    }

    pub fn classify(&self, page: &WebPage) -> GoalPrediction {
        classify_goal(&self.estimate_visit_goal(page), &self.goals).expect("estimator output matches goal dim")
    }

    fn logits(&self, r_p: &[f64]) -> Vec<f64> {
        (0..self.goal_matrix.rows()).map(|g| crate::nn::matrix::dot(r_p, self.goal_matrix.row(g))).collect()
    }

    /// Cross-entropy of one record; accumulates gradients scaled by `weight`.
    pub fn accumulate_record(&mut self, rec: &WeakLabelRecord, weight: f64) -> Result<f64> {
        let label = self.goals.position(rec.goal).ok_or(GowebError::UnknownGoal(rec.goal.0))?;
        let (r_p, cache) = self.encoder.forward(&self.params, &rec.page);
        let (loss, dlogits) = crate::nn::ops::softmax_cross_entropy(&self.logits(&r_p), label)?;
        let mut dr = vec![0.0; r_p.len()];
        for (g, dl) in dlogits.iter().enumerate() {
            dr.iter_mut().zip(self.goal_matrix.row(g)).for_each(|(d, v)| *d += weight * dl * v);
        }
        self.encoder.backward(&mut self.params, &cache, &dr);
        Ok(loss)
    }

    pub fn loss(&self, rec: &WeakLabelRecord) -> Result<f64> {
        let label = self.goals.position(rec.goal).ok_or(GowebError::UnknownGoal(rec.goal.0))?;
        Ok(crate::nn::ops::softmax_cross_entropy(&self.logits(&self.estimate_visit_goal(&rec.page)), label)?.0)
    }

    pub fn attach_vectors(&mut self, vectors: ContentVectors) -> Result<()> {
        self.encoder.attach_vectors(vectors)
    }

    /// Scales the output projection so the mean `|r_p|` over `pages` equals
    /// `target`. Dot-product logits scale uniformly, so argmax goals are
    /// unchanged. Returns the applied factor.
    pub fn rescale_output(&mut self, pages: &[WebPage], target: f64) -> Result<f64> {
        if pages.is_empty() {
            return Err(GowebError::Empty("pages for output rescaling"));
        }
        let mean = pages.iter().map(|p| self.estimate_visit_goal(p).iter().map(|x| x * x).sum::<f64>().sqrt()).sum::<f64>() / pages.len() as f64;
        let factor = target / mean;
        if !(factor.is_finite() && factor > 0.0) {
            return Err(GowebError::Numerical(format!("cannot rescale estimator output with mean norm {mean}")));
        }
        self.params.value_mut(&self.encoder.proj.w()).scale(factor);
        self.params.value_mut(&self.encoder.proj.b()).scale(factor);
        Ok(factor)
    }

    pub fn to_checkpoint(&self, config: &EstimatorConfig) -> EstimatorCheckpoint {
        EstimatorCheckpoint {
            config: config.clone(),
            goals: self.goals.iter().map(|(id, p)| (id, p.coords().to_vec())).collect(),
            params: self.params.snapshot(),
        }
    }

    pub fn from_checkpoint(ckpt: EstimatorCheckpoint) -> Result<Self> {
        let goals = GoalEmbeddingTable::new(ckpt.goals.into_iter().map(|(id, c)| Ok((id, BallPoint::new(c)?))).collect::<Result<Vec<_>>>()?)?;
        let fresh = GoalEstimatorModel::new(goals, &ckpt.config);
        let params = ParamSet::from_snapshot(ckpt.params);
        params.check_layout(&fresh.params)?;
        Ok(Self::assemble(fresh.encoder, params, fresh.goals))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub epoch_losses: Vec<f64>,
    pub train_size: usize,
    pub eval_size: usize,
    pub eval: Option<MulticlassReport>,
}

#[derive(Clone, Debug)]
pub struct TrainedEstimator {
    pub model: GoalEstimatorModel,
    pub report: EstimatorReport,
    /// Records held out for evaluation.
    pub eval_records: Vec<WeakLabelRecord>,
}

/// Deterministic shuffled split; the last `eval_fraction` is held out.
pub fn split_weak_labels(data: &[WeakLabelRecord], eval_fraction: f64, seed: u64) -> (Vec<WeakLabelRecord>, Vec<WeakLabelRecord>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a));
    let n_eval = (data.len() as f64 * eval_fraction).round() as usize;
    let cut = data.len() - n_eval;
    (idx[..cut].iter().map(|&i| data[i].clone()).collect(), idx[cut..].iter().map(|&i| data[i].clone()).collect())
}

/// Evaluates the predicted goal of every record.
pub fn evaluate_estimator(model: &GoalEstimatorModel, records: &[WeakLabelRecord]) -> Result<MulticlassReport> {
    let truth: Vec<GoalId> = records.iter().map(|r| r.goal).collect();
    let pred: Vec<GoalId> = records.iter().map(|r| model.classify(&r.page).goal).collect();
    multiclass_report(&pred, &truth)
}

/// Minimizes the mean cross-entropy of the goal distribution against weak
/// labels with Adam, holding out a fraction for evaluation.
pub fn train_goal_estimator(
    data: &[WeakLabelRecord],
    taxonomy: &GoalTaxonomy,
    table: &GoalEmbeddingTable,
    cfg: &EstimatorConfig,
) -> Result<TrainedEstimator> {
    cfg.validate()?;
    for rec in data {
        if !taxonomy.contains(rec.goal) || table.get(rec.goal).is_none() {
            return Err(GowebError::UnknownGoal(rec.goal.0));
        }
    }
    let (train, eval) = split_weak_labels(data, cfg.eval_fraction, cfg.seed);
    if train.is_empty() {
        return Err(GowebError::Empty("weak-label training split"));
    }
    let mut model = GoalEstimatorModel::new(table.clone(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                total += model.accumulate_record(&train[i], w)?;
            }
            step += 1;
            adam_step(&mut model.params, &cfg.adam, step);
        }
        let mean = total / train.len() as f64;
        log::info!("estimator epoch {}: mean loss {:.6}", epoch + 1, mean);
        epoch_losses.push(mean);
    }
    if let Some(target) = cfg.output_norm {
        let pages: Vec<WebPage> = train.iter().map(|r| r.page.clone()).collect();
        let factor = model.rescale_output(&pages, target)?;
        log::info!("estimator output rescaled by {factor:.6}");
    }
    let eval_report = if eval.is_empty() { None } else { Some(evaluate_estimator(&model, &eval)?) };
    Ok(TrainedEstimator {
        model,
        report: EstimatorReport { epoch_losses, train_size: train.len(), eval_size: eval.len(), eval: eval_report },
        eval_records: eval,
    })
}
