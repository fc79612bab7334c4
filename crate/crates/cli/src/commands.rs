use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use goweb::dataio::{
    read_events, read_json, read_weak_labels, segment_sessions, synth_generate, write_json, write_jsonl, SynthTruth, SESSION_GAP_SECS,
};
use goweb::diagnostics::{gradient_suite, GradCheckEntry};
use goweb::experiment::{
    evaluate_recommender, evaluate_revisit, prepare_task_data, rec_instances, revisit_instances, session_cluster_count, sessions_from_events,
    split_by_fraction, ContentBaseline, TaskData,
};
use goweb::goal_embed::{
    evaluate_reconstruction, hierarchy_norm_profile, train_goal_embeddings, GoalEmbeddingTable, NormProfile, ReconstructionReport,
};
use goweb::metrics::{
    clustering_agreement, extract_revisit_events, goal_confusion_matrix, revisit_duration_buckets, single_goal_session_rate, ClsMetricsReport,
    ClusterMetricsReport, ConfusionReport, DurationReport, MulticlassReport, RankMetricsReport,
};
use goweb::page_encoder::{evaluate_estimator, split_weak_labels, train_goal_estimator, EstimatorCheckpoint, EstimatorReport, GoalEstimatorModel};
use goweb::session_model::{BrowsingSession, GoalRepCache};
use goweb::tasks::{cluster_session_goals, kmeans_pp, train_task, RecommenderModel, RevisitModel, TaskCheckpoint};
use goweb::taxonomy::{closure_pairs, GoalId, GoalTaxonomy};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub const EVENTS: &str = "events.jsonl";
pub const WEAK_LABELS: &str = "weak_labels.jsonl";
pub const TRUTH: &str = "truth.json";
pub const EMBEDDINGS: &str = "goal_embeddings.tsv";
pub const ESTIMATOR: &str = "estimator.json";
pub const REC_MODEL: &str = "rec_model.json";
pub const REVISIT_MODEL: &str = "revisit_model.json";
pub const CLUSTERS: &str = "clusters.json";

/// Input paths; each defaults to the standard file name under `--out`.
#[derive(Clone, Debug, Default)]
pub struct Inputs {
    pub events: Option<PathBuf>,
    pub weak_labels: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub estimator: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub clusters: Option<PathBuf>,
}

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub inputs: Inputs,
}

/// Every JSON output carries the resolved config of the run that made it.
#[derive(Serialize, Deserialize)]
pub struct Artifact<T> {
    pub command: String,
    pub config: RunConfig,
    pub result: T,
}

impl Context {
    fn input(&self, given: &Option<PathBuf>, default: &str, kind: &str) -> Result<PathBuf, CliError> {
        let path = given.clone().unwrap_or_else(|| self.out.join(default));
        if path.is_file() {
            Ok(path)
        } else {
            Err(CliError::Missing(format!("{kind} not found: {}", path.display())))
        }
    }

    fn write<T: Serialize>(&self, file: &str, command: &str, result: T) -> Result<PathBuf, CliError> {
        let path = self.out.join(file);
        write_json(&path, &Artifact { command: command.to_string(), config: self.config.clone(), result })?;
        Ok(path)
    }

    fn embeddings(&self) -> Result<GoalEmbeddingTable, CliError> {
        Ok(GoalEmbeddingTable::read_tsv(&self.input(&self.inputs.embeddings, EMBEDDINGS, "goal embeddings")?)?)
    }

    fn estimator(&self) -> Result<GoalEstimatorModel, CliError> {
        let path = self.input(&self.inputs.estimator, ESTIMATOR, "estimator checkpoint")?;
        let art: Artifact<EstimatorCheckpoint> = read_artifact(&path)?;
        Ok(GoalEstimatorModel::from_checkpoint(art.result)?)
    }

    fn events_path(&self) -> Result<PathBuf, CliError> {
        self.input(&self.inputs.events, EVENTS, "events")
    }

    fn weak_labels_path(&self) -> Result<PathBuf, CliError> {
        self.input(&self.inputs.weak_labels, WEAK_LABELS, "weak labels")
    }

    fn truth(&self) -> Result<SynthTruth, CliError> {
        Ok(read_artifact::<SynthTruth>(&self.input(&self.inputs.truth, TRUTH, "ground truth")?)?.result)
    }

    fn task_data(&self, est: &GoalEstimatorModel, cache: &mut GoalRepCache) -> Result<(Vec<BrowsingSession>, TaskData), CliError> {
        let events = read_events(&self.events_path()?)?;
        let p = &self.config.protocol;
        let sessions = sessions_from_events(&events, p)?;
        let spec = split_by_fraction(&sessions, p.train_fraction, p.test_fraction)?;
        let data = prepare_task_data(&sessions, &spec, p, est, cache)?;
        log::info!(
            "{} sessions: {} train, {} warm test, {} cold test, {} candidates",
            sessions.len(),
            data.split.train.len(),
            data.split.test_warm.len(),
            data.split.test_cold.len(),
            data.candidates.len()
        );
        Ok((sessions, data))
    }
}

fn read_artifact<T: DeserializeOwned>(path: &Path) -> Result<Artifact<T>, CliError> {
    Ok(read_json(path)?)
}

#[derive(Serialize)]
struct SynthSummary {
    users: usize,
    events: usize,
    weak_labels: usize,
    sessions: usize,
}

pub fn synth(ctx: &Context) -> Result<String, CliError> {
    let taxonomy = ctx.config.taxonomy()?;
    let corpus = synth_generate(&ctx.config.synth, &taxonomy)?;
    write_jsonl(&ctx.out.join(EVENTS), &corpus.events)?;
    write_jsonl(&ctx.out.join(WEAK_LABELS), &corpus.weak_labels)?;
    ctx.write(TRUTH, "synth", &corpus.truth)?;
    let summary = SynthSummary {
        users: corpus.truth.users.len(),
        events: corpus.events.len(),
        weak_labels: corpus.weak_labels.len(),
        sessions: corpus.truth.session_goals.len(),
    };
    let line =
        format!("synth: {} users, {} sessions, {} events, {} weak labels", summary.users, summary.sessions, summary.events, summary.weak_labels);
    ctx.write("synth.json", "synth", summary)?;
    Ok(line)
}

#[derive(Serialize)]
struct GoalTrainingResult {
    epoch_losses: Vec<f64>,
    reconstruction: ReconstructionReport,
    norms: NormProfile,
}

pub fn train_goals(ctx: &Context) -> Result<String, CliError> {
    let taxonomy = ctx.config.taxonomy()?;
    let trained = train_goal_embeddings(&taxonomy, &ctx.config.goals)?;
    if trained.epoch_losses.iter().any(|l| !l.is_finite()) {
        return Err(CliError::Numerical("goal embedding loss is not finite".into()));
    }
    trained.table.write_tsv(&ctx.out.join(EMBEDDINGS))?;
    let reconstruction = evaluate_reconstruction(&trained.table, &closure_pairs(&taxonomy))?;
    let norms = hierarchy_norm_profile(&trained.table, &taxonomy);
    let last = trained.epoch_losses.last().copied().unwrap_or(f64::NAN);
    ctx.write("train_goals.json", "train-goals", GoalTrainingResult { epoch_losses: trained.epoch_losses, reconstruction, norms })?;
    Ok(format!("train-goals: {} goals in {} dims, final loss {last:.6}, MAP {:.4}", trained.table.len(), trained.table.dim(), reconstruction.map))
}

#[derive(Serialize)]
struct ReconstructionResult {
    reconstruction: ReconstructionReport,
    norms: NormProfile,
}

pub fn eval_recon(ctx: &Context) -> Result<String, CliError> {
    let taxonomy = ctx.config.taxonomy()?;
    let table = ctx.embeddings()?;
    if !table.covers(&taxonomy) {
        return Err(CliError::Config("embeddings do not cover the taxonomy".into()));
    }
    let reconstruction = evaluate_reconstruction(&table, &closure_pairs(&taxonomy))?;
    let norms = hierarchy_norm_profile(&table, &taxonomy);
    ctx.write("eval_recon.json", "eval-recon", ReconstructionResult { reconstruction, norms })?;
    Ok(format!("eval-recon: MAP {:.4}, mean rank {:.3}", reconstruction.map, reconstruction.mean_rank))
}

pub fn train_estimator(ctx: &Context) -> Result<String, CliError> {
    let taxonomy = ctx.config.taxonomy()?;
    let table = ctx.embeddings()?;
    let data = read_weak_labels(&ctx.weak_labels_path()?)?;
    let trained = train_goal_estimator(&data, &taxonomy, &table, &ctx.config.estimator)?;
    if trained.report.epoch_losses.iter().any(|l| !l.is_finite()) {
        return Err(CliError::Numerical("estimator loss is not finite".into()));
    }
    ctx.write(ESTIMATOR, "train-estimator", trained.model.to_checkpoint(&ctx.config.estimator))?;
    let acc = trained.report.eval.map(|e| format!("{:.4}", e.accuracy)).unwrap_or_else(|| "n/a".into());
    let line =
        format!("train-estimator: {} train / {} held out records, held-out accuracy {acc}", trained.report.train_size, trained.report.eval_size);
    ctx.write::<EstimatorReport>("train_estimator.json", "train-estimator", trained.report)?;
    Ok(line)
}

#[derive(Serialize)]
struct EstimatorEval {
    records: usize,
    report: MulticlassReport,
    within_category_rate: f64,
}

pub fn eval_estimator(ctx: &Context) -> Result<String, CliError> {
    let taxonomy = ctx.config.taxonomy()?;
    let est_path = ctx.input(&ctx.inputs.estimator, ESTIMATOR, "estimator checkpoint")?;
    let ckpt = read_artifact::<EstimatorCheckpoint>(&est_path)?.result;
    let (fraction, seed) = (ckpt.config.eval_fraction, ckpt.config.seed);
    let est = GoalEstimatorModel::from_checkpoint(ckpt)?;
    let data = read_weak_labels(&ctx.weak_labels_path()?)?;
    let (_, held_out) = split_weak_labels(&data, fraction, seed);
    let records = if held_out.is_empty() { data } else { held_out };
    let report = evaluate_estimator(&est, &records)?;
    let pred: Vec<GoalId> = records.iter().map(|r| est.classify(&r.page).goal).collect();
    let truth: Vec<GoalId> = records.iter().map(|r| r.goal).collect();
    let confusion = goal_confusion_matrix(&pred, &truth, &taxonomy)?;
    ctx.write(
        "eval_estimator.json",
        "eval-estimator",
        EstimatorEval { records: records.len(), report, within_category_rate: confusion.within_category_rate },
    )?;
    Ok(format!("eval-estimator: {} records, accuracy {:.4}, macro F1 {:.4}", records.len(), report.accuracy, report.macro_f1))
}

#[derive(Serialize, Deserialize)]
struct TrainedTask {
    epoch_losses: Vec<f64>,
    instances: usize,
    checkpoint: TaskCheckpoint,
}

pub fn train_rec(ctx: &Context) -> Result<String, CliError> {
    let est = ctx.estimator()?;
    let mut cache = GoalRepCache::new();
    let (_, data) = ctx.task_data(&est, &mut cache)?;
    let train = rec_instances(&data.split.train, &data, &est, &mut cache, false);
    let mut model =
        RecommenderModel::new(ctx.config.session.clone(), est.goal_dim(), data.candidates.clone(), ctx.config.train.hidden, ctx.config.seed)?;
    let losses = train_task(&mut model, &train, &ctx.config.train)?;
    let line = format!(
        "train-rec: {} instances, {} candidates, final loss {:.6}",
        train.len(),
        data.candidates.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    ctx.write(REC_MODEL, "train-rec", TrainedTask { epoch_losses: losses, instances: train.len(), checkpoint: model.to_checkpoint() })?;
    Ok(line)
}

#[derive(Serialize)]
struct SplitMetrics<M> {
    instances: usize,
    metrics: Option<M>,
}

#[derive(Serialize)]
struct TaskEval<M> {
    warm: SplitMetrics<M>,
    cold: SplitMetrics<M>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

pub fn eval_rec(ctx: &Context) -> Result<String, CliError> {
    let ckpt_path = ctx.input(&ctx.inputs.checkpoint, REC_MODEL, "checkpoint")?;
    let trained: TrainedTask = read_artifact(&ckpt_path)?.result;
    let model = RecommenderModel::from_checkpoint(trained.checkpoint)?;
    let est = ctx.estimator()?;
    let mut cache = GoalRepCache::new();
    let (_, data) = ctx.task_data(&est, &mut cache)?;
    let data = TaskData { candidates: model.candidates.clone(), ..data };
    let mut split = |sessions: &[BrowsingSession]| -> Result<SplitMetrics<RankMetricsReport>, CliError> {
        let inst = rec_instances(sessions, &data, &est, &mut cache, false);
        let metrics = if inst.is_empty() { None } else { Some(evaluate_recommender(&model, &inst)?) };
        Ok(SplitMetrics { instances: inst.len(), metrics })
    };
    let result = TaskEval { warm: split(&data.split.test_warm)?, cold: split(&data.split.test_cold)? };
    let line = format!(
        "eval-rec: warm MRR@10 {} over {} sessions, cold MRR@10 {} over {} sessions",
        fmt_opt(result.warm.metrics.map(|m| m.mrr10)),
        result.warm.instances,
        fmt_opt(result.cold.metrics.map(|m| m.mrr10)),
        result.cold.instances
    );
    ctx.write("eval_rec.json", "eval-rec", result)?;
    Ok(line)
}

pub fn train_revisit(ctx: &Context) -> Result<String, CliError> {
    let est = ctx.estimator()?;
    let mut cache = GoalRepCache::new();
    let (_, data) = ctx.task_data(&est, &mut cache)?;
    let train = revisit_instances(&data.split.train, &data, &est, &mut cache, false)?;
    let mut model = RevisitModel::new(ctx.config.session.clone(), est.goal_dim(), ctx.config.train.hidden, ctx.config.seed)?;
    let losses = train_task(&mut model, &train, &ctx.config.train)?;
    let line = format!("train-revisit: {} sessions, final loss {:.6}", train.len(), losses.last().copied().unwrap_or(f64::NAN));
    ctx.write(REVISIT_MODEL, "train-revisit", TrainedTask { epoch_losses: losses, instances: train.len(), checkpoint: model.to_checkpoint() })?;
    Ok(line)
}

pub fn eval_revisit(ctx: &Context) -> Result<String, CliError> {
    let ckpt_path = ctx.input(&ctx.inputs.checkpoint, REVISIT_MODEL, "checkpoint")?;
    let trained: TrainedTask = read_artifact(&ckpt_path)?.result;
    let model = RevisitModel::from_checkpoint(trained.checkpoint)?;
    let est = ctx.estimator()?;
    let mut cache = GoalRepCache::new();
    let (_, data) = ctx.task_data(&est, &mut cache)?;
    let mut split = |sessions: &[BrowsingSession]| -> Result<SplitMetrics<ClsMetricsReport>, CliError> {
        let inst = revisit_instances(sessions, &data, &est, &mut cache, false)?;
        let metrics = if inst.is_empty() { None } else { Some(evaluate_revisit(&model, &inst)?) };
        Ok(SplitMetrics { instances: inst.len(), metrics })
    };
    let result = TaskEval { warm: split(&data.split.test_warm)?, cold: split(&data.split.test_cold)? };
    let line = format!(
        "eval-revisit: warm F1 {} over {} sessions, cold F1 {} over {} sessions",
        fmt_opt(result.warm.metrics.map(|m| m.f1)),
        result.warm.instances,
        fmt_opt(result.cold.metrics.map(|m| m.f1)),
        result.cold.instances
    );
    ctx.write("eval_revisit.json", "eval-revisit", result)?;
    Ok(line)
}

#[derive(Serialize, Deserialize)]
struct SessionClusters {
    pages: Vec<String>,
    k: usize,
    goal: Vec<usize>,
    content: Vec<usize>,
}

pub fn cluster(ctx: &Context) -> Result<String, CliError> {
    let est = ctx.estimator()?;
    let truth = ctx.truth()?;
    let events = read_events(&ctx.events_path()?)?;
    let sessions = sessions_from_events(&events, &ctx.config.protocol)?;
    let baseline = ContentBaseline::new(&ctx.config.session, est.goal_dim(), ctx.config.seed)?;
    let mut cache = GoalRepCache::new();
    let mut out = BTreeMap::new();
    for s in sessions.iter().filter(|s| s.len() >= 2) {
        let k = session_cluster_count(s, &truth.page_goal)?;
        let seq = goweb::session_model::VisitSequence::new(s.pages(), &est, &mut cache);
        let goal = cluster_session_goals(&seq, k, ctx.config.seed)?.assignments;
        let content_points: Vec<Vec<f64>> = s.visits.iter().map(|v| baseline.embed(&v.page)).collect();
        let content = kmeans_pp(&content_points, k, ctx.config.seed)?.assignments;
        out.insert(s.session_id.clone(), SessionClusters { pages: s.visits.iter().map(|v| v.page.page_id.clone()).collect(), k, goal, content });
    }
    if out.is_empty() {
        return Err(CliError::Core(goweb::GowebError::Empty("sessions with two or more visits")));
    }
    let line = format!("cluster: {} sessions clustered", out.len());
    ctx.write(CLUSTERS, "cluster", out)?;
    Ok(line)
}

#[derive(Serialize)]
struct ClusterEval {
    sessions: usize,
    goal: ClusterMetricsReport,
    content: ClusterMetricsReport,
}

pub fn eval_cluster(ctx: &Context) -> Result<String, CliError> {
    let path = ctx.input(&ctx.inputs.clusters, CLUSTERS, "cluster assignments")?;
    let clusters: BTreeMap<String, SessionClusters> = read_artifact(&path)?.result;
    let truth = ctx.truth()?;
    let (mut goal, mut content) = (ClusterMetricsReport::default(), ClusterMetricsReport::default());
    for c in clusters.values() {
        let labels: Vec<GoalId> = c
            .pages
            .iter()
            .map(|p| truth.page_goal.get(p).copied().ok_or_else(|| CliError::Config(format!("no goal label for page {p}"))))
            .collect::<Result<_, _>>()?;
        let g = clustering_agreement(&c.goal, &labels)?;
        let b = clustering_agreement(&c.content, &labels)?;
        goal.nmi += g.nmi;
        goal.ami += g.ami;
        content.nmi += b.nmi;
        content.ami += b.ami;
    }
    let n = clusters.len().max(1) as f64;
    for r in [&mut goal, &mut content] {
        r.nmi /= n;
        r.ami /= n;
    }
    let line = format!(
        "eval-cluster: {} sessions, goal NMI {:.4} AMI {:.4}, content NMI {:.4} AMI {:.4}",
        clusters.len(),
        goal.nmi,
        goal.ami,
        content.nmi,
        content.ami
    );
    ctx.write("eval_cluster.json", "eval-cluster", ClusterEval { sessions: clusters.len(), goal, content })?;
    Ok(line)
}

#[derive(Serialize)]
struct Analysis {
    confusion: ConfusionReport,
    within_category_rate: f64,
    durations: DurationReport,
    single_goal_rate: BTreeMap<GoalId, f64>,
}

fn predicted_category(est: &GoalEstimatorModel, taxonomy: &GoalTaxonomy, page: &goweb::page_encoder::WebPage) -> Option<GoalId> {
    taxonomy.category_of(est.classify(page).goal)
}

pub fn analyze(ctx: &Context) -> Result<String, CliError> {
    let taxonomy = ctx.config.taxonomy()?;
    let est_path = ctx.input(&ctx.inputs.estimator, ESTIMATOR, "estimator checkpoint")?;
    let ckpt = read_artifact::<EstimatorCheckpoint>(&est_path)?.result;
    let (fraction, seed) = (ckpt.config.eval_fraction, ckpt.config.seed);
    let est = GoalEstimatorModel::from_checkpoint(ckpt)?;

    let data = read_weak_labels(&ctx.weak_labels_path()?)?;
    let (_, held_out) = split_weak_labels(&data, fraction, seed);
    let records = if held_out.is_empty() { data } else { held_out };
    let pred: Vec<GoalId> = records.iter().map(|r| est.classify(&r.page).goal).collect();
    let truth: Vec<GoalId> = records.iter().map(|r| r.goal).collect();
    let confusion = goal_confusion_matrix(&pred, &truth, &taxonomy)?;

    let events = read_events(&ctx.events_path()?)?;
    let sessions = segment_sessions(&events, SESSION_GAP_SECS)?;
    let mut category_of_page = BTreeMap::new();
    let mut session_categories = Vec::with_capacity(sessions.len());
    for s in &sessions {
        let mut cats = Vec::with_capacity(s.len());
        for v in &s.visits {
            let c = match category_of_page.get(&v.page.page_id) {
                Some(c) => Some(*c),
                None => {
                    let c = predicted_category(&est, &taxonomy, &v.page);
                    if let Some(c) = c {
                        category_of_page.insert(v.page.page_id.clone(), c);
                    }
                    c
                }
            };
            cats.extend(c);
        }
        if !cats.is_empty() {
            session_categories.push(cats);
        }
    }
    let revisits = extract_revisit_events(&sessions);
    if revisits.is_empty() {
        return Err(CliError::Core(goweb::GowebError::Empty("revisit events")));
    }
    let durations = revisit_duration_buckets(&revisits, &category_of_page)?;
    let single_goal_rate = single_goal_session_rate(&session_categories);
    if single_goal_rate.is_empty() {
        return Err(CliError::Core(goweb::GowebError::Empty("sessions with categorized visits")));
    }
    let line = format!(
        "analyze: within-category error rate {:.4} over {} errors, {} revisits, {} categories",
        confusion.within_category_rate,
        confusion.errors,
        revisits.len(),
        single_goal_rate.len()
    );
    let within_category_rate = confusion.within_category_rate;
    ctx.write("analysis.json", "analyze", Analysis { confusion, within_category_rate, durations, single_goal_rate })?;
    Ok(line)
}

pub fn gradcheck(ctx: &Context) -> Result<String, CliError> {
    let suite = gradient_suite(ctx.config.seed)?;
    let failed: Vec<&GradCheckEntry> = suite.iter().filter(|e| !e.report.passed).collect();
    let worst = suite.iter().map(|e| e.report.max_rel_err).fold(0.0, f64::max);
    ctx.write("gradcheck.json", "gradcheck", &suite)?;
    if !failed.is_empty() {
        let names: Vec<&str> = failed.iter().map(|e| e.path.as_str()).collect();
        return Err(CliError::Numerical(format!("gradient check failed for {}", names.join(", "))));
    }
    Ok(format!("gradcheck: {} paths passed, max relative error {worst:.3e}", suite.len()))
}
