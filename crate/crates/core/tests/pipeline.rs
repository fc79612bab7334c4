use goweb::dataio::{synth_generate, SynthConfig, WeakLabelLine};
use goweb::experiment::{
    evaluate_clustering, evaluate_recommender, evaluate_revisit, prepare_task_data, rec_instances, revisit_instances, sessions_from_events,
    split_by_fraction, ProtocolConfig,
};
use goweb::goal_embed::{train_goal_embeddings, ReconTrainConfig};
use goweb::nn::AdamConfig;
use goweb::page_encoder::{train_goal_estimator, ContentSpec, EstimatorConfig};
use goweb::session_model::{GoalRepCache, ModelMode, SessionModelConfig};
use goweb::tasks::{train_task, RecommenderModel, RevisitModel, TaskTrainConfig};
use goweb::taxonomy::GoalTaxonomy;

#[test]
fn small_end_to_end_run() {
    let tax = GoalTaxonomy::example();
    let goals = train_goal_embeddings(&tax, &ReconTrainConfig { dim: 8, epochs: 20, seed: 1, ..Default::default() }).unwrap().table;
    let corpus = synth_generate(&SynthConfig { users: 40, pages_per_goal: 20, seed: 1, ..Default::default() }, &tax).unwrap();
    let weak: Vec<_> = corpus.weak_labels.iter().map(WeakLabelLine::to_record).collect();
    let est_cfg = EstimatorConfig {
        host_buckets: 64,
        host_dim: 8,
        content: ContentSpec::Hashed { buckets: 512, dim: 16 },
        epochs: 20,
        batch_size: 16,
        adam: AdamConfig::with_lr(0.01),
        seed: 1,
        ..Default::default()
    };
    let trained = train_goal_estimator(&weak, &tax, &goals, &est_cfg).unwrap();
    let acc = trained.report.eval.unwrap().accuracy;
    assert!(acc > 0.5, "held-out accuracy {acc}");
    let est = trained.model;

    let protocol = ProtocolConfig { min_page_count: 2, ..Default::default() };
    let sessions = sessions_from_events(&corpus.events, &protocol).unwrap();
    let spec = split_by_fraction(&sessions, protocol.train_fraction, protocol.test_fraction).unwrap();
    let mut cache = GoalRepCache::new();
    let data = prepare_task_data(&sessions, &spec, &protocol, &est, &mut cache).unwrap();
    assert!(!data.split.train.is_empty() && !data.split.test_warm.is_empty());

    let session = SessionModelConfig {
        mode: ModelMode::Full,
        content_dim: 8,
        heads: 2,
        host_buckets: 64,
        host_dim: 8,
        content: ContentSpec::Hashed { buckets: 512, dim: 16 },
        history_limit: 50,
    };
    let train_cfg = TaskTrainConfig { hidden: 16, epochs: 2, batch_size: 16, adam: AdamConfig::with_lr(0.005), seed: 1 };

    let train = rec_instances(&data.split.train, &data, &est, &mut cache, false);
    let test = rec_instances(&data.split.test_warm, &data, &est, &mut cache, false);
    let mut rec = RecommenderModel::new(session.clone(), est.goal_dim(), data.candidates.clone(), 16, 1).unwrap();
    let losses = train_task(&mut rec, &train, &train_cfg).unwrap();
    assert!(losses.iter().all(|l| l.is_finite()));
    let r = evaluate_recommender(&rec, &test).unwrap();
    assert!(r.hr1 <= r.hr5 && r.hr5 <= r.hr10 && r.hr10 <= 1.0);

    let train = revisit_instances(&data.split.train, &data, &est, &mut cache, false).unwrap();
    let test = revisit_instances(&data.split.test_warm, &data, &est, &mut cache, false).unwrap();
    let mut rev = RevisitModel::new(session, est.goal_dim(), 16, 1).unwrap();
    train_task(&mut rev, &train, &train_cfg).unwrap();
    let c = evaluate_revisit(&rev, &test).unwrap();
    assert!((0.0..=1.0).contains(&c.f1));

    let clusters = evaluate_clustering(&sessions, &corpus.truth.page_goal, |p| est.estimate_visit_goal(p), 1).unwrap();
    assert!(clusters.nmi > 0.5, "{clusters:?}");
}
