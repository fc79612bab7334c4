//! Finite-difference gradient suite over every differentiable path: the
//! Poincaré distance, the kernel layers, both attention blocks, the goal
//! estimator and both task heads end to end in every model mode.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::goal_embed::GoalEmbeddingTable;
use crate::manifold::{distance_gradient, poincare_distance, BallPoint};
use crate::nn::gradcheck::{check_params, check_values, GradCheckReport, FD_STEP};
use crate::nn::ops::softmax_cross_entropy;
use crate::nn::{ContextPool, Linear, Matrix, MultiHeadAttention, ParamSet};
use crate::page_encoder::{ContentSpec, EstimatorConfig, GoalEstimatorModel, WeakLabelRecord, WebPage};
use crate::session_model::{GoalRepCache, ModelMode, SessionModelConfig, UserHistory, VisitSequence};
use crate::tasks::{CandidateSet, RecInstance, RecommenderModel, RevisitInstance, RevisitModel, TaskModel};
use crate::taxonomy::GoalId;

/// Relative tolerance every path must meet.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub path: String,
    pub report: GradCheckReport,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized data")
}

fn weighted_sum(a: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(w).map(|(x, y)| x * y).sum()
}

fn sharpen(ps: &mut ParamSet, names: &[String], factor: f64) {
    for n in names {
        ps.value_mut(n).scale(factor);
    }
}

fn distance_check(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut report: Option<GradCheckReport> = None;
    for _ in 0..20 {
        let point = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
            BallPoint::new(v).expect("inside the ball")
        };
        let (u, v) = (point(rng), point(rng));
        let grad = distance_gradient(&u, &v)?;
        let r = check_values(
            u.coords(),
            &grad,
            |x| poincare_distance(&BallPoint::new(x.to_vec()).expect("inside"), &v).expect("distinct"),
            FD_STEP,
            GRAD_TOLERANCE,
        );
        report = Some(match report {
            Some(acc) => acc.merge(r),
            None => r,
        });
    }
    Ok(report.expect("at least one pair"))
}

fn linear_check(rng: &mut ChaCha8Rng) -> Vec<GradCheckEntry> {
    let layer = Linear::new("lin", 5, 3);
    let mut ps = ParamSet::new();
    layer.init(&mut ps, rng);
    let x = random_matrix(rng, 4, 5);
    let c = random_matrix(rng, 4, 3);
    let dx = layer.backward(&mut ps, &x, &c);
    let loss = |p: &ParamSet| weighted_sum(layer.forward(p, &x).as_slice(), c.as_slice());
    let params = check_params(&ps, &loss, &[layer.w(), layer.b()], FD_STEP, GRAD_TOLERANCE);
    let input = check_values(
        x.as_slice(),
        dx.as_slice(),
        |v| weighted_sum(layer.forward(&ps, &Matrix::new(4, 5, v.to_vec()).expect("sized")).as_slice(), c.as_slice()),
        FD_STEP,
        GRAD_TOLERANCE,
    );
    vec![entry("linear", params.merge(input))]
}

fn softmax_ce_check(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let logits: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
    let (_, grad) = softmax_cross_entropy(&logits, 2)?;
    Ok(check_values(&logits, &grad, |z| softmax_cross_entropy(z, 2).expect("valid label").0, FD_STEP, GRAD_TOLERANCE))
}

fn attention_checks(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckEntry>> {
    let (n, d) = (5, 8);
    let mask = vec![true, true, false, true, true];
    let x = random_matrix(rng, n, d);

    let mha = MultiHeadAttention::new("mha", d, 2)?;
    let mut ps = ParamSet::new();
    mha.init(&mut ps, rng);
    sharpen(&mut ps, &mha.param_names(), 4.0);
    let c = random_matrix(rng, n, d);
    let (_, cache) = mha.forward(&ps, &x, &mask)?;
    let dx = mha.backward(&mut ps, &cache, &c);
    let loss = |p: &ParamSet, x: &Matrix| weighted_sum(mha.forward(p, x, &mask).expect("valid input").0.as_slice(), c.as_slice());
    let mha_report = check_params(&ps, &|p| loss(p, &x), &mha.param_names(), FD_STEP, GRAD_TOLERANCE).merge(check_values(
        x.as_slice(),
        dx.as_slice(),
        |v| loss(&ps, &Matrix::new(n, d, v.to_vec()).expect("sized")),
        FD_STEP,
        GRAD_TOLERANCE,
    ));

    let pool = ContextPool::new("pool", d, 2)?;
    let mut ps = ParamSet::new();
    pool.init(&mut ps, rng);
    sharpen(&mut ps, &pool.param_names(), 4.0);
    let c: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, cache) = pool.forward(&ps, &x, &mask)?;
    let dx = pool.backward(&mut ps, &cache, &c);
    let loss = |p: &ParamSet, x: &Matrix| weighted_sum(&pool.forward(p, x, &mask).expect("valid input").0, &c);
    let pool_report = check_params(&ps, &|p| loss(p, &x), &pool.param_names(), FD_STEP, GRAD_TOLERANCE).merge(check_values(
        x.as_slice(),
        dx.as_slice(),
        |v| loss(&ps, &Matrix::new(n, d, v.to_vec()).expect("sized")),
        FD_STEP,
        GRAD_TOLERANCE,
    ));
    Ok(vec![entry("multi_head_attention", mha_report), entry("context_pool", pool_report)])
}

fn small_estimator(goal_dim: usize, seed: u64) -> Result<GoalEstimatorModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let goals = GoalEmbeddingTable::new(
        (0..4).map(|g| Ok((GoalId(g), BallPoint::new((0..goal_dim).map(|_| rng.random_range(-0.4..0.4)).collect())?))).collect::<Result<Vec<_>>>()?,
    )?;
    let cfg = EstimatorConfig { host_buckets: 5, host_dim: 3, content: ContentSpec::Hashed { buckets: 9, dim: 3 }, seed, ..Default::default() };
    let mut est = GoalEstimatorModel::new(goals, &cfg);
    let names = est.encoder.param_names();
    sharpen(&mut est.params, &names, 10.0);
    Ok(est)
}

fn estimator_check(seed: u64) -> Result<GradCheckReport> {
    let est = small_estimator(4, seed)?;
    let rec = WeakLabelRecord { page: WebPage::new("p", "h.example", "cheap flights to lisbon"), goal: GoalId(2) };
    let mut scratch = est.clone();
    scratch.params.zero_grad();
    scratch.accumulate_record(&rec, 1.0)?;
    let names = scratch.encoder.param_names();
    Ok(check_params(
        &scratch.params,
        &|p: &ParamSet| {
            let mut m = est.clone();
            m.params = p.clone();
            m.loss(&rec).expect("known goal")
        },
        &names,
        FD_STEP,
        GRAD_TOLERANCE,
    ))
}

fn small_session_config(mode: ModelMode) -> SessionModelConfig {
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

fn head_checks(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let goal_dim = 4;
    let est = small_estimator(goal_dim, seed)?;
    let mut cache = GoalRepCache::new();
    let pages: Vec<WebPage> = [("a", "h1", "x y"), ("b", "h2", "y z"), ("c", "h1", "q"), ("d", "h3", "x q w")]
        .iter()
        .map(|(id, host, title)| WebPage::new(*id, *host, title))
        .collect();
    let visits = VisitSequence::new(pages.clone(), &est, &mut cache);
    let hist_pages = vec![WebPage::new("p", "h4", "w v"), WebPage::new("q", "h2", "x")];
    let history = Arc::new(UserHistory {
        user_id: "u".into(),
        pages: hist_pages.iter().map(|p| p.page_id.clone()).collect(),
        goal_reps: hist_pages.iter().map(|p| cache.rep(&est, p)).collect(),
    });
    let candidates = CandidateSet::from(vec!["a".to_string(), "b".into(), "c".into(), "d".into(), "e".into()]);
    let rec_inst =
        RecInstance { user_id: "u".into(), observed: visits.prefix(2), truth: [2usize, 3].into_iter().collect(), history: history.clone() };
    let rev_inst = RevisitInstance { user_id: "u".into(), visits, labels: vec![true, false, true, false], history };

    let mut out = Vec::new();
    for mode in [ModelMode::Full, ModelMode::NonPersonal, ModelMode::ContentOnly] {
        let mut m = RecommenderModel::new(small_session_config(mode), goal_dim, candidates.clone(), 5, seed)?;
        let names = m.param_names();
        sharpen(&mut m.params, &names, 10.0);
        m.params.zero_grad();
        m.accumulate(&rec_inst, 1.0)?;
        let r = check_params(&m.params, &|p: &ParamSet| m.loss_with(p, &rec_inst).expect("valid instance"), &names, FD_STEP, GRAD_TOLERANCE);
        out.push(entry(&format!("recommendation_head/{}", mode_name(mode)), r));

        let mut m = RevisitModel::new(small_session_config(mode), goal_dim, 5, seed)?;
        let names = m.param_names();
        sharpen(&mut m.params, &names, 10.0);
        m.params.zero_grad();
        m.accumulate(&rev_inst, 1.0)?;
        let r = check_params(&m.params, &|p: &ParamSet| m.loss_with(p, &rev_inst).expect("valid instance"), &names, FD_STEP, GRAD_TOLERANCE);
        out.push(entry(&format!("revisit_head/{}", mode_name(mode)), r));
    }
    Ok(out)
}

fn mode_name(mode: ModelMode) -> &'static str {
    match mode {
        ModelMode::Full => "full",
        ModelMode::NonPersonal => "non_personal",
        ModelMode::ContentOnly => "content_only",
    }
}

fn entry(path: &str, report: GradCheckReport) -> GradCheckEntry {
    GradCheckEntry { path: path.to_string(), report }
}

/// Runs every check; the result is deterministic in `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![entry("poincare_distance", distance_check(&mut rng)?)];
    out.extend(linear_check(&mut rng));
    out.push(entry("softmax_cross_entropy", softmax_ce_check(&mut rng)?));
    out.extend(attention_checks(&mut rng)?);
    out.push(entry("goal_estimator", estimator_check(seed)?));
    out.extend(head_checks(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_path_and_passes() {
        let suite = gradient_suite(7).unwrap();
        assert_eq!(suite.len(), 12);
        for e in &suite {
            assert!(e.report.passed, "{}: {:?}", e.path, e.report);
            assert!(e.report.checked > 0, "{}", e.path);
        }
        assert_eq!(gradient_suite(7).unwrap(), suite);
    }
}
