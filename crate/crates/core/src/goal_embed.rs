//! Intrinsic goal representations learned by reconstructing the taxonomy
//! closure inside the Poincaré ball.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GowebError, Result};
use crate::manifold::{self, BallPoint};
use crate::taxonomy::{closure_pairs, negative_pool, ClosureRelation, GoalId, GoalTaxonomy, Layer};

#[derive(Clone, Debug, PartialEq)]
pub struct GoalEmbeddingTable {
    ids: Vec<GoalId>,
    points: Vec<BallPoint>,
    index: BTreeMap<GoalId, usize>,
}

impl GoalEmbeddingTable {
    pub fn new(entries: Vec<(GoalId, BallPoint)>) -> Result<Self> {
        let mut entries = entries;
        entries.sort_by_key(|(id, _)| *id);
        let dim = entries.first().map(|(_, p)| p.dim()).unwrap_or(0);
        let mut index = BTreeMap::new();
        for (i, (id, p)) in entries.iter().enumerate() {
            if p.dim() != dim {
                return Err(GowebError::DimMismatch { expected: dim, got: p.dim() });
            }
            if index.insert(*id, i).is_some() {
                return Err(GowebError::DuplicateId(id.0));
            }
        }
        let (ids, points) = entries.into_iter().unzip();
        Ok(GoalEmbeddingTable { ids, points, index })
    }

    pub fn dim(&self) -> usize {
        self.points.first().map(BallPoint::dim).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Goal ids in ascending order; row `i` of every table-derived matrix
    /// refers to `ids()[i]`.
    pub fn ids(&self) -> &[GoalId] {
        &self.ids
    }

    pub fn points(&self) -> &[BallPoint] {
        &self.points
    }

    pub fn get(&self, id: GoalId) -> Option<&BallPoint> {
        self.index.get(&id).map(|&i| &self.points[i])
    }

    pub fn position(&self, id: GoalId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (GoalId, &BallPoint)> {
        self.ids.iter().copied().zip(self.points.iter())
    }

    pub fn covers(&self, t: &GoalTaxonomy) -> bool {
        self.len() == t.len() && t.ids().iter().all(|id| self.index.contains_key(id))
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| GowebError::io(path, e))
    }

    /// One line per goal: `goal_id<TAB>c1,c2,...` with 17 significant digits.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, p) in self.iter() {
            let coords: Vec<String> = p.coords().iter().map(|c| format!("{c:.16e}")).collect();
            let _ = writeln!(out, "{}\t{}", id.0, coords.join(","));
        }
        out
    }

    pub fn from_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| GowebError::Parse { path: origin.to_path_buf(), line: lineno + 1, msg };
            let (id, coords) = line.split_once('\t').ok_or_else(|| parse_err("missing tab separator".into()))?;
            let id: u32 = id.trim().parse().map_err(|e| parse_err(format!("bad goal id: {e}")))?;
            let coords = coords
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(format!("bad coordinate: {e}")))?;
            let point = BallPoint::new(coords).map_err(|e| parse_err(e.to_string()))?;
            entries.push((GoalId(id), point));
        }
        Self::new(entries)
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GowebError::io(path, e))?;
        Self::from_tsv(&text, path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconTrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub lr: f64,
    pub init_scale: f64,
    pub eps_ball: f64,
    pub seed: u64,
}

impl Default for ReconTrainConfig {
    fn default() -> Self {
        ReconTrainConfig { dim: 64, epochs: 50, batch_size: 10, negatives: 50, lr: 0.3, init_scale: 1e-3, eps_ball: manifold::EPS_BALL, seed: 0 }
    }
}

impl ReconTrainConfig {
    pub fn validate(&self) -> Result<()> {
        manifold::ManifoldConfig { dim: self.dim, eps_ball: self.eps_ball, lr_rsgd: self.lr }.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.negatives == 0 {
            return Err(GowebError::Config("epochs, batch_size and negatives must be positive".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale * (self.dim as f64).sqrt() < 1.0) {
            return Err(GowebError::Config(format!("init_scale {} does not fit inside the ball", self.init_scale)));
        }
        Ok(())
    }
}

pub fn init_embeddings(t: &GoalTaxonomy, cfg: &ReconTrainConfig) -> GoalEmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let entries = t
        .ids()
        .into_iter()
        .map(|id| {
            let coords = (0..cfg.dim).map(|_| rng.random_range(-cfg.init_scale..=cfg.init_scale)).collect();
            (id, BallPoint::from_vec_unchecked(coords))
        })
        .collect();
    GoalEmbeddingTable::new(entries).expect("taxonomy ids are unique")
}

/// Softmax reconstruction loss of one positive pair against its negatives:
/// `-log(exp(-d(u,v)) / sum_{w in {v} + negatives} exp(-d(u,w)))`.
pub fn reconstruction_loss(pair: (GoalId, GoalId), negatives: &[GoalId], table: &GoalEmbeddingTable) -> Result<f64> {
    let get = |id: GoalId| table.get(id).ok_or(GowebError::UnknownGoal(id.0));
    let u = get(pair.0)?;
    let mut dists = Vec::with_capacity(negatives.len() + 1);
    dists.push(manifold::poincare_distance(u, get(pair.1)?)?);
    for &n in negatives {
        dists.push(manifold::poincare_distance(u, get(n)?)?);
    }
    Ok(dists[0] + log_sum_exp_neg(&dists))
}

fn log_sum_exp_neg(dists: &[f64]) -> f64 {
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    -min + dists.iter().map(|d| (min - d).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug)]
pub struct TrainedGoalEmbeddings {
    pub table: GoalEmbeddingTable,
    /// Mean per-item reconstruction loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// RSGD over shuffled oriented closure pairs. Each pair is trained in both
/// orientations except where the anchor has no negatives (the root).
pub fn train_goal_embeddings(t: &GoalTaxonomy, cfg: &ReconTrainConfig) -> Result<TrainedGoalEmbeddings> {
    cfg.validate()?;
    let relation = closure_pairs(t);
    let table = init_embeddings(t, cfg);
    let pos = |id: GoalId| table.position(id).expect("table covers taxonomy");
    let pools: Vec<Vec<usize>> = table.ids().iter().map(|&g| negative_pool(t, &relation, g).into_iter().map(pos).collect()).collect();

    let mut items: Vec<(usize, usize)> = Vec::with_capacity(relation.len() * 2);
    for (a, b) in relation.iter() {
        for (u, v) in [(pos(a), pos(b)), (pos(b), pos(a))] {
            if !pools[u].is_empty() {
                items.push((u, v));
            }
        }
    }

    let mut points: Vec<Vec<f64>> = table.points().iter().map(|p| p.coords().to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let dim = cfg.dim;

    for epoch in 0..cfg.epochs {
        items.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in items.chunks(cfg.batch_size) {
            let mut grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for &(u, v) in batch {
                let pool = &pools[u];
                let mut cands = Vec::with_capacity(cfg.negatives + 1);
                cands.push(v);
                cands.extend((0..cfg.negatives).map(|_| pool[rng.random_range(0..pool.len())]));
                let dists: Vec<f64> = cands.iter().map(|&c| manifold::distance_raw(&points[u], &points[c])).collect();
                total += dists[0] + log_sum_exp_neg(&dists);

                let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
                let weights: Vec<f64> = dists.iter().map(|d| (min - d).exp()).collect();
                let z: f64 = weights.iter().sum();
                for (j, &c) in cands.iter().enumerate() {
                    let coef = if j == 0 { 1.0 } else { 0.0 } - weights[j] / z;
                    if coef == 0.0 {
                        continue;
                    }
                    if let Some(g) = manifold::distance_grad_raw(&points[u], &points[c]) {
                        let acc = grads.entry(u).or_insert_with(|| vec![0.0; dim]);
                        acc.iter_mut().zip(&g).for_each(|(a, gi)| *a += coef * gi);
                    }
                    if let Some(g) = manifold::distance_grad_raw(&points[c], &points[u]) {
                        let acc = grads.entry(c).or_insert_with(|| vec![0.0; dim]);
                        acc.iter_mut().zip(&g).for_each(|(a, gi)| *a += coef * gi);
                    }
                }
            }
            for (idx, g) in grads {
                let step = manifold::rescale_raw(&points[idx], &g);
                let moved: Vec<f64> = points[idx].iter().zip(&step).map(|(x, s)| x - cfg.lr * s).collect();
                points[idx] = manifold::project_raw(moved, cfg.eps_ball);
            }
        }
        let mean = total / items.len().max(1) as f64;
        log::debug!("goal embedding epoch {}: mean loss {:.6}", epoch + 1, mean);
        epoch_losses.push(mean);
    }

    let entries = table.ids().iter().copied().zip(points.into_iter().map(BallPoint::from_vec_unchecked)).collect();
    Ok(TrainedGoalEmbeddings { table: GoalEmbeddingTable::new(entries)?, epoch_losses })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub mean_rank: f64,
    pub map: f64,
}

/// Ranks each true partner among the anchor's non-related goals by distance.
pub fn evaluate_reconstruction(table: &GoalEmbeddingTable, relation: &ClosureRelation) -> Result<ReconstructionReport> {
    let ids = table.ids();
    let mut rank_sum = 0.0;
    let mut rank_count = 0usize;
    let mut ap_sum = 0.0;
    let mut ap_count = 0usize;
    for &u in ids {
        let pu = table.get(u).expect("id from table");
        let mut scored: Vec<(f64, GoalId, bool)> = ids
            .iter()
            .filter(|&&w| w != u)
            .map(|&w| (manifold::distance_raw(pu.coords(), table.get(w).expect("id").coords()), w, relation.related(u, w)))
            .collect();
        if !scored.iter().any(|s| s.2) {
            continue;
        }
        for &(d, _, rel) in &scored {
            if rel {
                let closer = scored.iter().filter(|s| !s.2 && s.0 < d).count();
                rank_sum += 1.0 + closer as f64;
                rank_count += 1;
            }
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (i, s) in scored.iter().enumerate() {
            if s.2 {
                hits += 1;
                precision_sum += hits as f64 / (i + 1) as f64;
            }
        }
        ap_sum += precision_sum / hits as f64;
        ap_count += 1;
    }
    if rank_count == 0 {
        return Err(GowebError::Empty("relation has no pairs covered by the table"));
    }
    Ok(ReconstructionReport { mean_rank: rank_sum / rank_count as f64, map: ap_sum / ap_count as f64 })
}

/// Mean Euclidean norm per taxonomy layer; `None` for layers with no nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormProfile {
    pub root: Option<f64>,
    pub category: Option<f64>,
    pub leaf: Option<f64>,
}

pub fn hierarchy_norm_profile(table: &GoalEmbeddingTable, t: &GoalTaxonomy) -> NormProfile {
    let mean_for = |layer: Layer| {
        let norms: Vec<f64> = t.with_layer(layer).iter().filter_map(|&id| table.get(id)).map(BallPoint::norm).collect();
        (!norms.is_empty()).then(|| norms.iter().sum::<f64>() / norms.len() as f64)
    };
    NormProfile { root: mean_for(Layer::Root), category: mean_for(Layer::Category), leaf: mean_for(Layer::Leaf) }
}
