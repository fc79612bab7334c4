//! Event logs, sessionization, filtering, time splits, file formats and the
//! synthetic goal-driven log generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Gamma};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{GowebError, Result};
use crate::page_encoder::{fnv1a, tokenize, ContentVectors, WeakLabelRecord, WebPage};
use crate::session_model::{BrowsingSession, Visit};
use crate::taxonomy::{GoalId, GoalTaxonomy};

/// Sessions split where consecutive events are at least this far apart.
pub const SESSION_GAP_SECS: i64 = 30 * 60;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub user_id: String,
    pub ts: i64,
    pub host: String,
    pub title: String,
    #[serde(default)]
    pub page_id: String,
}

/// Stable page identity for raw logs: a hash of the lowercased host and the
/// whitespace-normalized lowercased title.
pub fn derive_page_id(host: &str, title: &str) -> String {
    let mut key = host.to_lowercase().into_bytes();
    key.push(0x1f);
    key.extend(tokenize(title).join(" ").into_bytes());
    format!("{:016x}", fnv1a(&key))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| GowebError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GowebError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| GowebError::Parse { path: path.into(), line: i + 1, msg: e.to_string() })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| GowebError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| GowebError::io(path, e))?;
    }
    w.flush().map_err(|e| GowebError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| GowebError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| GowebError::Parse { path: path.into(), line: e.line(), msg: e.to_string() })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| GowebError::io(path, e))
}

/// Reads an events file, deriving missing page ids and rejecting negative
/// timestamps.
pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    let mut events: Vec<EventRecord> = read_jsonl(path)?;
    for (i, e) in events.iter_mut().enumerate() {
        if e.ts < 0 {
            return Err(GowebError::Parse { path: path.into(), line: i + 1, msg: format!("negative timestamp {}", e.ts) });
        }
        if e.page_id.is_empty() {
            e.page_id = derive_page_id(&e.host, &e.title);
        }
    }
    Ok(events)
}

pub fn session_id(user_id: &str, index: usize) -> String {
    format!("{user_id}#{index}")
}

/// Groups events by user (users in order of first appearance) and splits each
/// user's time-sorted stream wherever consecutive events are `gap` or more
/// seconds apart.
pub fn segment_sessions(events: &[EventRecord], gap: i64) -> Result<Vec<BrowsingSession>> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_user: BTreeMap<&str, Vec<&EventRecord>> = BTreeMap::new();
    for e in events {
        let list = by_user.entry(e.user_id.as_str()).or_default();
        if list.is_empty() {
            order.push(e.user_id.as_str());
        }
        if list.last().is_some_and(|prev| prev.ts > e.ts) {
            return Err(GowebError::Unsorted(e.user_id.clone()));
        }
        list.push(e);
    }
    let mut sessions = Vec::new();
    for user in order {
        let mut current: Vec<Visit> = Vec::new();
        let mut index = 0;
        for e in &by_user[user] {
            if current.last().is_some_and(|v| e.ts - v.ts >= gap) {
                sessions.push(BrowsingSession {
                    session_id: session_id(user, index),
                    user_id: user.to_string(),
                    visits: std::mem::take(&mut current),
                });
                index += 1;
            }
            current.push(Visit { page: WebPage::new(e.page_id.clone(), e.host.clone(), &e.title), ts: e.ts });
        }
        if !current.is_empty() {
            sessions.push(BrowsingSession { session_id: session_id(user, index), user_id: user.to_string(), visits: current });
        }
    }
    Ok(sessions)
}

/// Removes pages seen fewer than `min_page_count` times in the corpus, then
/// sessions left with fewer than `min_session_len` visits.
pub fn apply_frequency_filters(sessions: &[BrowsingSession], min_page_count: usize, min_session_len: usize) -> Vec<BrowsingSession> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sessions {
        for v in &s.visits {
            *counts.entry(v.page.page_id.as_str()).or_default() += 1;
        }
    }
    sessions
        .iter()
        .filter_map(|s| {
            let visits: Vec<Visit> = s.visits.iter().filter(|v| counts[v.page.page_id.as_str()] >= min_page_count).cloned().collect();
            (visits.len() >= min_session_len).then(|| BrowsingSession { visits, ..s.clone() })
        })
        .collect()
}

/// Training period `[t0, t1)` and test period `[t1, t2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub t0: i64,
    pub t1: i64,
    pub t2: i64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t0 < self.t1 && self.t1 < self.t2 {
            Ok(())
        } else {
            Err(GowebError::Config(format!("split periods must satisfy t0 < t1 < t2, got {self:?}")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WarmColdSplit {
    pub train: Vec<BrowsingSession>,
    pub test_warm: Vec<BrowsingSession>,
    pub test_cold: Vec<BrowsingSession>,
}

/// Assigns sessions by start time; test sessions are warm when their user
/// has a training-period session. Sessions outside `[t0, t2)` are dropped.
pub fn split_warm_cold(sessions: &[BrowsingSession], spec: &SplitSpec) -> Result<WarmColdSplit> {
    spec.validate()?;
    let start = |s: &BrowsingSession| s.start().unwrap_or(i64::MIN);
    let warm_users: BTreeSet<&str> = sessions.iter().filter(|s| (spec.t0..spec.t1).contains(&start(s))).map(|s| s.user_id.as_str()).collect();
    let mut out = WarmColdSplit::default();
    for s in sessions {
        let t = start(s);
        if (spec.t0..spec.t1).contains(&t) {
            out.train.push(s.clone());
        } else if (spec.t1..spec.t2).contains(&t) {
            if warm_users.contains(s.user_id.as_str()) {
                out.test_warm.push(s.clone());
            } else {
                out.test_cold.push(s.clone());
            }
        }
    }
    Ok(out)
}

/// One line of a weak-label file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakLabelLine {
    pub page_id: String,
    pub host: String,
    pub title: String,
    pub goal_id: u32,
}

impl WeakLabelLine {
    pub fn to_record(&self) -> WeakLabelRecord {
        WeakLabelRecord { page: WebPage::new(self.page_id.clone(), self.host.clone(), &self.title), goal: GoalId(self.goal_id) }
    }
}

pub fn read_weak_labels(path: &Path) -> Result<Vec<WeakLabelRecord>> {
    Ok(read_jsonl::<WeakLabelLine>(path)?.iter().map(WeakLabelLine::to_record).collect())
}

/// One line of a precomputed content-vector file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentVectorLine {
    pub page_id: String,
    pub vector: Vec<f64>,
}

pub fn read_content_vectors(path: &Path) -> Result<ContentVectors> {
    let lines: Vec<ContentVectorLine> = read_jsonl(path)?;
    Ok(Arc::new(lines.into_iter().map(|l| (l.page_id, l.vector)).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub users: usize,
    /// Leaf goals in use, taken in id order; 0 means all leaves.
    pub goals: usize,
    pub hosts_per_goal: usize,
    /// When positive, pages draw hosts from one pool of this size shared by
    /// all goals instead of from goal-specific hosts.
    pub shared_hosts: usize,
    pub vocab_per_goal: usize,
    pub pages_per_goal: usize,
    pub title_len: [usize; 2],
    /// Words shared by all goals of a category, and the chance a title token is one.
    pub category_vocab: usize,
    pub category_word_share: f64,
    pub sessions_per_user: [usize; 2],
    pub session_len: [usize; 2],
    pub max_focal_goals: usize,
    /// Dirichlet concentration of each user's goal mixture.
    pub concentration: f64,
    /// Per category in id order; empty spreads affinities evenly over [0.2, 0.9].
    pub revisit_affinity: Vec<f64>,
    /// A visit attempts a revisit with probability `revisit_rate * affinity`.
    pub revisit_rate: f64,
    /// Recency scales in days at affinity 1 and affinity 0.
    pub revisit_scale_days: [f64; 2],
    /// When set, non-revisit visits avoid pages the user saw in earlier
    /// sessions, so every cross-session repeat is a planted revisit.
    pub fresh_pages: bool,
    pub zipf_exponent: f64,
    pub start_ts: i64,
    /// When false, sessions ignore the user's mixture and draw goals uniformly.
    pub history_informative: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 500,
            goals: 0,
            hosts_per_goal: 3,
            shared_hosts: 0,
            vocab_per_goal: 40,
            pages_per_goal: 60,
            title_len: [3, 6],
            category_vocab: 20,
            category_word_share: 0.0,
            sessions_per_user: [4, 10],
            session_len: [10, 20],
            max_focal_goals: 3,
            concentration: 0.2,
            revisit_affinity: Vec::new(),
            revisit_rate: 0.5,
            revisit_scale_days: [1.0, 60.0],
            fresh_pages: true,
            zipf_exponent: 1.0,
            start_ts: 1_700_000_000,
            history_informative: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, taxonomy: &GoalTaxonomy) -> Result<()> {
        let positive = [
            self.users,
            self.hosts_per_goal,
            self.vocab_per_goal,
            self.pages_per_goal,
            self.max_focal_goals,
            self.title_len[0],
            self.sessions_per_user[0],
            self.session_len[0],
        ];
        if positive.contains(&0) {
            return Err(GowebError::Config("synthetic counts must be positive".into()));
        }
        if self.title_len[0] > self.title_len[1] || self.sessions_per_user[0] > self.sessions_per_user[1] || self.session_len[0] > self.session_len[1]
        {
            return Err(GowebError::Config("ranges must be [min, max] with min <= max".into()));
        }
        if self.goals > taxonomy.leaves().len() {
            return Err(GowebError::Config(format!("{} goals requested, taxonomy has {} leaves", self.goals, taxonomy.leaves().len())));
        }
        if !self.revisit_affinity.is_empty() && self.revisit_affinity.len() != taxonomy.categories().len() {
            return Err(GowebError::Config("revisit_affinity needs one value per category".into()));
        }
        if self.revisit_affinity.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(GowebError::Config("revisit affinities must lie in (0, 1]".into()));
        }
        if !self.revisit_scale_days.iter().all(|d| d.is_finite() && *d > 0.0) {
            return Err(GowebError::Config("revisit_scale_days must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.revisit_rate) || !(0.0..=1.0).contains(&self.category_word_share) {
            return Err(GowebError::Config("rates must lie in [0, 1]".into()));
        }
        if self.category_word_share > 0.0 && self.category_vocab == 0 {
            return Err(GowebError::Config("category_word_share needs a category vocabulary".into()));
        }
        if self.concentration <= 0.0 || self.zipf_exponent < 0.0 {
            return Err(GowebError::Config("concentration must be positive and zipf_exponent nonnegative".into()));
        }
        Ok(())
    }

    pub fn affinities(&self, categories: usize) -> Vec<f64> {
        if !self.revisit_affinity.is_empty() {
            return self.revisit_affinity.clone();
        }
        if categories == 1 {
            return vec![0.9];
        }
        (0..categories).map(|i| 0.9 - 0.7 * i as f64 / (categories - 1) as f64).collect()
    }
}

/// Revisit recency scale of a category: geometric between
/// `scale_days[0]` (affinity 1) and `scale_days[1]` (affinity 0). A page
/// last seen `a` seconds before the session is revisited with probability
/// decaying as `exp(-a / scale)`.
pub fn recency_scale_secs(affinity: f64, scale_days: [f64; 2]) -> f64 {
    let short = (scale_days[0] * 86400.0).ln();
    let long = (scale_days[1] * 86400.0).ln();
    (affinity * short + (1.0 - affinity) * long).exp()
}

/// Ground truth of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub page_goal: BTreeMap<String, GoalId>,
    pub category_affinity: BTreeMap<GoalId, f64>,
    /// Per session id, the goal of each visit.
    pub session_goals: BTreeMap<String, Vec<GoalId>>,
    /// Per session id, whether each visit was generated as a return to a
    /// page from an earlier session.
    pub planted_revisits: BTreeMap<String, Vec<bool>>,
    pub users: BTreeMap<String, UserTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub mixture: BTreeMap<GoalId, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub events: Vec<EventRecord>,
    pub weak_labels: Vec<WeakLabelLine>,
    pub truth: SynthTruth,
}

struct GoalPool {
    goal: GoalId,
    hosts: Vec<String>,
    pages: Vec<(String, String, String)>,
    popularity: WeightedIndex<f64>,
}

fn build_pools(cfg: &SynthConfig, taxonomy: &GoalTaxonomy, goals: &[GoalId], rng: &mut ChaCha8Rng) -> Vec<GoalPool> {
    goals
        .iter()
        .map(|&g| {
            let cat = taxonomy.category_of(g).unwrap_or(g);
            let hosts: Vec<String> = if cfg.shared_hosts > 0 {
                (0..cfg.shared_hosts).map(|h| format!("site{h}.example")).collect()
            } else {
                (0..cfg.hosts_per_goal).map(|h| format!("g{}-site{h}.example", g.0)).collect()
            };
            let pages = (0..cfg.pages_per_goal)
                .map(|i| {
                    let len = rng.random_range(cfg.title_len[0]..=cfg.title_len[1]);
                    let words: Vec<String> = (0..len)
                        .map(|_| {
                            if rng.random::<f64>() < cfg.category_word_share {
                                format!("c{}w{}", cat.0, rng.random_range(0..cfg.category_vocab))
                            } else {
                                format!("g{}w{}", g.0, rng.random_range(0..cfg.vocab_per_goal))
                            }
                        })
                        .collect();
                    let host = hosts[rng.random_range(0..hosts.len())].clone();
                    (format!("g{}p{i}", g.0), host, words.join(" "))
                })
                .collect();
            let weights: Vec<f64> = (0..cfg.pages_per_goal).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf_exponent)).collect();
            GoalPool { goal: g, hosts, pages, popularity: WeightedIndex::new(weights).expect("positive weights") }
        })
        .collect()
}

/// Popularity draw that avoids pages the user saw in earlier sessions, so
/// that cross-session repeats are planted revisits. Gives up after a few
/// tries on saturated pools.
fn fresh_page<R: Rng + ?Sized>(pool: &GoalPool, seen: &BTreeMap<usize, i64>, rng: &mut R) -> usize {
    let mut page = pool.popularity.sample(rng);
    for _ in 0..32 {
        if !seen.contains_key(&page) {
            break;
        }
        page = pool.popularity.sample(rng);
    }
    page
}

fn session_gap<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let mean = if rng.random_bool(0.5) { 4.0 * 3600.0 } else { 2.0 * 86400.0 };
    SESSION_GAP_SECS as f64 + Exp::new(1.0 / mean).expect("positive rate").sample(rng)
}

/// Generates a deterministic goal-driven browsing corpus: users with goal
/// mixtures, sessions with one to three focal goals, pages from goal-specific
/// host and vocabulary pools, and category-dependent revisits. Every pool
/// page is also emitted once as a weak label.
pub fn synth_generate(cfg: &SynthConfig, taxonomy: &GoalTaxonomy) -> Result<SynthCorpus> {
    cfg.validate(taxonomy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut goals = taxonomy.leaves();
    if cfg.goals > 0 {
        goals.truncate(cfg.goals);
    }
    let categories = taxonomy.categories();
    let affinity: BTreeMap<GoalId, f64> = categories.iter().copied().zip(cfg.affinities(categories.len())).collect();
    let pools = build_pools(cfg, taxonomy, &goals, &mut rng);
    let goal_affinity: Vec<f64> = goals.iter().map(|g| affinity[&taxonomy.category_of(*g).unwrap_or(*g)]).collect();

    let mut truth = SynthTruth {
        page_goal: BTreeMap::new(),
        category_affinity: affinity.clone(),
        session_goals: BTreeMap::new(),
        planted_revisits: BTreeMap::new(),
        users: BTreeMap::new(),
    };
    let mut weak_labels = Vec::new();
    for pool in &pools {
        for (id, host, title) in &pool.pages {
            truth.page_goal.insert(id.clone(), pool.goal);
            weak_labels.push(WeakLabelLine { page_id: id.clone(), host: host.clone(), title: title.clone(), goal_id: pool.goal.0 });
        }
    }

    let gamma = Gamma::new(cfg.concentration, 1.0).map_err(|e| GowebError::Config(e.to_string()))?;
    let width = (cfg.users.max(1) as f64).log10().ceil().max(1.0) as usize + 1;
    let mut events = Vec::new();
    for u in 0..cfg.users {
        let user = format!("u{u:0width$}");
        let raw: Vec<f64> = (0..goals.len()).map(|_| gamma.sample(&mut rng).max(1e-12)).collect();
        let total: f64 = raw.iter().sum();
        let mixture: Vec<f64> = raw.iter().map(|w| w / total).collect();
        truth.users.insert(user.clone(), UserTruth { mixture: goals.iter().copied().zip(mixture.iter().copied()).collect() });
        let user_dist = WeightedIndex::new(&mixture).expect("normalized mixture");

        // visited pages per goal index: (pool page index, last visit time)
        let mut seen: Vec<BTreeMap<usize, i64>> = vec![BTreeMap::new(); goals.len()];
        let mut t = cfg.start_ts as f64 + rng.random::<f64>() * 2.0 * 86400.0;
        let n_sessions = rng.random_range(cfg.sessions_per_user[0]..=cfg.sessions_per_user[1]);
        for s in 0..n_sessions {
            if s > 0 {
                t += session_gap(&mut rng);
            }
            let k = rng.random_range(1..=cfg.max_focal_goals.min(goals.len()));
            let mut focal: Vec<usize> = Vec::with_capacity(k);
            while focal.len() < k {
                let g = if cfg.history_informative { user_dist.sample(&mut rng) } else { rng.random_range(0..goals.len()) };
                if !focal.contains(&g) {
                    focal.push(g);
                }
            }
            let len = rng.random_range(cfg.session_len[0]..=cfg.session_len[1]);
            let sid = session_id(&user, s);
            let session_start = t;
            let mut labels = Vec::with_capacity(len);
            let mut planted = Vec::with_capacity(len);
            let mut touched: Vec<(usize, usize, i64)> = Vec::new();
            for _ in 0..len {
                let gi = *focal.choose(&mut rng).expect("nonempty focal set");
                let pool = &pools[gi];
                let p_revisit = cfg.revisit_rate * goal_affinity[gi];
                let earlier: Vec<(usize, i64)> =
                    seen[gi].iter().filter(|(_, &last)| (last as f64) < session_start).map(|(&p, &last)| (p, last)).collect();
                let mut revisit = None;
                if !earlier.is_empty() && rng.random::<f64>() < p_revisit {
                    let tau = recency_scale_secs(goal_affinity[gi], cfg.revisit_scale_days);
                    let w: Vec<f64> = earlier.iter().map(|(_, last)| (-(session_start - *last as f64) / tau).exp().max(1e-300)).collect();
                    let (p, last) = earlier[WeightedIndex::new(&w).expect("positive weights").sample(&mut rng)];
                    if rng.random::<f64>() < (-(session_start - last as f64) / tau).exp() {
                        revisit = Some(p);
                    }
                }
                let page = match revisit {
                    Some(p) => p,
                    None if cfg.fresh_pages => fresh_page(pool, &seen[gi], &mut rng),
                    None => pool.popularity.sample(&mut rng),
                };
                let revisit = revisit.is_some();
                let (id, host, title) = &pool.pages[page];
                let ts = t.round() as i64;
                events.push(EventRecord { user_id: user.clone(), ts, host: host.clone(), title: title.clone(), page_id: id.clone() });
                touched.push((gi, page, ts));
                labels.push(pool.goal);
                planted.push(revisit);
                t += 10.0 + rng.random::<f64>() * 290.0;
            }
            for (gi, page, ts) in touched {
                seen[gi].insert(page, ts);
            }
            truth.session_goals.insert(sid.clone(), labels);
            truth.planted_revisits.insert(sid, planted);
        }
    }
    debug_assert!(pools.iter().all(|p| p.pages.iter().all(|(_, h, _)| p.hosts.contains(h))));
    Ok(SynthCorpus { events, weak_labels, truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(user: &str, ts: i64, page: &str) -> EventRecord {
        EventRecord { user_id: user.into(), ts, host: "h.com".into(), title: format!("title {page}"), page_id: page.into() }
    }

    #[test]
    fn segmentation_examples() {
        let s = segment_sessions(&[ev("u", 0, "a"), ev("u", 600, "b"), ev("u", 600 + 2400, "c")], SESSION_GAP_SECS).unwrap();
        assert_eq!(s.iter().map(BrowsingSession::len).collect::<Vec<_>>(), vec![2, 1]);
        let s = segment_sessions(&[ev("u", 0, "a"), ev("u", 1800, "b")], SESSION_GAP_SECS).unwrap();
        assert_eq!(s.len(), 2);
        let s = segment_sessions(&[ev("u", 5, "a")], SESSION_GAP_SECS).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].session_id, "u#0");
        assert!(matches!(segment_sessions(&[ev("u", 5, "a"), ev("u", 4, "b")], SESSION_GAP_SECS), Err(GowebError::Unsorted(_))));
        let inter = segment_sessions(&[ev("u", 0, "a"), ev("v", 0, "b"), ev("u", 10, "c")], SESSION_GAP_SECS).unwrap();
        assert_eq!(inter.len(), 2);
        assert_eq!(inter[0].len(), 2);
    }

    #[test]
    fn resegmentation_is_a_no_op() {
        let cfg = SynthConfig { users: 5, sessions_per_user: [2, 4], ..Default::default() };
        let corpus = synth_generate(&cfg, &GoalTaxonomy::example()).unwrap();
        let s1 = segment_sessions(&corpus.events, SESSION_GAP_SECS).unwrap();
        let flat: Vec<EventRecord> = s1
            .iter()
            .flat_map(|s| {
                s.visits.iter().map(move |v| EventRecord {
                    user_id: s.user_id.clone(),
                    ts: v.ts,
                    host: v.page.host.clone(),
                    title: v.page.title_tokens.join(" "),
                    page_id: v.page.page_id.clone(),
                })
            })
            .collect();
        let s2 = segment_sessions(&flat, SESSION_GAP_SECS).unwrap();
        assert_eq!(s1, s2);
        for s in &s1 {
            assert_eq!(corpus.truth.session_goals[&s.session_id].len(), s.len());
        }
    }

    fn session(id: &str, user: &str, start: i64, pages: &[&str]) -> BrowsingSession {
        BrowsingSession {
            session_id: id.into(),
            user_id: user.into(),
            visits: pages.iter().enumerate().map(|(i, p)| Visit { page: WebPage::new(*p, "h", p), ts: start + i as i64 }).collect(),
        }
    }

    #[test]
    fn frequency_filters() {
        let mut pages = vec!["rare"];
        pages.extend(std::iter::repeat_n("common", 9));
        let a = session("a", "u", 0, &pages);
        let b = session("b", "u", 100, &["rare"; 8]);
        let f = apply_frequency_filters(&[a.clone(), b.clone()], 10, 10);
        assert!(f.is_empty());
        let f = apply_frequency_filters(&[a.clone(), b.clone()], 9, 9);
        assert_eq!(f.len(), 1);
        let f = apply_frequency_filters(&[a.clone(), b], 9, 8);
        assert_eq!(f.len(), 2);
        assert_eq!(apply_frequency_filters(&f, 9, 8), f);
        let f = apply_frequency_filters(&[a], 1, 10);
        assert_eq!(f.len(), 1);
    }

    #[test]
    fn warm_cold_partition() {
        let s = vec![session("1", "u", 10, &["a"]), session("2", "u", 110, &["a"]), session("3", "v", 120, &["a"]), session("4", "w", 500, &["a"])];
        let split = split_warm_cold(&s, &SplitSpec { t0: 0, t1: 100, t2: 200 }).unwrap();
        assert_eq!(split.train.len(), 1);
        assert_eq!(split.test_warm[0].session_id, "2");
        assert_eq!(split.test_cold[0].session_id, "3");
        assert!(split_warm_cold(&s, &SplitSpec { t0: 0, t1: 0, t2: 1 }).is_err());
    }

    #[test]
    fn page_ids_normalize_case_and_spacing() {
        assert_eq!(derive_page_id("News.com", "Hello   World"), derive_page_id("news.com", "hello world"));
        assert_ne!(derive_page_id("news.com", "hello world"), derive_page_id("news.com", "hello"));
    }

    #[test]
    fn synth_is_deterministic_and_consistent() {
        let t = GoalTaxonomy::example();
        let cfg = SynthConfig { users: 20, seed: 7, ..Default::default() };
        let a = synth_generate(&cfg, &t).unwrap();
        let b = synth_generate(&cfg, &t).unwrap();
        assert_eq!(a, b);
        let sessions = segment_sessions(&a.events, SESSION_GAP_SECS).unwrap();
        assert_eq!(sessions.len(), a.truth.session_goals.len());
        for s in &sessions {
            assert!(s.len() >= 10);
            let goals = &a.truth.session_goals[&s.session_id];
            let distinct: BTreeSet<_> = goals.iter().collect();
            assert!((1..=3).contains(&distinct.len()));
            for (v, g) in s.visits.iter().zip(goals) {
                assert_eq!(a.truth.page_goal[&v.page.page_id], *g);
                assert!(v.page.host.starts_with(&format!("g{}-", g.0)));
            }
        }
        assert_eq!(a.weak_labels.len(), 16 * 60);
        let c = synth_generate(&SynthConfig { seed: 8, ..cfg }, &t).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = std::env::temp_dir().join(format!("goweb-dataio-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("events.jsonl");
        let events = vec![ev("u", 1, "a"), EventRecord { page_id: String::new(), ..ev("v", 2, "b") }];
        write_jsonl(&path, &events).unwrap();
        let back = read_events(&path).unwrap();
        assert_eq!(back[0], events[0]);
        assert_eq!(back[1].page_id, derive_page_id("h.com", "title b"));
        fs::write(&path, "{\"user_id\":\"u\"}\n").unwrap();
        assert!(matches!(read_events(&path), Err(GowebError::Parse { line: 1, .. })));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn revisit_gap_medians_follow_affinity() {
        let t = GoalTaxonomy::example();
        let corpus = synth_generate(&SynthConfig { users: 1200, seed: 21, ..Default::default() }, &t).unwrap();
        let sessions = segment_sessions(&corpus.events, SESSION_GAP_SECS).unwrap();
        let events = crate::metrics::extract_revisit_events(&sessions);
        assert!(events.len() >= 10_000, "{} revisit events", events.len());
        let mut gaps: BTreeMap<GoalId, Vec<i64>> = BTreeMap::new();
        for e in &events {
            let cat = t.category_of(corpus.truth.page_goal[&e.page_id]).unwrap();
            gaps.entry(cat).or_default().push(e.t_next - e.t_prev);
        }
        let mut by_affinity: Vec<(f64, i64)> = gaps
            .iter_mut()
            .map(|(c, g)| {
                g.sort_unstable();
                (corpus.truth.category_affinity[c], g[g.len() / 2])
            })
            .collect();
        by_affinity.sort_by(|a, b| b.0.total_cmp(&a.0));
        assert_eq!(by_affinity.len(), 4);
        assert!(by_affinity.windows(2).all(|w| w[0].1 < w[1].1), "{by_affinity:?}");
    }

    #[test]
    fn config_validation() {
        let t = GoalTaxonomy::example();
        assert!(SynthConfig::default().validate(&t).is_ok());
        assert!(SynthConfig { revisit_affinity: vec![0.5; 3], ..Default::default() }.validate(&t).is_err());
        assert!(SynthConfig { revisit_affinity: vec![0.0, 0.5, 0.5, 0.5], ..Default::default() }.validate(&t).is_err());
        assert!(SynthConfig { goals: 17, ..Default::default() }.validate(&t).is_err());
        let a = SynthConfig::default().affinities(4);
        assert!(a.windows(2).all(|w| w[0] > w[1]));
        assert!((recency_scale_secs(1.0, [1.0, 60.0]) - 86400.0).abs() < 1e-6);
        assert!((recency_scale_secs(0.0, [1.0, 60.0]) - 60.0 * 86400.0).abs() < 1e-3);
        assert!(SynthConfig { revisit_scale_days: [0.0, 1.0], ..Default::default() }.validate(&t).is_err());
    }
}
