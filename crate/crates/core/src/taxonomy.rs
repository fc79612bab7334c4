//! The three-layer goal hierarchy: a "non-goal" root, goal categories, and
//! leaf goals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GowebError, Result};

/// The example taxonomy shipped with the crate (1 root, 4 categories, 16 leaves).
pub const EXAMPLE_TAXONOMY: &str = include_str!("../data/example_taxonomy.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GoalId(pub u32);

impl fmt::Display for GoalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    Root,
    Category,
    Leaf,
}

impl Layer {
    pub fn from_u8(v: u8) -> Option<Layer> {
        match v {
            0 => Some(Layer::Root),
            1 => Some(Layer::Category),
            2 => Some(Layer::Leaf),
            _ => None,
        }
    }

    pub fn depth(self) -> u8 {
        match self {
            Layer::Root => 0,
            Layer::Category => 1,
            Layer::Leaf => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalNode {
    pub id: u32,
    pub name: String,
    pub layer: u8,
}

/// On-disk form of a taxonomy.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyDocument {
    pub nodes: Vec<GoalNode>,
    pub edges: Vec<[u32; 2]>,
}

#[derive(Clone, Debug)]
pub struct GoalTaxonomy {
    nodes: BTreeMap<GoalId, (String, Layer)>,
    parent: BTreeMap<GoalId, GoalId>,
    edges: Vec<(GoalId, GoalId)>,
    root: GoalId,
}

impl GoalTaxonomy {
    pub fn from_document(doc: TaxonomyDocument) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        for n in &doc.nodes {
            let layer = Layer::from_u8(n.layer).ok_or(GowebError::InvalidLayer { id: n.id, layer: n.layer })?;
            if nodes.insert(GoalId(n.id), (n.name.clone(), layer)).is_some() {
                return Err(GowebError::DuplicateId(n.id));
            }
        }
        let roots: Vec<u32> = nodes.iter().filter(|(_, (_, l))| *l == Layer::Root).map(|(id, _)| id.0).collect();
        let root = match roots.as_slice() {
            [] => return Err(GowebError::MissingRoot),
            [r] => GoalId(*r),
            _ => return Err(GowebError::MultipleRoots(roots)),
        };

        let mut children: BTreeMap<GoalId, Vec<GoalId>> = BTreeMap::new();
        for &[p, c] in &doc.edges {
            for id in [p, c] {
                if !nodes.contains_key(&GoalId(id)) {
                    return Err(GowebError::UnknownGoal(id));
                }
            }
            children.entry(GoalId(p)).or_default().push(GoalId(c));
        }
        detect_cycle(&nodes, &children)?;

        let mut parent = BTreeMap::new();
        let mut edges = Vec::with_capacity(doc.edges.len());
        for &[p, c] in &doc.edges {
            let pl = nodes[&GoalId(p)].1;
            let cl = nodes[&GoalId(c)].1;
            if cl.depth() != pl.depth() + 1 {
                return Err(GowebError::LayerViolation {
                    parent: p,
                    child: c,
                    detail: format!("layer {} cannot be a child of layer {}", cl.depth(), pl.depth()),
                });
            }
            if let Some(prev) = parent.insert(GoalId(c), GoalId(p)) {
                return Err(GowebError::LayerViolation { parent: p, child: c, detail: format!("child already has parent {prev}") });
            }
            edges.push((GoalId(p), GoalId(c)));
        }
        for id in nodes.keys() {
            if *id != root && !parent.contains_key(id) {
                return Err(GowebError::Detached(id.0));
            }
        }
        Ok(GoalTaxonomy { nodes, parent, edges, root })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn example() -> Self {
        Self::from_json(EXAMPLE_TAXONOMY).expect("shipped taxonomy is valid")
    }

    pub fn to_document(&self) -> TaxonomyDocument {
        TaxonomyDocument {
            nodes: self.nodes.iter().map(|(id, (name, layer))| GoalNode { id: id.0, name: name.clone(), layer: layer.depth() }).collect(),
            edges: self.edges.iter().map(|(p, c)| [p.0, c.0]).collect(),
        }
    }

    /// Builds a balanced taxonomy with generated names.
    pub fn balanced(categories: usize, leaves_per_category: usize) -> Self {
        let mut nodes = vec![GoalNode { id: 0, name: "non-goal".into(), layer: 0 }];
        let mut edges = Vec::new();
        for c in 0..categories {
            let cid = 1 + c as u32;
            nodes.push(GoalNode { id: cid, name: format!("category {c}"), layer: 1 });
            edges.push([0, cid]);
        }
        let mut next = 1 + categories as u32;
        for c in 0..categories {
            for l in 0..leaves_per_category {
                nodes.push(GoalNode { id: next, name: format!("goal {c}.{l}"), layer: 2 });
                edges.push([1 + c as u32, next]);
                next += 1;
            }
        }
        Self::from_document(TaxonomyDocument { nodes, edges }).expect("balanced taxonomy is valid")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> GoalId {
        self.root
    }

    /// All goal ids in ascending order.
    pub fn ids(&self) -> Vec<GoalId> {
        self.nodes.keys().copied().collect()
    }

    pub fn contains(&self, id: GoalId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn name(&self, id: GoalId) -> Option<&str> {
        self.nodes.get(&id).map(|(n, _)| n.as_str())
    }

    pub fn layer(&self, id: GoalId) -> Option<Layer> {
        self.nodes.get(&id).map(|(_, l)| *l)
    }

    pub fn parent(&self, id: GoalId) -> Option<GoalId> {
        self.parent.get(&id).copied()
    }

    pub fn edges(&self) -> &[(GoalId, GoalId)] {
        &self.edges
    }

    pub fn children(&self, id: GoalId) -> Vec<GoalId> {
        self.edges.iter().filter(|(p, _)| *p == id).map(|(_, c)| *c).collect()
    }

    pub fn with_layer(&self, layer: Layer) -> Vec<GoalId> {
        self.nodes.iter().filter(|(_, (_, l))| *l == layer).map(|(id, _)| *id).collect()
    }

    pub fn leaves(&self) -> Vec<GoalId> {
        self.with_layer(Layer::Leaf)
    }

    pub fn categories(&self) -> Vec<GoalId> {
        self.with_layer(Layer::Category)
    }

    /// The layer-1 ancestor of a goal (itself for categories, `None` for the root).
    pub fn category_of(&self, id: GoalId) -> Option<GoalId> {
        match self.layer(id)? {
            Layer::Root => None,
            Layer::Category => Some(id),
            Layer::Leaf => self.parent(id),
        }
    }

    fn ancestors(&self, id: GoalId) -> Vec<GoalId> {
        let mut out = Vec::new();
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            out.push(p);
            cur = p;
        }
        out
    }
}

fn detect_cycle(nodes: &BTreeMap<GoalId, (String, Layer)>, children: &BTreeMap<GoalId, Vec<GoalId>>) -> Result<()> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state: BTreeMap<GoalId, u8> = nodes.keys().map(|k| (*k, 0)).collect();
    for &start in nodes.keys() {
        if state[&start] != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        state.insert(start, 1);
        while let Some((node, idx)) = stack.pop() {
            let kids = children.get(&node).map(Vec::as_slice).unwrap_or(&[]);
            if idx < kids.len() {
                stack.push((node, idx + 1));
                let next = kids[idx];
                match state[&next] {
                    1 => return Err(GowebError::Cycle(next.0)),
                    0 => {
                        state.insert(next, 1);
                        stack.push((next, 0));
                    }
                    _ => {}
                }
            } else {
                state.insert(node, 2);
            }
        }
    }
    Ok(())
}

pub fn load_taxonomy(path: &Path) -> Result<GoalTaxonomy> {
    let text = std::fs::read_to_string(path).map_err(|e| GowebError::io(path, e))?;
    GoalTaxonomy::from_json(&text)
}

/// Unordered ancestor-descendant pairs, stored as `(min, max)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClosureRelation {
    pairs: BTreeSet<(GoalId, GoalId)>,
}

impl ClosureRelation {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (GoalId, GoalId)>) -> Self {
        ClosureRelation { pairs: pairs.into_iter().filter(|(a, b)| a != b).map(|(a, b)| ordered(a, b)).collect() }
    }

    pub fn related(&self, a: GoalId, b: GoalId) -> bool {
        self.pairs.contains(&ordered(a, b))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (GoalId, GoalId)> + '_ {
        self.pairs.iter().copied()
    }

    pub fn partners(&self, g: GoalId) -> Vec<GoalId> {
        self.pairs
            .iter()
            .filter_map(|&(a, b)| {
                if a == g {
                    Some(b)
                } else if b == g {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }
}

fn ordered(a: GoalId, b: GoalId) -> (GoalId, GoalId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Transitive closure of the parent edges: every ancestor-descendant pair.
pub fn closure_pairs(t: &GoalTaxonomy) -> ClosureRelation {
    ClosureRelation::from_pairs(t.ids().into_iter().flat_map(|id| t.ancestors(id).into_iter().map(move |a| (a, id))))
}

/// Goals that are neither `g` nor related to it.
pub fn negative_pool(t: &GoalTaxonomy, relation: &ClosureRelation, g: GoalId) -> Vec<GoalId> {
    t.ids().into_iter().filter(|&o| o != g && !relation.related(g, o)).collect()
}

/// Draws `m` negatives for `g_u` uniformly with replacement.
pub fn sample_negatives<R: Rng + ?Sized>(t: &GoalTaxonomy, relation: &ClosureRelation, g_u: GoalId, m: usize, rng: &mut R) -> Result<Vec<GoalId>> {
    let pool = negative_pool(t, relation, g_u);
    if pool.is_empty() {
        return Err(GowebError::EmptyNegativePool(g_u.0));
    }
    Ok((0..m).map(|_| pool[rng.random_range(0..pool.len())]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn doc(nodes: &[(u32, u8)], edges: &[[u32; 2]]) -> TaxonomyDocument {
        TaxonomyDocument { nodes: nodes.iter().map(|&(id, layer)| GoalNode { id, name: format!("n{id}"), layer }).collect(), edges: edges.to_vec() }
    }

    #[test]
    fn loads_shipped_example() {
        let t = GoalTaxonomy::example();
        assert_eq!(t.len(), 21);
        assert_eq!(t.categories().len(), 4);
        assert_eq!(t.leaves().len(), 16);
        assert_eq!(t.root(), GoalId(0));
    }

    #[test]
    fn rejects_multiple_roots() {
        let err = GoalTaxonomy::from_document(doc(&[(0, 0), (1, 0)], &[])).unwrap_err();
        assert!(matches!(err, GowebError::MultipleRoots(_)), "{err}");
    }

    #[test]
    fn rejects_leaf_to_category_edge() {
        let d = doc(&[(0, 0), (1, 1), (2, 2), (3, 1)], &[[0, 1], [1, 2], [2, 3]]);
        let err = GoalTaxonomy::from_document(d).unwrap_err();
        assert!(matches!(err, GowebError::LayerViolation { parent: 2, child: 3, .. }), "{err}");
    }

    #[test]
    fn rejects_duplicates_and_cycles() {
        let err = GoalTaxonomy::from_document(doc(&[(0, 0), (0, 1)], &[])).unwrap_err();
        assert!(matches!(err, GowebError::DuplicateId(0)));
        let d = doc(&[(0, 0), (1, 1), (2, 2)], &[[0, 1], [1, 2], [2, 1]]);
        assert!(matches!(GoalTaxonomy::from_document(d).unwrap_err(), GowebError::Cycle(_)));
        let d = doc(&[(0, 0), (1, 1)], &[[0, 5]]);
        assert!(matches!(GoalTaxonomy::from_document(d).unwrap_err(), GowebError::UnknownGoal(5)));
        let d = doc(&[(0, 0), (1, 1)], &[]);
        assert!(matches!(GoalTaxonomy::from_document(d).unwrap_err(), GowebError::Detached(1)));
        let d = doc(&[(1, 1)], &[]);
        assert!(matches!(GoalTaxonomy::from_document(d).unwrap_err(), GowebError::MissingRoot));
    }

    #[test]
    fn closure_of_chain() {
        let t = GoalTaxonomy::from_document(doc(&[(0, 0), (1, 1), (2, 2)], &[[0, 1], [1, 2]])).unwrap();
        let c = closure_pairs(&t);
        let expected = ClosureRelation::from_pairs([(GoalId(0), GoalId(1)), (GoalId(0), GoalId(2)), (GoalId(1), GoalId(2))]);
        assert_eq!(c, expected);
    }

    #[test]
    fn closure_single_category_count() {
        // brute-force: enumerate all node pairs and test ancestry by walking parents
        for leaves in 1..6u32 {
            let mut nodes = vec![(0, 0), (1, 1)];
            let mut edges = vec![[0, 1]];
            for l in 0..leaves {
                nodes.push((2 + l, 2));
                edges.push([1, 2 + l]);
            }
            let t = GoalTaxonomy::from_document(doc(&nodes, &edges)).unwrap();
            let ids = t.ids();
            let mut brute = 0;
            for (i, &a) in ids.iter().enumerate() {
                for &b in &ids[i + 1..] {
                    if t.ancestors(a).contains(&b) || t.ancestors(b).contains(&a) {
                        brute += 1;
                    }
                }
            }
            assert_eq!(brute, 2 * leaves as usize + 1);
            assert_eq!(closure_pairs(&t).len(), brute);
        }
    }

    #[test]
    fn closure_of_root_only_is_empty() {
        let t = GoalTaxonomy::from_document(doc(&[(0, 0)], &[])).unwrap();
        assert!(closure_pairs(&t).is_empty());
    }

    #[test]
    fn closure_contains_edges_and_is_symmetric() {
        let t = GoalTaxonomy::example();
        let c = closure_pairs(&t);
        for &(p, ch) in t.edges() {
            assert!(c.related(p, ch) && c.related(ch, p));
        }
        assert_eq!(ClosureRelation::from_pairs(c.iter()), c);
        // root-cat 4, root-leaf 16, cat-leaf 16
        assert_eq!(c.len(), 36);
    }

    #[test]
    fn empty_pool_errors() {
        let t = GoalTaxonomy::from_document(doc(&[(0, 0), (1, 1)], &[[0, 1]])).unwrap();
        let c = closure_pairs(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_negatives(&t, &c, GoalId(0), 3, &mut rng), Err(GowebError::EmptyNegativePool(0))));
    }

    #[test]
    fn sampling_is_deterministic_and_excludes_related() {
        let t = GoalTaxonomy::example();
        let c = closure_pairs(&t);
        let g = GoalId(5);
        let a = sample_negatives(&t, &c, g, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_negatives(&t, &c, g, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&n| n != g && !c.related(g, n)));
    }

    #[test]
    fn sampling_is_uniform() {
        let t = GoalTaxonomy::example();
        let c = closure_pairs(&t);
        let g = GoalId(5);
        let pool = negative_pool(&t, &c, g);
        assert_eq!(pool.len(), 18);
        let draws = 10_000;
        let s = sample_negatives(&t, &c, g, draws, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let p = 1.0 / pool.len() as f64;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for id in &pool {
            let n = s.iter().filter(|x| *x == id).count() as f64;
            assert!((n - expected).abs() < 3.0 * sigma, "{id}: {n} vs {expected}");
            chi2 += (n - expected).powi(2) / expected;
        }
        // 17 degrees of freedom, 99.9% quantile is about 40.8
        assert!(chi2 < 40.8, "chi2 = {chi2}");
    }

    #[test]
    fn document_round_trip() {
        let t = GoalTaxonomy::example();
        let again = GoalTaxonomy::from_document(t.to_document()).unwrap();
        assert_eq!(again.ids(), t.ids());
        assert_eq!(again.edges(), t.edges());
        assert_eq!(t.category_of(GoalId(7)), Some(GoalId(1)));
        assert_eq!(t.category_of(GoalId(0)), None);
    }
}
