//! Few-shot episode generation: self-supervised neighbor-matching tasks,
//! supervised multi-task episodes (node and edge variants), and downstream
//! evaluation prompts drawn from fixed example pools.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Datapoint, Graph, Level, NodeLabeling};
use crate::seeds::{self, Stream};

/// How many times a class anchor is re-drawn before giving up.
const MAX_RETRIES: usize = 50;

/// Where a prompt class came from. Label embeddings key off this, so a
/// class keeps its embedding when the prompt's class order is permuted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMeta {
    /// Neighbor-matching class: the anchor node whose hop ring defines it.
    NmAnchor(usize),
    /// Supervised class id from a node labeling.
    Label(usize),
    /// Edge relation id used as the class.
    Relation(usize),
}

impl ClassMeta {
    /// Stable identity key for label-embedding seeding.
    pub fn key(&self) -> u64 {
        let (tag, id) = match self {
            ClassMeta::NmAnchor(a) => (1u64, *a as u64),
            ClassMeta::Label(c) => (2u64, *c as u64),
            ClassMeta::Relation(r) => (3u64, *r as u64),
        };
        seeds::derive(tag, &[id])
    }
}

/// An m-way k-shot episode: labeled examples, queries, and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotPrompt {
    pub m: usize,
    pub k: usize,
    /// `m * k` (datapoint, class-index) pairs, grouped by class.
    pub examples: Vec<(Datapoint, usize)>,
    pub queries: Vec<Datapoint>,
    /// Ground-truth class index per query; read only when scoring.
    pub query_labels: Vec<usize>,
    pub class_meta: Vec<ClassMeta>,
}

impl FewShotPrompt {
    pub fn level(&self) -> Level {
        self.examples
            .first()
            .map(|(dp, _)| dp.level)
            .unwrap_or(Level::Node)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 {
            return Err(Error::Validation("prompt needs m >= 1 and k >= 1".into()));
        }
        if self.examples.len() != self.m * self.k {
            return Err(Error::Validation(format!(
                "prompt has {} examples, expected m*k = {}",
                self.examples.len(),
                self.m * self.k
            )));
        }
        let mut per_class = vec![0usize; self.m];
        let level = self.level();
        for (dp, c) in &self.examples {
            if *c >= self.m {
                return Err(Error::Validation(format!("example class {c} outside [0, {})", self.m)));
            }
            if dp.level != level {
                return Err(Error::Validation("mixed datapoint levels in prompt".into()));
            }
            per_class[*c] += 1;
        }
        if per_class.iter().any(|&c| c != self.k) {
            return Err(Error::Validation("class without exactly k examples".into()));
        }
        if self.query_labels.len() != self.queries.len() {
            return Err(Error::Validation("query_labels length != query count".into()));
        }
        for q in &self.queries {
            if q.level != level {
                return Err(Error::Validation("mixed datapoint levels in prompt".into()));
            }
        }
        for &c in &self.query_labels {
            if c >= self.m {
                return Err(Error::Validation(format!("query label {c} outside [0, {})", self.m)));
            }
        }
        if self.class_meta.len() != self.m {
            return Err(Error::Validation("class_meta length != m".into()));
        }
        Ok(())
    }

    /// Copy with ground-truth query labels replaced by zeros. The evaluation
    /// harness scores against the original labels afterwards.
    pub fn stripped(&self) -> FewShotPrompt {
        FewShotPrompt {
            query_labels: vec![0; self.queries.len()],
            ..self.clone()
        }
    }
}

/// Episode-shape parameters shared by the samplers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskParams {
    pub level: Level,
    /// Ways per episode; pretraining caps this at the available class count.
    pub m: usize,
    /// Shots per class.
    pub k: usize,
    /// Query budget per episode; each class draws ceil(n / m) queries.
    pub n: usize,
    /// Hop distance defining neighbor-matching classes.
    pub nm_hops: usize,
    /// Contextualization depth for data graphs.
    pub k_hops: usize,
    /// Per-node neighbor cap during contextualization; None = exact ball.
    pub fanout_cap: Option<usize>,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            level: Level::Node,
            m: 30,
            k: 3,
            n: 4,
            nm_hops: 2,
            k_hops: 2,
            fanout_cap: None,
        }
    }
}

fn queries_per_class(n: usize, m: usize) -> usize {
    n.div_ceil(m)
}

/// Draws `count` items: without replacement while the pool lasts, then
/// uniformly with replacement. Requires a nonempty pool.
fn draw_with_fallback(pool: &[usize], count: usize, rng: &mut Stream) -> Vec<usize> {
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    let mut out: Vec<usize> = shuffled.iter().copied().take(count).collect();
    while out.len() < count {
        out.push(pool[rng.random_range(0..pool.len())]);
    }
    out
}

/// Samples `m` distinct valid anchors/classes by rejection, where `candidates`
/// enumerates the global pool.
fn sample_distinct_valid(
    candidates: &[usize],
    m: usize,
    mut valid: impl FnMut(usize) -> bool,
    rng: &mut Stream,
    describe: &str,
) -> Result<Vec<usize>> {
    if candidates.len() < m {
        return Err(Error::TaskGen(format!(
            "need {m} candidate {describe}, only {} exist",
            candidates.len()
        )));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    for _ in 0..m {
        let mut attempts = 0;
        loop {
            let cand = candidates[rng.random_range(0..candidates.len())];
            if !chosen.contains(&cand) && valid(cand) {
                chosen.push(cand);
                break;
            }
            attempts += 1;
            if attempts >= MAX_RETRIES {
                return Err(Error::TaskGen(format!(
                    "no valid {describe} found after {MAX_RETRIES} resamples \
                     (constraint: {m} distinct {describe}, each usable for k examples)"
                )));
            }
        }
    }
    Ok(chosen)
}

/// Neighbor-matching episode over nodes: each class is the exact
/// `l`-hop ring of a sampled anchor; examples and queries are drawn from
/// the ring. Anchors need a ring of at least `k` nodes so the examples are
/// distinct; query draws may fall back to replacement.
pub fn sample_nm_node(
    g: &Graph,
    m: usize,
    k: usize,
    n: usize,
    l: usize,
    rng: &mut Stream,
) -> Result<FewShotPrompt> {
    sample_nm(g, m, k, n, l, Level::Node, rng)
}

/// Neighbor-matching episode over edges: ring nodes are expanded to a
/// uniformly sampled incident edge; the class is still the anchor ring.
pub fn sample_nm_edge(
    g: &Graph,
    m: usize,
    k: usize,
    n: usize,
    l: usize,
    rng: &mut Stream,
) -> Result<FewShotPrompt> {
    sample_nm(g, m, k, n, l, Level::Edge, rng)
}

fn sample_nm(
    g: &Graph,
    m: usize,
    k: usize,
    n: usize,
    l: usize,
    level: Level,
    rng: &mut Stream,
) -> Result<FewShotPrompt> {
    if m < 2 {
        return Err(Error::TaskGen("neighbor matching needs m >= 2".into()));
    }
    if l == 0 {
        return Err(Error::TaskGen("neighbor matching needs l >= 1".into()));
    }
    let candidates: Vec<usize> = (0..g.num_nodes()).collect();
    let mut ring_cache: Vec<Option<Vec<usize>>> = vec![None; g.num_nodes()];
    let ring_of = |anchor: usize, cache: &mut Vec<Option<Vec<usize>>>| -> Vec<usize> {
        if cache[anchor].is_none() {
            let ring = g
                .exact_hop_neighbors(&[anchor], l)
                .expect("anchor in range");
            let usable: Vec<usize> = match level {
                Level::Node => ring.into_iter().collect(),
                // Edge expansion needs an incident edge to exist.
                Level::Edge => ring.into_iter().filter(|&v| g.degree(v) > 0).collect(),
            };
            cache[anchor] = Some(usable);
        }
        cache[anchor].clone().unwrap()
    };
    let anchors = sample_distinct_valid(
        &candidates,
        m,
        |a| ring_of(a, &mut ring_cache).len() >= k,
        rng,
        "anchors",
    )?;

    let per_class_queries = queries_per_class(n, m);
    let mut examples = Vec::new();
    let mut queries = Vec::new();
    let mut query_labels = Vec::new();
    for (class, &anchor) in anchors.iter().enumerate() {
        let ring = ring_cache[anchor].clone().unwrap();
        let picks = draw_with_fallback(&ring, k + per_class_queries, rng);
        for (j, &node) in picks.iter().enumerate() {
            let dp = match level {
                Level::Node => Datapoint::node(node),
                Level::Edge => expand_to_edge(g, node, rng)?,
            };
            if j < k {
                examples.push((dp, class));
            } else {
                queries.push(dp);
                query_labels.push(class);
            }
        }
    }
    let prompt = FewShotPrompt {
        m,
        k,
        examples,
        queries,
        query_labels,
        class_meta: anchors.into_iter().map(ClassMeta::NmAnchor).collect(),
    };
    prompt.validate()?;
    Ok(prompt)
}

/// Expands a node to one of its incident edges, uniformly at random.
fn expand_to_edge(g: &Graph, node: usize, rng: &mut Stream) -> Result<Datapoint> {
    let nbrs = g.neighbors(node);
    if nbrs.is_empty() {
        return Err(Error::TaskGen(format!(
            "node {node} has no incident edge to expand"
        )));
    }
    let (other, _) = nbrs[rng.random_range(0..nbrs.len())];
    Ok(Datapoint::edge(node, other))
}

/// Multi-task episode over labeled nodes: classes are drawn from the
/// labeling, examples/queries from each class's labeled nodes.
pub fn sample_mt_node(
    g: &Graph,
    lab: &NodeLabeling,
    m: usize,
    k: usize,
    n: usize,
    rng: &mut Stream,
) -> Result<FewShotPrompt> {
    if m < 2 {
        return Err(Error::TaskGen("multi-task needs m >= 2".into()));
    }
    let members = lab.class_members();
    let usable: Vec<usize> = (0..lab.num_classes())
        .filter(|&c| members[c].len() >= k)
        .collect();
    if usable.len() < m {
        return Err(Error::TaskGen(format!(
            "need {m} classes with at least {k} labeled nodes, found {}",
            usable.len()
        )));
    }
    for &node in members.iter().flatten() {
        if node >= g.num_nodes() {
            return Err(Error::Validation(format!(
                "labeled node {node} outside graph"
            )));
        }
    }
    let mut pool = usable.clone();
    pool.shuffle(rng);
    let classes: Vec<usize> = pool.into_iter().take(m).collect();

    let per_class_queries = queries_per_class(n, m);
    let mut examples = Vec::new();
    let mut queries = Vec::new();
    let mut query_labels = Vec::new();
    for (class, &label) in classes.iter().enumerate() {
        let picks = draw_with_fallback(&members[label], k + per_class_queries, rng);
        for (j, &node) in picks.iter().enumerate() {
            if j < k {
                examples.push((Datapoint::node(node), class));
            } else {
                queries.push(Datapoint::node(node));
                query_labels.push(class);
            }
        }
    }
    let prompt = FewShotPrompt {
        m,
        k,
        examples,
        queries,
        query_labels,
        class_meta: classes.into_iter().map(ClassMeta::Label).collect(),
    };
    prompt.validate()?;
    Ok(prompt)
}

/// Multi-task episode over edges, using the relation type as the labeling.
/// Datapoints are endpoint pairs; the classified edge itself is hidden from
/// the data graphs during assembly.
pub fn sample_mt_edge(
    g: &Graph,
    m: usize,
    k: usize,
    n: usize,
    rng: &mut Stream,
) -> Result<FewShotPrompt> {
    if m < 2 {
        return Err(Error::TaskGen("multi-task needs m >= 2".into()));
    }
    let mut by_relation: Vec<Vec<usize>> = vec![Vec::new(); g.num_relations()];
    for (idx, e) in g.edges().iter().enumerate() {
        by_relation[e.r].push(idx);
    }
    let usable: Vec<usize> = (0..g.num_relations())
        .filter(|&r| by_relation[r].len() >= k)
        .collect();
    if usable.len() < m {
        return Err(Error::TaskGen(format!(
            "need {m} relations with at least {k} edges, found {}",
            usable.len()
        )));
    }
    let mut pool = usable.clone();
    pool.shuffle(rng);
    let relations: Vec<usize> = pool.into_iter().take(m).collect();

    let per_class_queries = queries_per_class(n, m);
    let mut examples = Vec::new();
    let mut queries = Vec::new();
    let mut query_labels = Vec::new();
    for (class, &rel) in relations.iter().enumerate() {
        let picks = draw_with_fallback(&by_relation[rel], k + per_class_queries, rng);
        for (j, &edge_idx) in picks.iter().enumerate() {
            let e = g.edges()[edge_idx];
            let dp = Datapoint::edge(e.u, e.v);
            if j < k {
                examples.push((dp, class));
            } else {
                queries.push(dp);
                query_labels.push(class);
            }
        }
    }
    let prompt = FewShotPrompt {
        m,
        k,
        examples,
        queries,
        query_labels,
        class_meta: relations.into_iter().map(ClassMeta::Relation).collect(),
    };
    prompt.validate()?;
    Ok(prompt)
}

/// Train/test node-id split used by downstream evaluation.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: BTreeSet<usize>,
    pub test: BTreeSet<usize>,
}

impl Split {
    /// Deterministic split of all graph nodes, `train_fraction` to train.
    pub fn random(g: &Graph, train_fraction: f64, seed: u64) -> Split {
        let mut ids: Vec<usize> = (0..g.num_nodes()).collect();
        ids.shuffle(&mut seeds::stream(seed, &[0x5917]));
        let cut = ((ids.len() as f64) * train_fraction).round() as usize;
        Split {
            train: ids[..cut].iter().copied().collect(),
            test: ids[cut..].iter().copied().collect(),
        }
    }
}

/// Generates `num_tasks` downstream evaluation prompts. A pool of
/// `pool_size` labeled nodes per class is fixed once from the train split;
/// every task draws its `k` examples per class from that pool and its
/// queries from the test split.
#[allow(clippy::too_many_arguments)]
pub fn sample_downstream_eval(
    g: &Graph,
    lab: &NodeLabeling,
    split: &Split,
    m: usize,
    k: usize,
    pool_size: usize,
    num_tasks: usize,
    n_queries: usize,
    rng: &mut Stream,
) -> Result<Vec<FewShotPrompt>> {
    if k > pool_size {
        return Err(Error::TaskGen(format!(
            "k = {k} exceeds pool_size = {pool_size}"
        )));
    }
    if split.test.is_empty() {
        return Err(Error::TaskGen("test split is empty".into()));
    }
    let members = lab.class_members();
    for &node in members.iter().flatten() {
        if node >= g.num_nodes() {
            return Err(Error::Validation(format!("labeled node {node} outside graph")));
        }
    }
    let mut eligible: Vec<usize> = Vec::new();
    let mut train_members: Vec<Vec<usize>> = vec![Vec::new(); lab.num_classes()];
    let mut test_members: Vec<Vec<usize>> = vec![Vec::new(); lab.num_classes()];
    for c in 0..lab.num_classes() {
        for &node in &members[c] {
            if split.train.contains(&node) {
                train_members[c].push(node);
            } else if split.test.contains(&node) {
                test_members[c].push(node);
            }
        }
        if train_members[c].len() >= pool_size && !test_members[c].is_empty() {
            eligible.push(c);
        }
    }
    if eligible.len() < m {
        return Err(Error::TaskGen(format!(
            "need {m} classes with {pool_size} train nodes and a test node, found {}",
            eligible.len()
        )));
    }
    // The pools are fixed once, before any task is sampled.
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); lab.num_classes()];
    for &c in &eligible {
        let mut shuffled = train_members[c].clone();
        shuffled.shuffle(rng);
        shuffled.truncate(pool_size);
        shuffled.sort_unstable();
        pools[c] = shuffled;
    }

    let per_class_queries = queries_per_class(n_queries, m);
    let mut prompts = Vec::with_capacity(num_tasks);
    for _ in 0..num_tasks {
        let mut order = eligible.clone();
        order.shuffle(rng);
        let classes: Vec<usize> = order.into_iter().take(m).collect();
        let mut examples = Vec::new();
        let mut queries = Vec::new();
        let mut query_labels = Vec::new();
        for (class, &label) in classes.iter().enumerate() {
            let mut pool = pools[label].clone();
            pool.shuffle(rng);
            for &node in pool.iter().take(k) {
                examples.push((Datapoint::node(node), class));
            }
            for &node in &draw_with_fallback(&test_members[label], per_class_queries, rng) {
                queries.push(Datapoint::node(node));
                query_labels.push(class);
            }
        }
        let prompt = FewShotPrompt {
            m,
            k,
            examples,
            queries,
            query_labels,
            class_meta: classes.into_iter().map(ClassMeta::Label).collect(),
        };
        prompt.validate()?;
        prompts.push(prompt);
    }
    Ok(prompts)
}
