//! Prompt-graph construction: contextualizing datapoints into data graphs,
//! applying augmentations, and assembling the bipartite task graph that ties
//! example/query data nodes to label nodes.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Datapoint, Graph, Level};
use crate::seeds::Stream;
use crate::tasks::{ClassMeta, FewShotPrompt};

/// Augmentation settings applied while building pretraining prompt graphs.
/// Evaluation always runs with augmentation off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    pub enabled: bool,
    /// Per-node drop probability for non-input nodes.
    pub p_drop: f64,
    /// Per-node feature-masking probability (input nodes included).
    pub p_mask: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            enabled: true,
            p_drop: 0.5,
            p_mask: 0.5,
        }
    }
}

impl AugConfig {
    pub fn off() -> Self {
        AugConfig {
            enabled: false,
            p_drop: 0.0,
            p_mask: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_drop", self.p_drop), ("p_mask", self.p_mask)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Record of which global nodes an augmentation removed or masked.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugRecord {
    pub dropped: BTreeSet<usize>,
    pub masked: BTreeSet<usize>,
}

/// The sampled context of one datapoint: an induced subgraph with local
/// indexing, the datapoint's input nodes marked, and any augmentation state.
#[derive(Debug, Clone, PartialEq)]
pub struct DataGraph {
    /// local index -> global node id
    pub local_nodes: Vec<usize>,
    /// local count x d_in; masked rows are exactly zero
    pub features: Array2<f64>,
    /// (u_local, relation, v_local)
    pub local_edges: Vec<(usize, usize, usize)>,
    /// local indices of the datapoint's input nodes, in datapoint order
    pub input_local: Vec<usize>,
    pub level: Level,
    pub aug: AugRecord,
    /// Original rows of masked nodes, keyed by local index, for the
    /// attribute-reconstruction loss.
    pub masked_original: Vec<(usize, Vec<f64>)>,
}

impl DataGraph {
    pub fn num_local(&self) -> usize {
        self.local_nodes.len()
    }

    /// Checks the structural invariants every data graph must satisfy.
    pub fn validate(&self) -> Result<()> {
        let n = self.local_nodes.len();
        if self.features.nrows() != n {
            return Err(Error::Validation(format!(
                "feature rows {} != local node count {n}",
                self.features.nrows()
            )));
        }
        for &(u, _, v) in &self.local_edges {
            if u >= n || v >= n {
                return Err(Error::Validation(format!(
                    "local edge ({u}, {v}) outside [0, {n})"
                )));
            }
        }
        for &i in &self.input_local {
            if i >= n {
                return Err(Error::Validation(format!("input_local {i} outside [0, {n})")));
            }
            if self.aug.dropped.contains(&self.local_nodes[i]) {
                return Err(Error::Validation("input node marked dropped".into()));
            }
        }
        let masked_locals: BTreeSet<usize> =
            self.masked_original.iter().map(|(i, _)| *i).collect();
        for i in 0..n {
            let row_zero = self.features.row(i).iter().all(|&x| x == 0.0);
            if masked_locals.contains(&i) && !row_zero {
                return Err(Error::Validation(format!("masked row {i} is not zero")));
            }
        }
        Ok(())
    }
}

/// Contextualizes a datapoint by sampling its k-hop union in the source
/// graph and taking the induced subgraph.
pub fn contextualize(
    g: &Graph,
    dp: &Datapoint,
    k_hops: usize,
    fanout_cap: Option<usize>,
    rng: &mut Stream,
) -> Result<DataGraph> {
    contextualize_excluding(g, dp, k_hops, fanout_cap, None, rng)
}

/// As [`contextualize`], but drops every direct edge between the given node
/// pair from the induced edge set. Used for relation-classification episodes
/// where the edge between the input pair is the answer.
pub fn contextualize_excluding(
    g: &Graph,
    dp: &Datapoint,
    k_hops: usize,
    fanout_cap: Option<usize>,
    exclude_pair: Option<(usize, usize)>,
    rng: &mut Stream,
) -> Result<DataGraph> {
    let (nodes, induced) = g.khop_union(&dp.input_nodes, k_hops, fanout_cap, rng)?;
    let index: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut features = Array2::zeros((nodes.len(), g.feature_dim()));
    for (i, &global) in nodes.iter().enumerate() {
        features.row_mut(i).assign(&g.node_features().row(global));
    }
    let hidden = |u: usize, v: usize| match exclude_pair {
        Some((a, b)) => (u == a && v == b) || (u == b && v == a),
        None => false,
    };
    let local_edges = induced
        .iter()
        .filter(|e| !hidden(e.u, e.v))
        .map(|e| (index[&e.u], e.r, index[&e.v]))
        .collect();
    let input_local = dp.input_nodes.iter().map(|u| index[u]).collect();
    Ok(DataGraph {
        local_nodes: nodes,
        features,
        local_edges,
        input_local,
        level: dp.level,
        aug: AugRecord::default(),
        masked_original: Vec::new(),
    })
}

/// Removes each non-input node independently with probability `p`, along
/// with its incident edges. Input nodes always survive.
pub fn drop_node(dg: &DataGraph, p: f64, rng: &mut Stream) -> DataGraph {
    let input_set: BTreeSet<usize> = dg.input_local.iter().copied().collect();
    let mut keep = vec![true; dg.num_local()];
    let mut dropped = dg.aug.dropped.clone();
    for i in 0..dg.num_local() {
        if input_set.contains(&i) {
            continue;
        }
        if rng.random::<f64>() < p {
            keep[i] = false;
            dropped.insert(dg.local_nodes[i]);
        }
    }
    let mut remap = vec![usize::MAX; dg.num_local()];
    let mut local_nodes = Vec::new();
    for (i, &k) in keep.iter().enumerate() {
        if k {
            remap[i] = local_nodes.len();
            local_nodes.push(dg.local_nodes[i]);
        }
    }
    let mut features = Array2::zeros((local_nodes.len(), dg.features.ncols()));
    for (old, &new) in remap.iter().enumerate() {
        if new != usize::MAX {
            features.row_mut(new).assign(&dg.features.row(old));
        }
    }
    let local_edges = dg
        .local_edges
        .iter()
        .filter(|&&(u, _, v)| keep[u] && keep[v])
        .map(|&(u, r, v)| (remap[u], r, remap[v]))
        .collect();
    let input_local = dg.input_local.iter().map(|&i| remap[i]).collect();
    let masked_original = dg
        .masked_original
        .iter()
        .filter(|(i, _)| keep[*i])
        .map(|(i, row)| (remap[*i], row.clone()))
        .collect();
    DataGraph {
        local_nodes,
        features,
        local_edges,
        input_local,
        level: dg.level,
        aug: AugRecord {
            dropped,
            masked: dg.aug.masked.clone(),
        },
        masked_original,
    }
}

/// Zeroes each node's feature row independently with probability `p`
/// (input nodes included), retaining the original rows for reconstruction.
pub fn mask_node(dg: &DataGraph, p: f64, rng: &mut Stream) -> DataGraph {
    let mut out = dg.clone();
    let already: BTreeSet<usize> = dg.masked_original.iter().map(|(i, _)| *i).collect();
    for i in 0..dg.num_local() {
        let hit = rng.random::<f64>() < p;
        if !hit || already.contains(&i) {
            continue;
        }
        let original: Vec<f64> = out.features.row(i).to_vec();
        out.features.row_mut(i).fill(0.0);
        out.masked_original.push((i, original));
        out.aug.masked.insert(out.local_nodes[i]);
    }
    out
}

/// Role of a task-graph data node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Example,
    Query,
}

/// One task-graph edge between a data node and a label node, with the two
/// binary features the model reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEdge {
    pub data_idx: usize,
    pub label_idx: usize,
    pub is_example: bool,
    /// Always false on query edges (their labels are unknown by definition).
    pub is_true: bool,
}

/// Bipartite graph of data nodes and label nodes for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGraph {
    /// (prompt index, role); prompt index runs over examples then queries.
    pub data_nodes: Vec<(usize, Role)>,
    /// Per-example class index, aligned with example data nodes.
    pub example_labels: Vec<usize>,
    /// Local class index of each label node (0..m).
    pub label_nodes: Vec<usize>,
    pub edges: Vec<TaskEdge>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl TaskGraph {
    pub fn num_data_nodes(&self) -> usize {
        self.data_nodes.len()
    }

    pub fn num_label_nodes(&self) -> usize {
        self.label_nodes.len()
    }

    /// Indices of query data nodes, in prompt order.
    pub fn query_indices(&self) -> Vec<usize> {
        self.data_nodes
            .iter()
            .enumerate()
            .filter(|(_, (_, role))| *role == Role::Query)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks every task-graph invariant; returns a description of the first
    /// violation.
    pub fn validate(&self) -> Result<()> {
        let expect_data = self.m * self.k + self.n;
        if self.data_nodes.len() != expect_data {
            return Err(Error::Validation(format!(
                "data-node count {} != m*k + n = {expect_data}",
                self.data_nodes.len()
            )));
        }
        if self.label_nodes.len() != self.m {
            return Err(Error::Validation(format!(
                "label-node count {} != m = {}",
                self.label_nodes.len(),
                self.m
            )));
        }
        if self.edges.len() != expect_data * self.m {
            return Err(Error::Validation(format!(
                "edge count {} != (m*k + n)*m = {}",
                self.edges.len(),
                expect_data * self.m
            )));
        }
        if self.example_labels.len() != self.m * self.k {
            return Err(Error::Validation(format!(
                "example-label count {} != m*k = {}",
                self.example_labels.len(),
                self.m * self.k
            )));
        }
        for e in &self.edges {
            if e.data_idx >= self.data_nodes.len() || e.label_idx >= self.m {
                return Err(Error::Validation("task edge references missing node".into()));
            }
        }
        for (i, (_, role)) in self.data_nodes.iter().enumerate() {
            let incident: Vec<&TaskEdge> =
                self.edges.iter().filter(|e| e.data_idx == i).collect();
            if incident.len() != self.m {
                return Err(Error::Validation(format!(
                    "data node {i} has {} incident edges, expected {}",
                    incident.len(),
                    self.m
                )));
            }
            match role {
                Role::Example => {
                    let true_edges = incident.iter().filter(|e| e.is_true).count();
                    if true_edges != 1 {
                        return Err(Error::Validation(format!(
                            "example data node {i} has {true_edges} true edges, expected exactly 1"
                        )));
                    }
                    if incident.iter().any(|e| !e.is_example) {
                        return Err(Error::Validation(format!(
                            "example data node {i} has a non-example edge"
                        )));
                    }
                    let label = self.example_labels[i];
                    if !incident.iter().any(|e| e.is_true && e.label_idx == label) {
                        return Err(Error::Validation(format!(
                            "example data node {i} true edge does not match its label {label}"
                        )));
                    }
                }
                Role::Query => {
                    if incident.iter().any(|e| e.is_example || e.is_true) {
                        return Err(Error::Validation(format!(
                            "query data node {i} has an example or true edge"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Builds the task graph for an m-way k-shot episode with `n` queries. Each
/// example connects to all m label nodes with its true edge marked; each
/// query receives one edge from every label node.
pub fn build_task_graph(m: usize, k: usize, n: usize, example_labels: &[usize]) -> Result<TaskGraph> {
    if m == 0 || k == 0 {
        return Err(Error::Validation("m and k must be positive".into()));
    }
    if example_labels.len() != m * k {
        return Err(Error::Validation(format!(
            "expected {} example labels, got {}",
            m * k,
            example_labels.len()
        )));
    }
    let mut per_class = vec![0usize; m];
    for &c in example_labels {
        if c >= m {
            return Err(Error::Validation(format!("example label {c} outside [0, {m})")));
        }
        per_class[c] += 1;
    }
    for (c, &count) in per_class.iter().enumerate() {
        if count != k {
            return Err(Error::Validation(format!(
                "class {c} has {count} examples, expected exactly {k}"
            )));
        }
    }
    let mut data_nodes = Vec::with_capacity(m * k + n);
    let mut edges = Vec::with_capacity((m * k + n) * m);
    for (i, &label) in example_labels.iter().enumerate() {
        data_nodes.push((i, Role::Example));
        for c in 0..m {
            edges.push(TaskEdge {
                data_idx: i,
                label_idx: c,
                is_example: true,
                is_true: c == label,
            });
        }
    }
    for q in 0..n {
        let idx = m * k + q;
        data_nodes.push((idx, Role::Query));
        for c in 0..m {
            edges.push(TaskEdge {
                data_idx: idx,
                label_idx: c,
                is_example: false,
                is_true: false,
            });
        }
    }
    let tg = TaskGraph {
        data_nodes,
        example_labels: example_labels.to_vec(),
        label_nodes: (0..m).collect(),
        edges,
        m,
        k,
        n,
    };
    tg.validate()?;
    Ok(tg)
}

/// A fully assembled episode: one data graph per datapoint (examples then
/// queries) joined by the task graph.
#[derive(Debug, Clone)]
pub struct PromptGraph {
    pub data_graphs: Vec<DataGraph>,
    pub task_graph: TaskGraph,
    pub level: Level,
    /// Base seed for deterministic label-node initialization.
    pub label_seed: u64,
    /// Stable per-class identity keys (label embeddings follow the class,
    /// not its position in the prompt).
    pub class_keys: Vec<u64>,
    /// Optional class feature rows for feature-initialized label nodes.
    pub class_features: Option<Array2<f64>>,
}

impl PromptGraph {
    pub fn validate(&self) -> Result<()> {
        if self.data_graphs.len() != self.task_graph.num_data_nodes() {
            return Err(Error::Validation(format!(
                "{} data graphs but {} task-graph data nodes",
                self.data_graphs.len(),
                self.task_graph.num_data_nodes()
            )));
        }
        if self.class_keys.len() != self.task_graph.m {
            return Err(Error::Validation("class key count != m".into()));
        }
        for dg in &self.data_graphs {
            dg.validate()?;
        }
        self.task_graph.validate()
    }
}

/// Builds the prompt graph for a few-shot episode: contextualize every
/// datapoint, apply augmentation when enabled, and attach the task graph.
pub fn assemble_prompt_graph(
    g: &Graph,
    prompt: &FewShotPrompt,
    k_hops: usize,
    fanout_cap: Option<usize>,
    aug: &AugConfig,
    rng: &mut Stream,
) -> Result<PromptGraph> {
    prompt.validate()?;
    aug.validate()?;
    // Relation-classification episodes must not see the edge they classify.
    let hide_pair = prompt
        .class_meta
        .iter()
        .any(|meta| matches!(meta, ClassMeta::Relation(_)));
    let mut data_graphs = Vec::with_capacity(prompt.examples.len() + prompt.queries.len());
    let all_points = prompt
        .examples
        .iter()
        .map(|(dp, _)| dp)
        .chain(prompt.queries.iter());
    for dp in all_points {
        let exclude = if hide_pair && dp.level == Level::Edge {
            Some((dp.input_nodes[0], dp.input_nodes[1]))
        } else {
            None
        };
        let mut dg = contextualize_excluding(g, dp, k_hops, fanout_cap, exclude, rng)?;
        if aug.enabled {
            dg = drop_node(&dg, aug.p_drop, rng);
            dg = mask_node(&dg, aug.p_mask, rng);
        }
        data_graphs.push(dg);
    }
    let example_labels: Vec<usize> = prompt.examples.iter().map(|(_, c)| *c).collect();
    let task_graph = build_task_graph(prompt.m, prompt.k, prompt.queries.len(), &example_labels)?;
    let label_seed = rng.random::<u64>();
    let class_keys = prompt.class_meta.iter().map(ClassMeta::key).collect();
    Ok(PromptGraph {
        data_graphs,
        task_graph,
        level: prompt.level(),
        label_seed,
        class_keys,
        class_features: None,
    })
}
