//! Immutable in-memory graph storage with exact hop-neighborhood queries,
//! text-file loaders, and seeded synthetic generators.
//!
//! A [`Graph`] is a relation-typed multigraph over dense node ids with a
//! per-node feature matrix. Edges are stored once in the direction given;
//! when `directed` is false every traversal treats them symmetrically.
//! Graphs are never mutated after construction, so shared references are
//! safe across threads.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{self, Stream};

/// Whether a datapoint is a single node or a node pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Node,
    Edge,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::Node => write!(f, "node"),
            Level::Edge => write!(f, "edge"),
        }
    }
}

/// A classification input: one node, or an ordered endpoint pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Datapoint {
    pub input_nodes: Vec<usize>,
    pub level: Level,
}

impl Datapoint {
    pub fn node(u: usize) -> Self {
        Datapoint {
            input_nodes: vec![u],
            level: Level::Node,
        }
    }

    pub fn edge(u: usize, v: usize) -> Self {
        Datapoint {
            input_nodes: vec![u, v],
            level: Level::Edge,
        }
    }
}

/// A relation-typed edge `(u, r, v)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub r: usize,
    pub v: usize,
}

/// Immutable typed multigraph with dense node ids and node features.
#[derive(Debug, Clone)]
pub struct Graph {
    num_nodes: usize,
    node_features: Array2<f64>,
    edges: Vec<Edge>,
    num_relations: usize,
    directed: bool,
    /// Traversal adjacency: `(neighbor, relation)` per node. Contains both
    /// directions when the graph is undirected.
    adj: Vec<Vec<(usize, usize)>>,
}

impl Graph {
    /// Builds a validated graph. `num_nodes` is the feature row count.
    pub fn new(
        node_features: Array2<f64>,
        edges: Vec<Edge>,
        num_relations: usize,
        directed: bool,
    ) -> Result<Self> {
        let num_nodes = node_features.nrows();
        if num_relations == 0 {
            return Err(Error::Validation("num_relations must be at least 1".into()));
        }
        for (idx, e) in edges.iter().enumerate() {
            if e.u >= num_nodes || e.v >= num_nodes {
                return Err(Error::Validation(format!(
                    "edge {idx} ({}, {}, {}) has an endpoint outside [0, {num_nodes})",
                    e.u, e.r, e.v
                )));
            }
            if e.r >= num_relations {
                return Err(Error::Validation(format!(
                    "edge {idx} has relation {} outside [0, {num_relations})",
                    e.r
                )));
            }
        }
        let mut adj = vec![Vec::new(); num_nodes];
        for e in &edges {
            adj[e.u].push((e.v, e.r));
            if !directed && e.u != e.v {
                adj[e.v].push((e.u, e.r));
            }
        }
        Ok(Graph {
            num_nodes,
            node_features,
            edges,
            num_relations,
            directed,
            adj,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.ncols()
    }

    pub fn node_features(&self) -> &Array2<f64> {
        &self.node_features
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    /// Traversal neighbors of `u` as `(neighbor, relation)` pairs.
    pub fn neighbors(&self, u: usize) -> &[(usize, usize)] {
        &self.adj[u]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.adj[u].len()
    }

    fn check_seeds(&self, seeds: &[usize]) -> Result<()> {
        if seeds.is_empty() {
            return Err(Error::Validation("seed set is empty".into()));
        }
        for &s in seeds {
            if s >= self.num_nodes {
                return Err(Error::Validation(format!(
                    "seed node {s} outside [0, {})",
                    self.num_nodes
                )));
            }
        }
        Ok(())
    }

    /// Nodes at shortest-path distance exactly `i` from the nearest seed.
    /// `i = 0` returns the seed set itself.
    pub fn exact_hop_neighbors(&self, seeds: &[usize], i: usize) -> Result<BTreeSet<usize>> {
        self.check_seeds(seeds)?;
        let rings = self.hop_rings(seeds, i);
        Ok(rings.into_iter().nth(i).unwrap_or_default())
    }

    /// BFS rings 0..=max_hop from the seed set (ring 0 = seeds). Rings past
    /// the reachable frontier are empty.
    fn hop_rings(&self, seeds: &[usize], max_hop: usize) -> Vec<BTreeSet<usize>> {
        let mut visited = vec![false; self.num_nodes];
        let mut ring: BTreeSet<usize> = seeds.iter().copied().collect();
        for &s in &ring {
            visited[s] = true;
        }
        let mut rings = vec![ring.clone()];
        for _ in 0..max_hop {
            let mut next = BTreeSet::new();
            for &u in &ring {
                for &(v, _) in &self.adj[u] {
                    if !visited[v] {
                        visited[v] = true;
                        next.insert(v);
                    }
                }
            }
            rings.push(next.clone());
            ring = next;
        }
        rings
    }

    /// Union of hop rings `0..=k` with an optional per-node fanout cap, plus
    /// all induced edges among the returned nodes.
    ///
    /// With an unlimited cap this is the exact `k`-hop ball. With a cap, each
    /// frontier node contributes at most `cap` previously unvisited neighbors,
    /// sampled uniformly without replacement. Deterministic given the stream.
    pub fn khop_union(
        &self,
        seeds: &[usize],
        k: usize,
        fanout_cap: Option<usize>,
        rng: &mut Stream,
    ) -> Result<(Vec<usize>, Vec<Edge>)> {
        self.check_seeds(seeds)?;
        let mut visited = vec![false; self.num_nodes];
        let mut nodes: Vec<usize> = Vec::new();
        for &s in seeds {
            if !visited[s] {
                visited[s] = true;
                nodes.push(s);
            }
        }
        let mut frontier: Vec<usize> = nodes.clone();
        for _ in 0..k {
            let mut next: Vec<usize> = Vec::new();
            for &u in &frontier {
                let mut fresh: Vec<usize> = Vec::new();
                for &(v, _) in &self.adj[u] {
                    if !visited[v] && !fresh.contains(&v) {
                        fresh.push(v);
                    }
                }
                fresh.sort_unstable();
                if let Some(cap) = fanout_cap {
                    if fresh.len() > cap {
                        fresh.shuffle(rng);
                        fresh.truncate(cap);
                        fresh.sort_unstable();
                    }
                }
                for v in fresh {
                    if !visited[v] {
                        visited[v] = true;
                        next.push(v);
                    }
                }
            }
            next.sort_unstable();
            nodes.extend(&next);
            frontier = next;
        }
        let member: BTreeSet<usize> = nodes.iter().copied().collect();
        let induced: Vec<Edge> = self
            .edges
            .iter()
            .copied()
            .filter(|e| member.contains(&e.u) && member.contains(&e.v))
            .collect();
        Ok((nodes, induced))
    }
}

/// A node-level labeling `f(node) = class`, possibly partial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeLabeling {
    labels: BTreeMap<usize, usize>,
    num_classes: usize,
}

impl NodeLabeling {
    pub fn new(labels: BTreeMap<usize, usize>, num_classes: usize) -> Result<Self> {
        for (&node, &class) in &labels {
            if class >= num_classes {
                return Err(Error::Validation(format!(
                    "node {node} has class {class} outside [0, {num_classes})"
                )));
            }
        }
        Ok(NodeLabeling {
            labels,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, node: usize) -> Option<usize> {
        self.labels.get(&node).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().map(|(&n, &c)| (n, c))
    }

    /// Labeled nodes grouped by class, ascending node order within a class.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_classes];
        for (&node, &class) in &self.labels {
            members[class].push(node);
        }
        members
    }

    /// Restricts the labeling to the given node set, keeping class ids.
    pub fn restricted_to(&self, nodes: &BTreeSet<usize>) -> NodeLabeling {
        NodeLabeling {
            labels: self
                .labels
                .iter()
                .filter(|(n, _)| nodes.contains(n))
                .map(|(&n, &c)| (n, c))
                .collect(),
            num_classes: self.num_classes,
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Loads a graph from an edge file (`u<TAB>r<TAB>v` per line) and a feature
/// file (one whitespace-separated real row per node). The feature row count
/// defines the node count; `num_relations` is the largest relation id + 1.
pub fn load_graph(edge_path: &Path, feature_path: &Path, directed: bool) -> Result<Graph> {
    let feat_text = fs::read_to_string(feature_path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, line) in feat_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| parse_err(feature_path, idx + 1, format!("bad real `{t}`")))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Validation(format!(
                    "feature row {} has width {} but earlier rows have width {w}",
                    idx + 1,
                    row.len()
                )));
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Validation(format!(
            "feature file {} contains no rows",
            feature_path.display()
        )));
    }
    let width = width.unwrap();
    let num_nodes = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let features = Array2::from_shape_vec((num_nodes, width), flat)
        .map_err(|e| Error::Validation(e.to_string()))?;

    let edge_text = fs::read_to_string(edge_path)?;
    let mut edges = Vec::new();
    let mut max_rel = 0usize;
    for (idx, line) in edge_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(parse_err(
                edge_path,
                idx + 1,
                format!("expected `u<TAB>r<TAB>v`, got {} fields", parts.len()),
            ));
        }
        let nums: Vec<usize> = parts
            .iter()
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| parse_err(edge_path, idx + 1, format!("bad integer `{t}`")))
            })
            .collect::<Result<_>>()?;
        max_rel = max_rel.max(nums[1]);
        edges.push(Edge {
            u: nums[0],
            r: nums[1],
            v: nums[2],
        });
    }
    Graph::new(features, edges, max_rel + 1, directed)
}

/// Loads a labeling file (`node_id<TAB>class_id` per line).
pub fn load_labeling(path: &Path) -> Result<NodeLabeling> {
    let text = fs::read_to_string(path)?;
    let mut labels = BTreeMap::new();
    let mut max_class = 0usize;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 2 {
            return Err(parse_err(
                path,
                idx + 1,
                format!("expected `node_id<TAB>class_id`, got {} fields", parts.len()),
            ));
        }
        let node: usize = parts[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, idx + 1, format!("bad node id `{}`", parts[0])))?;
        let class: usize = parts[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, idx + 1, format!("bad class id `{}`", parts[1])))?;
        max_class = max_class.max(class);
        match labels.entry(node) {
            Entry::Vacant(e) => {
                e.insert(class);
            }
            Entry::Occupied(_) => {
                return Err(parse_err(path, idx + 1, format!("duplicate node id {node}")));
            }
        }
    }
    NodeLabeling::new(labels, max_class + 1)
}

/// Generates an undirected planted-partition graph: `num_blocks` blocks of
/// `nodes_per_block` nodes, within-block edge probability `p_in`, cross-block
/// `p_out`. Features are the block one-hot plus i.i.d. Gaussian noise scaled
/// by `feature_noise`. The labeling maps each node to its block.
pub fn synth_planted_graph(
    num_blocks: usize,
    nodes_per_block: usize,
    p_in: f64,
    p_out: f64,
    feature_noise: f64,
    seed: u64,
) -> Result<(Graph, NodeLabeling)> {
    if num_blocks == 0 || nodes_per_block == 0 {
        return Err(Error::Validation("blocks and block size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&p_out) || !(0.0..=1.0).contains(&p_in) || p_out > p_in {
        return Err(Error::Validation(format!(
            "probabilities must satisfy 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}"
        )));
    }
    let n = num_blocks * nodes_per_block;
    let block_of = |u: usize| u / nodes_per_block;

    let mut rng = seeds::stream(seed, &[0x5b_0c_4d]);
    let normal = StandardNormal;
    let mut features = Array2::zeros((n, num_blocks));
    for u in 0..n {
        for j in 0..num_blocks {
            let noise: f64 = normal.sample(&mut rng);
            features[[u, j]] = if block_of(u) == j { 1.0 } else { 0.0 } + feature_noise * noise;
        }
    }
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if block_of(u) == block_of(v) { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push(Edge { u, r: 0, v });
            }
        }
    }
    let graph = Graph::new(features, edges, 1, false)?;
    let labels: BTreeMap<usize, usize> = (0..n).map(|u| (u, block_of(u))).collect();
    let labeling = NodeLabeling::new(labels, num_blocks)?;
    Ok((graph, labeling))
}
