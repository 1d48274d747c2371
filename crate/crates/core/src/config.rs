//! Run configuration: one JSON document covering graph source, model, task,
//! training, augmentation, and evaluation settings, with dotted-key
//! command-line overrides. Every run directory receives a `config.json`
//! echo so the run is reproducible from that file plus the input data.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ContrastiveConfig;
use crate::graph::{self, Graph, Level, NodeLabeling};
use crate::model::{LabelInit, ModelConfig, Readout, TfEdgePolicy};
use crate::prompt::AugConfig;
use crate::tasks::TaskParams;
use crate::train::TrainConfig;

/// Where the source graph comes from: files, or a seeded synthetic
/// planted-partition generator (useful for demos and self-contained runs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct GraphSource {
    pub edges: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub directed: bool,
    pub synthetic: Option<SyntheticGraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticGraph {
    pub num_blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_noise: f64,
}

impl Default for SyntheticGraph {
    fn default() -> Self {
        SyntheticGraph {
            num_blocks: 2,
            nodes_per_block: 100,
            p_in: 0.2,
            p_out: 0.02,
            feature_noise: 1.0,
        }
    }
}

impl GraphSource {
    /// Loads or generates the graph and, when available, its labeling.
    pub fn load(&self, seed: u64) -> Result<(Graph, Option<NodeLabeling>)> {
        if let Some(synth) = &self.synthetic {
            let (g, lab) = graph::synth_planted_graph(
                synth.num_blocks,
                synth.nodes_per_block,
                synth.p_in,
                synth.p_out,
                synth.feature_noise,
                seed,
            )?;
            return Ok((g, Some(lab)));
        }
        let edges = self
            .edges
            .as_ref()
            .ok_or_else(|| Error::Config("graph.edges path missing".into()))?;
        let features = self
            .features
            .as_ref()
            .ok_or_else(|| Error::Config("graph.features path missing".into()))?;
        let g = graph::load_graph(edges, features, self.directed)?;
        let lab = match &self.labels {
            Some(path) => Some(graph::load_labeling(path)?),
            None => None,
        };
        Ok((g, lab))
    }
}

/// Model architecture settings; widths that depend on the graph (input
/// width, relation count) are filled in at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub d: usize,
    pub layers_d: usize,
    /// Task-graph depth; None picks the per-level default (1 node, 2 edge).
    pub layers_t: Option<usize>,
    pub rounds: usize,
    pub temperature: f64,
    pub label_init: LabelInit,
    /// None picks the per-level default (all for node, positive-and-query
    /// for edge).
    pub tf_edge_policy: Option<TfEdgePolicy>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            d: 256,
            layers_d: 2,
            layers_t: None,
            rounds: 1,
            temperature: 0.1,
            label_init: LabelInit::SeededGaussian,
            tf_edge_policy: None,
        }
    }
}

impl ModelSettings {
    pub fn to_model_config(
        &self,
        level: Level,
        d_in: usize,
        num_relations: usize,
        directed: bool,
    ) -> ModelConfig {
        let base = ModelConfig::for_level(level, d_in, num_relations);
        ModelConfig {
            d: self.d,
            layers_d: self.layers_d,
            layers_t: self.layers_t.unwrap_or(base.layers_t),
            rounds: self.rounds,
            readout: match level {
                Level::Node => Readout::SingleNode,
                Level::Edge => Readout::PairPool,
            },
            tf_edge_policy: self.tf_edge_policy.unwrap_or(base.tf_edge_policy),
            label_init: self.label_init,
            temperature: self.temperature,
            d_in,
            num_relations,
            directed,
        }
    }
}

/// Downstream evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub num_tasks: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub pool_size: usize,
    pub train_fraction: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            num_tasks: 500,
            ways: 3,
            shots: 3,
            queries: 3,
            pool_size: 10,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub graph: GraphSource,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub task: TaskParams,
    pub aug: AugConfig,
    pub eval: EvalSettings,
    pub contrastive: ContrastiveConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            graph: GraphSource::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            task: TaskParams::default(),
            aug: AugConfig::default(),
            eval: EvalSettings::default(),
            contrastive: ContrastiveConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

impl RunConfig {
    /// Loads a JSON config and applies dotted-key overrides
    /// (`train.steps=200`). Values parse as JSON first, falling back to a
    /// string literal.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("config does not match the schema: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.aug.validate()?;
        if self.eval.num_tasks == 0 {
            return Err(Error::Config("eval.num_tasks must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval.train_fraction) {
            return Err(Error::Config("eval.train_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Propagates the run seed into nested configs, then writes the echo.
    pub fn with_seed(mut self, seed: u64) -> RunConfig {
        self.seed = seed;
        self.train.seed = seed;
        self.contrastive.seed = seed;
        self
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

/// Applies one `a.b.c=value` override to a JSON tree, creating intermediate
/// objects as needed.
pub fn apply_override(value: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::Config(format!("override `{assignment}` must look like key.path=value"))
    })?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        if !cursor.is_object() {
            return Err(Error::Config(format!(
                "override `{key}`: `{}` is not an object",
                segments[..i].join(".")
            )));
        }
        let map = cursor.as_object_mut().unwrap();
        if i + 1 == segments.len() {
            map.insert(segment.to_string(), parsed);
            return Ok(());
        }
        cursor = map
            .entry(segment.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split never yields an empty iterator")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_object() {
        let cfg = RunConfig::from_value(serde_json::json!({})).unwrap();
        assert_eq!(cfg.eval.num_tasks, 500);
        assert_eq!(cfg.eval.shots, 3);
        assert_eq!(cfg.eval.pool_size, 10);
        assert_eq!(cfg.model.d, 256);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.weight_decay, 1e-3);
        assert_eq!(cfg.train.checkpoint_every, 500);
        assert_eq!(cfg.task.m, 30);
        assert_eq!(cfg.task.k, 3);
        assert_eq!(cfg.task.n, 4);
        assert_eq!(cfg.task.nm_hops, 2);
        assert_eq!(cfg.aug.p_drop, 0.5);
        assert_eq!(cfg.aug.p_mask, 0.5);
    }

    #[test]
    fn dotted_overrides_reach_nested_fields() {
        let mut value = serde_json::json!({});
        apply_override(&mut value, "train.steps=42").unwrap();
        apply_override(&mut value, "task.level=\"edge\"").unwrap();
        apply_override(&mut value, "task.fanout_cap=8").unwrap();
        apply_override(&mut value, "aug.enabled=false").unwrap();
        let cfg = RunConfig::from_value(value).unwrap();
        assert_eq!(cfg.train.steps, 42);
        assert_eq!(cfg.task.level, Level::Edge);
        assert_eq!(cfg.task.fanout_cap, Some(8));
        assert!(!cfg.aug.enabled);
    }

    #[test]
    fn bad_override_and_schema_are_config_errors() {
        let mut value = serde_json::json!({});
        assert!(matches!(
            apply_override(&mut value, "no-equals-sign"),
            Err(Error::Config(_))
        ));
        apply_override(&mut value, "train.steps=\"lots\"").unwrap();
        assert!(matches!(RunConfig::from_value(value), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default().with_seed(7);
        cfg.save(dir.path()).unwrap();
        let loaded = RunConfig::load(&dir.path().join("config.json"), &[]).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn synthetic_graph_loads_with_labels() {
        let cfg = RunConfig::from_value(serde_json::json!({
            "graph": {"synthetic": {"num_blocks": 2, "nodes_per_block": 10,
                       "p_in": 0.5, "p_out": 0.1, "feature_noise": 0.2}}
        }))
        .unwrap();
        let (g, lab) = cfg.graph.load(3).unwrap();
        assert_eq!(g.num_nodes(), 20);
        assert_eq!(lab.unwrap().num_classes(), 2);
    }

    #[test]
    fn model_settings_fill_per_level_defaults() {
        let ms = ModelSettings::default();
        let node = ms.to_model_config(Level::Node, 4, 1, false);
        assert_eq!(node.layers_t, 1);
        assert_eq!(node.tf_edge_policy, TfEdgePolicy::All);
        let edge = ms.to_model_config(Level::Edge, 4, 3, false);
        assert_eq!(edge.layers_t, 2);
        assert_eq!(edge.tf_edge_policy, TfEdgePolicy::PositiveAndQuery);
        assert_eq!(edge.num_relations, 3);
    }
}
