//! Episodic pretraining: neighbor-matching and multi-task episodes are mixed
//! round-robin, assembled into augmented prompt graphs, and optimized with
//! decoupled-weight-decay Adam against the combined cross-entropy and
//! attribute-reconstruction objective.
//!
//! Every random draw derives from `(seed, step, episode-index)`, so a run is
//! bit-reproducible and a checkpoint resume continues the exact trajectory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Level, NodeLabeling};
use crate::model::{
    build_forward, save_checkpoint, update_bn_running, Checkpoint, Mode, ModelConfig, ModelParams,
    OptimState, ParamVars,
};
use crate::prompt::{assemble_prompt_graph, AugConfig, PromptGraph};
use crate::seeds;
use crate::tape::{Matrix, Tape, Var};
use crate::tasks::{
    sample_mt_edge, sample_mt_node, sample_nm_edge, sample_nm_node, FewShotPrompt, TaskParams,
};

/// Objective family an episode belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    NeighborMatching,
    MultiTask,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::NeighborMatching => write!(f, "nm"),
            Family::MultiTask => write!(f, "mt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Episodes per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Round-robin mixing ratio: this many NM episodes ...
    pub nm_per_cycle: usize,
    /// ... then this many MT episodes, repeating.
    pub mt_per_cycle: usize,
    /// Weight of the attribute-reconstruction loss; 0 disables it.
    pub attr_weight: f64,
    pub checkpoint_every: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 1,
            lr: 1e-3,
            weight_decay: 1e-3,
            nm_per_cycle: 1,
            mt_per_cycle: 1,
            attr_weight: 1.0,
            checkpoint_every: 500,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.nm_per_cycle == 0 && self.mt_per_cycle == 0 {
            return Err(Error::Config(
                "episode mix needs at least one of nm_per_cycle, mt_per_cycle".into(),
            ));
        }
        if self.attr_weight < 0.0 {
            return Err(Error::Config("attr_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One sampled episode ready for the loss.
#[derive(Debug, Clone)]
pub struct Episode {
    pub family: Family,
    pub prompt: FewShotPrompt,
    pub graph: PromptGraph,
}

/// Decoupled-weight-decay Adam over the named parameter groups.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Which groups receive updates; others are left untouched entirely.
    pub trainable: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &ModelParams, lr: f64, weight_decay: f64) -> Self {
        let shapes: Vec<(usize, usize)> = params
            .named()
            .iter()
            .map(|(_, m)| (m.nrows(), m.ncols()))
            .collect();
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros((r, c))).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros((r, c))).collect(),
            trainable: vec![true; shapes.len()],
        }
    }

    /// Restrict updates to groups whose name starts with one of the prefixes.
    pub fn restrict_to_prefixes(mut self, params: &ModelParams, prefixes: &[&str]) -> Self {
        self.trainable = params
            .named()
            .iter()
            .map(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .collect();
        self
    }

    /// Applies one update. `grads` is aligned with [`ModelParams::named`].
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Matrix], grad_clip: Option<f64>) {
        let clip_scale = match grad_clip {
            Some(max_norm) => {
                let total: f64 = grads
                    .iter()
                    .zip(&self.trainable)
                    .filter(|(_, &t)| t)
                    .map(|(g, _)| g.iter().map(|x| x * x).sum::<f64>())
                    .sum();
                let norm = total.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, (_, p)) in params.named_mut().into_iter().enumerate() {
            if !self.trainable[idx] {
                continue;
            }
            let g = &grads[idx] * clip_scale;
            self.m[idx] = &self.m[idx] * self.beta1 + &(&g * (1.0 - self.beta1));
            self.v[idx] = &self.v[idx] * self.beta2 + &(&g * &g * (1.0 - self.beta2));
            let m_hat = &self.m[idx] / bc1;
            let v_hat = &self.v[idx] / bc2;
            let denom = v_hat.mapv(|x| x.sqrt() + self.eps);
            let update = &(&m_hat / &denom) + &(&*p * self.weight_decay);
            *p -= &(&update * self.lr);
        }
    }

    pub fn state(&self) -> OptimState {
        OptimState {
            t: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn restore(&mut self, state: OptimState) {
        self.t = state.t;
        self.m = state.m;
        self.v = state.v;
    }
}

/// Per-family metrics of one step.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub families: BTreeMap<Family, FamilyMetrics>,
    pub total_loss: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FamilyMetrics {
    pub loss_ce: f64,
    pub loss_attr: f64,
    pub query_acc: f64,
    pub queries: usize,
}

/// One metrics-log record (CSV row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub family: String,
    pub loss_ce: f64,
    pub loss_attr: f64,
    pub query_acc: f64,
    pub wall_ms: f64,
}

impl MetricRow {
    pub const CSV_HEADER: &'static str = "step,family,loss_ce,loss_attr,query_acc,wall_ms";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.3}",
            self.step, self.family, self.loss_ce, self.loss_attr, self.query_acc, self.wall_ms
        )
    }
}

/// Records the batch loss: per-family mean cross-entropy over queries summed
/// across the families present, plus `attr_weight` times the mean attribute
/// loss over all data graphs in the batch.
pub fn build_batch_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParams,
    episodes: &[Episode],
    attr_weight: f64,
    mode: Mode,
) -> Result<(Var, StepMetrics, Vec<(usize, Matrix, Matrix)>)> {
    if episodes.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    struct FamilyAcc {
        weighted_ce: Option<Var>,
        queries: usize,
        correct: usize,
        attr_sum: f64,
        attr_graphs: usize,
    }
    let mut fams: BTreeMap<Family, FamilyAcc> = BTreeMap::new();
    let mut attr_terms: Vec<Var> = Vec::new();
    let mut total_graphs = 0usize;
    let mut bn_batch = Vec::new();

    for ep in episodes {
        let build = build_forward(tape, pv, params, &ep.graph, mode)?;
        bn_batch.extend(build.bn_batch);
        let labels = &ep.prompt.query_labels;
        if labels.len() != tape.value(build.logits).nrows() {
            return Err(Error::Validation("query label count != logit rows".into()));
        }
        let ce = tape.cross_entropy_mean(build.logits, labels);
        let n_q = labels.len();
        let correct = {
            let vals = tape.value(build.logits);
            (0..n_q)
                .filter(|&i| {
                    let row = vals.row(i);
                    let mut best = 0;
                    for (j, &x) in row.iter().enumerate() {
                        if x > row[best] {
                            best = j;
                        }
                    }
                    best == labels[i]
                })
                .count()
        };

        let attr_value: f64 = build
            .attr_terms
            .iter()
            .map(|&t| tape.value(t)[[0, 0]])
            .sum();
        let acc = fams.entry(ep.family).or_insert(FamilyAcc {
            weighted_ce: None,
            queries: 0,
            correct: 0,
            attr_sum: 0.0,
            attr_graphs: 0,
        });
        // Weight each episode's mean CE by its query count so the family term
        // is the mean over queries regardless of batch composition.
        let weighted = tape.scale(ce, n_q as f64);
        acc.weighted_ce = Some(match acc.weighted_ce {
            Some(prev) => tape.add(prev, weighted),
            None => weighted,
        });
        acc.queries += n_q;
        acc.correct += correct;
        acc.attr_sum += attr_value;
        acc.attr_graphs += ep.graph.data_graphs.len();
        attr_terms.extend(build.attr_terms);
        total_graphs += ep.graph.data_graphs.len();
    }

    let mut loss: Option<Var> = None;
    let mut metrics = StepMetrics::default();
    for (family, acc) in &fams {
        let term = tape.scale(acc.weighted_ce.unwrap(), 1.0 / acc.queries as f64);
        metrics.families.insert(
            *family,
            FamilyMetrics {
                loss_ce: tape.value(term)[[0, 0]],
                loss_attr: if acc.attr_graphs > 0 {
                    acc.attr_sum / acc.attr_graphs as f64
                } else {
                    0.0
                },
                query_acc: acc.correct as f64 / acc.queries as f64,
                queries: acc.queries,
            },
        );
        loss = Some(match loss {
            Some(prev) => tape.add(prev, term),
            None => term,
        });
    }
    let mut loss = loss.unwrap();
    if attr_weight > 0.0 && !attr_terms.is_empty() {
        let mut attr_sum = attr_terms[0];
        for &t in &attr_terms[1..] {
            attr_sum = tape.add(attr_sum, t);
        }
        let attr_mean = tape.scale(attr_sum, attr_weight / total_graphs as f64);
        loss = tape.add(loss, attr_mean);
    }
    metrics.total_loss = tape.value(loss)[[0, 0]];
    Ok((loss, metrics, bn_batch))
}

/// Value-level loss of a batch (no parameter update).
pub fn compute_loss(
    params: &ModelParams,
    episodes: &[Episode],
    attr_weight: f64,
) -> Result<(f64, StepMetrics)> {
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params);
    let (loss, metrics, _) =
        build_batch_loss(&mut tape, &pv, params, episodes, attr_weight, Mode::Train)?;
    Ok((tape.value(loss)[[0, 0]], metrics))
}

/// Samples one episode for `(seed, step, index)` with the family decided by
/// the round-robin mix.
#[allow(clippy::too_many_arguments)]
pub fn sample_episode(
    g: &Graph,
    lab: Option<&NodeLabeling>,
    task: &TaskParams,
    aug: &AugConfig,
    family: Family,
    seed: u64,
    step: usize,
    index: usize,
) -> Result<Episode> {
    let mut rng = seeds::stream(seed, &[0xE9, step as u64, index as u64]);
    let prompt = match (family, task.level) {
        (Family::NeighborMatching, Level::Node) => {
            let m = task.m.min(g.num_nodes()).max(2);
            sample_nm_node(g, m, task.k, task.n, task.nm_hops, &mut rng)?
        }
        (Family::NeighborMatching, Level::Edge) => {
            let m = task.m.min(g.num_nodes()).max(2);
            sample_nm_edge(g, m, task.k, task.n, task.nm_hops, &mut rng)?
        }
        (Family::MultiTask, Level::Node) => {
            let lab = lab
                .ok_or_else(|| Error::Config("multi-task episodes need a node labeling".into()))?;
            let usable = lab
                .class_members()
                .iter()
                .filter(|mem| mem.len() >= task.k)
                .count();
            let m = task.m.min(usable).max(2);
            sample_mt_node(g, lab, m, task.k, task.n, &mut rng)?
        }
        (Family::MultiTask, Level::Edge) => {
            if g.num_relations() < 2 {
                return Err(Error::Config(
                    "edge-level multi-task episodes need at least 2 relations".into(),
                ));
            }
            let m = task.m.min(g.num_relations()).max(2);
            sample_mt_edge(g, m, task.k, task.n, &mut rng)?
        }
    };
    let graph = assemble_prompt_graph(g, &prompt, task.k_hops, task.fanout_cap, aug, &mut rng)?;
    Ok(Episode {
        family,
        prompt,
        graph,
    })
}

/// Family of the `i`-th episode overall under the round-robin mix.
pub fn family_at(cfg: &TrainConfig, episode_counter: usize) -> Family {
    let cycle = cfg.nm_per_cycle + cfg.mt_per_cycle;
    if episode_counter % cycle < cfg.nm_per_cycle {
        Family::NeighborMatching
    } else {
        Family::MultiTask
    }
}

/// Mutable training state: parameters, optimizer moments, and the step
/// counter. Together with the seed this determines the full trajectory.
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: AdamW,
    pub step: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            step: self.step as u64,
            seed: self.seed,
            optimizer: Some(self.optimizer.state()),
        }
    }
}

/// Result of a (possibly resumed) pretraining run.
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricRow>,
    /// Paths of checkpoints written, in order.
    pub checkpoints: Vec<PathBuf>,
}

/// Runs pretraining from freshly initialized parameters.
pub fn pretrain(
    g: &Graph,
    lab: Option<&NodeLabeling>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    task: &TaskParams,
    aug: &AugConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let params = ModelParams::init(model_cfg, train_cfg.seed)?;
    let optimizer = AdamW::new(&params, train_cfg.lr, train_cfg.weight_decay);
    let state = TrainState {
        params,
        optimizer,
        step: 0,
        seed: train_cfg.seed,
    };
    run_steps(state, g, lab, train_cfg, task, aug, out_dir)
}

/// Restores a checkpoint and continues the same trajectory. The configured
/// seed must match the checkpoint's; the seed is part of the run identity.
pub fn resume(
    checkpoint_path: &Path,
    g: &Graph,
    lab: Option<&NodeLabeling>,
    train_cfg: &TrainConfig,
    task: &TaskParams,
    aug: &AugConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    let ckpt = crate::model::load_checkpoint(checkpoint_path)?;
    if ckpt.seed != train_cfg.seed {
        return Err(Error::Config(format!(
            "checkpoint was trained with seed {} but the config says {}; \
             the seed is part of the run identity",
            ckpt.seed, train_cfg.seed
        )));
    }
    let optim_state = ckpt
        .optimizer
        .ok_or_else(|| Error::Load("checkpoint lacks optimizer state; cannot resume".into()))?;
    let mut optimizer = AdamW::new(&ckpt.params, train_cfg.lr, train_cfg.weight_decay);
    optimizer.restore(optim_state);
    let state = TrainState {
        params: ckpt.params,
        optimizer,
        step: ckpt.step as usize,
        seed: train_cfg.seed,
    };
    run_steps(state, g, lab, train_cfg, task, aug, out_dir)
}

fn run_steps(
    mut state: TrainState,
    g: &Graph,
    lab: Option<&NodeLabeling>,
    train_cfg: &TrainConfig,
    task: &TaskParams,
    aug: &AugConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut metrics: Vec<MetricRow> = Vec::new();
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    let write_ckpt =
        |state: &TrainState, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
            if let Some(dir) = out_dir {
                let path = dir.join(format!("ckpt_{}.bin", state.step));
                save_checkpoint(&path, &state.checkpoint())?;
                checkpoints.push(path);
            }
            Ok(())
        };

    while state.step < train_cfg.steps {
        let step = state.step;
        let started = Instant::now();
        let mut episodes = Vec::with_capacity(train_cfg.batch_size);
        for i in 0..train_cfg.batch_size {
            let counter = step * train_cfg.batch_size + i;
            let family = family_at(train_cfg, counter);
            episodes.push(sample_episode(
                g,
                lab,
                task,
                aug,
                family,
                train_cfg.seed,
                step,
                i,
            )?);
        }
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &state.params);
        let (loss, step_metrics, bn_batch) = build_batch_loss(
            &mut tape,
            &pv,
            &state.params,
            &episodes,
            train_cfg.attr_weight,
            Mode::Train,
        )?;
        let loss_value = tape.value(loss)[[0, 0]];
        if !loss_value.is_finite() {
            let dump = episodes
                .iter()
                .map(|e| serde_json::to_string(&e.prompt).unwrap_or_default())
                .collect::<Vec<_>>()
                .join("\n");
            if let Some(dir) = out_dir {
                let _ = std::fs::write(dir.join(format!("bad_batch_step{step}.json")), &dump);
            }
            return Err(Error::Train(format!(
                "non-finite loss {loss_value} at step {step}; offending episodes:\n{dump}"
            )));
        }
        let grads = tape.backward(loss);
        let grad_list: Vec<Matrix> = pv.ordered().iter().map(|&v| grads.get(v).clone()).collect();
        state
            .optimizer
            .step(&mut state.params, &grad_list, train_cfg.grad_clip);
        update_bn_running(&mut state.params, &bn_batch);
        state.step += 1;

        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        for (family, fm) in &step_metrics.families {
            metrics.push(MetricRow {
                step: state.step,
                family: family.to_string(),
                loss_ce: fm.loss_ce,
                loss_attr: fm.loss_attr,
                query_acc: fm.query_acc,
                wall_ms,
            });
        }
        if train_cfg.checkpoint_every > 0 && state.step % train_cfg.checkpoint_every == 0 {
            write_ckpt(&state, &mut checkpoints)?;
        }
    }
    // Completion checkpoint, unless the last periodic one already covers it.
    let already = checkpoints
        .last()
        .map(|p| p.ends_with(format!("ckpt_{}.bin", state.step)))
        .unwrap_or(false);
    if !already {
        write_ckpt(&state, &mut checkpoints)?;
    }
    if let Some(dir) = out_dir {
        append_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
    }
    Ok(TrainOutcome {
        state,
        metrics,
        checkpoints,
    })
}

/// Appends rows to the metrics CSV, writing the header if the file is new.
pub fn append_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(file, "{}", MetricRow::CSV_HEADER)?;
    }
    for row in rows {
        writeln!(file, "{}", row.to_csv())?;
    }
    Ok(())
}

/// Maximum relative error between analytic and central finite-difference
/// gradients, per parameter group, on the given batch. Entries where both
/// gradients are below 1e-8 in magnitude count as zero error.
pub fn gradient_check(
    params: &ModelParams,
    episodes: &[Episode],
    attr_weight: f64,
    epsilon: f64,
) -> Result<Vec<(String, f64)>> {
    let loss_of = |p: &ModelParams| -> Result<f64> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, p);
        let (loss, _, _) = build_batch_loss(&mut tape, &pv, p, episodes, attr_weight, Mode::Train)?;
        Ok(tape.value(loss)[[0, 0]])
    };

    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params);
    let (loss, _, _) =
        build_batch_loss(&mut tape, &pv, params, episodes, attr_weight, Mode::Train)?;
    let grads = tape.backward(loss);
    let analytic: Vec<Matrix> = pv.ordered().iter().map(|&v| grads.get(v).clone()).collect();

    let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
    let mut results = Vec::with_capacity(names.len());
    for (group_idx, name) in names.iter().enumerate() {
        let shape = {
            let m = params.named()[group_idx].1;
            (m.nrows(), m.ncols())
        };
        let mut worst = 0.0f64;
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let mut plus = params.clone();
                plus.named_mut()[group_idx].1[[i, j]] += epsilon;
                let mut minus = params.clone();
                minus.named_mut()[group_idx].1[[i, j]] -= epsilon;
                let numeric = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * epsilon);
                let a = analytic[group_idx][[i, j]];
                let abs_err = (numeric - a).abs();
                let rel = if abs_err < 1e-8 {
                    0.0
                } else {
                    abs_err / (numeric.abs() + a.abs()).max(1e-8)
                };
                worst = worst.max(rel);
            }
        }
        results.push((name.clone(), worst));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::synth_planted_graph;
    use crate::model::load_checkpoint;

    fn fixture() -> (Graph, NodeLabeling) {
        synth_planted_graph(2, 20, 0.3, 0.05, 0.3, 77).unwrap()
    }

    fn small_task() -> TaskParams {
        TaskParams {
            m: 2,
            k: 2,
            n: 2,
            nm_hops: 1,
            k_hops: 1,
            fanout_cap: Some(4),
            ..TaskParams::default()
        }
    }

    fn small_model(d_in: usize) -> ModelConfig {
        ModelConfig {
            d: 8,
            ..ModelConfig::node_level(d_in)
        }
    }

    #[test]
    fn loss_is_finite_and_positive_at_init() {
        let (g, _) = fixture();
        let task = small_task();
        let cfg = small_model(2);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let ep = sample_episode(
            &g,
            None,
            &task,
            &AugConfig::off(),
            Family::NeighborMatching,
            3,
            0,
            0,
        )
        .unwrap();
        let (loss, metrics) = compute_loss(&params, &[ep], 1.0).unwrap();
        assert!(loss.is_finite());
        assert!(loss > 0.0);
        assert_eq!(metrics.families.len(), 1);
    }

    #[test]
    fn loss_is_finite_at_init_for_many_episodes() {
        let (g, lab) = fixture();
        let task = small_task();
        let cfg = small_model(2);
        let params = ModelParams::init(&cfg, 5).unwrap();
        let aug = AugConfig::default();
        for trial in 0..100 {
            let family = if trial % 2 == 0 {
                Family::NeighborMatching
            } else {
                Family::MultiTask
            };
            let ep = sample_episode(&g, Some(&lab), &task, &aug, family, 11, trial, 0).unwrap();
            let (loss, _) = compute_loss(&params, &[ep], 1.0).unwrap();
            assert!(loss.is_finite(), "non-finite loss at trial {trial}");
        }
    }

    #[test]
    fn family_terms_use_means_not_sums() {
        let (g, _) = fixture();
        let task = small_task();
        let cfg = small_model(2);
        let params = ModelParams::init(&cfg, 7).unwrap();
        let ep = sample_episode(
            &g,
            None,
            &task,
            &AugConfig::off(),
            Family::NeighborMatching,
            13,
            0,
            0,
        )
        .unwrap();
        let (one, _) = compute_loss(&params, &[ep.clone()], 0.0).unwrap();
        let (two, _) = compute_loss(&params, &[ep.clone(), ep], 0.0).unwrap();
        assert!(
            (one - two).abs() < 1e-12,
            "duplicating an episode changed the family mean: {one} vs {two}"
        );
    }

    #[test]
    fn lambda_zero_drops_attribute_term() {
        let (g, _) = fixture();
        let task = small_task();
        let cfg = small_model(2);
        let params = ModelParams::init(&cfg, 7).unwrap();
        // Full masking so the attribute term is definitely nonzero.
        let aug = AugConfig {
            enabled: true,
            p_drop: 0.0,
            p_mask: 1.0,
        };
        let ep = sample_episode(&g, None, &task, &aug, Family::NeighborMatching, 17, 0, 0).unwrap();
        let (plain, m0) = compute_loss(&params, &[ep.clone()], 0.0).unwrap();
        let (with_attr, m1) = compute_loss(&params, &[ep], 1.0).unwrap();
        assert!(with_attr > plain, "attribute loss should add a positive term");
        let fam0 = m0.families.values().next().unwrap();
        let fam1 = m1.families.values().next().unwrap();
        assert_eq!(fam0.loss_ce, fam1.loss_ce);
        assert!(fam1.loss_attr > 0.0);
    }

    #[test]
    fn single_step_descent_on_frozen_batch() {
        let (g, _) = fixture();
        let task = small_task();
        let cfg = small_model(2);
        let mut violations = 0;
        for seed in 0..20u64 {
            let params = ModelParams::init(&cfg, seed).unwrap();
            let ep = sample_episode(
                &g,
                None,
                &task,
                &AugConfig::off(),
                Family::NeighborMatching,
                seed,
                0,
                0,
            )
            .unwrap();
            let episodes = vec![ep];
            let (before, _) = compute_loss(&params, &episodes, 1.0).unwrap();

            let mut tape = Tape::new();
            let pv = ParamVars::bind(&mut tape, &params);
            let (loss, _, _) =
                build_batch_loss(&mut tape, &pv, &params, &episodes, 1.0, Mode::Train).unwrap();
            let grads = tape.backward(loss);
            let grad_list: Vec<Matrix> =
                pv.ordered().iter().map(|&v| grads.get(v).clone()).collect();
            let mut stepped = params.clone();
            let mut opt = AdamW::new(&stepped, 1e-4, 0.0);
            opt.step(&mut stepped, &grad_list, None);
            let (after, _) = compute_loss(&stepped, &episodes, 1.0).unwrap();
            if after > before {
                violations += 1;
            }
        }
        assert!(
            violations <= 1,
            "{violations} of 20 seeds increased the frozen-batch loss"
        );
    }

    #[test]
    fn zero_steps_returns_initial_params_and_final_checkpoint() {
        let (g, _) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_model(2);
        let tc = TrainConfig {
            steps: 0,
            nm_per_cycle: 1,
            mt_per_cycle: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = pretrain(
            &g,
            None,
            &cfg,
            &tc,
            &small_task(),
            &AugConfig::default(),
            Some(dir.path()),
        )
        .unwrap();
        assert_eq!(out.state.step, 0);
        assert_eq!(out.checkpoints.len(), 1);
        let expect = ModelParams::init(&cfg, 5).unwrap();
        assert_eq!(out.state.params, expect);
        assert!(out.checkpoints[0].ends_with("ckpt_0.bin"));
    }

    #[test]
    fn pretrain_is_seed_deterministic() {
        let (g, lab) = fixture();
        let cfg = small_model(2);
        let tc = TrainConfig {
            steps: 4,
            batch_size: 2,
            checkpoint_every: 0,
            seed: 21,
            ..TrainConfig::default()
        };
        let a = pretrain(&g, Some(&lab), &cfg, &tc, &small_task(), &AugConfig::default(), None)
            .unwrap();
        let b = pretrain(&g, Some(&lab), &cfg, &tc, &small_task(), &AugConfig::default(), None)
            .unwrap();
        assert_eq!(a.state.params, b.state.params);
        let strip = |rows: &[MetricRow]| -> Vec<(usize, String, f64, f64, f64)> {
            rows.iter()
                .map(|r| (r.step, r.family.clone(), r.loss_ce, r.loss_attr, r.query_acc))
                .collect()
        };
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
    }

    #[test]
    fn resume_reproduces_straight_run_exactly() {
        let (g, _) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_model(2);
        let task = small_task();
        let aug = AugConfig::default();
        let straight_cfg = TrainConfig {
            steps: 6,
            nm_per_cycle: 1,
            mt_per_cycle: 0,
            checkpoint_every: 3,
            seed: 31,
            ..TrainConfig::default()
        };
        let straight =
            pretrain(&g, None, &cfg, &straight_cfg, &task, &aug, Some(dir.path())).unwrap();

        let ckpt3 = dir.path().join("ckpt_3.bin");
        assert!(ckpt3.exists());
        let resumed = resume(&ckpt3, &g, None, &straight_cfg, &task, &aug, None).unwrap();
        assert_eq!(resumed.state.step, 6);
        assert_eq!(resumed.state.params, straight.state.params);
        assert_eq!(resumed.state.optimizer.t, straight.state.optimizer.t);
        // Metric rows for the overlapping steps agree except wall time.
        let tail: Vec<_> = straight
            .metrics
            .iter()
            .filter(|r| r.step > 3)
            .map(|r| (r.step, r.loss_ce, r.query_acc))
            .collect();
        let resumed_rows: Vec<_> = resumed
            .metrics
            .iter()
            .map(|r| (r.step, r.loss_ce, r.query_acc))
            .collect();
        assert_eq!(tail, resumed_rows);
    }

    #[test]
    fn resume_rejects_seed_mismatch_and_truncation() {
        let (g, _) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_model(2);
        let task = small_task();
        let tc = TrainConfig {
            steps: 2,
            nm_per_cycle: 1,
            mt_per_cycle: 0,
            checkpoint_every: 0,
            seed: 41,
            ..TrainConfig::default()
        };
        pretrain(&g, None, &cfg, &tc, &task, &AugConfig::default(), Some(dir.path())).unwrap();
        let ckpt = dir.path().join("ckpt_2.bin");

        let other_seed = TrainConfig {
            seed: 42,
            ..tc.clone()
        };
        assert!(matches!(
            resume(&ckpt, &g, None, &other_seed, &task, &AugConfig::default(), None),
            Err(Error::Config(_))
        ));

        let bytes = std::fs::read(&ckpt).unwrap();
        std::fs::write(&ckpt, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(load_checkpoint(&ckpt), Err(Error::Load(_))));
    }

    #[test]
    fn mt_without_labels_is_a_config_error() {
        let (g, _) = fixture();
        let cfg = small_model(2);
        let tc = TrainConfig {
            steps: 1,
            nm_per_cycle: 0,
            mt_per_cycle: 1,
            seed: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(
            pretrain(&g, None, &cfg, &tc, &small_task(), &AugConfig::default(), None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_probe_logits_round_trip_exactly() {
        let (g, _) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_model(2);
        let task = small_task();
        let tc = TrainConfig {
            steps: 3,
            nm_per_cycle: 1,
            mt_per_cycle: 0,
            checkpoint_every: 0,
            seed: 51,
            ..TrainConfig::default()
        };
        let out =
            pretrain(&g, None, &cfg, &tc, &task, &AugConfig::default(), Some(dir.path())).unwrap();
        let loaded = load_checkpoint(&out.checkpoints[0]).unwrap();
        assert_eq!(loaded.params, out.state.params);

        let probe = sample_episode(
            &g,
            None,
            &task,
            &AugConfig::off(),
            Family::NeighborMatching,
            99,
            0,
            0,
        )
        .unwrap();
        let (l1, _) = crate::model::forward(&out.state.params, &probe.graph, Mode::Eval).unwrap();
        let (l2, _) = crate::model::forward(&loaded.params, &probe.graph, Mode::Eval).unwrap();
        assert_eq!(l1.values, l2.values);
    }

    #[test]
    fn gradients_match_finite_differences_on_tiny_prompts() {
        // d = 8 at 64-bit precision; node-level prompt with masking exercises
        // the data layers, task attention, batch norm, and attribute head.
        let (g, _) = synth_planted_graph(2, 4, 0.9, 0.3, 0.2, 5).unwrap();
        let cfg = ModelConfig {
            d: 8,
            ..ModelConfig::node_level(2)
        };
        let params = ModelParams::init(&cfg, 2).unwrap();
        let task = TaskParams {
            m: 2,
            k: 1,
            n: 1,
            nm_hops: 1,
            k_hops: 1,
            fanout_cap: Some(3),
            ..TaskParams::default()
        };
        let aug = AugConfig {
            enabled: true,
            p_drop: 0.2,
            p_mask: 0.6,
        };
        let ep = sample_episode(&g, None, &task, &aug, Family::NeighborMatching, 8, 0, 0).unwrap();
        assert!(
            ep.graph
                .data_graphs
                .iter()
                .any(|dg| !dg.masked_original.is_empty()),
            "fixture must mask at least one node so the attribute head is exercised"
        );
        let report = gradient_check(&params, &[ep], 1.0, 1e-6).unwrap();
        for (name, err) in &report {
            assert!(
                *err < 1e-4,
                "parameter group {name} gradient mismatch: relative error {err}"
            );
        }
        // Edge-level prompt covers the pair readout path.
        let edge_cfg = ModelConfig {
            d: 8,
            ..ModelConfig::edge_level(2, 1)
        };
        let edge_params = ModelParams::init(&edge_cfg, 3).unwrap();
        let edge_task = TaskParams {
            level: Level::Edge,
            ..task
        };
        let ep =
            sample_episode(&g, None, &edge_task, &aug, Family::NeighborMatching, 12, 0, 0).unwrap();
        let report = gradient_check(&edge_params, &[ep], 1.0, 1e-6).unwrap();
        for (name, err) in &report {
            assert!(
                *err < 1e-4,
                "edge-level parameter group {name} mismatch: relative error {err}"
            );
        }
    }
}
