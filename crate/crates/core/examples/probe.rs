// Scratch probe for tuning the planted-block learning fixture. Not shipped.
use std::time::Instant;

use prodigy_core::eval::{baseline_nopretrain, evaluate_in_context, EvalOptions};
use prodigy_core::graph::{synth_planted_graph, Level};
use prodigy_core::model::ModelConfig;
use prodigy_core::prompt::AugConfig;
use prodigy_core::seeds;
use prodigy_core::tasks::{sample_downstream_eval, Split, TaskParams};
use prodigy_core::train::{pretrain, TrainConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T
where
    T::Err: std::fmt::Debug,
{
    std::env::args()
        .nth(i)
        .map(|s| s.parse().unwrap())
        .unwrap_or(default)
}

fn main() {
    let steps: usize = arg(1, 300);
    let batch: usize = arg(2, 2);
    let fanout: usize = arg(3, 6);
    let noise: f64 = arg(4, 1.0);
    let lr: f64 = arg(5, 1e-3);
    let family: String = arg(6, "nm".to_string());
    let l: usize = arg(7, 2);
    let aug_on: usize = arg(8, 1);
    let temp: f64 = arg(9, 0.1);
    let k_hops: usize = arg(10, 2);

    let (g, lab) = synth_planted_graph(2, 100, 0.2, 0.02, noise, 0xF1).unwrap();
    eprintln!("graph: {} nodes, {} edges", g.num_nodes(), g.edges().len());
    let split = Split::random(&g, 0.8, 0xF1);
    let train_lab = lab.restricted_to(&split.train);
    let tasks =
        sample_downstream_eval(&g, &lab, &split, 2, 3, 10, 200, 4, &mut seeds::stream(0xEA, &[]))
            .unwrap();

    let policy: usize = arg(11, 0);
    let mut model_cfg = ModelConfig {
        d: 32,
        temperature: temp,
        ..ModelConfig::node_level(2)
    };
    if policy == 1 {
        model_cfg.tf_edge_policy = prodigy_core::model::TfEdgePolicy::PositiveAndQuery;
    }
    let task = TaskParams {
        level: Level::Node,
        m: 2,
        k: 3,
        n: 4,
        nm_hops: l,
        k_hops,
        fanout_cap: Some(fanout),
    };
    let opts = EvalOptions {
        k_hops,
        fanout_cap: Some(fanout),
        seed: 0xE0,
    };
    let aug = if aug_on == 1 {
        AugConfig::default()
    } else {
        AugConfig::off()
    };
    let (nm, mt) = match family.as_str() {
        "nm" => (1, 0),
        "mt" => (0, 1),
        _ => (1, 1),
    };

    for seed in [1u64, 2, 3] {
        let t0 = Instant::now();
        let np = baseline_nopretrain(&model_cfg, seed).unwrap();
        let np_report = evaluate_in_context(&np, &g, &tasks, &opts).unwrap();

        let tc = TrainConfig {
            steps,
            batch_size: batch,
            lr,
            nm_per_cycle: nm,
            mt_per_cycle: mt,
            checkpoint_every: 0,
            seed,
            ..TrainConfig::default()
        };
        let out = pretrain(&g, Some(&train_lab), &model_cfg, &tc, &task, &aug, None).unwrap();
        let train_secs = t0.elapsed().as_secs_f64();
        let report = evaluate_in_context(&out.state.params, &g, &tasks, &opts).unwrap();
        let window = (out.metrics.len() / 5).max(1);
        let tail: Vec<String> = out
            .metrics
            .chunks(window)
            .map(|chunk| {
                let acc: f64 = chunk.iter().map(|r| r.query_acc).sum::<f64>() / chunk.len() as f64;
                let ce: f64 = chunk.iter().map(|r| r.loss_ce).sum::<f64>() / chunk.len() as f64;
                format!("{:.2}/{:.2}", ce, acc)
            })
            .collect();
        println!(
            "seed {seed}: nopretrain {:.3} | trained {:.3}±{:.3} | {:.1}s | ce/acc: {}",
            np_report.mean,
            report.mean,
            report.stderr,
            train_secs,
            tail.join(" ")
        );
    }
}
