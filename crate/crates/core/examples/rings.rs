// Scratch: measure hop-ring block purity on the planted fixture. Not shipped.
use prodigy_core::graph::synth_planted_graph;

fn main() {
    for (p_in, p_out) in [(0.2, 0.02), (0.2, 0.01), (0.3, 0.02), (0.2, 0.005)] {
        let (g, lab) = synth_planted_graph(2, 100, p_in, p_out, 1.0, 0xF1).unwrap();
        for l in [1usize, 2, 3] {
            let mut same = 0usize;
            let mut total = 0usize;
            let mut ring_sizes = Vec::new();
            for anchor in 0..g.num_nodes() {
                let ring = g.exact_hop_neighbors(&[anchor], l).unwrap();
                ring_sizes.push(ring.len());
                for v in ring {
                    total += 1;
                    if lab.get(v) == lab.get(anchor) {
                        same += 1;
                    }
                }
            }
            let mean_size: f64 =
                ring_sizes.iter().sum::<usize>() as f64 / ring_sizes.len() as f64;
            println!(
                "p=({p_in},{p_out}) l={l}: ring purity {:.3}, mean ring size {:.1}",
                same as f64 / total as f64,
                mean_size
            );
        }
    }
}
