//! Trains the toy model for a few epochs and scores it on held-out data.
//! The training run is deliberately tiny; the `ablate` CLI subcommand runs
//! the full configuration grid at proper scale.

use img2graph::data::{gen_synthetic_with, SynthConfig, SynthStyle};
use img2graph::metrics::MetricConfig;
use img2graph::train::{evaluate, train, TrainConfig};

fn main() {
    let synth = SynthConfig {
        tree_max_nodes: 5,
        tree_step: 0.25,
        ..SynthConfig::default()
    };
    let target = gen_synthetic_with(1, 48, 2, SynthStyle::Tree, &synth);
    let heldout = gen_synthetic_with(2, 24, 2, SynthStyle::Tree, &synth);

    let cfg = TrainConfig {
        epochs: 16,
        batch_size: 8,
        box_half: 0.15,
        ..TrainConfig::default()
    };
    let mut outcome = train(&cfg, &[], &target).unwrap();
    println!("loss log (every 4th epoch):");
    for e in outcome.log.iter().step_by(4) {
        println!(
            "  {} epoch {}: mean loss {:.4}, alpha {:.3}",
            e.phase, e.epoch, e.mean_loss, e.alpha,
        );
    }

    let mcfg = MetricConfig {
        node_box_half: 0.15,
        edge_min_extent: 0.2,
        ..MetricConfig::default()
    };
    let (report, _) = evaluate(&mut outcome.tape, &outcome.model, &cfg, &heldout, &mcfg).unwrap();
    println!(
        "\nheld-out: node mAP {:.4}, node mAR {:.4}, edge mAP {:.4}, SMD {:.4}",
        report.node_map, report.node_mar, report.edge_map, report.smd,
    );
}
