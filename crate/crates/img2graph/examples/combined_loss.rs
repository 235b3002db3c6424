//! Builds the full training objective for one hand-made sample on the tape:
//! match predictions to ground truth, assemble the weighted loss, and read
//! gradients for the box parameters.

use img2graph::autodiff::{Tape, Var};
use img2graph::loss::{combined_loss_parts, BoxVar, LossWeights, PredVarSet, SampleLossInputs};
use img2graph::matching::{cost_matrix, hungarian, MatchWeights, PredictionSet, RelProb};
use img2graph::sampling::{regularized_sample, TaggedPair};
use img2graph::BoundingBox;
use std::collections::BTreeMap;

fn main() {
    let mut tape = Tape::new();

    // Three tokens predicting three nodes; nodes 0-1 share the only edge.
    let centers = [[0.35, 0.25], [0.65, 0.75], [0.45, 0.85]];
    let mut raw: Vec<Var> = Vec::new();
    let mut boxes = Vec::new();
    for c in &centers {
        let vars: Vec<Var> = c.iter().map(|&v| tape.value(v)).collect();
        raw.extend_from_slice(&vars);
        boxes.push(BoxVar {
            center: vars,
            extent: vec![tape.value(0.05), tape.value(0.05)],
        });
    }
    let cls_prob = vec![tape.value(0.9), tape.value(0.8), tape.value(0.6)];
    let mut rel_prob = BTreeMap::new();
    rel_prob.insert((0usize, 1usize), tape.value(0.7));
    rel_prob.insert((0usize, 2usize), tape.value(0.2));
    rel_prob.insert((1usize, 2usize), tape.value(0.4));
    let pred = PredVarSet {
        boxes,
        cls_prob,
        rel_prob,
    };

    let gt_boxes = vec![
        BoundingBox::new(vec![0.3, 0.3], vec![0.05, 0.05]),
        BoundingBox::new(vec![0.7, 0.7], vec![0.05, 0.05]),
        BoundingBox::new(vec![0.5, 0.9], vec![0.05, 0.05]),
    ];

    // Matching runs on plain numbers read back off the tape.
    let snapshot = PredictionSet {
        boxes: pred
            .boxes
            .iter()
            .map(|b| {
                BoundingBox::new(
                    b.center.iter().map(|&v| tape.data(v)).collect(),
                    b.extent.iter().map(|&v| tape.data(v)).collect(),
                )
            })
            .collect(),
        cls_prob: pred.cls_prob.iter().map(|&v| tape.data(v)).collect(),
        rel_prob: vec![
            RelProb { pair: (0, 1), prob: 0.7 },
            RelProb { pair: (0, 2), prob: 0.2 },
            RelProb { pair: (1, 2), prob: 0.4 },
        ],
    };
    let matching =
        hungarian(&cost_matrix(&snapshot, &gt_boxes, &MatchWeights::for_dims(2))).unwrap();
    println!("matched pairs (token -> node): {:?}", matching.pairs);

    // The true edge plus both background pairs at ratio r = 0.5.
    let set = regularized_sample(
        &[TaggedPair::new(0, 0, 1)],
        &[TaggedPair::new(0, 0, 2), TaggedPair::new(0, 1, 2)],
        0.5,
        0,
    )
    .unwrap();

    let samples = [SampleLossInputs {
        pred: &pred,
        gt_boxes: &gt_boxes,
        matching: &matching,
    }];
    let parts = combined_loss_parts(
        &mut tape,
        &samples,
        &set,
        None,
        &LossWeights::for_dims(2),
        false,
    )
    .unwrap();
    println!(
        "loss parts: reg {:.4}, giou {:.4}, cls {:.4}, reslt {:.4}, total {:.4}",
        tape.data(parts.reg),
        tape.data(parts.giou),
        tape.data(parts.cls),
        tape.data(parts.reslt),
        tape.data(parts.total),
    );

    tape.backward(parts.total);
    println!("\ngradients on the six center coordinates:");
    for (i, &v) in raw.iter().enumerate() {
        println!("  d total / d c{i} = {:+.4}", tape.grad(v));
    }
}
