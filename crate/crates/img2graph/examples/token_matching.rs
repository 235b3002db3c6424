//! Optimal assignment of predicted tokens to ground-truth nodes: build the
//! combined cost matrix, run the Hungarian solver, inspect the pairing.

use img2graph::matching::{cost_matrix, hungarian, MatchWeights, PredictionSet, RelProb};
use img2graph::BoundingBox;

fn main() {
    // Three predicted boxes, two ground-truth nodes. The second prediction
    // has low confidence and sits far from everything.
    let pred = PredictionSet {
        boxes: vec![
            BoundingBox::new(vec![0.32, 0.28], vec![0.05, 0.05]),
            BoundingBox::new(vec![0.9, 0.9], vec![0.05, 0.05]),
            BoundingBox::new(vec![0.72, 0.68], vec![0.05, 0.05]),
        ],
        cls_prob: vec![0.95, 0.15, 0.85],
        rel_prob: vec![
            RelProb { pair: (0, 1), prob: 0.1 },
            RelProb { pair: (0, 2), prob: 0.9 },
            RelProb { pair: (1, 2), prob: 0.2 },
        ],
    };
    pred.validate().unwrap();
    let gt = vec![
        BoundingBox::new(vec![0.3, 0.3], vec![0.05, 0.05]),
        BoundingBox::new(vec![0.7, 0.7], vec![0.05, 0.05]),
    ];

    let cost = cost_matrix(&pred, &gt, &MatchWeights::for_dims(2));
    println!("cost matrix (rows = predictions, cols = ground truth):");
    for row in &cost {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:7.3}")).collect();
        println!("  [{}]", cells.join(", "));
    }

    let m = hungarian(&cost).unwrap();
    let total: f64 = m.pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    println!("\noptimal pairs (pred -> gt): {:?}, total cost {total:.3}", m.pairs);
    println!("unmatched predictions: {:?}", m.unmatched_pred);
}
