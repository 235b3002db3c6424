//! Lifts a 2D sample into a 3D volume: embed the image as the central
//! slice, rotate volume and graph rigidly, drop what leaves the unit cube.

use img2graph::data::{gen_synthetic, SynthStyle};
use img2graph::project3d::{project, random_rotation};

fn main() {
    let sample = &gen_synthetic(5, 1, 2, SynthStyle::Tree)[0];
    println!(
        "input: {:?} image, {} nodes, {} edges",
        sample.image.shape,
        sample.graph.nodes.len(),
        sample.graph.edges.len(),
    );

    for seed in 0..4 {
        let r = random_rotation(seed);
        let m = r.matrix();
        let rotated = project(sample, [32, 32, 32], seed).unwrap();
        let g = &rotated.sample.graph;
        println!(
            "seed {seed}: R row0 = [{:+.3} {:+.3} {:+.3}], kept {} nodes / {} edges, dropped {:.1}%",
            m[0][0],
            m[0][1],
            m[0][2],
            g.nodes.len(),
            g.edges.len(),
            rotated.dropped_fraction * 100.0,
        );
    }

    let rotated = project(sample, [32, 32, 32], 0).unwrap();
    let node = &rotated.sample.graph.nodes[0];
    println!(
        "\nprojected nodes are 3D: first node at [{:.3}, {:.3}, {:.3}]",
        node[0], node[1], node[2],
    );
}
