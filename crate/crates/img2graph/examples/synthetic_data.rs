//! Generates synthetic image+graph samples in both styles, slices one into
//! patches, and prunes near-collinear nodes from a patch graph.

use img2graph::data::{
    extract_patches, gen_synthetic, prune_redundant_nodes, SynthStyle, DEFAULT_PRUNE_THRESHOLD_DEG,
};

fn main() {
    for style in [SynthStyle::Tree, SynthStyle::Grid] {
        let samples = gen_synthetic(7, 3, 2, style);
        let s = &samples[0];
        println!(
            "{style:?}: {} samples, first has image {:?}, {} nodes, {} edges, domain {:?}",
            samples.len(),
            s.image.shape,
            s.graph.nodes.len(),
            s.graph.edges.len(),
            s.domain,
        );
    }

    let sample = &gen_synthetic(7, 1, 2, SynthStyle::Grid)[0];
    let patches = extract_patches(&sample.image, &sample.graph, &[32, 32], &[32, 32]).unwrap();
    println!("\n64x64 grid sample split into {} patches of 32x32:", patches.len());
    for (i, p) in patches.iter().enumerate() {
        let pruned = prune_redundant_nodes(&p.graph, DEFAULT_PRUNE_THRESHOLD_DEG);
        println!(
            "  patch {i}: {} nodes / {} edges, pruned to {} / {}",
            p.graph.nodes.len(),
            p.graph.edges.len(),
            pruned.nodes.len(),
            pruned.edges.len(),
        );
    }
}
