//! Dual-level domain-adversarial losses. Classifier parameters learn to
//! tell domains apart while reversed gradients push the shared features
//! toward domain confusion; the consistency term ties the two levels.

use img2graph::autodiff::{Head, Mlp, Tape, Var};
use img2graph::loss::{da_consistency_loss, da_forward, DaBatchViews};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img_clf = Mlp::new(&mut tape, &[4, 1], Head::Sigmoid, &mut rng);
    let graph_clf = Mlp::new(&mut tape, &[6, 1], Head::Sigmoid, &mut rng);

    // A fake batch: three patch features, two token rows, source domain.
    let feats: Vec<Vec<Var>> = (0..3)
        .map(|i| (0..4).map(|j| tape.value(0.1 * (i * 4 + j) as f64)).collect())
        .collect();
    let tokens: Vec<Vec<Var>> = (0..2)
        .map(|i| (0..6).map(|j| tape.value(0.05 * (i * 6 + j) as f64)).collect())
        .collect();
    let views = DaBatchViews {
        image_patch_features: feats.clone(),
        graph_tokens: tokens,
        domain: 0.0,
    };

    let term = da_forward(&mut tape, &views, &img_clf, &graph_clf, 1.0).unwrap();
    for (i, &p) in term.patch_probs.iter().enumerate() {
        println!("patch {i}: P(target) = {:.4}", tape.data(p));
    }
    println!("graph level: P(target) = {:.4}", tape.data(term.graph_prob));

    let cst = da_consistency_loss(&mut tape, &term.patch_probs, term.graph_prob).unwrap();
    println!("consistency loss between levels: {:.4}", tape.data(cst));

    // Gradient directions: the classifier climbs, the features descend.
    tape.backward(cst);
    let clf_grad = tape.grad(img_clf.params()[0]);
    let feat_grad = tape.grad(feats[0][0]);
    println!(
        "\nafter backward: d/d(classifier weight) = {clf_grad:+.5}, d/d(feature) = {feat_grad:+.5}",
    );
    println!("(feature gradients passed through the reversal layer)");
}
