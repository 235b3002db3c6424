//! Training objectives, all expressed as differentiable tape expressions:
//! box regression (L1 and generalized-IoU), token classification, the
//! sampled relation loss, the two domain-adversarial classifiers with their
//! consistency coupling, and the weighted combination of everything.
//!
//! Cross-entropy terms clamp probabilities to `[1e-7, 1 - 1e-7]` so a
//! saturated sigmoid can never produce an infinite loss.

use crate::autodiff::{Head, Mlp, Tape, Var};
use crate::graph::BoundingBox;
use crate::matching::Matching;
use crate::sampling::EdgeSampleSet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Clamp bound for probabilities entering a logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("no relation probability for sampled pair (sample {sample}, {a}, {b})")]
    MissingRelProb { sample: usize, a: usize, b: usize },
    #[error("consistency loss needs at least one patch probability")]
    EmptyPatchSet,
    #[error("domain classifier input mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain label must be 0 or 1, got {0}")]
    BadDomain(f64),
    #[error("loss weights must be nonnegative: {0}")]
    BadWeights(String),
    #[error("malformed loss inputs: {0}")]
    Malformed(String),
}

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub reg: f64,
    pub giou: f64,
    pub cls: f64,
    pub reslt: f64,
    pub da: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::for_dims(2)
    }
}

impl LossWeights {
    /// Defaults per dimensionality (the 2D road-style and 3D vessel-style
    /// training configurations).
    pub fn for_dims(dims: usize) -> Self {
        match dims {
            2 => LossWeights {
                reg: 5.0,
                giou: 2.0,
                cls: 3.0,
                reslt: 5.0,
                da: 1.0,
            },
            3 => LossWeights {
                reg: 2.0,
                giou: 3.0,
                cls: 4.0,
                reslt: 6.0,
                da: 0.8,
            },
            _ => panic!("dims must be 2 or 3"),
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("reg", self.reg),
            ("giou", self.giou),
            ("cls", self.cls),
            ("reslt", self.reslt),
            ("da", self.da),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(LossError::BadWeights(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Axis-aligned box whose parameters live on the tape.
#[derive(Debug, Clone)]
pub struct BoxVar {
    pub center: Vec<Var>,
    pub extent: Vec<Var>,
}

impl BoxVar {
    /// Loads a constant box onto the tape.
    pub fn constant(tape: &mut Tape, b: &BoundingBox) -> Self {
        BoxVar {
            center: b.center.iter().map(|&c| tape.value(c)).collect(),
            extent: b.extent.iter().map(|&e| tape.value(e)).collect(),
        }
    }

    pub fn dims(&self) -> usize {
        self.center.len()
    }
}

/// Clamps a probability into `[PROB_EPS, 1 - PROB_EPS]` on the tape.
/// Outside the clamp range the gradient is zero, which is the desired
/// saturation behavior.
fn clamp_prob(tape: &mut Tape, p: Var) -> Var {
    let lo = tape.value(PROB_EPS);
    let hi = tape.value(1.0 - PROB_EPS);
    let p = tape.max(p, lo);
    tape.min(p, hi)
}

/// Binary cross-entropy with an f64 label; skips zero-weight terms.
pub fn bce(tape: &mut Tape, label: f64, prob: Var) -> Var {
    let p = clamp_prob(tape, prob);
    let mut terms = Vec::with_capacity(2);
    if label > 0.0 {
        let lp = tape.log(p);
        terms.push(tape.affine(lp, label, 0.0));
    }
    if label < 1.0 {
        let one_minus = tape.affine(p, -1.0, 1.0);
        let lq = tape.log(one_minus);
        terms.push(tape.affine(lq, 1.0 - label, 0.0));
    }
    let s = tape.sum(&terms);
    tape.neg(s)
}

/// Sum of absolute center and extent differences.
pub fn l1_box(tape: &mut Tape, pred: &BoxVar, gt: &BoundingBox) -> Var {
    assert_eq!(pred.dims(), gt.dims(), "box dims must match");
    let mut terms = Vec::with_capacity(2 * pred.dims());
    for d in 0..pred.dims() {
        let dc = tape.affine(pred.center[d], 1.0, -gt.center[d]);
        terms.push(tape.abs(dc));
        let de = tape.affine(pred.extent[d], 1.0, -gt.extent[d]);
        terms.push(tape.abs(de));
    }
    tape.sum(&terms)
}

/// `1 - gIoU` where `gIoU = IoU - |hull \ union| / |hull|`, differentiable
/// through the predicted box. Requires positive extents; range `[0, 2]`.
pub fn giou_loss(tape: &mut Tape, pred: &BoxVar, gt: &BoundingBox) -> Var {
    assert_eq!(pred.dims(), gt.dims(), "box dims must match");
    let dims = pred.dims();
    let (gt_lo, gt_hi) = gt.bounds();
    let zero = tape.value(0.0);
    let mut inter = tape.value(1.0);
    let mut hull = tape.value(1.0);
    let mut vol_pred = tape.value(1.0);
    for d in 0..dims {
        let p_lo = tape.sub(pred.center[d], pred.extent[d]);
        let p_hi = tape.add(pred.center[d], pred.extent[d]);
        let g_lo = tape.value(gt_lo[d]);
        let g_hi = tape.value(gt_hi[d]);

        let i_lo = tape.max(p_lo, g_lo);
        let i_hi = tape.min(p_hi, g_hi);
        let i_len = tape.sub(i_hi, i_lo);
        let i_len = tape.max(i_len, zero);
        inter = tape.mul(inter, i_len);

        let h_lo = tape.min(p_lo, g_lo);
        let h_hi = tape.max(p_hi, g_hi);
        let h_len = tape.sub(h_hi, h_lo);
        hull = tape.mul(hull, h_len);

        let p_len = tape.sub(p_hi, p_lo);
        vol_pred = tape.mul(vol_pred, p_len);
    }
    let vol_gt = tape.value(gt.volume());
    let vols = tape.add(vol_pred, vol_gt);
    let union = tape.sub(vols, inter);
    let iou = tape.div(inter, union);
    let slack = tape.sub(hull, union);
    let penalty = tape.div(slack, hull);
    let giou = tape.sub(iou, penalty);
    tape.affine(giou, -1.0, 1.0)
}

/// Relation loss over a sampled pair multiset. `rel_prob` is keyed by
/// `(sample, a, b)` with `a < b`; every sampled pair must have an entry, and
/// duplicated pairs contribute once per occurrence. `mean` switches the
/// default sum to a mean over the multiset.
pub fn reslt_loss(
    tape: &mut Tape,
    rel_prob: &BTreeMap<(usize, usize, usize), Var>,
    set: &EdgeSampleSet,
    mean: bool,
) -> Result<Var, LossError> {
    let mut terms = Vec::with_capacity(set.active.len() + set.background.len());
    for (label, pairs) in [(1.0, &set.active), (0.0, &set.background)] {
        for pair in pairs {
            let key = (pair.sample, pair.a, pair.b);
            let p = rel_prob
                .get(&key)
                .copied()
                .ok_or(LossError::MissingRelProb {
                    sample: pair.sample,
                    a: pair.a,
                    b: pair.b,
                })?;
            terms.push(bce(tape, label, p));
        }
    }
    if terms.is_empty() {
        return Ok(tape.value(0.0));
    }
    let total = tape.sum(&terms);
    Ok(if mean {
        tape.affine(total, 1.0 / terms.len() as f64, 0.0)
    } else {
        total
    })
}

/// Existence loss over all tokens: binary CE against the matched flag.
pub fn cls_loss(tape: &mut Tape, cls_prob: &[Var], matched: &[bool]) -> Var {
    assert_eq!(cls_prob.len(), matched.len());
    let terms: Vec<Var> = cls_prob
        .iter()
        .zip(matched)
        .map(|(&p, &m)| bce(tape, if m { 1.0 } else { 0.0 }, p))
        .collect();
    tape.sum(&terms)
}

fn check_domain(domain: f64) -> Result<(), LossError> {
    if domain == 0.0 || domain == 1.0 {
        Ok(())
    } else {
        Err(LossError::BadDomain(domain))
    }
}

/// Image-level adversary: each patch probability is one CE sample.
pub fn da_image_loss(tape: &mut Tape, patch_probs: &[Var], domain: f64) -> Result<Var, LossError> {
    check_domain(domain)?;
    let terms: Vec<Var> = patch_probs
        .iter()
        .map(|&p| bce(tape, domain, p))
        .collect();
    Ok(tape.sum(&terms))
}

fn pooled_tokens(tape: &mut Tape, tokens: &[Vec<Var>]) -> Result<Vec<Var>, LossError> {
    if tokens.is_empty() {
        return Err(LossError::ShapeMismatch("empty token matrix".into()));
    }
    let width = tokens[0].len();
    if tokens.iter().any(|t| t.len() != width) {
        return Err(LossError::ShapeMismatch("ragged token matrix".into()));
    }
    Ok((0..width)
        .map(|f| {
            let column: Vec<Var> = tokens.iter().map(|t| t[f]).collect();
            tape.mean(&column)
        })
        .collect())
}

fn classify_scalar(tape: &mut Tape, clf: &Mlp, input: &[Var]) -> Result<Var, LossError> {
    if clf.sizes[0] != input.len() {
        return Err(LossError::ShapeMismatch(format!(
            "classifier expects {} inputs, got {}",
            clf.sizes[0],
            input.len()
        )));
    }
    if clf.head != Head::Sigmoid || *clf.sizes.last().unwrap() != 1 {
        return Err(LossError::ShapeMismatch(
            "domain classifier must end in a single sigmoid output".into(),
        ));
    }
    Ok(clf.forward(tape, input)[0])
}

/// Graph-level domain probability: mean-pool the token matrix over the token
/// axis, then classify.
pub fn graph_domain_prob(
    tape: &mut Tape,
    tokens: &[Vec<Var>],
    clf: &Mlp,
) -> Result<Var, LossError> {
    let pooled = pooled_tokens(tape, tokens)?;
    classify_scalar(tape, clf, &pooled)
}

/// Graph-level adversary: CE between the domain label and the pooled-token
/// classifier output.
pub fn da_graph_loss(
    tape: &mut Tape,
    tokens: &[Vec<Var>],
    clf: &Mlp,
    domain: f64,
) -> Result<Var, LossError> {
    check_domain(domain)?;
    let prob = graph_domain_prob(tape, tokens, clf)?;
    Ok(bce(tape, domain, prob))
}

/// Couples the two adversaries: absolute difference between the mean patch
/// probability and the graph probability.
pub fn da_consistency_loss(
    tape: &mut Tape,
    patch_probs: &[Var],
    graph_prob: Var,
) -> Result<Var, LossError> {
    if patch_probs.is_empty() {
        return Err(LossError::EmptyPatchSet);
    }
    let mean = tape.mean(patch_probs);
    let diff = tape.sub(mean, graph_prob);
    Ok(tape.abs(diff))
}

/// What the adversaries see for one sample during joint pretraining.
#[derive(Debug, Clone)]
pub struct DaBatchViews {
    /// One feature vector per image patch.
    pub image_patch_features: Vec<Vec<Var>>,
    /// Token matrix, one row per object or relation token.
    pub graph_tokens: Vec<Vec<Var>>,
    /// 0 for source, 1 for target.
    pub domain: f64,
}

/// Adversary outputs for one sample, ready for the combined loss.
#[derive(Debug, Clone)]
pub struct DaTerm {
    pub patch_probs: Vec<Var>,
    pub graph_prob: Var,
    pub domain: f64,
}

/// Runs both domain classifiers over reversed-gradient features. The
/// reversal sits between the features and the classifiers, so classifier
/// parameters receive ordinary gradients while everything upstream of the
/// features receives gradients scaled by `-alpha`.
pub fn da_forward(
    tape: &mut Tape,
    views: &DaBatchViews,
    img_clf: &Mlp,
    graph_clf: &Mlp,
    alpha: f64,
) -> Result<DaTerm, LossError> {
    check_domain(views.domain)?;
    let mut patch_probs = Vec::with_capacity(views.image_patch_features.len());
    for feat in &views.image_patch_features {
        let reversed: Vec<Var> = feat.iter().map(|&v| tape.grad_reverse(v, alpha)).collect();
        patch_probs.push(classify_scalar(tape, img_clf, &reversed)?);
    }
    let pooled = pooled_tokens(tape, &views.graph_tokens)?;
    let reversed: Vec<Var> = pooled
        .iter()
        .map(|&v| tape.grad_reverse(v, alpha))
        .collect();
    let graph_prob = classify_scalar(tape, graph_clf, &reversed)?;
    Ok(DaTerm {
        patch_probs,
        graph_prob,
        domain: views.domain,
    })
}

/// Predictions for one sample with parameters on the tape.
#[derive(Debug, Clone)]
pub struct PredVarSet {
    pub boxes: Vec<BoxVar>,
    pub cls_prob: Vec<Var>,
    /// Relation probability per token pair, keyed `(i, j)` with `i < j`.
    pub rel_prob: BTreeMap<(usize, usize), Var>,
}

/// One sample's contribution to the combined objective.
#[derive(Debug)]
pub struct SampleLossInputs<'a> {
    pub pred: &'a PredVarSet,
    pub gt_boxes: &'a [BoundingBox],
    pub matching: &'a Matching,
}

/// Per-component values of the combined objective, pre-weighting.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub reg: Var,
    pub giou: Var,
    pub cls: Var,
    pub reslt: Var,
    pub da_img: Option<Var>,
    pub da_graph: Option<Var>,
    pub da_cst: Option<Var>,
    pub total: Var,
}

/// Weighted sum of all objectives over a batch.
///
/// Box terms run over matched tokens only; the existence loss runs over all
/// tokens. Sampled pairs are mapped through each sample's matching from
/// ground-truth node indices to token indices; pairs with an unmatched
/// endpoint are dropped, since no token carries their relation. The DA block
/// contributes only when `da` is provided (joint pretraining).
pub fn combined_loss_parts(
    tape: &mut Tape,
    samples: &[SampleLossInputs],
    sample_set: &EdgeSampleSet,
    da: Option<&[DaTerm]>,
    weights: &LossWeights,
    reslt_mean: bool,
) -> Result<LossBreakdown, LossError> {
    weights.validate()?;

    let mut reg_terms = Vec::new();
    let mut giou_terms = Vec::new();
    let mut cls_terms = Vec::new();
    for s in samples {
        if s.pred.boxes.len() != s.pred.cls_prob.len() {
            return Err(LossError::Malformed(format!(
                "{} boxes but {} class probabilities",
                s.pred.boxes.len(),
                s.pred.cls_prob.len()
            )));
        }
        let mut matched = vec![false; s.pred.boxes.len()];
        for &(p, g) in &s.matching.pairs {
            if p >= s.pred.boxes.len() || g >= s.gt_boxes.len() {
                return Err(LossError::Malformed(format!(
                    "matching pair ({p}, {g}) out of range"
                )));
            }
            matched[p] = true;
            reg_terms.push(l1_box(tape, &s.pred.boxes[p], &s.gt_boxes[g]));
            giou_terms.push(giou_loss(tape, &s.pred.boxes[p], &s.gt_boxes[g]));
        }
        cls_terms.push(cls_loss(tape, &s.pred.cls_prob, &matched));
    }
    let reg = tape.sum(&reg_terms);
    let giou = tape.sum(&giou_terms);
    let cls = tape.sum(&cls_terms);

    // Relation supervision: map each sampled ground-truth pair to the token
    // pair chosen by the matching.
    let mut rel_lookup: BTreeMap<(usize, usize, usize), Var> = BTreeMap::new();
    let mut kept_active = Vec::new();
    let mut kept_background = Vec::new();
    for (pairs, kept) in [
        (&sample_set.active, &mut kept_active),
        (&sample_set.background, &mut kept_background),
    ] {
        for pair in pairs {
            let s = samples.get(pair.sample).ok_or_else(|| {
                LossError::Malformed(format!(
                    "sampled pair references sample {} of {}",
                    pair.sample,
                    samples.len()
                ))
            })?;
            let (Some(pa), Some(pb)) =
                (s.matching.pred_of_gt(pair.a), s.matching.pred_of_gt(pair.b))
            else {
                continue; // endpoint unmatched, no token to supervise
            };
            let key = (pair.sample, pa.min(pb), pa.max(pb));
            if !rel_lookup.contains_key(&key) {
                let p = s
                    .pred
                    .rel_prob
                    .get(&(pa.min(pb), pa.max(pb)))
                    .copied()
                    .ok_or(LossError::MissingRelProb {
                        sample: pair.sample,
                        a: pair.a,
                        b: pair.b,
                    })?;
                rel_lookup.insert(key, p);
            }
            kept.push(crate::sampling::TaggedPair::new(pair.sample, pa, pb));
        }
    }
    let kept_set = EdgeSampleSet {
        active: kept_active,
        background: kept_background,
        ratio_target: sample_set.ratio_target,
    };
    let reslt = reslt_loss(tape, &rel_lookup, &kept_set, reslt_mean)?;

    let (da_img, da_graph, da_cst) = match da {
        None => (None, None, None),
        Some(terms) => {
            let mut img_terms = Vec::new();
            let mut graph_terms = Vec::new();
            let mut cst_terms = Vec::new();
            for t in terms {
                img_terms.push(da_image_loss(tape, &t.patch_probs, t.domain)?);
                graph_terms.push(bce(tape, t.domain, t.graph_prob));
                cst_terms.push(da_consistency_loss(tape, &t.patch_probs, t.graph_prob)?);
            }
            (
                Some(tape.sum(&img_terms)),
                Some(tape.sum(&graph_terms)),
                Some(tape.sum(&cst_terms)),
            )
        }
    };

    let mut total_terms = vec![
        tape.affine(reg, weights.reg, 0.0),
        tape.affine(giou, weights.giou, 0.0),
        tape.affine(cls, weights.cls, 0.0),
        tape.affine(reslt, weights.reslt, 0.0),
    ];
    if let (Some(i), Some(g), Some(c)) = (da_img, da_graph, da_cst) {
        let da_sum = tape.sum(&[i, g, c]);
        total_terms.push(tape.affine(da_sum, weights.da, 0.0));
    }
    let total = tape.sum(&total_terms);
    Ok(LossBreakdown {
        reg,
        giou,
        cls,
        reslt,
        da_img,
        da_graph,
        da_cst,
        total,
    })
}

/// See [`combined_loss_parts`]; returns only the weighted total.
pub fn combined_loss(
    tape: &mut Tape,
    samples: &[SampleLossInputs],
    sample_set: &EdgeSampleSet,
    da: Option<&[DaTerm]>,
    weights: &LossWeights,
    reslt_mean: bool,
) -> Result<Var, LossError> {
    combined_loss_parts(tape, samples, sample_set, da, weights, reslt_mean).map(|b| b.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::sampling::{regularized_sample, TaggedPair};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bb(center: &[f64], extent: &[f64]) -> BoundingBox {
        BoundingBox::new(center.to_vec(), extent.to_vec())
    }

    #[test]
    fn l1_identical_is_zero() {
        let mut t = Tape::new();
        let gt = bb(&[0.5, 0.5], &[0.1, 0.2]);
        let pred = BoxVar::constant(&mut t, &gt);
        let loss = l1_box(&mut t, &pred, &gt);
        assert_eq!(t.data(loss), 0.0);
    }

    #[test]
    fn l1_center_offset() {
        let mut t = Tape::new();
        let gt = bb(&[0.5, 0.5], &[0.1, 0.2]);
        let pred = BoxVar::constant(&mut t, &bb(&[0.6, 0.5], &[0.1, 0.2]));
        let loss = l1_box(&mut t, &pred, &gt);
        assert!((t.data(loss) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let gt = bb(&[0.5, 0.5], &[0.1, 0.2]);
        let x0 = vec![0.43, 0.61, 0.17, 0.13]; // away from kinks
        let eval = |x: &[f64]| -> f64 {
            let mut t = Tape::new();
            let pred = BoxVar {
                center: vec![t.value(x[0]), t.value(x[1])],
                extent: vec![t.value(x[2]), t.value(x[3])],
            };
            let loss = l1_box(&mut t, &pred, &gt);
            t.data(loss)
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = x0.iter().map(|&v| t.value(v)).collect();
        let pred = BoxVar {
            center: vec![vars[0], vars[1]],
            extent: vec![vars[2], vars[3]],
        };
        let loss = l1_box(&mut t, &pred, &gt);
        t.backward(loss);
        let grad: Vec<f64> = vars.iter().map(|&v| t.grad(v)).collect();
        let report = check_gradients(eval, &x0, &grad, 1e-6);
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn giou_identical_is_zero() {
        let mut t = Tape::new();
        let gt = bb(&[0.5, 0.5, 0.5], &[0.1, 0.2, 0.3]);
        let pred = BoxVar::constant(&mut t, &gt);
        let loss = giou_loss(&mut t, &pred, &gt);
        assert!(t.data(loss).abs() < 1e-12);
    }

    #[test]
    fn giou_disjoint_corner_boxes() {
        // Unit squares at [0,1]^2 and [2,3]^2: IoU 0, hull 9, slack 7.
        let mut t = Tape::new();
        let gt = bb(&[2.5, 2.5], &[0.5, 0.5]);
        let pred = BoxVar::constant(&mut t, &bb(&[0.5, 0.5], &[0.5, 0.5]));
        let loss = giou_loss(&mut t, &pred, &gt);
        assert!((t.data(loss) - (1.0 + 7.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn giou_scale_and_translation_invariant_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let c1: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..1.0)).collect();
            let c2: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..1.0)).collect();
            let e1: Vec<f64> = (0..2).map(|_| rng.random_range(0.05..0.3)).collect();
            let e2: Vec<f64> = (0..2).map(|_| rng.random_range(0.05..0.3)).collect();
            let eval = |a: &BoundingBox, b: &BoundingBox| -> f64 {
                let mut t = Tape::new();
                let pred = BoxVar::constant(&mut t, a);
                let loss = giou_loss(&mut t, &pred, b);
                t.data(loss)
            };
            let a = bb(&c1, &e1);
            let b = bb(&c2, &e2);
            let base = eval(&a, &b);
            assert!((base - eval(&b, &a)).abs() < 1e-12, "symmetry");
            let scale = |x: &BoundingBox| {
                bb(
                    &x.center.iter().map(|v| v * 2.0).collect::<Vec<_>>(),
                    &x.extent.iter().map(|v| v * 2.0).collect::<Vec<_>>(),
                )
            };
            assert!((base - eval(&scale(&a), &scale(&b))).abs() < 1e-9, "scale");
            let shift = |x: &BoundingBox| {
                bb(
                    &x.center.iter().map(|v| v + 0.7).collect::<Vec<_>>(),
                    &x.extent,
                )
            };
            assert!(
                (base - eval(&shift(&a), &shift(&b))).abs() < 1e-9,
                "translation"
            );
        }
    }

    #[test]
    fn giou_var_route_matches_f64_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            let a = bb(
                &(0..3).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>(),
                &(0..3).map(|_| rng.random_range(0.05..0.3)).collect::<Vec<_>>(),
            );
            let b = bb(
                &(0..3).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>(),
                &(0..3).map(|_| rng.random_range(0.05..0.3)).collect::<Vec<_>>(),
            );
            let mut t = Tape::new();
            let pred = BoxVar::constant(&mut t, &a);
            let loss = giou_loss(&mut t, &pred, &b);
            assert!((t.data(loss) - (1.0 - a.giou(&b))).abs() < 1e-12);
        }
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let gt = bb(&[0.5, 0.55], &[0.2, 0.15]);
        let x0 = vec![0.47, 0.52, 0.23, 0.19];
        let eval = |x: &[f64]| -> f64 {
            let mut t = Tape::new();
            let pred = BoxVar {
                center: vec![t.value(x[0]), t.value(x[1])],
                extent: vec![t.value(x[2]), t.value(x[3])],
            };
            let loss = giou_loss(&mut t, &pred, &gt);
            t.data(loss)
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = x0.iter().map(|&v| t.value(v)).collect();
        let pred = BoxVar {
            center: vec![vars[0], vars[1]],
            extent: vec![vars[2], vars[3]],
        };
        let loss = giou_loss(&mut t, &pred, &gt);
        t.backward(loss);
        let grad: Vec<f64> = vars.iter().map(|&v| t.grad(v)).collect();
        let report = check_gradients(eval, &x0, &grad, 1e-6);
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    fn pair_set(active: Vec<(usize, usize)>, background: Vec<(usize, usize)>) -> EdgeSampleSet {
        EdgeSampleSet {
            active: active
                .into_iter()
                .map(|(a, b)| TaggedPair::new(0, a, b))
                .collect(),
            background: background
                .into_iter()
                .map(|(a, b)| TaggedPair::new(0, a, b))
                .collect(),
            ratio_target: 0.15,
        }
    }

    fn rel_map(tape: &mut Tape, entries: &[((usize, usize), f64)]) -> BTreeMap<(usize, usize, usize), Var> {
        entries
            .iter()
            .map(|&((a, b), p)| ((0, a.min(b), a.max(b)), tape.value(p)))
            .collect()
    }

    #[test]
    fn reslt_perfect_predictions_near_zero() {
        let mut t = Tape::new();
        let set = pair_set(vec![(0, 1), (1, 2)], vec![(0, 2), (0, 3)]);
        let rel = rel_map(
            &mut t,
            &[((0, 1), 1.0), ((1, 2), 1.0), ((0, 2), 0.0), ((0, 3), 0.0)],
        );
        let loss = reslt_loss(&mut t, &rel, &set, false).unwrap();
        assert!(t.data(loss) < 1e-5);
        assert!(t.data(loss) >= 0.0);
    }

    #[test]
    fn reslt_uniform_half_is_multiset_times_ln2() {
        let mut t = Tape::new();
        let set = pair_set(vec![(0, 1)], vec![(0, 2), (1, 2)]);
        let rel = rel_map(&mut t, &[((0, 1), 0.5), ((0, 2), 0.5), ((1, 2), 0.5)]);
        let loss = reslt_loss(&mut t, &rel, &set, false).unwrap();
        assert!((t.data(loss) - 3.0 * std::f64::consts::LN_2).abs() < 1e-9);
        let mean = reslt_loss(&mut t, &rel, &set, true).unwrap();
        assert!((t.data(mean) - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn reslt_duplicate_counts_twice() {
        let mut t = Tape::new();
        let dup = EdgeSampleSet {
            active: vec![TaggedPair::new(0, 0, 1), TaggedPair::new(0, 0, 1)],
            background: vec![],
            ratio_target: 0.15,
        };
        let single = pair_set(vec![(0, 1)], vec![]);
        let rel = rel_map(&mut t, &[((0, 1), 0.3)]);
        let twice = reslt_loss(&mut t, &rel, &dup, false).unwrap();
        let once = reslt_loss(&mut t, &rel, &single, false).unwrap();
        // Oracle: manual two-term sum is exactly double the single term.
        assert!((t.data(twice) - 2.0 * t.data(once)).abs() < 1e-12);
    }

    #[test]
    fn reslt_missing_pair_errors() {
        let mut t = Tape::new();
        let set = pair_set(vec![(0, 1)], vec![(0, 2)]);
        let rel = rel_map(&mut t, &[((0, 1), 0.9)]);
        match reslt_loss(&mut t, &rel, &set, false) {
            Err(LossError::MissingRelProb { sample: 0, a: 0, b: 2 }) => {}
            other => panic!("expected missing-pair error, got {other:?}"),
        }
    }

    #[test]
    fn reslt_active_share_stays_near_class_balance() {
        // With equal per-edge CE everywhere, the active share of the total
        // equals the active fraction of the multiset, which regularized
        // sampling pins near r/(1+r).
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n_active = rng.random_range(1..40);
            let n_background = rng.random_range(200..400);
            let active: Vec<TaggedPair> = (0..n_active)
                .map(|i| TaggedPair::new(0, 2 * i, 2 * i + 1))
                .collect();
            let background: Vec<TaggedPair> = (0..n_background)
                .map(|i| TaggedPair::new(1, 2 * i, 2 * i + 1))
                .collect();
            let r = 0.15;
            let set = regularized_sample(&active, &background, r, 77).unwrap();
            let upsampled = set.active.len() > n_active || set.background.len() > n_background;
            if !upsampled {
                continue;
            }
            let total = (set.active.len() + set.background.len()) as f64;
            let share = set.active.len() as f64 / total;
            let center = r / (1.0 + r);
            assert!(
                (share - center).abs() <= 1.0 / total + 1e-12,
                "share {share} vs center {center} with |R|={total}"
            );
        }
    }

    #[test]
    fn cls_examples() {
        let mut t = Tape::new();
        let probs = vec![t.value(1.0), t.value(1.0)];
        let loss = cls_loss(&mut t, &probs, &[true, true]);
        assert!(t.data(loss) < 1e-5);

        let probs = vec![t.value(0.5)];
        let loss = cls_loss(&mut t, &probs, &[false]);
        assert!((t.data(loss) - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn cls_gradient_matches_finite_differences() {
        let matched = [true, false, true];
        let x0 = vec![0.7, 0.3, 0.55];
        let eval = |x: &[f64]| -> f64 {
            let mut t = Tape::new();
            let probs: Vec<Var> = x.iter().map(|&p| t.value(p)).collect();
            let loss = cls_loss(&mut t, &probs, &matched);
            t.data(loss)
        };
        let mut t = Tape::new();
        let probs: Vec<Var> = x0.iter().map(|&p| t.value(p)).collect();
        let loss = cls_loss(&mut t, &probs, &matched);
        t.backward(loss);
        let grad: Vec<f64> = probs.iter().map(|&v| t.grad(v)).collect();
        let report = check_gradients(eval, &x0, &grad, 1e-6);
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn da_image_examples() {
        let mut t = Tape::new();
        let probs = vec![t.value(1.0 - 1e-9), t.value(1.0 - 1e-9)];
        let loss = da_image_loss(&mut t, &probs, 1.0).unwrap();
        assert!(t.data(loss) < 1e-5);

        let probs: Vec<Var> = (0..4).map(|_| t.value(0.5)).collect();
        let loss = da_image_loss(&mut t, &probs, 0.0).unwrap();
        assert!((t.data(loss) - 4.0 * std::f64::consts::LN_2).abs() < 1e-9);

        assert!(matches!(
            da_image_loss(&mut t, &probs, 0.5),
            Err(LossError::BadDomain(_))
        ));
    }

    #[test]
    fn da_graph_zeroed_classifier_gives_ln2() {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clf = Mlp::new(&mut t, &[3, 1], Head::Sigmoid, &mut rng);
        let zeros = vec![0.0; clf.param_count()];
        clf.set_state(&mut t, &zeros);
        let tokens: Vec<Vec<Var>> = (0..5)
            .map(|i| (0..3).map(|j| t.value((i * 3 + j) as f64 * 0.1)).collect())
            .collect();
        let loss = da_graph_loss(&mut t, &tokens, &clf, 1.0).unwrap();
        assert!((t.data(loss) - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn da_graph_gradient_matches_finite_differences() {
        // Differentiate with respect to the token entries.
        let x0: Vec<f64> = vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.25];
        let build = |t: &mut Tape, x: &[f64]| -> (Vec<Var>, Var) {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let clf = Mlp::new(t, &[3, 4, 1], Head::Sigmoid, &mut rng);
            let vars: Vec<Var> = x.iter().map(|&v| t.value(v)).collect();
            let tokens = vec![vars[0..3].to_vec(), vars[3..6].to_vec()];
            let loss = da_graph_loss(t, &tokens, &clf, 1.0).unwrap();
            (vars, loss)
        };
        let eval = |x: &[f64]| -> f64 {
            let mut t = Tape::new();
            let (_, loss) = build(&mut t, x);
            t.data(loss)
        };
        let mut t = Tape::new();
        let (vars, loss) = build(&mut t, &x0);
        t.backward(loss);
        let grad: Vec<f64> = vars.iter().map(|&v| t.grad(v)).collect();
        let report = check_gradients(eval, &x0, &grad, 1e-6);
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn da_consistency_examples() {
        let mut t = Tape::new();
        let probs = vec![t.value(0.2), t.value(0.4)];
        let graph = t.value(0.5);
        let loss = da_consistency_loss(&mut t, &probs, graph).unwrap();
        assert!((t.data(loss) - 0.2).abs() < 1e-12);

        let graph_eq = t.value(0.3);
        let loss = da_consistency_loss(&mut t, &probs, graph_eq).unwrap();
        assert!(t.data(loss).abs() < 1e-12);

        assert!(matches!(
            da_consistency_loss(&mut t, &[], graph),
            Err(LossError::EmptyPatchSet)
        ));
    }

    #[test]
    fn da_consistency_gradient_matches_finite_differences() {
        let x0 = vec![0.2, 0.45, 0.7]; // two patches + graph prob, away from kink
        let eval = |x: &[f64]| -> f64 {
            let mut t = Tape::new();
            let probs = vec![t.value(x[0]), t.value(x[1])];
            let graph = t.value(x[2]);
            let loss = da_consistency_loss(&mut t, &probs, graph).unwrap();
            t.data(loss)
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = x0.iter().map(|&v| t.value(v)).collect();
        let loss = da_consistency_loss(&mut t, &vars[0..2].to_vec(), vars[2]).unwrap();
        t.backward(loss);
        let grad: Vec<f64> = vars.iter().map(|&v| t.grad(v)).collect();
        let report = check_gradients(eval, &x0, &grad, 1e-6);
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn da_forward_reverses_feature_gradients() {
        // Patch features sit directly under their reversal node, so their
        // gradient is exactly -alpha times the unreversed gradient (a single
        // extra multiplication). Token features pass through pooling first,
        // so the reversal multiplies one step later and the comparison holds
        // to rounding.
        for alpha in [0.0, 0.5, 1.0, 1.7] {
            let build = |t: &mut Tape, alpha: Option<f64>| -> (Vec<Var>, Vec<Var>, Var) {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let img_clf = Mlp::new(t, &[2, 3, 1], Head::Sigmoid, &mut rng);
                let graph_clf = Mlp::new(t, &[2, 3, 1], Head::Sigmoid, &mut rng);
                let patch_feats: Vec<Var> =
                    [0.3, -0.6, 0.2, 0.9].iter().map(|&v| t.value(v)).collect();
                let token_feats: Vec<Var> =
                    [0.1, 0.7, -0.4, 0.5].iter().map(|&v| t.value(v)).collect();
                let views = DaBatchViews {
                    image_patch_features: vec![
                        patch_feats[0..2].to_vec(),
                        patch_feats[2..4].to_vec(),
                    ],
                    graph_tokens: vec![token_feats[0..2].to_vec(), token_feats[2..4].to_vec()],
                    domain: 1.0,
                };
                let loss = match alpha {
                    Some(a) => {
                        let term = da_forward(t, &views, &img_clf, &graph_clf, a).unwrap();
                        let img = da_image_loss(t, &term.patch_probs, term.domain).unwrap();
                        let gr = bce(t, term.domain, term.graph_prob);
                        t.add(img, gr)
                    }
                    None => {
                        // Same computation with identity instead of reversal.
                        let mut probs = Vec::new();
                        for f in &views.image_patch_features {
                            probs.push(classify_scalar(t, &img_clf, f).unwrap());
                        }
                        let pooled = pooled_tokens(t, &views.graph_tokens).unwrap();
                        let gp = classify_scalar(t, &graph_clf, &pooled).unwrap();
                        let img = da_image_loss(t, &probs, 1.0).unwrap();
                        let gr = bce(t, 1.0, gp);
                        t.add(img, gr)
                    }
                };
                (patch_feats, token_feats, loss)
            };
            let mut t_with = Tape::new();
            let (p_with, k_with, l_with) = build(&mut t_with, Some(alpha));
            t_with.backward(l_with);
            let mut t_without = Tape::new();
            let (p_without, k_without, l_without) = build(&mut t_without, None);
            t_without.backward(l_without);
            for (&a, &b) in p_with.iter().zip(&p_without) {
                let got = t_with.grad(a);
                let expect = -alpha * t_without.grad(b);
                if got == 0.0 && expect == 0.0 {
                    continue; // multiplying by zero may flip the zero's sign
                }
                assert_eq!(
                    got.to_bits(),
                    expect.to_bits(),
                    "alpha {alpha}: patch grad {got} vs {expect}"
                );
            }
            for (&a, &b) in k_with.iter().zip(&k_without) {
                let got = t_with.grad(a);
                let expect = -alpha * t_without.grad(b);
                let scale = got.abs().max(expect.abs()).max(1e-300);
                assert!(
                    (got - expect).abs() / scale < 1e-14 || (got == 0.0 && expect == 0.0),
                    "alpha {alpha}: token grad {got} vs {expect}"
                );
            }
        }
    }

    fn perfect_inputs(tape: &mut Tape) -> (PredVarSet, Vec<BoundingBox>, Matching, EdgeSampleSet) {
        let gt = vec![
            bb(&[0.3, 0.3], &[0.05, 0.05]),
            bb(&[0.7, 0.6], &[0.08, 0.04]),
        ];
        let boxes = gt.iter().map(|b| BoxVar::constant(tape, b)).collect();
        let cls_prob = vec![tape.value(1.0), tape.value(1.0)];
        let mut rel_prob = BTreeMap::new();
        rel_prob.insert((0, 1), tape.value(1.0));
        let pred = PredVarSet {
            boxes,
            cls_prob,
            rel_prob,
        };
        let matching = Matching {
            pairs: vec![(0, 0), (1, 1)],
            unmatched_pred: vec![],
        };
        let set = EdgeSampleSet {
            active: vec![TaggedPair::new(0, 0, 1)],
            background: vec![],
            ratio_target: 0.15,
        };
        (pred, gt, matching, set)
    }

    #[test]
    fn combined_perfect_predictions_near_zero() {
        let mut t = Tape::new();
        let (pred, gt, matching, set) = perfect_inputs(&mut t);
        let samples = [SampleLossInputs {
            pred: &pred,
            gt_boxes: &gt,
            matching: &matching,
        }];
        let w = LossWeights::for_dims(2);
        let total = combined_loss(&mut t, &samples, &set, None, &w, false).unwrap();
        assert!(t.data(total) < 1e-4, "loss {}", t.data(total));
        assert!(t.data(total) >= 0.0);
    }

    #[test]
    fn combined_zero_weights_is_zero() {
        let mut t = Tape::new();
        let (pred, gt, matching, set) = perfect_inputs(&mut t);
        // Perturb predictions so the components themselves are nonzero.
        let samples = [SampleLossInputs {
            pred: &pred,
            gt_boxes: &gt,
            matching: &matching,
        }];
        let w = LossWeights {
            reg: 0.0,
            giou: 0.0,
            cls: 0.0,
            reslt: 0.0,
            da: 0.0,
        };
        let total = combined_loss(&mut t, &samples, &set, None, &w, false).unwrap();
        assert_eq!(t.data(total), 0.0);
    }

    #[test]
    fn combined_is_linear_in_each_weight() {
        let mut t = Tape::new();
        let gt = vec![bb(&[0.3, 0.3], &[0.05, 0.05]), bb(&[0.7, 0.6], &[0.08, 0.04])];
        let boxes = vec![
            BoxVar::constant(&mut t, &bb(&[0.35, 0.28], &[0.06, 0.04])),
            BoxVar::constant(&mut t, &bb(&[0.65, 0.66], &[0.07, 0.05])),
        ];
        let cls_prob = vec![t.value(0.8), t.value(0.6)];
        let mut rel_prob = BTreeMap::new();
        rel_prob.insert((0, 1), t.value(0.4));
        let pred = PredVarSet {
            boxes,
            cls_prob,
            rel_prob,
        };
        let matching = Matching {
            pairs: vec![(0, 0), (1, 1)],
            unmatched_pred: vec![],
        };
        let set = EdgeSampleSet {
            active: vec![TaggedPair::new(0, 0, 1)],
            background: vec![],
            ratio_target: 0.15,
        };
        let samples = [SampleLossInputs {
            pred: &pred,
            gt_boxes: &gt,
            matching: &matching,
        }];
        let base_w = LossWeights::for_dims(2);
        let parts =
            combined_loss_parts(&mut t, &samples, &set, None, &base_w, false).unwrap();
        let base_total = t.data(parts.total);
        for (name, scaled_w, component) in [
            (
                "reg",
                LossWeights {
                    reg: base_w.reg * 3.0,
                    ..base_w
                },
                t.data(parts.reg) * base_w.reg,
            ),
            (
                "giou",
                LossWeights {
                    giou: base_w.giou * 3.0,
                    ..base_w
                },
                t.data(parts.giou) * base_w.giou,
            ),
            (
                "cls",
                LossWeights {
                    cls: base_w.cls * 3.0,
                    ..base_w
                },
                t.data(parts.cls) * base_w.cls,
            ),
            (
                "reslt",
                LossWeights {
                    reslt: base_w.reslt * 3.0,
                    ..base_w
                },
                t.data(parts.reslt) * base_w.reslt,
            ),
        ] {
            let scaled =
                combined_loss(&mut t, &samples, &set, None, &scaled_w, false).unwrap();
            let delta = t.data(scaled) - base_total;
            assert!(
                (delta - 2.0 * component).abs() < 1e-9,
                "{name}: delta {delta} vs 2x component {component}"
            );
        }
    }

    #[test]
    fn combined_da_block_only_when_provided() {
        let mut t = Tape::new();
        let (pred, gt, matching, set) = perfect_inputs(&mut t);
        let samples = [SampleLossInputs {
            pred: &pred,
            gt_boxes: &gt,
            matching: &matching,
        }];
        let w = LossWeights::for_dims(2);
        let without =
            combined_loss_parts(&mut t, &samples, &set, None, &w, false).unwrap();
        assert!(without.da_img.is_none());

        let term = DaTerm {
            patch_probs: vec![t.value(0.5), t.value(0.5)],
            graph_prob: t.value(0.5),
            domain: 1.0,
        };
        let with =
            combined_loss_parts(&mut t, &samples, &set, Some(&[term]), &w, false).unwrap();
        let da_total = t.data(with.total) - t.data(without.total);
        // Two patches at 0.5 plus graph CE at 0.5, consistency 0.
        let expect = w.da * 3.0 * std::f64::consts::LN_2;
        assert!((da_total - expect).abs() < 1e-9, "{da_total} vs {expect}");
    }

    #[test]
    fn combined_skips_pairs_with_unmatched_endpoint() {
        let mut t = Tape::new();
        // Two gt nodes but only one prediction token: gt node 1 unmatched.
        let gt = vec![bb(&[0.3, 0.3], &[0.05, 0.05]), bb(&[0.7, 0.6], &[0.08, 0.04])];
        let pred = PredVarSet {
            boxes: vec![BoxVar::constant(&mut t, &gt[0])],
            cls_prob: vec![t.value(0.9)],
            rel_prob: BTreeMap::new(),
        };
        let matching = Matching {
            pairs: vec![(0, 0)],
            unmatched_pred: vec![],
        };
        let set = EdgeSampleSet {
            active: vec![TaggedPair::new(0, 0, 1)],
            background: vec![],
            ratio_target: 0.15,
        };
        let samples = [SampleLossInputs {
            pred: &pred,
            gt_boxes: &gt,
            matching: &matching,
        }];
        let w = LossWeights::for_dims(2);
        let parts = combined_loss_parts(&mut t, &samples, &set, None, &w, false).unwrap();
        assert_eq!(t.data(parts.reslt), 0.0, "unsupervisable pair dropped");
    }

    #[test]
    fn default_weights_per_dims() {
        let w2 = LossWeights::for_dims(2);
        assert_eq!((w2.reg, w2.giou, w2.cls, w2.reslt, w2.da), (5.0, 2.0, 3.0, 5.0, 1.0));
        let w3 = LossWeights::for_dims(3);
        assert_eq!((w3.reg, w3.giou, w3.cls, w3.reslt, w3.da), (2.0, 3.0, 4.0, 6.0, 0.8));
        assert!(LossWeights { reg: -1.0, ..w2 }.validate().is_err());
    }

    #[test]
    fn losses_stay_finite_under_extreme_probabilities() {
        let mut t = Tape::new();
        for p in [0.0, 1.0, 1e-300, 1.0 - 1e-16] {
            let v = t.value(p);
            for label in [0.0, 1.0] {
                let loss = bce(&mut t, label, v);
                assert!(t.data(loss).is_finite());
                assert!(t.data(loss) >= 0.0);
            }
        }
    }
}
