//! Training objectives: sigmoid focal classification, matched box
//! refinement, and the pseudo-feature replay regularizer.
//!
//! Focal terms use the numerically stable composition
//! `alpha_t * sigmoid(-u)^gamma * softplus(-u)` with `u = (2t - 1) x`,
//! which never materializes a probability in the log. Matching between
//! queries and ground truth minimizes a weighted cost of classification
//! probability, GIoU, and L1 distance; the cost weights shape only the
//! assignment, never the loss values themselves.

use crate::boxes::BoxCwh;
use crate::matching::min_cost_assignment;
use crate::tensor::{ops, Graph, Scalar, Tensor};
use crate::{Error, Result};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Matching cost weights (classification, GIoU, L1).
pub const COST_CLS: f64 = 2.0;
pub const COST_GIOU: f64 = 2.0;
pub const COST_L1: f64 = 5.0;

/// Box refinement loss weights used during pretraining.
pub const BOX_GIOU_WEIGHT: f64 = 2.0;
pub const BOX_L1_WEIGHT: f64 = 5.0;

/// A ground-truth object expressed against the active head: the slot is the
/// head column of its class.
#[derive(Debug, Clone, Copy)]
pub struct SlotTarget {
    pub slot: usize,
    pub bbox: BoxCwh,
}

/// Sum of focal terms over all entries of `logits` given a 0/1 target mask
/// of the same shape.
pub fn focal_sum<F: Scalar>(
    g: &Graph<F>,
    logits: &Tensor<F>,
    target_mask: &[f64],
) -> Result<Tensor<F>> {
    focal_sum_masked(g, logits, target_mask, None)
}

/// Focal sum with an optional 0/1 inclusion mask; excluded entries
/// contribute nothing to the loss or its gradient.
pub fn focal_sum_masked<F: Scalar>(
    g: &Graph<F>,
    logits: &Tensor<F>,
    target_mask: &[f64],
    include: Option<&[f64]>,
) -> Result<Tensor<F>> {
    if target_mask.len() != logits.numel() {
        return Err(Error::shape(
            "focal_sum",
            format!(
                "mask has {} entries for logits shape {:?}",
                target_mask.len(),
                logits.shape()
            ),
        ));
    }
    if let Some(inc) = include {
        if inc.len() != target_mask.len() {
            return Err(Error::shape(
                "focal_sum",
                format!(
                    "include mask has {} entries, target mask has {}",
                    inc.len(),
                    target_mask.len()
                ),
            ));
        }
    }
    let shape = logits.shape();
    let sign: Vec<f64> = target_mask.iter().map(|&t| 2.0 * t - 1.0).collect();
    let alpha_t: Vec<f64> = target_mask
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let a = t * FOCAL_ALPHA + (1.0 - t) * (1.0 - FOCAL_ALPHA);
            a * include.map_or(1.0, |inc| inc[i])
        })
        .collect();
    let sign_t = Tensor::from_f64(&shape, &sign)?;
    let alpha_t = Tensor::from_f64(&shape, &alpha_t)?;
    let u = ops::mul(g, logits, &sign_t)?;
    let nu = ops::neg(g, &u)?;
    let s = ops::sigmoid(g, &nu)?;
    let s_gamma = ops::powf(g, &s, FOCAL_GAMMA)?;
    let sp = ops::softplus(g, &nu)?;
    let elem = ops::mul(g, &ops::mul(g, &alpha_t, &s_gamma)?, &sp)?;
    ops::sum_all(g, &elem)
}

/// Builds the row-major [queries x targets] matching cost from sigmoid
/// probabilities and decoded boxes. Pure f64: the assignment is discrete,
/// so no gradient flows through it.
pub fn match_cost(
    probs: &[Vec<f64>],
    boxes: &[BoxCwh],
    targets: &[SlotTarget],
) -> Result<Vec<f64>> {
    if probs.len() != boxes.len() {
        return Err(Error::Contract(format!(
            "match_cost: {} probability rows vs {} boxes",
            probs.len(),
            boxes.len()
        )));
    }
    let mut cost = Vec::with_capacity(boxes.len() * targets.len());
    for (p, b) in probs.iter().zip(boxes) {
        for t in targets {
            if t.slot >= p.len() {
                return Err(Error::Contract(format!(
                    "match_cost: slot {} outside head width {}",
                    t.slot,
                    p.len()
                )));
            }
            let c_cls = -p[t.slot];
            let c_giou = -crate::boxes::giou(b, &t.bbox)?;
            let c_l1 = crate::boxes::l1_cwh(b, &t.bbox);
            cost.push(COST_CLS * c_cls + COST_GIOU * c_giou + COST_L1 * c_l1);
        }
    }
    Ok(cost)
}

/// Sigmoid probabilities of a logits tensor as f64 rows.
pub fn sigmoid_rows<F: Scalar>(logits: &Tensor<F>) -> Result<Vec<Vec<f64>>> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::shape(
            "sigmoid_rows",
            format!("shape {shape:?}, expected a matrix"),
        ));
    }
    let (n, c) = (shape[0], shape[1]);
    Ok(logits.with_data(|d| {
        (0..n)
            .map(|i| {
                d[i * c..(i + 1) * c]
                    .iter()
                    .map(|&v| {
                        let x = v.as_f64();
                        if x >= 0.0 {
                            1.0 / (1.0 + (-x).exp())
                        } else {
                            let e = x.exp();
                            e / (1.0 + e)
                        }
                    })
                    .collect()
            })
            .collect()
    }))
}

/// Differentiable GIoU of each predicted box against its fixed target,
/// returned as an [m] column. `pred` holds sigmoid-space boxes [m x 4].
pub(crate) fn giou_column<F: Scalar>(
    g: &Graph<F>,
    pred: &Tensor<F>,
    targets: &[BoxCwh],
) -> Result<Tensor<F>> {
    let m = targets.len();
    let half = |t: &Tensor<F>| ops::mul_scalar(g, t, 0.5);
    let cx = ops::slice_cols(g, pred, 0, 1)?;
    let cy = ops::slice_cols(g, pred, 1, 1)?;
    let w = ops::slice_cols(g, pred, 2, 1)?;
    let h = ops::slice_cols(g, pred, 3, 1)?;
    let x0 = ops::sub(g, &cx, &half(&w)?)?;
    let x1 = ops::add(g, &cx, &half(&w)?)?;
    let y0 = ops::sub(g, &cy, &half(&h)?)?;
    let y1 = ops::add(g, &cy, &half(&h)?)?;
    let col = |f: fn(&BoxCwh) -> f64| -> Result<Tensor<F>> {
        Tensor::from_f64(&[m, 1], &targets.iter().map(f).collect::<Vec<_>>())
    };
    let tx0 = col(|b| b.cx - b.w / 2.0)?;
    let tx1 = col(|b| b.cx + b.w / 2.0)?;
    let ty0 = col(|b| b.cy - b.h / 2.0)?;
    let ty1 = col(|b| b.cy + b.h / 2.0)?;
    let t_area = col(|b| b.w * b.h)?;

    let iw = ops::relu(g, &ops::sub(g, &ops::minimum(g, &x1, &tx1)?, &ops::maximum(g, &x0, &tx0)?)?)?;
    let ih = ops::relu(g, &ops::sub(g, &ops::minimum(g, &y1, &ty1)?, &ops::maximum(g, &y0, &ty0)?)?)?;
    let inter = ops::mul(g, &iw, &ih)?;
    let p_area = ops::mul(g, &w, &h)?;
    let union = ops::sub(g, &ops::add(g, &p_area, &t_area)?, &inter)?;
    let iou = ops::div(g, &inter, &union)?;
    let ew = ops::sub(g, &ops::maximum(g, &x1, &tx1)?, &ops::minimum(g, &x0, &tx0)?)?;
    let eh = ops::sub(g, &ops::maximum(g, &y1, &ty1)?, &ops::minimum(g, &y0, &ty0)?)?;
    let enclose = ops::mul(g, &ew, &eh)?;
    let slack = ops::div(g, &ops::sub(g, &enclose, &union)?, &enclose)?;
    ops::sub(g, &iou, &slack)
}

fn abs_tensor<F: Scalar>(g: &Graph<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    ops::add(g, &ops::relu(g, x)?, &ops::relu(g, &ops::neg(g, x)?)?)
}

/// GIoU + L1 refinement loss over matched pairs, averaged over the pair
/// count. `box_logits` rows must already be the matched query rows, aligned
/// with `targets`.
pub fn box_refine_loss<F: Scalar>(
    g: &Graph<F>,
    box_logits: &Tensor<F>,
    targets: &[BoxCwh],
) -> Result<Tensor<F>> {
    let m = targets.len();
    if m == 0 {
        return Ok(Tensor::scalar(F::zero()));
    }
    let pred = ops::sigmoid(g, box_logits)?;
    let giou = giou_column(g, &pred, targets)?;
    let giou_loss = ops::sum_all(g, &ops::add_scalar(g, &ops::neg(g, &giou)?, 1.0)?)?;
    let t_data: Vec<f64> = targets
        .iter()
        .flat_map(|b| [b.cx, b.cy, b.w, b.h])
        .collect();
    let t = Tensor::from_f64(&[m, 4], &t_data)?;
    let l1 = ops::sum_all(g, &abs_tensor(g, &ops::sub(g, &pred, &t)?)?)?;
    let total = ops::add(
        g,
        &ops::mul_scalar(g, &giou_loss, BOX_GIOU_WEIGHT)?,
        &ops::mul_scalar(g, &l1, BOX_L1_WEIGHT)?,
    )?;
    ops::mul_scalar(g, &total, 1.0 / m as f64)
}

/// One stage's supervised loss: Hungarian matching on (probability, GIoU,
/// L1) cost, focal classification over every query row normalized by the
/// row count, and optionally the matched box refinement term. Returns the
/// loss and the (query, target) pairs.
///
/// `negative_cols`, when given, limits background (negative) supervision to
/// the flagged head columns; matched positives always contribute. Width must
/// equal the head width.
pub fn stage_loss<F: Scalar>(
    g: &Graph<F>,
    cls_logits: &Tensor<F>,
    boxes: &[BoxCwh],
    box_logits: Option<&Tensor<F>>,
    targets: &[SlotTarget],
    negative_cols: Option<&[bool]>,
) -> Result<(Tensor<F>, Vec<(usize, usize)>)> {
    let shape = cls_logits.shape();
    if shape.len() != 2 {
        return Err(Error::shape(
            "stage_loss",
            format!("logits shape {shape:?}, expected a matrix"),
        ));
    }
    let (n, c) = (shape[0], shape[1]);
    if boxes.len() != n {
        return Err(Error::Contract(format!(
            "stage_loss: {} boxes for {} query rows",
            boxes.len(),
            n
        )));
    }
    if let Some(nc) = negative_cols {
        if nc.len() != c {
            return Err(Error::Contract(format!(
                "stage_loss: {} negative-column flags for head width {c}",
                nc.len()
            )));
        }
    }
    let pairs = if targets.is_empty() {
        Vec::new()
    } else {
        let probs = sigmoid_rows(cls_logits)?;
        let cost = match_cost(&probs, boxes, targets)?;
        min_cost_assignment(&cost, n, targets.len())?
    };
    let mut mask = vec![0.0f64; n * c];
    for &(q, t) in &pairs {
        mask[q * c + targets[t].slot] = 1.0;
    }
    let include: Option<Vec<f64>> = negative_cols.map(|nc| {
        mask.iter()
            .enumerate()
            .map(|(i, &t)| if t == 1.0 || nc[i % c] { 1.0 } else { 0.0 })
            .collect()
    });
    let cls = focal_sum_masked(g, cls_logits, &mask, include.as_deref())?;
    let mut loss = ops::mul_scalar(g, &cls, 1.0 / n as f64)?;
    if let Some(logits) = box_logits {
        if !pairs.is_empty() {
            let rows: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
            let matched = ops::select_rows(g, logits, &rows)?;
            let t_boxes: Vec<BoxCwh> = pairs.iter().map(|&(_, t)| targets[t].bbox).collect();
            let refine = box_refine_loss(g, &matched, &t_boxes)?;
            loss = ops::add(g, &loss, &refine)?;
        }
    }
    Ok((loss, pairs))
}

/// Replay regularizer: renormalized-sigmoid cross-entropy of each pseudo
/// feature's head response against its pseudo label, averaged over rows.
/// With all-zero logits over two classes this is exactly ln 2.
pub fn replay_loss<F: Scalar>(
    g: &Graph<F>,
    cls_logits: &Tensor<F>,
    labels: &[usize],
) -> Result<Tensor<F>> {
    let shape = cls_logits.shape();
    if shape.len() != 2 {
        return Err(Error::shape(
            "replay_loss",
            format!("logits shape {shape:?}, expected a matrix"),
        ));
    }
    if labels.len() != shape[0] {
        return Err(Error::Contract(format!(
            "replay_loss: {} labels for {} rows",
            labels.len(),
            shape[0]
        )));
    }
    if labels.is_empty() {
        return Ok(Tensor::scalar(F::zero()));
    }
    let s = ops::sigmoid(g, cls_logits)?;
    let row_sum = ops::sum_axis1(g, &s)?;
    let picked = ops::select_per_row(g, &s, labels)?;
    let per_row = ops::sub(g, &ops::ln(g, &row_sum)?, &ops::ln(g, &picked)?)?;
    ops::mean_all(g, &per_row)
}

/// Softmax variant of the replay regularizer: cross-entropy of the full-head
/// softmax against the pseudo label, averaged over rows. With all-zero
/// logits over width `w` this is exactly ln w.
pub fn replay_loss_softmax<F: Scalar>(
    g: &Graph<F>,
    cls_logits: &Tensor<F>,
    labels: &[usize],
) -> Result<Tensor<F>> {
    let shape = cls_logits.shape();
    if shape.len() != 2 {
        return Err(Error::shape(
            "replay_loss_softmax",
            format!("logits shape {shape:?}, expected a matrix"),
        ));
    }
    if labels.len() != shape[0] {
        return Err(Error::Contract(format!(
            "replay_loss_softmax: {} labels for {} rows",
            labels.len(),
            shape[0]
        )));
    }
    if labels.is_empty() {
        return Ok(Tensor::scalar(F::zero()));
    }
    let s = ops::softmax(g, cls_logits, 1)?;
    let picked = ops::select_per_row(g, &s, labels)?;
    let per_row = ops::neg(g, &ops::ln(g, &picked)?)?;
    ops::mean_all(g, &per_row)
}

/// Total incremental objective: both stage classification losses plus
/// lambda times both replay terms.
pub fn assemble_incremental<F: Scalar>(
    g: &Graph<F>,
    cls1: &Tensor<F>,
    cls2: &Tensor<F>,
    rpy1: &Tensor<F>,
    rpy2: &Tensor<F>,
    lambda: f64,
) -> Result<Tensor<F>> {
    let cls = ops::add(g, cls1, cls2)?;
    let rpy = ops::add(g, rpy1, rpy2)?;
    ops::add(g, &cls, &ops::mul_scalar(g, &rpy, lambda)?)
}

/// Divergence guard: a non-finite loss aborts the run.
pub fn ensure_finite<F: Scalar>(loss: &Tensor<F>, context: &str) -> Result<f64> {
    let v = loss.item()?.as_f64();
    if !v.is_finite() {
        return Err(Error::Diverged(format!("{context}: loss is {v}")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_of<F: Scalar>(t: &Tensor<F>) -> f64 {
        t.item().unwrap().as_f64()
    }

    #[test]
    fn focal_hand_values() {
        let g = Graph::<f64>::inference();
        let x = Tensor::from_f64(&[1, 1], &[0.0]).unwrap();
        let pos = focal_sum(&g, &x, &[1.0]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((scalar_of(&pos) - 0.25 * 0.25 * ln2).abs() < 1e-15);
        let neg = focal_sum(&g, &x, &[0.0]).unwrap();
        assert!((scalar_of(&neg) - 0.75 * 0.25 * ln2).abs() < 1e-15);
    }

    #[test]
    fn focal_matches_direct_formula() {
        let g = Graph::<f64>::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 40;
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
        let mask: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.3))).collect();
        let x = Tensor::from_f64(&[8, 5], &logits).unwrap();
        let got = scalar_of(&focal_sum(&g, &x, &mask).unwrap());
        // Independent route: p_t then -alpha_t (1 - p_t)^gamma ln(p_t).
        let want: f64 = logits
            .iter()
            .zip(&mask)
            .map(|(&x, &t)| {
                let p = 1.0 / (1.0 + (-x).exp());
                let (pt, at) = if t > 0.5 { (p, 0.25) } else { (1.0 - p, 0.75) };
                -at * (1.0 - pt) * (1.0 - pt) * pt.ln()
            })
            .sum();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn giou_column_matches_scalar_geometry() {
        let g = Graph::<f64>::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_box = || {
            BoxCwh::new(
                rng.random_range(0.3..0.7),
                rng.random_range(0.3..0.7),
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
            )
        };
        let preds: Vec<BoxCwh> = (0..12).map(|_| rand_box()).collect();
        let targets: Vec<BoxCwh> = (0..12).map(|_| rand_box()).collect();
        let data: Vec<f64> = preds.iter().flat_map(|b| [b.cx, b.cy, b.w, b.h]).collect();
        let pred_t = Tensor::from_f64(&[12, 4], &data).unwrap();
        let col = giou_column(&g, &pred_t, &targets).unwrap();
        for (i, v) in col.data().iter().enumerate() {
            let want = crate::boxes::giou(&preds[i], &targets[i]).unwrap();
            assert!((v - want).abs() < 1e-12, "row {i}: {v} vs {want}");
        }
    }

    #[test]
    fn stage_loss_matches_forced_assignment() {
        let g = Graph::<f64>::inference();
        // Query 0 sits exactly on the target, query 1 far away.
        let boxes = vec![
            BoxCwh::new(0.3, 0.3, 0.2, 0.2),
            BoxCwh::new(0.8, 0.8, 0.1, 0.1),
        ];
        let logits = Tensor::from_f64(&[2, 3], &[2.0, -3.0, -3.0, -3.0, -3.0, -3.0]).unwrap();
        let targets = vec![SlotTarget {
            slot: 0,
            bbox: BoxCwh::new(0.3, 0.3, 0.2, 0.2),
        }];
        let (loss, pairs) = stage_loss(&g, &logits, &boxes, None, &targets, None).unwrap();
        assert_eq!(pairs, vec![(0, 0)]);
        let mask = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let want = scalar_of(&focal_sum(&g, &logits, &mask).unwrap()) / 2.0;
        assert!((scalar_of(&loss) - want).abs() < 1e-14);
    }

    #[test]
    fn stage_loss_is_permutation_invariant() {
        let g = Graph::<f64>::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let c = 4;
        let logits: Vec<f64> = (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let boxes: Vec<BoxCwh> = (0..n)
            .map(|_| {
                BoxCwh::new(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.05..0.3),
                    rng.random_range(0.05..0.3),
                )
            })
            .collect();
        let targets = vec![
            SlotTarget { slot: 1, bbox: BoxCwh::new(0.4, 0.4, 0.2, 0.2) },
            SlotTarget { slot: 3, bbox: BoxCwh::new(0.7, 0.6, 0.15, 0.25) },
        ];
        let t = Tensor::from_f64(&[n, c], &logits).unwrap();
        let (l0, _) = stage_loss(&g, &t, &boxes, None, &targets, None).unwrap();
        // Rotate query order by 2.
        let perm: Vec<usize> = (0..n).map(|i| (i + 2) % n).collect();
        let logits_p: Vec<f64> = perm
            .iter()
            .flat_map(|&i| logits[i * c..(i + 1) * c].to_vec())
            .collect();
        let boxes_p: Vec<BoxCwh> = perm.iter().map(|&i| boxes[i]).collect();
        let tp = Tensor::from_f64(&[n, c], &logits_p).unwrap();
        let (l1, _) = stage_loss(&g, &tp, &boxes_p, None, &targets, None).unwrap();
        assert!((scalar_of(&l0) - scalar_of(&l1)).abs() < 1e-12);
    }

    #[test]
    fn stage_loss_with_no_targets_is_pure_negative_focal() {
        let g = Graph::<f64>::inference();
        let logits = Tensor::from_f64(&[2, 2], &[0.5, -1.0, 0.0, 2.0]).unwrap();
        let boxes = vec![
            BoxCwh::new(0.3, 0.3, 0.2, 0.2),
            BoxCwh::new(0.7, 0.7, 0.2, 0.2),
        ];
        let (loss, pairs) = stage_loss(&g, &logits, &boxes, None, &[], None).unwrap();
        assert!(pairs.is_empty());
        let want = scalar_of(&focal_sum(&g, &logits, &[0.0; 4]).unwrap()) / 2.0;
        assert!((scalar_of(&loss) - want).abs() < 1e-14);
    }

    #[test]
    fn replay_loss_hand_value_and_uniformity() {
        let g = Graph::<f64>::inference();
        let x = Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
        let l = replay_loss(&g, &x, &[0]).unwrap();
        assert!((scalar_of(&l) - std::f64::consts::LN_2).abs() < 1e-15);
        // Mean over rows: duplicating the row leaves the value unchanged.
        let x2 = Tensor::from_f64(&[2, 2], &[0.0, 0.0, 0.0, 0.0]).unwrap();
        let l2 = replay_loss(&g, &x2, &[0, 1]).unwrap();
        assert!((scalar_of(&l2) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn incremental_assembly_hand_value() {
        let g = Graph::<f64>::inference();
        let one = Tensor::<f64>::scalar(1.0);
        let total = assemble_incremental(&g, &one, &one, &one, &one, 30.0).unwrap();
        assert!((scalar_of(&total) - 62.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let bad = Tensor::<f64>::scalar(f64::NAN);
        assert!(matches!(
            ensure_finite(&bad, "test"),
            Err(Error::Diverged(_))
        ));
        let ok = Tensor::<f64>::scalar(3.0);
        assert_eq!(ensure_finite(&ok, "test").unwrap(), 3.0);
    }

    #[test]
    fn focal_and_replay_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = gradcheck::random_data(&[4, 3], 2.0, &mut rng);
        let mask: Vec<f64> = (0..12).map(|_| f64::from(rng.random_bool(0.4))).collect();
        let m = mask.clone();
        let err = gradcheck::max_rel_err(
            &move |g, t| focal_sum(g, &t[0], &m),
            &[x.clone()],
            11,
        )
        .unwrap();
        assert!(err < 1e-5, "focal gradcheck {err}");

        let labels = vec![0usize, 2, 1, 2];
        let lbl = labels.clone();
        let err = gradcheck::max_rel_err(
            &move |g, t| replay_loss(g, &t[0], &lbl),
            &[x.clone()],
            13,
        )
        .unwrap();
        assert!(err < 1e-5, "replay gradcheck {err}");

        let err = gradcheck::max_rel_err(
            &move |g, t| replay_loss_softmax(g, &t[0], &labels),
            &[x],
            15,
        )
        .unwrap();
        assert!(err < 1e-5, "softmax replay gradcheck {err}");
    }

    #[test]
    fn softmax_replay_hand_value_and_label_sensitivity() {
        let g = Graph::<f64>::inference();
        let x = Tensor::from_f64(&[2, 4], &[0.0; 8]).unwrap();
        let l = replay_loss_softmax(&g, &x, &[0, 3]).unwrap();
        assert!((scalar_of(&l) - 4.0f64.ln()).abs() < 1e-15);
        // A confident correct logit shrinks the loss; a wrong label grows it.
        let y = Tensor::from_f64(&[1, 4], &[5.0, 0.0, 0.0, 0.0]).unwrap();
        let good = scalar_of(&replay_loss_softmax(&g, &y, &[0]).unwrap());
        let bad = scalar_of(&replay_loss_softmax(&g, &y, &[1]).unwrap());
        assert!(good < 0.05 && bad > 4.0, "good {good} bad {bad}");
    }

    #[test]
    fn negative_column_mask_suppresses_background_focal() {
        let g = Graph::<f64>::inference();
        // Two queries, width 3: column 0 is an old class getting no negative
        // supervision, column 2 is matched on query 0.
        let logits = Tensor::from_f64(&[2, 3], &[1.0, -0.5, 2.0, 0.7, -2.0, -3.0]).unwrap();
        let boxes = vec![
            BoxCwh::new(0.3, 0.3, 0.2, 0.2),
            BoxCwh::new(0.8, 0.8, 0.1, 0.1),
        ];
        let targets = vec![SlotTarget { slot: 2, bbox: BoxCwh::new(0.3, 0.3, 0.2, 0.2) }];
        let cols = [false, true, true];
        let (masked, pairs) =
            stage_loss(&g, &logits, &boxes, None, &targets, Some(&cols)).unwrap();
        assert_eq!(pairs, vec![(0, 0)]);
        // Hand assembly: focal over the same targets with column 0 excluded.
        let t_mask = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let include = [0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        let want =
            scalar_of(&focal_sum_masked(&g, &logits, &t_mask, Some(&include)).unwrap()) / 2.0;
        assert!((scalar_of(&masked) - want).abs() < 1e-14);
        // Suppression strictly reduces the loss versus full supervision.
        let (full, _) = stage_loss(&g, &logits, &boxes, None, &targets, None).unwrap();
        assert!(scalar_of(&masked) < scalar_of(&full));
        // A matched positive on a suppressed column still contributes.
        let targets0 = vec![SlotTarget { slot: 0, bbox: BoxCwh::new(0.3, 0.3, 0.2, 0.2) }];
        let (pos, pairs0) =
            stage_loss(&g, &logits, &boxes, None, &targets0, Some(&cols)).unwrap();
        assert_eq!(pairs0, vec![(0, 0)]);
        let t0 = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let inc0 = [1.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        let want0 =
            scalar_of(&focal_sum_masked(&g, &logits, &t0, Some(&inc0)).unwrap()) / 2.0;
        assert!((scalar_of(&pos) - want0).abs() < 1e-14);
        // Bad flag width is a contract violation.
        assert!(matches!(
            stage_loss(&g, &logits, &boxes, None, &targets, Some(&[true, false])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn box_refine_gradcheck() {
        // Logit-space inputs bounded away from corner ties so min/max kinks
        // do not straddle the finite-difference step.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 5;
        let data: Vec<f64> = (0..m * 4).map(|_| rng.random_range(-1.2..1.2)).collect();
        let targets: Vec<BoxCwh> = (0..m)
            .map(|_| {
                BoxCwh::new(
                    rng.random_range(0.25..0.75),
                    rng.random_range(0.25..0.75),
                    rng.random_range(0.1..0.4),
                    rng.random_range(0.1..0.4),
                )
            })
            .collect();
        let t = targets.clone();
        let err = gradcheck::max_rel_err(
            &move |g, ts| box_refine_loss(g, &ts[0], &t),
            &[(vec![m, 4], data)],
            17,
        )
        .unwrap();
        assert!(err < 1e-4, "box refine gradcheck {err}");
    }
}
