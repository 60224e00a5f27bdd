//! Detection metrics: per-class average precision and class-agnostic recall.
//!
//! AP is the exact all-point kind: precision is taken over every prefix of
//! the score-ranked detection list, turned into a monotone envelope, and
//! integrated across the recall steps. No fixed-point sampling is involved,
//! so two implementations of the same definition must agree bit-for-bit on
//! rational inputs.

use crate::boxes::{iou, BoxCwh};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct Detection {
    pub image: usize,
    pub class: u16,
    pub score: f64,
    pub bbox: BoxCwh,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub image: usize,
    pub class: u16,
    pub bbox: BoxCwh,
}

/// IoU thresholds for the averaged metric: 0.50 to 0.95 in steps of 0.05.
pub fn iou_sweep() -> [f64; 10] {
    core::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Ranks detections of one class: score descending, then image ascending,
/// then input position ascending. Returns indices into `dets`.
fn ranked_indices(dets: &[Detection], class: Option<u16>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len())
        .filter(|&i| class.is_none_or(|c| dets[i].class == c))
        .collect();
    idx.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(dets[a].image.cmp(&dets[b].image))
            .then(a.cmp(&b))
    });
    idx
}

/// Greedy matching of ranked detections against ground truth. Each ground
/// truth matches at most once; a detection takes the unused ground truth of
/// highest IoU at or above `thresh`, ties resolving to the lowest index in
/// `gts`. Returns one true/false flag per ranked detection.
fn match_flags(
    dets: &[Detection],
    ranked: &[usize],
    gts: &[GroundTruth],
    gt_pool: &[usize],
    thresh: f64,
    class_aware: bool,
) -> Result<Vec<bool>> {
    let mut used = vec![false; gt_pool.len()];
    let mut flags = Vec::with_capacity(ranked.len());
    for &di in ranked {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (slot, &gi) in gt_pool.iter().enumerate() {
            let g = &gts[gi];
            if used[slot] || g.image != d.image || (class_aware && g.class != d.class) {
                continue;
            }
            let ov = iou(&d.bbox, &g.bbox)?;
            if ov >= thresh && best.is_none_or(|(_, b)| ov > b) {
                best = Some((slot, ov));
            }
        }
        match best {
            Some((slot, _)) => {
                used[slot] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    Ok(flags)
}

/// Integrates true/false-positive flags into all-point AP given the number
/// of ground-truth objects.
fn ap_from_flags(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(flags.len());
    let mut rec = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..flags.len() {
        if rec[k] > prev {
            ap += (rec[k] - prev) * prec[k];
            prev = rec[k];
        }
    }
    ap
}

/// Average precision for one class at one IoU threshold.
///
/// Edge rules when the class has no ground truth: 1.0 with no detections of
/// the class (vacuously perfect), 0.0 otherwise (every detection is false).
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    class: u16,
    thresh: f64,
) -> Result<f64> {
    let ranked = ranked_indices(dets, Some(class));
    let pool: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].class == class).collect();
    if pool.is_empty() {
        return Ok(if ranked.is_empty() { 1.0 } else { 0.0 });
    }
    let flags = match_flags(dets, &ranked, gts, &pool, thresh, true)?;
    Ok(ap_from_flags(&flags, pool.len()))
}

/// Class-agnostic recall at one IoU threshold, keeping only the
/// `top_per_image` highest-scoring detections of each image. Returns 1.0
/// when there is no ground truth at all.
pub fn recall_at(
    dets: &[Detection],
    gts: &[GroundTruth],
    top_per_image: usize,
    thresh: f64,
) -> Result<f64> {
    if gts.is_empty() {
        return Ok(1.0);
    }
    let mut kept: Vec<usize> = Vec::new();
    let mut images: Vec<usize> = dets.iter().map(|d| d.image).collect();
    images.sort_unstable();
    images.dedup();
    for img in images {
        let mut per: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].image == img).collect();
        per.sort_by(|&a, &b| {
            dets[b]
                .score
                .partial_cmp(&dets[a].score)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        per.truncate(top_per_image);
        kept.extend(per);
    }
    let ranked = {
        let subset: Vec<Detection> = kept.iter().map(|&i| dets[i].clone()).collect();
        let order = ranked_indices(&subset, None);
        let flags = match_flags(
            &subset,
            &order,
            gts,
            &(0..gts.len()).collect::<Vec<_>>(),
            thresh,
            false,
        )?;
        flags
    };
    let matched = ranked.iter().filter(|&&f| f).count();
    Ok(matched as f64 / gts.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerClassAp {
    pub id: u16,
    pub ap50: f64,
    #[serde(rename = "ap5095")]
    pub ap50_95: f64,
}

/// Group means at IoU 0.50 over classes that appear in the ground truth.
/// A group with no present class has no defined mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupMeans {
    pub base: Option<f64>,
    pub incremental: Option<f64>,
    pub all: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub map50: f64,
    pub map75: f64,
    pub map50_95: f64,
    pub mar50_agnostic: f64,
    pub groups: GroupMeans,
    pub per_class: Vec<PerClassAp>,
}

/// Full evaluation over base and incremental class sets.
///
/// Global and group means run over ground-truth-present classes only;
/// classes absent from the ground truth still get per-class entries under
/// the edge rules. `top_per_image` bounds the detections counted by the
/// class-agnostic recall.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruth],
    base_classes: &[u16],
    incremental_classes: &[u16],
    top_per_image: usize,
) -> Result<EvalSummary> {
    let mut all_classes: Vec<u16> = base_classes
        .iter()
        .chain(incremental_classes.iter())
        .copied()
        .collect();
    all_classes.sort_unstable();
    all_classes.dedup();
    if all_classes.len() != base_classes.len() + incremental_classes.len() {
        return Err(Error::Contract(
            "evaluate: base and incremental class sets overlap".into(),
        ));
    }

    let present = |c: u16| gts.iter().any(|g| g.class == c);
    let sweep = iou_sweep();
    let mut per_class = Vec::with_capacity(all_classes.len());
    let mut ap50 = std::collections::BTreeMap::new();
    let mut ap75 = std::collections::BTreeMap::new();
    let mut ap5095 = std::collections::BTreeMap::new();
    for &c in &all_classes {
        let mut aps = [0.0f64; 10];
        for (i, &t) in sweep.iter().enumerate() {
            aps[i] = average_precision(dets, gts, c, t)?;
        }
        let mean = aps.iter().sum::<f64>() / sweep.len() as f64;
        ap50.insert(c, aps[0]);
        ap75.insert(c, aps[5]);
        ap5095.insert(c, mean);
        per_class.push(PerClassAp {
            id: c,
            ap50: aps[0],
            ap50_95: mean,
        });
    }

    let mean_over = |classes: &[u16], table: &std::collections::BTreeMap<u16, f64>| {
        let vals: Vec<f64> = classes
            .iter()
            .filter(|&&c| present(c))
            .map(|c| table[c])
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };

    let map50 = mean_over(&all_classes, &ap50)
        .ok_or_else(|| Error::Contract("evaluate: no ground-truth-present class".into()))?;
    let map75 = mean_over(&all_classes, &ap75).unwrap();
    let map50_95 = mean_over(&all_classes, &ap5095).unwrap();
    let groups = GroupMeans {
        base: mean_over(base_classes, &ap50),
        incremental: mean_over(incremental_classes, &ap50),
        all: Some(map50),
    };
    let mar50_agnostic = recall_at(dets, gts, top_per_image, 0.5)?;
    Ok(EvalSummary {
        map50,
        map75,
        map50_95,
        mar50_agnostic,
        groups,
        per_class,
    })
}

#[cfg(test)]
pub mod oracle {
    //! Independent AP computation used to cross-check the implementation.
    //! For every true-positive detection the recall gain is exactly
    //! `1 / n_gt`; the envelope precision at that point is found by a direct
    //! quadratic scan over all later prefixes.

    pub fn naive_ap(flags: &[bool], n_gt: usize) -> f64 {
        if n_gt == 0 {
            return if flags.is_empty() { 1.0 } else { 0.0 };
        }
        let mut ap = 0.0;
        for k in 0..flags.len() {
            if !flags[k] {
                continue;
            }
            let mut best = 0.0f64;
            for j in k..flags.len() {
                let tp = flags[..=j].iter().filter(|&&f| f).count();
                best = best.max(tp as f64 / (j + 1) as f64);
            }
            ap += best / n_gt as f64;
        }
        ap
    }
}
