//! Independent reference implementations shared by the oracle tests and
//! the acceptance harness. Nothing here calls the code under test.

#![allow(dead_code)]

pub mod invariants;

use conceptdet::boxes::BBox;
use conceptdet::world::{GroundTruth, Prediction};
use rand::Rng;

/// Corner-form IoU written out longhand.
pub fn iou_ref(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn corners(b: &BBox, scale: f64) -> [f64; 4] {
    [(b.cx - b.w / 2.0) * scale, (b.cy - b.h / 2.0) * scale, (b.cx + b.w / 2.0) * scale, (b.cy + b.h / 2.0) * scale]
}

/// Minimum total cost over every injective row-to-column map, enumerated
/// recursively.
pub fn exhaustive_min(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], r: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if r == cost.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                go(cost, r + 1, used, acc + cost[r][c], best);
                used[c] = false;
            }
        }
    }
    let q = cost.first().map_or(0, Vec::len);
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; q], 0.0, &mut best);
    if cost.is_empty() {
        0.0
    } else {
        best
    }
}

/// Random `G x Q` cost with `G <= 6`. Every fourth instance uses small
/// integers so ties are common.
pub fn random_cost<R: Rng>(rng: &mut R, i: usize) -> Vec<Vec<f64>> {
    let g = rng.random_range(0..=6);
    let q = rng.random_range(g.max(1)..=8);
    (0..g).map(|_| (0..q).map(|_| if i.is_multiple_of(4) { rng.random_range(0..4) as f64 } else { rng.random_range(-2.0..5.0) }).collect()).collect()
}

/// Label assignment by the adaptive rule, recomputed from scratch: anchors
/// are rebuilt from the image size, candidates are the nine nearest per
/// level, the threshold is mean plus sample standard deviation.
pub fn atss_reference(image_size: usize, gts: &[BBox]) -> Vec<Option<usize>> {
    let strides = [8usize, 16, 32, 64];
    let mut anchors = Vec::new();
    for (lvl, &st) in strides.iter().enumerate() {
        let n = image_size / st;
        for r in 0..n {
            for c in 0..n {
                let (x, y) = ((c as f64 + 0.5) * st as f64, (r as f64 + 0.5) * st as f64);
                let half = 2.0 * st as f64;
                anchors.push((lvl, x, y, [x - half, y - half, x + half, y + half]));
            }
        }
    }
    let s = image_size as f64;
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; anchors.len()];
    for (g, b) in gts.iter().enumerate() {
        let gc = corners(b, s);
        let (gx, gy) = ((gc[0] + gc[2]) / 2.0, (gc[1] + gc[3]) / 2.0);
        let mut cand: Vec<usize> = Vec::new();
        for lvl in 0..strides.len() {
            let mut on: Vec<usize> = (0..anchors.len()).filter(|&i| anchors[i].0 == lvl).collect();
            on.sort_by(|&i, &j| {
                let di = ((anchors[i].1 - gx).powi(2) + (anchors[i].2 - gy).powi(2)).sqrt();
                let dj = ((anchors[j].1 - gx).powi(2) + (anchors[j].2 - gy).powi(2)).sqrt();
                di.partial_cmp(&dj).unwrap().then(i.cmp(&j))
            });
            on.truncate(9);
            cand.extend(on);
        }
        let ious: Vec<f64> = cand.iter().map(|&i| iou_ref(anchors[i].3, gc)).collect();
        let n = ious.len() as f64;
        let mean = ious.iter().sum::<f64>() / n;
        let var = if ious.len() > 1 { ious.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        let thr = mean + var.sqrt();
        for (k, &i) in cand.iter().enumerate() {
            let (_, x, y, _) = anchors[i];
            let margin = [x - gc[0], y - gc[1], gc[2] - x, gc[3] - y].into_iter().fold(f64::INFINITY, f64::min);
            if ious[k] >= thr && margin > 0.01 {
                match owner[i] {
                    Some((_, best)) if best >= ious[k] => {}
                    _ => owner[i] = Some((g, ious[k])),
                }
            }
        }
    }
    owner.into_iter().map(|o| o.map(|p| p.0)).collect()
}

/// AP from an explicitly built precision-recall curve: predictions are
/// matched greedily in score order, then for each recall step `i / n_gt`
/// the interpolated precision is the best precision at any cutoff reaching
/// that recall.
pub fn ap_reference(preds: &[Prediction], gts: &[GroundTruth], thresholds: &[f64]) -> (f64, Vec<(usize, f64)>) {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per = Vec::new();
    for &c in &classes {
        let mut ps: Vec<&Prediction> = preds.iter().filter(|p| p.class_id == c).collect();
        ps.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let gs: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == c).collect();
        let mut total = 0.0;
        for &t in thresholds {
            let mut taken = vec![false; gs.len()];
            let mut hits = Vec::new();
            for p in &ps {
                let pc = corners(&p.bbox, 1.0);
                let mut pick: Option<usize> = None;
                let mut best = -1.0;
                for (j, g) in gs.iter().enumerate() {
                    if taken[j] || g.image != p.image {
                        continue;
                    }
                    let v = iou_ref(pc, corners(&g.bbox, 1.0));
                    if v >= t && v > best {
                        best = v;
                        pick = Some(j);
                    }
                }
                if let Some(j) = pick {
                    taken[j] = true;
                }
                hits.push(pick.is_some());
            }
            // (tp, precision) after each cutoff
            let curve: Vec<(usize, f64)> = (1..=hits.len())
                .map(|k| {
                    let tp = hits[..k].iter().filter(|h| **h).count();
                    (tp, tp as f64 / k as f64)
                })
                .collect();
            let n = gs.len();
            let mut ap = 0.0;
            for i in 1..=n {
                let p = curve.iter().filter(|(tp, _)| *tp >= i).map(|(_, p)| *p).fold(0.0, f64::max);
                ap += p / n as f64;
            }
            total += ap;
        }
        per.push((c, total / thresholds.len() as f64));
    }
    let mean = if per.is_empty() { 0.0 } else { per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64 };
    (mean, per)
}

/// Ground truth on a few images plus jittered, duplicated and spurious
/// predictions with distinct scores.
pub fn random_prediction_set<R: Rng>(rng: &mut R) -> (Vec<Prediction>, Vec<GroundTruth>) {
    let images = rng.random_range(1..=4);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for image in 0..images {
        for _ in 0..rng.random_range(0..=4) {
            let w = rng.random_range(0.05..0.4);
            let h = rng.random_range(0.05..0.4);
            let bbox = BBox::new(rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0), w, h);
            let class_id = rng.random_range(0..3);
            gts.push(GroundTruth { image, bbox, class_id });
            for _ in 0..rng.random_range(0..=2) {
                let j = rng.random_range(0.0..0.3);
                let b =
                    BBox::new(bbox.cx + j * w * rng.random_range(-1.0..1.0), bbox.cy + j * h * rng.random_range(-1.0..1.0), w * (1.0 + rng.random_range(-j..j)), h * (1.0 + rng.random_range(-j..j)));
                let class_id = if rng.random_bool(0.85) { class_id } else { rng.random_range(0..3) };
                preds.push(Prediction { image, bbox: b, class_id, score: 0.0 });
            }
        }
        for _ in 0..rng.random_range(0..=3) {
            let bbox = BBox::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
            preds.push(Prediction { image, bbox, class_id: rng.random_range(0..3), score: 0.0 });
        }
    }
    for p in &mut preds {
        p.score = rng.random_range(0.0..1.0);
    }
    (preds, gts)
}
