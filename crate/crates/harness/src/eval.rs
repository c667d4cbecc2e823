//! Toy detection metric: thresholded decoding, per-class NMS, and mean of
//! 11-point interpolated AP over classes.

use icd_core::instance::{iou, Instance};
use icd_core::pyramid::{DensePredictions, ToyDetector};

use crate::scene::{batch_images, Scene};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub category: usize,
    pub score: f64,
    /// Normalised `[x1, y1, x2, y2]`.
    pub corners: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalParams {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self { score_threshold: 0.5, nms_iou: 0.5, match_iou: 0.5 }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Detections of image `b` above the score threshold, before NMS.
pub fn decode(preds: &DensePredictions, b: usize, threshold: f64) -> Vec<Detection> {
    let (l, c) = (preds.cells_len(), preds.classes());
    let logits = preds.logits.data();
    let mut out = Vec::new();
    for li in 0..l {
        for k in 0..c {
            let score = sigmoid(logits[(b * l + li) * c + k]);
            if score < threshold {
                continue;
            }
            let (cx, cy, _) = preds.cells[li];
            let [dl, dt, dr, db] = preds.ltrb(b, li);
            out.push(Detection { category: k, score, corners: [cx - dl, cy - dt, cx + dr, cy + db] });
        }
    }
    out
}

/// Greedy per-class suppression; keeps the higher-scoring box.
pub fn nms(mut dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep.iter().all(|k| k.category != d.category || iou(&k.corners, &d.corners) <= threshold) {
            keep.push(d);
        }
    }
    keep
}

/// 11-point interpolated AP from `(score, is_true_positive)` pairs.
pub fn average_precision(mut scored: Vec<(f64, bool)>, n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(scored.len());
    for (k, &(_, hit)) in scored.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    (0..=10)
        .map(|t| {
            let r = t as f64 / 10.0;
            curve.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|&(_, p)| p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Mean AP over classes that have ground truth; per image detections
/// are matched greedily by score at `match_iou`.
pub fn mean_ap(dets: &[Vec<Detection>], gts: &[Vec<Instance>], classes: usize, match_iou: f64) -> f64 {
    let mut per_class: Vec<Vec<(f64, bool)>> = vec![Vec::new(); classes];
    let mut n_gt = vec![0usize; classes];
    for (d_img, g_img) in dets.iter().zip(gts) {
        for g in g_img {
            n_gt[g.category] += 1;
        }
        let mut sorted = d_img.clone();
        sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut used = vec![false; g_img.len()];
        for d in sorted {
            let best = g_img
                .iter()
                .enumerate()
                .filter(|(gi, g)| !used[*gi] && g.category == d.category)
                .map(|(gi, g)| (gi, iou(&g.corners(), &d.corners)))
                .filter(|&(_, v)| v >= match_iou)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((gi, _)) = best {
                used[gi] = true;
            }
            per_class[d.category].push((d.score, best.is_some()));
        }
    }
    let aps: Vec<f64> = (0..classes)
        .filter(|&c| n_gt[c] > 0)
        .map(|c| average_precision(std::mem::take(&mut per_class[c]), n_gt[c]))
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

pub fn detect(det: &ToyDetector, scenes: &[Scene], params: &EvalParams, batch: usize) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch.max(1)) {
        let (_, preds) = det.forward(&batch_images(chunk)?)?;
        for b in 0..chunk.len() {
            out.push(nms(decode(&preds, b, params.score_threshold), params.nms_iou));
        }
    }
    Ok(out)
}

pub fn evaluate_toy_ap(det: &ToyDetector, scenes: &[Scene], params: &EvalParams) -> Result<f64> {
    let dets = detect(det, scenes, params, 16)?;
    let gts: Vec<Vec<Instance>> = scenes.iter().map(|s| s.instances.clone()).collect();
    Ok(mean_ap(&dets, &gts, det.cfg.classes, params.match_iou))
}
