//! Fixed attention masks used in place of the learned ones.

use icd_core::instance::{iou, Instance};
use icd_core::pyramid::FlatPyramid;
use icd_core::Tensor;

use crate::config::AttentionVariant;
use crate::{HarnessError, Result};

fn normalize_or_uniform(mut w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|v| *v /= s);
        w
    } else {
        vec![1.0 / w.len() as f64; w.len()]
    }
}

pub fn uniform_mask(cells: usize) -> Vec<f64> {
    vec![1.0 / cells as f64; cells]
}

/// Uniform over cells whose centre lies in any box.
pub fn foreground_mask(flat: &FlatPyramid, boxes: &[Instance]) -> Vec<f64> {
    normalize_or_uniform(
        (0..flat.len())
            .map(|l| {
                let (x, y) = flat.cell_center(l);
                boxes.iter().any(|b| b.contains(x, y)) as u8 as f64
            })
            .collect(),
    )
}

/// Each cell carries a square anchor of four strides. Per box, anchors with
/// IoU of at least half the box's best IoU are kept with their IoU as
/// weight; the union over boxes takes the max.
pub fn fine_grained_mask(flat: &FlatPyramid, boxes: &[Instance]) -> Vec<f64> {
    let anchors: Vec<[f64; 4]> = (0..flat.len())
        .map(|l| {
            let (x, y) = flat.cell_center(l);
            let (_, h, w) = flat.shapes[flat.index[l].level];
            let (hw, hh) = (2.0 / w as f64, 2.0 / h as f64);
            [x - hw, y - hh, x + hw, y + hh]
        })
        .collect();
    let mut weight = vec![0.0f64; flat.len()];
    for b in boxes {
        let c = b.corners();
        let ious: Vec<f64> = anchors.iter().map(|a| iou(a, &c)).collect();
        let best = ious.iter().copied().fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (w, &v) in weight.iter_mut().zip(&ious) {
            if v >= 0.5 * best {
                *w = w.max(v);
            }
        }
    }
    normalize_or_uniform(weight)
}

/// Softmax over cells of the mean absolute feature of image `b`.
pub fn activation_mask(flat: &FlatPyramid, b: usize) -> Result<Vec<f64>> {
    let a = flat.image(b)?;
    let d = flat.dim();
    let act = a.data().chunks_exact(d).map(|r| r.iter().map(|v| v.abs()).sum::<f64>() / d as f64).collect::<Vec<_>>();
    Ok(Tensor::new(act, &[1, flat.len()])?.softmax()?.to_vec())
}

/// Per head `[N×L]` masks for a fixed variant. Rows follow `instances`,
/// grouped by image per `counts`; every row of an image shares the mask
/// built from that image's real boxes.
pub fn variant_masks(
    variant: AttentionVariant,
    flat: &FlatPyramid,
    instances: &[Instance],
    counts: &[usize],
    heads: usize,
) -> Result<Vec<Tensor>> {
    let l = flat.len();
    let n: usize = counts.iter().sum();
    if n != instances.len() || counts.len() != flat.batch() {
        return Err(HarnessError::Config(format!("{} instances, counts sum to {n}", instances.len())));
    }
    let mut rows = Vec::with_capacity(n * l);
    let mut off = 0;
    for (b, &nb) in counts.iter().enumerate() {
        let reals: Vec<Instance> = instances[off..off + nb].iter().filter(|i| i.is_real).cloned().collect();
        let m = match variant {
            AttentionVariant::None => uniform_mask(l),
            AttentionVariant::Foreground => foreground_mask(flat, &reals),
            AttentionVariant::FineGrained => fine_grained_mask(flat, &reals),
            AttentionVariant::Activation => activation_mask(flat, b)?,
            AttentionVariant::Icd => {
                return Err(HarnessError::Config("icd masks come from the decoder".into()));
            }
        };
        for _ in 0..nb {
            rows.extend_from_slice(&m);
        }
        off += nb;
    }
    let t = Tensor::new(rows, &[n, l])?;
    Ok(vec![t; heads])
}
