//! Toy dense detector with a feature pyramid, pyramid flattening, and the
//! detection loss.

use std::f64::consts::TAU;

use log::warn;
use rand::Rng;

use crate::instance::Instance;
use crate::nn::{sine_pos_embed, Conv2d};
use crate::params::{GroupName, ParamGroup};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Stride of the stem convolution.
pub const STEM_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub image_px: usize,
    pub classes: usize,
    /// Output strides, strictly increasing powers of two ≥ the stem stride.
    pub strides: Vec<usize>,
    /// Channel widths: stem first, then one per stride-2 stage.
    pub widths: Vec<usize>,
    pub dim: usize,
    pub top_down: bool,
    /// Initial class probability encoded in the logit bias.
    pub prior: f64,
}

impl DetectorConfig {
    pub fn stages(&self) -> usize {
        let max = *self.strides.last().unwrap_or(&STEM_STRIDE);
        (max / STEM_STRIDE).max(1).ilog2() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() {
            return Err(Error::Config("detector needs at least one stride".into()));
        }
        for w in self.strides.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config(format!("strides must increase: {:?}", self.strides)));
            }
        }
        for &s in &self.strides {
            if s < STEM_STRIDE || !s.is_power_of_two() {
                return Err(Error::Config(format!("stride {s} must be a power of two ≥ {STEM_STRIDE}")));
            }
        }
        if self.widths.len() != self.stages() + 1 {
            return Err(Error::Config(format!(
                "{} backbone widths given, {} needed for strides {:?}",
                self.widths.len(),
                self.stages() + 1,
                self.strides
            )));
        }
        check_divisible(self.image_px, self.image_px, &self.strides)?;
        if self.classes == 0 || self.dim < 2 {
            return Err(Error::Config("need at least one class and width ≥ 2".into()));
        }
        Ok(())
    }

    /// Cells per level for a square image of the configured size.
    pub fn level_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.strides.iter().map(|&s| (s, self.image_px / s, self.image_px / s)).collect()
    }

    pub fn cells(&self) -> usize {
        self.level_shapes().iter().map(|(_, h, w)| h * w).sum()
    }
}

fn check_divisible(h: usize, w: usize, strides: &[usize]) -> Result<()> {
    let max = *strides.last().unwrap();
    if h == 0 || w == 0 || !h.is_multiple_of(max) || !w.is_multiple_of(max) {
        return Err(Error::Config(format!("image {h}×{w} not divisible by stride {max}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Level {
    pub stride: usize,
    /// `[B×D×H×W]`.
    pub feat: Tensor,
}

#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Level>,
}

impl FeaturePyramid {
    pub fn batch(&self) -> usize {
        self.levels[0].feat.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.levels[0].feat.shape()[1]
    }

    pub fn detach(&self) -> FeaturePyramid {
        FeaturePyramid {
            levels: self.levels.iter().map(|l| Level { stride: l.stride, feat: l.feat.detach() }).collect(),
        }
    }

    /// Rows `[lo, lo+n)` of the batch.
    pub fn narrow_batch(&self, lo: usize, n: usize) -> Result<FeaturePyramid> {
        let levels = self
            .levels
            .iter()
            .map(|l| Ok(Level { stride: l.stride, feat: l.feat.narrow(0, lo, n)? }))
            .collect::<Result<_>>()?;
        Ok(FeaturePyramid { levels })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellIndex {
    pub level: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Clone, Debug)]
pub struct FlatPyramid {
    /// `[B×L×D]`.
    pub a: Tensor,
    /// `[L×(d_pe+2)]`, identical for every image.
    pub p_raw: Tensor,
    pub index: Vec<CellIndex>,
    /// `(stride, H, W)` per level.
    pub shapes: Vec<(usize, usize, usize)>,
}

impl FlatPyramid {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.a.shape()[2]
    }

    /// `A` for a single image, `[L×D]`.
    pub fn image(&self, b: usize) -> Result<Tensor> {
        Ok(self.a.narrow(0, b, 1)?.reshape(&[self.len(), self.dim()])?)
    }

    /// Normalised cell centre of row `l`.
    pub fn cell_center(&self, l: usize) -> (f64, f64) {
        let c = self.index[l];
        let (_, h, w) = self.shapes[c.level];
        ((c.x as f64 + 0.5) / w as f64, (c.y as f64 + 0.5) / h as f64)
    }

    pub fn unflatten(&self) -> Result<FeaturePyramid> {
        let (b, d) = (self.batch(), self.dim());
        let mut off = 0;
        let mut levels = Vec::with_capacity(self.shapes.len());
        for &(stride, h, w) in &self.shapes {
            let feat = self.a.narrow(1, off, h * w)?.reshape(&[b, h, w, d])?.permute(&[0, 3, 1, 2])?;
            levels.push(Level { stride, feat });
            off += h * w;
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Fixed positional encoding of every cell: `sine(x) ∥ sine(y) ∥ tag(level)`,
/// each coordinate taking half of `d_pe`.
pub fn positional_rows(shapes: &[(usize, usize, usize)], d_pe: usize, temperature: f64) -> Result<Vec<f64>> {
    if !d_pe.is_multiple_of(4) {
        return Err(Error::Config(format!("d_pe must be a multiple of 4, got {d_pe}")));
    }
    let n_levels = shapes.len();
    let mut rows = Vec::new();
    for (li, &(_, h, w)) in shapes.iter().enumerate() {
        let tag_u = if n_levels > 1 { li as f64 / (n_levels - 1) as f64 } else { 0.0 };
        let tag = sine_pos_embed(tag_u, 2, temperature)?;
        for y in 0..h {
            for x in 0..w {
                rows.extend(sine_pos_embed(TAU * (x as f64 + 0.5) / w as f64, d_pe / 2, temperature)?);
                rows.extend(sine_pos_embed(TAU * (y as f64 + 0.5) / h as f64, d_pe / 2, temperature)?);
                rows.extend_from_slice(&tag);
            }
        }
    }
    Ok(rows)
}

/// Concatenates the levels into `A` (level-major, then row-major).
pub fn flatten_pyramid(p: &FeaturePyramid, d_pe: usize, temperature: f64) -> Result<FlatPyramid> {
    let (b, d) = (p.batch(), p.dim());
    let mut parts = Vec::with_capacity(p.levels.len());
    let mut index = Vec::new();
    let mut shapes = Vec::new();
    for (li, lvl) in p.levels.iter().enumerate() {
        let (h, w) = (lvl.feat.shape()[2], lvl.feat.shape()[3]);
        parts.push(lvl.feat.permute(&[0, 2, 3, 1])?.reshape(&[b, h * w, d])?);
        for y in 0..h {
            for x in 0..w {
                index.push(CellIndex { level: li, y, x });
            }
        }
        shapes.push((lvl.stride, h, w));
    }
    let a = if parts.len() == 1 { parts.pop().unwrap() } else { Tensor::concat(&parts, 1)? };
    let l = index.len();
    let p_raw = Tensor::new(positional_rows(&shapes, d_pe, temperature)?, &[l, d_pe + 2])?;
    Ok(FlatPyramid { a, p_raw, index, shapes })
}

/// Dense outputs over all cells of all levels, `L` in flattening order.
#[derive(Clone, Debug)]
pub struct DensePredictions {
    /// `[B×L×C]`.
    pub logits: Tensor,
    /// `[B×L×4]` distances in units of the cell's stride (`exp` of the raw
    /// output, so always positive).
    pub ltrb_units: Tensor,
    /// Normalised `(cx, cy, stride/image)` per cell.
    pub cells: Vec<(f64, f64, f64)>,
}

impl DensePredictions {
    pub fn batch(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn cells_len(&self) -> usize {
        self.cells.len()
    }

    pub fn classes(&self) -> usize {
        self.logits.shape()[2]
    }

    /// Normalised `[l,t,r,b]` of image `b`, cell `l`.
    pub fn ltrb(&self, b: usize, l: usize) -> [f64; 4] {
        let s = self.cells[l].2;
        let d = self.ltrb_units.data();
        let base = (b * self.cells.len() + l) * 4;
        [d[base] * s, d[base + 1] * s, d[base + 2] * s, d[base + 3] * s]
    }
}

#[derive(Clone, Debug)]
pub struct ToyDetector {
    pub cfg: DetectorConfig,
    pub group: ParamGroup,
    pub stem: Conv2d,
    pub stages: Vec<Conv2d>,
    pub laterals: Vec<Conv2d>,
    pub head_conv: Conv2d,
    pub head_out: Conv2d,
}

impl ToyDetector {
    pub fn new<R: Rng + ?Sized>(cfg: DetectorConfig, group: GroupName, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut g = ParamGroup::new(group);
        let stem = Conv2d::new(&mut g, "backbone.stem", 3, cfg.widths[0], STEM_STRIDE, STEM_STRIDE, 0, rng)?;
        let mut stages = Vec::new();
        for i in 0..cfg.stages() {
            stages.push(Conv2d::new(
                &mut g,
                &format!("backbone.stage{i}"),
                cfg.widths[i],
                cfg.widths[i + 1],
                3,
                2,
                1,
                rng,
            )?);
        }
        let mut laterals = Vec::new();
        for (k, &s) in cfg.strides.iter().enumerate() {
            let stage = (s / STEM_STRIDE).ilog2() as usize;
            laterals.push(Conv2d::new(&mut g, &format!("lateral.{k}"), cfg.widths[stage], cfg.dim, 1, 1, 0, rng)?);
        }
        let head_conv = Conv2d::new(&mut g, "head.conv", cfg.dim, cfg.dim, 3, 1, 1, rng)?;
        let head_out = Conv2d::new(&mut g, "head.out", cfg.dim, cfg.classes + 4, 1, 1, 0, rng)?;
        {
            let mut b = head_out.bias.data_mut();
            let prior_logit = -((1.0 - cfg.prior) / cfg.prior).ln();
            b[..cfg.classes].iter_mut().for_each(|v| *v = prior_logit);
        }
        Ok(Self { cfg, group: g, stem, stages, laterals, head_conv, head_out })
    }

    /// Images `[B×3×H×W]` to the configured pyramid.
    pub fn backbone_forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Config(format!("expected [B×3×H×W] images, got {s:?}")));
        }
        check_divisible(s[2], s[3], &self.cfg.strides)?;
        let mut maps = vec![self.stem.forward(images)?.relu()];
        for st in &self.stages {
            let x = st.forward(maps.last().unwrap())?.relu();
            maps.push(x);
        }
        let mut lat: Vec<Tensor> = self
            .cfg
            .strides
            .iter()
            .zip(&self.laterals)
            .map(|(&st, conv)| conv.forward(&maps[(st / STEM_STRIDE).ilog2() as usize]))
            .collect::<Result<_>>()?;
        if self.cfg.top_down {
            for k in (0..lat.len().saturating_sub(1)).rev() {
                let mut up = lat[k + 1].clone();
                for _ in 0..(self.cfg.strides[k + 1] / self.cfg.strides[k]).ilog2() {
                    up = up.upsample2x()?;
                }
                lat[k] = lat[k].add(&up)?;
            }
        }
        Ok(FeaturePyramid {
            levels: self.cfg.strides.iter().zip(lat).map(|(&stride, feat)| Level { stride, feat }).collect(),
        })
    }

    /// Shared head over every level.
    pub fn head_forward(&self, p: &FeaturePyramid) -> Result<DensePredictions> {
        let c = self.cfg.classes;
        let b = p.batch();
        let mut outs = Vec::with_capacity(p.levels.len());
        let mut cells = Vec::new();
        for lvl in &p.levels {
            let (h, w) = (lvl.feat.shape()[2], lvl.feat.shape()[3]);
            let o = self.head_out.forward(&self.head_conv.forward(&lvl.feat)?.relu())?;
            outs.push(o.permute(&[0, 2, 3, 1])?.reshape(&[b, h * w, c + 4])?);
            let img_w = (w * lvl.stride) as f64;
            let img_h = (h * lvl.stride) as f64;
            for y in 0..h {
                for x in 0..w {
                    cells.push((
                        (x as f64 + 0.5) * lvl.stride as f64 / img_w,
                        (y as f64 + 0.5) * lvl.stride as f64 / img_h,
                        lvl.stride as f64 / img_w,
                    ));
                }
            }
        }
        let all = if outs.len() == 1 { outs.pop().unwrap() } else { Tensor::concat(&outs, 1)? };
        Ok(DensePredictions { logits: all.narrow(2, 0, c)?, ltrb_units: all.narrow(2, c, 4)?.exp(), cells })
    }

    pub fn forward(&self, images: &Tensor) -> Result<(FeaturePyramid, DensePredictions)> {
        let p = self.backbone_forward(images)?;
        let d = self.head_forward(&p)?;
        Ok((p, d))
    }
}

/// Per-cell assignment: the smallest-area box whose extent contains the
/// cell centre.
pub fn assign_cells<'a>(cells: &[(f64, f64, f64)], instances: &'a [Instance]) -> Vec<Option<&'a Instance>> {
    cells
        .iter()
        .map(|&(cx, cy, _)| {
            instances
                .iter()
                .filter(|i| i.contains(cx, cy))
                .min_by(|a, b| a.area().total_cmp(&b.area()).then(a.category.cmp(&b.category)))
        })
        .collect()
}

/// BCE on logits summed over cells and classes plus L1 on stride-unit
/// ltrb of positive cells, both divided by `max(positives, 1)`.
pub fn det_loss(preds: &DensePredictions, targets: &[Vec<Instance>]) -> Result<Tensor> {
    let (b, l, c) = (preds.batch(), preds.cells_len(), preds.classes());
    if targets.len() != b {
        return Err(Error::Data(format!("{} target lists for batch of {b}", targets.len())));
    }
    let mut cls_t = vec![0.0; b * l * c];
    let mut box_t = vec![0.0; b * l * 4];
    let mut mask = vec![0.0; b * l * 4];
    let mut npos = 0usize;
    for (bi, insts) in targets.iter().enumerate() {
        for (li, hit) in assign_cells(&preds.cells, insts).into_iter().enumerate() {
            let Some(inst) = hit else { continue };
            if inst.category >= c {
                return Err(Error::Index { index: inst.category, count: c });
            }
            npos += 1;
            cls_t[(bi * l + li) * c + inst.category] = 1.0;
            let (cx, cy, s) = preds.cells[li];
            let [x1, y1, x2, y2] = inst.corners();
            let t = [cx - x1, cy - y1, x2 - cx, y2 - cy];
            for k in 0..4 {
                box_t[(bi * l + li) * 4 + k] = t[k] / s;
                mask[(bi * l + li) * 4 + k] = 1.0;
            }
        }
    }
    let norm = 1.0 / npos.max(1) as f64;
    let cls = preds.logits.bce_with_logits(&cls_t)?.sum();
    if npos == 0 {
        return Ok(cls.scale(norm));
    }
    let shape = preds.ltrb_units.shape().to_vec();
    let reg = preds.ltrb_units.sub(&Tensor::new(box_t, &shape)?)?.abs().mul(&Tensor::new(mask, &shape)?)?.sum();
    Ok(cls.add(&reg)?.scale(norm))
}

/// Copies every non-backbone parameter whose name and shape match from
/// `teacher` into `student`. Returns the number of tensors copied.
pub fn inherit_parameters(student: &ToyDetector, teacher: &ToyDetector) -> usize {
    let mut copied = 0;
    for (name, t) in student.group.iter() {
        if name.starts_with("backbone.") {
            continue;
        }
        let Some(src) = teacher.group.get(name) else { continue };
        if src.shape() != t.shape() {
            continue;
        }
        t.data_mut().copy_from_slice(&src.data());
        copied += 1;
    }
    if copied == 0 {
        warn!("inherit: no parameter of the teacher matches the student");
    }
    copied
}
