//! Instances as decoder conditions: boxes, coarse encodings with dropped
//! information, fake sampling and dataset statistics.

use std::f64::consts::TAU;

use log::warn;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::Normal;

use crate::nn::{one_hot, sine_pos_embed, Mlp3};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Coordinates live on a 2^-20 grid so box arithmetic (`l + r == w`) is
/// exact in floating point.
const GRID: f64 = (1u64 << 20) as f64;

fn snap(v: f64) -> f64 {
    (v * GRID).round() / GRID
}

/// One annotation. The box is stored by its normalised corners.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub category: usize,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    image_px: f64,
    pub is_real: bool,
}

impl Instance {
    /// Box from normalised centre and size, clipped to the unit square.
    pub fn from_center(
        category: usize,
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        image_px: usize,
        is_real: bool,
    ) -> Result<Self> {
        Self::from_corners(category, cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, image_px, is_real)
    }

    pub fn from_corners(
        category: usize,
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        image_px: usize,
        is_real: bool,
    ) -> Result<Self> {
        let c = |v: f64| snap(v.clamp(0.0, 1.0));
        let (x1, y1, x2, y2) = (c(x1), c(y1), c(x2), c(y2));
        if !(x2 > x1 && y2 > y1) || image_px == 0 {
            return Err(Error::Data(format!("degenerate box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(Self { category, x1, y1, x2, y2, image_px: image_px as f64, is_real })
    }

    /// Integer pixel rectangle `[x0, x1) × [y0, y1)`.
    pub fn from_pixels(category: usize, px: [usize; 4], image_px: usize, is_real: bool) -> Result<Self> {
        let s = image_px as f64;
        Self::from_corners(
            category,
            px[0] as f64 / s,
            px[1] as f64 / s,
            px[2] as f64 / s,
            px[3] as f64 / s,
            image_px,
            is_real,
        )
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn size(&self) -> (f64, f64) {
        (self.x2 - self.x1, self.y2 - self.y1)
    }

    pub fn pixel_size(&self) -> (f64, f64) {
        let (w, h) = self.size();
        (w * self.image_px, h * self.image_px)
    }

    pub fn image_px(&self) -> usize {
        self.image_px as usize
    }

    pub fn area(&self) -> f64 {
        let (w, h) = self.size();
        w * h
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn iou(&self, other: &Instance) -> f64 {
        iou(&self.corners(), &other.corners())
    }
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Jittered centre `x + φ_x·w`, `y + φ_y·h` with `φ ~ U[-a, a]`, clipped
/// to the image. Offsets are rounded toward zero onto the coordinate grid.
pub fn jitter_center<R: Rng + ?Sized>(inst: &Instance, a: f64, rng: &mut R) -> (f64, f64) {
    let (cx, cy) = inst.center();
    if a <= 0.0 {
        return (cx, cy);
    }
    let (w, h) = inst.size();
    let fx = rng.gen_range(-a..=a);
    let fy = rng.gen_range(-a..=a);
    let off = |v: f64| (v * GRID).trunc() / GRID;
    ((cx + off(fx * w)).clamp(0.0, 1.0), (cy + off(fy * h)).clamp(0.0, 1.0))
}

/// `(⌊log₂ w⌋, ⌊log₂ h⌋)` of a pixel size; sizes under one pixel count as one.
pub fn scale_indicator(w_px: f64, h_px: f64) -> (u32, u32) {
    let bin = |v: f64| {
        if v < 1.0 || v.is_nan() {
            warn!("sub-pixel box size {v} clamped to 1");
            return 0;
        }
        (v.floor() as u64).ilog2()
    };
    (bin(w_px), bin(h_px))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodingConfig {
    pub classes: usize,
    /// Width of each of the x and y centre encodings.
    pub d_pe: usize,
    /// Width of each of the two scale-indicator encodings.
    pub d_s: usize,
    pub temperature: f64,
    pub jitter: f64,
    /// Jitter centres (the indicators are always coarse).
    pub drop_info: bool,
    /// Off zeroes the scale block.
    pub use_scale: bool,
    pub image_px: usize,
}

impl EncodingConfig {
    pub fn width(&self) -> usize {
        self.classes + 2 * self.d_pe + 2 * self.d_s
    }

    fn max_level(&self) -> f64 {
        (self.image_px.max(2) as u64).ilog2() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub vector: Vec<f64>,
    /// Centre actually written into the encoding.
    pub center: (f64, f64),
}

/// Layout: `one_hot(c) ∥ sine(x') ∥ sine(y') ∥ sine(sx) ∥ sine(sy)`, with
/// coordinates scaled by 2π and indicators by 2π / max level.
pub fn encode_instance<R: Rng + ?Sized>(inst: &Instance, cfg: &EncodingConfig, rng: &mut R) -> Result<Encoded> {
    let center = if cfg.drop_info { jitter_center(inst, cfg.jitter, rng) } else { inst.center() };
    let (w_px, h_px) = inst.pixel_size();
    let (sx, sy) = scale_indicator(w_px, h_px);
    let mut v = one_hot(inst.category, cfg.classes)?;
    v.extend(sine_pos_embed(TAU * center.0, cfg.d_pe, cfg.temperature)?);
    v.extend(sine_pos_embed(TAU * center.1, cfg.d_pe, cfg.temperature)?);
    if cfg.use_scale {
        let ml = cfg.max_level();
        v.extend(sine_pos_embed(TAU * sx as f64 / ml, cfg.d_s, cfg.temperature)?);
        v.extend(sine_pos_embed(TAU * sy as f64 / ml, cfg.d_s, cfg.temperature)?);
    } else {
        v.extend(std::iter::repeat_n(0.0, 2 * cfg.d_s));
    }
    Ok(Encoded { vector: v, center })
}

/// Encodes a batch into an `[N×E]` tensor plus the centres used.
pub fn encode_batch<R: Rng + ?Sized>(
    insts: &[Instance],
    cfg: &EncodingConfig,
    rng: &mut R,
) -> Result<(Tensor, Vec<(f64, f64)>)> {
    let width = cfg.width();
    let mut data = Vec::with_capacity(insts.len() * width);
    let mut centers = Vec::with_capacity(insts.len());
    for inst in insts {
        let e = encode_instance(inst, cfg, rng)?;
        data.extend(e.vector);
        centers.push(e.center);
    }
    Ok((Tensor::new(data, &[insts.len(), width])?, centers))
}

/// `q_i = F_q(E(y_i))` for every row of `encodings`.
pub fn make_query(encodings: &Tensor, f_q: &Mlp3) -> Result<Tensor> {
    f_q.forward(encodings)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub class_freq: Vec<usize>,
    /// Per class `[width, height]` mean in pixels.
    pub size_mean: Vec<[f64; 2]>,
    /// Per class `[width, height]` unbiased std, floored at one pixel.
    pub size_std: Vec<[f64; 2]>,
}

pub const STD_FLOOR_PX: f64 = 1.0;

impl DatasetStats {
    pub fn classes(&self) -> usize {
        self.class_freq.len()
    }

    pub fn total(&self) -> usize {
        self.class_freq.iter().sum()
    }
}

pub fn compute_stats<'a>(instances: impl IntoIterator<Item = &'a Instance>, classes: usize) -> Result<DatasetStats> {
    let mut sizes: Vec<Vec<(f64, f64)>> = vec![Vec::new(); classes];
    for inst in instances.into_iter().filter(|i| i.is_real) {
        let slot = sizes.get_mut(inst.category).ok_or(Error::Index { index: inst.category, count: classes })?;
        slot.push(inst.pixel_size());
    }
    if sizes.iter().all(Vec::is_empty) {
        return Err(Error::Data("cannot compute statistics of an empty dataset".into()));
    }
    let mut stats = DatasetStats {
        class_freq: Vec::with_capacity(classes),
        size_mean: Vec::with_capacity(classes),
        size_std: Vec::with_capacity(classes),
    };
    for s in &sizes {
        let n = s.len() as f64;
        stats.class_freq.push(s.len());
        if s.is_empty() {
            stats.size_mean.push([STD_FLOOR_PX; 2]);
            stats.size_std.push([STD_FLOOR_PX; 2]);
            continue;
        }
        let mw = s.iter().map(|p| p.0).sum::<f64>() / n;
        let mh = s.iter().map(|p| p.1).sum::<f64>() / n;
        let (sw, sh) = if s.len() > 1 {
            let vw = s.iter().map(|p| (p.0 - mw).powi(2)).sum::<f64>() / (n - 1.0);
            let vh = s.iter().map(|p| (p.1 - mh).powi(2)).sum::<f64>() / (n - 1.0);
            (vw.sqrt(), vh.sqrt())
        } else {
            (0.0, 0.0)
        };
        stats.size_mean.push([mw, mh]);
        stats.size_std.push([sw.max(STD_FLOOR_PX), sh.max(STD_FLOOR_PX)]);
    }
    Ok(stats)
}

/// A fake box as drawn, before clipping to the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FakeDraw {
    pub category: usize,
    pub w_px: f64,
    pub h_px: f64,
    pub cx: f64,
    pub cy: f64,
}

pub fn draw_fakes<R: Rng + ?Sized>(stats: &DatasetStats, count: usize, rng: &mut R) -> Result<Vec<FakeDraw>> {
    if stats.total() == 0 {
        return Err(Error::Data("fake sampling needs non-empty statistics".into()));
    }
    let cats = WeightedIndex::new(&stats.class_freq).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let c = cats.sample(rng);
        let [mw, mh] = stats.size_mean[c];
        let [sw, sh] = stats.size_std[c];
        let w = Normal::new(mw, sw).map_err(|e| Error::Data(e.to_string()))?.sample(rng);
        let h = Normal::new(mh, sh).map_err(|e| Error::Data(e.to_string()))?.sample(rng);
        out.push(FakeDraw {
            category: c,
            w_px: w.max(1.0),
            h_px: h.max(1.0),
            cx: rng.gen::<f64>(),
            cy: rng.gen::<f64>(),
        });
    }
    Ok(out)
}

/// `ratio · n_real` fake instances, clipped to the image.
pub fn sample_fakes<R: Rng + ?Sized>(
    stats: &DatasetStats,
    n_real: usize,
    ratio: usize,
    image_px: usize,
    rng: &mut R,
) -> Result<Vec<Instance>> {
    let s = image_px as f64;
    draw_fakes(stats, n_real * ratio, rng)?
        .into_iter()
        .map(|d| {
            let mut inst = Instance::from_center(d.category, d.cx, d.cy, d.w_px / s, d.h_px / s, image_px, false);
            if inst.is_err() {
                // A centre on the image border can clip a box to nothing.
                let (cx, cy) = (d.cx.clamp(0.5 / s, 1.0 - 0.5 / s), d.cy.clamp(0.5 / s, 1.0 - 0.5 / s));
                inst = Instance::from_center(d.category, cx, cy, d.w_px / s, d.h_px / s, image_px, false);
            }
            inst
        })
        .collect()
}

/// Reals followed by their fakes.
pub fn condition_set<R: Rng + ?Sized>(
    reals: &[Instance],
    stats: &DatasetStats,
    ratio: usize,
    image_px: usize,
    rng: &mut R,
) -> Result<Vec<Instance>> {
    let mut out = reals.to_vec();
    out.extend(sample_fakes(stats, reals.len(), ratio, image_px, rng)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{GroupName, ParamGroup};
    use crate::tensor::{finite_diff_check, GradCheckOptions};
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn enc_cfg() -> EncodingConfig {
        EncodingConfig {
            classes: 3,
            d_pe: 8,
            d_s: 4,
            temperature: 10_000.0,
            jitter: 0.3,
            drop_info: true,
            use_scale: true,
            image_px: 64,
        }
    }

    fn boxed(c: usize, px: [usize; 4]) -> Instance {
        Instance::from_pixels(c, px, 64, true).unwrap()
    }

    #[test]
    fn zero_jitter_is_identity() {
        let inst = boxed(0, [10, 12, 30, 40]);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(jitter_center(&inst, 0.0, &mut r), inst.center());
    }

    #[test]
    fn jitter_stays_within_bound_and_is_centered() {
        let inst = Instance::from_center(1, 0.5, 0.5, 0.5, 0.25, 64, true).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let (x, y) = jitter_center(&inst, 0.3, &mut r);
            let dx = x - 0.5;
            assert!(dx.abs() <= 0.3 * 0.5);
            assert!((y - 0.5).abs() <= 0.3 * 0.25);
            sum += dx;
            sum2 += dx * dx;
        }
        let mean = sum / n as f64;
        // U[-0.15, 0.15] has std 0.15/√3.
        let sigma = 0.15 / 3f64.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}");
        let var = sum2 / n as f64 - mean * mean;
        assert!((var - 0.15f64.powi(2) / 3.0).abs() < 1e-4);
    }

    #[test]
    fn scale_indicator_examples() {
        assert_eq!(scale_indicator(8.0, 32.0), (3, 5));
        assert_eq!(scale_indicator(10.0, 10.0), (3, 3));
        assert_eq!(scale_indicator(1.0, 1.0), (0, 0));
        assert_eq!(scale_indicator(0.2, 1.9), (0, 0));
    }

    #[test]
    fn encoding_layout() {
        let cfg = EncodingConfig { drop_info: false, ..enc_cfg() };
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let a = encode_instance(&boxed(0, [8, 8, 24, 40]), &cfg, &mut r).unwrap();
        let b = encode_instance(&boxed(2, [8, 8, 24, 40]), &cfg, &mut r).unwrap();
        assert_eq!(a.vector.len(), cfg.width());
        assert_eq!(a.vector.len(), 3 + 16 + 8);
        for i in 0..a.vector.len() {
            if i < 3 {
                continue;
            }
            assert_eq!(a.vector[i], b.vector[i]);
        }
        assert_eq!(&a.vector[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&b.vector[..3], &[0.0, 0.0, 1.0]);
        // Deterministic without dropping.
        let again = encode_instance(&boxed(0, [8, 8, 24, 40]), &cfg, &mut r).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn dropping_changes_only_position_blocks() {
        let cfg = enc_cfg();
        let inst = boxed(1, [4, 20, 36, 44]);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let a = encode_instance(&inst, &cfg, &mut r).unwrap();
        let b = encode_instance(&inst, &cfg, &mut r).unwrap();
        assert_ne!(a.vector, b.vector);
        let pos = cfg.classes..cfg.classes + 2 * cfg.d_pe;
        for i in 0..cfg.width() {
            if !pos.contains(&i) {
                assert_eq!(a.vector[i], b.vector[i], "entry {i}");
            }
        }
    }

    #[test]
    fn scale_block_zeroed_when_disabled() {
        let cfg = EncodingConfig { use_scale: false, ..enc_cfg() };
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let e = encode_instance(&boxed(0, [0, 0, 16, 16]), &cfg, &mut r).unwrap();
        assert!(e.vector[cfg.width() - 2 * cfg.d_s..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn query_rows_are_independent() {
        let mut g = ParamGroup::new(GroupName::Decoder);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let cfg = enc_cfg();
        let f_q = Mlp3::new(&mut g, "f_q", cfg.width(), 16, 16, &mut r).unwrap();
        let insts = [boxed(0, [0, 0, 10, 10]), boxed(1, [20, 20, 50, 40]), boxed(2, [5, 30, 25, 60])];
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let (enc, _) = encode_batch(&insts, &cfg, &mut r1).unwrap();
        let q = make_query(&enc, &f_q).unwrap().to_vec();
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let (enc_first, _) = encode_batch(&insts[..1], &cfg, &mut r2).unwrap();
        let q1 = make_query(&enc_first, &f_q).unwrap().to_vec();
        assert_eq!(&q[..16], &q1[..]);

        for l in &f_q.layers {
            l.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        f_q.layers[2].bias.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let q = make_query(&enc, &f_q).unwrap().to_vec();
        for row in q.chunks(16) {
            assert_eq!(row, (0..16).map(|i| i as f64).collect::<Vec<_>>().as_slice());
        }
    }

    #[test]
    fn query_gradcheck() {
        let mut g = ParamGroup::new(GroupName::Decoder);
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let cfg = enc_cfg();
        let f_q = Mlp3::new(&mut g, "f_q", cfg.width(), 8, 8, &mut r).unwrap();
        for l in &f_q.layers {
            l.bias.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.1..0.1));
        }
        let insts = [boxed(0, [0, 0, 10, 10]), boxed(2, [20, 20, 50, 40])];
        let (enc, _) = encode_batch(&insts, &cfg, &mut r).unwrap();
        let report = finite_diff_check(
            || -> Result<Tensor> { Ok(make_query(&enc, &f_q)?.square().sum()) },
            &g.named(),
            &GradCheckOptions { tol: 1e-5, ..Default::default() },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    fn known_stats() -> DatasetStats {
        DatasetStats {
            class_freq: vec![1, 2, 1],
            size_mean: vec![[12.0, 10.0], [20.0, 18.0], [28.0, 30.0]],
            size_std: vec![[3.0, 2.0], [4.0, 4.0], [5.0, 6.0]],
        }
    }

    #[test]
    fn fake_counts_and_flags() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let fakes = sample_fakes(&known_stats(), 2, 5, 64, &mut r).unwrap();
        assert_eq!(fakes.len(), 10);
        assert!(fakes.iter().all(|f| !f.is_real));
        let reals = [boxed(0, [0, 0, 8, 8]), boxed(1, [8, 8, 30, 30]), boxed(2, [1, 2, 3, 4])];
        let set = condition_set(&reals, &known_stats(), 5, 64, &mut r).unwrap();
        assert_eq!(set.len(), 18);
        assert_eq!(set.iter().filter(|i| i.is_real).count(), 3);
        for f in &set {
            let [x1, y1, x2, y2] = f.corners();
            assert!(0.0 <= x1 && x2 <= 1.0 && 0.0 <= y1 && y2 <= 1.0 && x1 < x2 && y1 < y2);
        }
    }

    #[test]
    fn single_class_stats_give_single_class_fakes() {
        let stats = DatasetStats {
            class_freq: vec![0, 7, 0],
            size_mean: vec![[1.0; 2], [16.0; 2], [1.0; 2]],
            size_std: vec![[1.0; 2], [2.0; 2], [1.0; 2]],
        };
        let mut r = ChaCha8Rng::seed_from_u64(10);
        assert!(sample_fakes(&stats, 20, 5, 64, &mut r).unwrap().iter().all(|f| f.category == 1));
        let empty = DatasetStats { class_freq: vec![0, 0], ..stats };
        assert!(sample_fakes(&empty, 1, 5, 64, &mut r).is_err());
    }

    #[test]
    fn fake_sizes_follow_statistics() {
        let stats = known_stats();
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let draws = draw_fakes(&stats, 10_000, &mut r).unwrap();
        for c in 0..3 {
            let ws: Vec<f64> = draws.iter().filter(|d| d.category == c).map(|d| d.w_px).collect();
            let n = ws.len() as f64;
            assert!((n / 10_000.0 - stats.class_freq[c] as f64 / 4.0).abs() < 0.02);
            let mean = ws.iter().sum::<f64>() / n;
            let std = (ws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!((mean / stats.size_mean[c][0] - 1.0).abs() < 0.05, "class {c} mean {mean}");
            assert!((std / stats.size_std[c][0] - 1.0).abs() < 0.05, "class {c} std {std}");
        }
    }

    #[test]
    fn stats_examples() {
        let one = [boxed(0, [0, 0, 10, 4])];
        let s = compute_stats(&one, 2).unwrap();
        assert_eq!(s.size_mean[0], [10.0, 4.0]);
        assert_eq!(s.size_std[0], [1.0, 1.0]);
        assert_eq!(s.class_freq, vec![1, 0]);

        let two = [boxed(1, [0, 0, 8, 8]), boxed(1, [0, 0, 12, 8])];
        let s = compute_stats(&two, 2).unwrap();
        assert_eq!(s.size_mean[1][0], 10.0);
        assert!((s.size_std[1][0] - 8f64.sqrt()).abs() < 1e-12);

        assert!(compute_stats(&[], 2).is_err());
        assert!(matches!(compute_stats(&[boxed(3, [0, 0, 2, 2])], 2), Err(Error::Index { .. })));
    }

    proptest! {
        #[test]
        fn jitter_bounded(x1 in 0usize..60, y1 in 0usize..60, w in 1usize..40, h in 1usize..40, seed in 0u64..1000) {
            let inst = Instance::from_pixels(0, [x1, y1, (x1 + w).min(64), (y1 + h).min(64)], 64, true).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = jitter_center(&inst, 0.3, &mut r);
            let (cx, cy) = inst.center();
            let (bw, bh) = inst.size();
            prop_assert!((x - cx).abs() <= 0.3 * bw);
            prop_assert!((y - cy).abs() <= 0.3 * bh);
            prop_assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
        }

        #[test]
        fn indicator_constant_within_bin(k in 0u32..10, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let lo = 2f64.powi(k as i32);
            let (u, v) = (lo * (1.0 + a * 0.999), lo * (1.0 + b * 0.999));
            prop_assert_eq!(scale_indicator(u, v), (k, k));
        }
    }
}
