//! Synthetic scenes: filled rectangles on a gray background.

use icd_core::instance::{compute_stats, DatasetStats, Instance};
use icd_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ExperimentConfig;
use crate::rng::derive_seed;
use crate::Result;
use rand::SeedableRng;

pub const BACKGROUND: f64 = 0.5;
pub const MIN_SIDE: f64 = 4.0;
pub const MAX_SIDE: f64 = 56.0;

/// RGB fill per class.
pub const CLASS_COLORS: [[f64; 3]; 6] =
    [[0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.2, 0.9], [0.9, 0.9, 0.2], [0.9, 0.2, 0.9], [0.2, 0.9, 0.9]];

/// Side length (mean, std) in pixels per class.
pub fn class_size_params(c: usize) -> (f64, f64) {
    (12.0 + 8.0 * c as f64, 3.0 + c as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3×H×W]`, channel-major.
    pub image: Vec<f64>,
    pub size: usize,
    pub instances: Vec<Instance>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneParams {
    pub image_px: usize,
    pub classes: usize,
    pub max_objects: usize,
    pub noise: f64,
}

impl SceneParams {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self { image_px: cfg.image_px, classes: cfg.classes, max_objects: cfg.max_objects, noise: cfg.noise }
    }
}

fn draw_side<R: Rng + ?Sized>(c: usize, rng: &mut R) -> usize {
    let (m, s) = class_size_params(c);
    let v: f64 = Normal::new(m, s).expect("positive std").sample(rng);
    v.round().clamp(MIN_SIDE, MAX_SIDE) as usize
}

fn overlap(a: [usize; 4], b: [usize; 4]) -> usize {
    let w = a[2].min(b[2]).saturating_sub(a[0].max(b[0]));
    let h = a[3].min(b[3]).saturating_sub(a[1].max(b[1]));
    w * h
}

const PLACEMENT_TRIES: usize = 20;

pub fn generate_scene(p: &SceneParams, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.image_px;
    let count = rng.gen_range(1..=p.max_objects);
    let mut boxes: Vec<(usize, [usize; 4])> = Vec::with_capacity(count);
    for _ in 0..count {
        let c = rng.gen_range(0..p.classes);
        let w = draw_side(c, &mut rng).min(n);
        let h = draw_side(c, &mut rng).min(n);
        for _ in 0..PLACEMENT_TRIES {
            let x0 = rng.gen_range(0..=n - w);
            let y0 = rng.gen_range(0..=n - h);
            let b = [x0, y0, x0 + w, y0 + h];
            // A new box may not hide more than half of an earlier one.
            let hides = boxes.iter().any(|(_, e)| 2 * overlap(b, *e) > (e[2] - e[0]) * (e[3] - e[1]));
            if !hides {
                boxes.push((c, b));
                break;
            }
        }
    }
    let mut image = vec![BACKGROUND; 3 * n * n];
    for &(c, b) in &boxes {
        let color = CLASS_COLORS[c % CLASS_COLORS.len()];
        for (ch, &v) in color.iter().enumerate() {
            for y in b[1]..b[3] {
                image[ch * n * n + y * n + b[0]..ch * n * n + y * n + b[2]].fill(v);
            }
        }
    }
    if p.noise > 0.0 {
        let noise = Normal::new(0.0, p.noise).expect("positive std");
        image.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let instances =
        boxes.iter().map(|&(c, b)| Instance::from_pixels(c, b, n, true)).collect::<icd_core::Result<Vec<_>>>()?;
    Ok(Scene { image, size: n, instances, seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
    pub stats: DatasetStats,
}

pub fn scene_seed(data_seed: u64, split: Split, index: usize) -> u64 {
    let base = match split {
        Split::Train => data_seed,
        Split::Eval => derive_seed(data_seed, u64::MAX),
    };
    derive_seed(base, index as u64)
}

pub fn generate_split(cfg: &ExperimentConfig, split: Split, count: usize) -> Result<Vec<Scene>> {
    let p = SceneParams::from_config(cfg);
    (0..count).map(|i| generate_scene(&p, scene_seed(cfg.data_seed, split, i))).collect()
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let train = generate_split(cfg, Split::Train, cfg.train_scenes)?;
    let eval = generate_split(cfg, Split::Eval, cfg.eval_scenes)?;
    let stats = compute_stats(train.iter().flat_map(|s| s.instances.iter()), cfg.classes)?;
    Ok(Dataset { train, eval, stats })
}

/// Stacks scenes into `[B×3×H×W]`.
pub fn batch_images<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut b = 0;
    let mut n = 0;
    for s in scenes {
        data.extend_from_slice(&s.image);
        n = s.size;
        b += 1;
    }
    Ok(Tensor::new(data, &[b, 3, n, n])?)
}
