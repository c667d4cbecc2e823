//! Experiment configuration: `key = value` files with `#` comments. Later
//! keys override earlier ones; missing keys keep their defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use icd_core::decoder::DecoderConfig;
use icd_core::instance::EncodingConfig;
use icd_core::losses::{AuxTasks, DistillOptions};
use icd_core::pyramid::DetectorConfig;
use log::info;

use crate::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    Icd,
    None,
    Foreground,
    FineGrained,
    Activation,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 5] = [
        AttentionVariant::Icd,
        AttentionVariant::None,
        AttentionVariant::Foreground,
        AttentionVariant::FineGrained,
        AttentionVariant::Activation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::Icd => "icd",
            AttentionVariant::None => "none",
            AttentionVariant::Foreground => "foreground",
            AttentionVariant::FineGrained => "fine_grained",
            AttentionVariant::Activation => "activation",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionVariant {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown attention variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectorOptimizer {
    AdamW,
    Sgd,
}

impl FromStr for DetectorOptimizer {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(Self::AdamW),
            "sgd" => Ok(Self::Sgd),
            _ => Err(HarnessError::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub image_px: usize,
    pub classes: usize,
    pub strides: Vec<usize>,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub d_pe: usize,
    pub d_s: usize,
    pub pe_temperature: f64,
    pub teacher_widths: Vec<usize>,
    pub student_widths: Vec<usize>,
    pub top_down: bool,

    pub lambda: f64,
    pub fake_ratio: usize,
    pub jitter: f64,
    pub drop_info: bool,
    pub use_scale: bool,
    pub aux_identification: bool,
    pub aux_localization: bool,
    pub detach_masks: bool,
    /// Stop gradients into the shared value projections on the student path.
    pub freeze_student_values: bool,
    pub attention: AttentionVariant,
    pub inherit: bool,

    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub max_objects: usize,
    pub noise: f64,
    pub teacher_iters: usize,
    pub student_iters: usize,
    pub decoder_pretrain_iters: usize,
    pub batch: usize,
    pub warmup: usize,
    pub eval_every: usize,

    pub detector_optimizer: DetectorOptimizer,
    pub lr_teacher: f64,
    pub lr_student: f64,
    pub lr_decoder: f64,
    pub lr_aux: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decoder_weight_decay: f64,

    pub score_threshold: f64,
    pub nms_iou: f64,
    pub match_iou: f64,

    pub seed: u64,
    pub data_seed: u64,
    pub teacher_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            image_px: 64,
            classes: 3,
            strides: vec![8, 16],
            dim: 32,
            heads: 4,
            depth: 1,
            d_pe: 8,
            d_s: 4,
            pe_temperature: 10_000.0,
            teacher_widths: vec![16, 32, 64],
            student_widths: vec![8, 16, 32],
            top_down: true,
            lambda: 1.0,
            fake_ratio: 5,
            jitter: 0.3,
            drop_info: true,
            use_scale: true,
            aux_identification: true,
            aux_localization: true,
            detach_masks: true,
            freeze_student_values: true,
            attention: AttentionVariant::Icd,
            inherit: false,
            train_scenes: 512,
            eval_scenes: 128,
            max_objects: 4,
            noise: 0.05,
            teacher_iters: 2000,
            student_iters: 600,
            decoder_pretrain_iters: 0,
            batch: 8,
            warmup: 100,
            eval_every: 100,
            detector_optimizer: DetectorOptimizer::AdamW,
            lr_teacher: 2e-3,
            lr_student: 2e-3,
            lr_decoder: 1e-3,
            lr_aux: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            decoder_weight_decay: 1e-4,
            score_threshold: 0.5,
            nms_iou: 0.5,
            match_iou: 0.5,
            seed: 0,
            data_seed: 1234,
            teacher_seed: 77,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| HarnessError::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(HarnessError::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Every key with its current value, in file syntax.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_px", self.image_px.to_string()),
            ("classes", self.classes.to_string()),
            ("strides", join(&self.strides)),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("depth", self.depth.to_string()),
            ("d_pe", self.d_pe.to_string()),
            ("d_s", self.d_s.to_string()),
            ("pe_temperature", self.pe_temperature.to_string()),
            ("teacher_widths", join(&self.teacher_widths)),
            ("student_widths", join(&self.student_widths)),
            ("top_down", self.top_down.to_string()),
            ("lambda", self.lambda.to_string()),
            ("fake_ratio", self.fake_ratio.to_string()),
            ("jitter", self.jitter.to_string()),
            ("drop_info", self.drop_info.to_string()),
            ("use_scale", self.use_scale.to_string()),
            ("aux_identification", self.aux_identification.to_string()),
            ("aux_localization", self.aux_localization.to_string()),
            ("detach_masks", self.detach_masks.to_string()),
            ("freeze_student_values", self.freeze_student_values.to_string()),
            ("attention", self.attention.to_string()),
            ("inherit", self.inherit.to_string()),
            ("train_scenes", self.train_scenes.to_string()),
            ("eval_scenes", self.eval_scenes.to_string()),
            ("max_objects", self.max_objects.to_string()),
            ("noise", self.noise.to_string()),
            ("teacher_iters", self.teacher_iters.to_string()),
            ("student_iters", self.student_iters.to_string()),
            ("decoder_pretrain_iters", self.decoder_pretrain_iters.to_string()),
            ("batch", self.batch.to_string()),
            ("warmup", self.warmup.to_string()),
            ("eval_every", self.eval_every.to_string()),
            (
                "detector_optimizer",
                match self.detector_optimizer {
                    DetectorOptimizer::AdamW => "adamw".into(),
                    DetectorOptimizer::Sgd => "sgd".into(),
                },
            ),
            ("lr_teacher", self.lr_teacher.to_string()),
            ("lr_student", self.lr_student.to_string()),
            ("lr_decoder", self.lr_decoder.to_string()),
            ("lr_aux", self.lr_aux.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("decoder_weight_decay", self.decoder_weight_decay.to_string()),
            ("score_threshold", self.score_threshold.to_string()),
            ("nms_iou", self.nms_iou.to_string()),
            ("match_iou", self.match_iou.to_string()),
            ("seed", self.seed.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("teacher_seed", self.teacher_seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "image_px" => self.image_px = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "strides" => self.strides = parse_list(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "d_pe" => self.d_pe = parse(key, v)?,
            "d_s" => self.d_s = parse(key, v)?,
            "pe_temperature" => self.pe_temperature = parse(key, v)?,
            "teacher_widths" => self.teacher_widths = parse_list(key, v)?,
            "student_widths" => self.student_widths = parse_list(key, v)?,
            "top_down" => self.top_down = parse_bool(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "fake_ratio" => self.fake_ratio = parse(key, v)?,
            "jitter" => self.jitter = parse(key, v)?,
            "drop_info" => self.drop_info = parse_bool(key, v)?,
            "use_scale" => self.use_scale = parse_bool(key, v)?,
            "aux_identification" => self.aux_identification = parse_bool(key, v)?,
            "aux_localization" => self.aux_localization = parse_bool(key, v)?,
            "detach_masks" => self.detach_masks = parse_bool(key, v)?,
            "freeze_student_values" => self.freeze_student_values = parse_bool(key, v)?,
            "attention" => self.attention = v.parse()?,
            "inherit" => self.inherit = parse_bool(key, v)?,
            "train_scenes" => self.train_scenes = parse(key, v)?,
            "eval_scenes" => self.eval_scenes = parse(key, v)?,
            "max_objects" => self.max_objects = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "teacher_iters" => self.teacher_iters = parse(key, v)?,
            "student_iters" => self.student_iters = parse(key, v)?,
            "decoder_pretrain_iters" => self.decoder_pretrain_iters = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "detector_optimizer" => self.detector_optimizer = v.parse()?,
            "lr_teacher" => self.lr_teacher = parse(key, v)?,
            "lr_student" => self.lr_student = parse(key, v)?,
            "lr_decoder" => self.lr_decoder = parse(key, v)?,
            "lr_aux" => self.lr_aux = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "decoder_weight_decay" => self.decoder_weight_decay = parse(key, v)?,
            "score_threshold" => self.score_threshold = parse(key, v)?,
            "nms_iou" => self.nms_iou = parse(key, v)?,
            "match_iou" => self.match_iou = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "teacher_seed" => self.teacher_seed = parse(key, v)?,
            _ => return Err(HarnessError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            cfg.set(k, v).map_err(|e| HarnessError::Config(format!("line {}: {e}", lineno + 1)))?;
            seen.insert(k.to_string(), ());
        }
        for (k, v) in cfg.entries() {
            if !seen.contains_key(k) {
                info!("config: `{k}` not set, using default {v}");
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn to_file_string(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher_detector().validate()?;
        self.student_detector().validate()?;
        self.decoder().validate()?;
        if self.batch == 0 || self.train_scenes == 0 || self.eval_scenes == 0 {
            return Err(HarnessError::Config("batch and scene counts must be positive".into()));
        }
        if self.max_objects == 0 {
            return Err(HarnessError::Config("scenes need at least one object".into()));
        }
        if !self.d_pe.is_multiple_of(4) || !self.d_s.is_multiple_of(2) {
            return Err(HarnessError::Config("d_pe must be a multiple of 4 and d_s even".into()));
        }
        Ok(())
    }

    fn detector(&self, widths: &[usize]) -> DetectorConfig {
        DetectorConfig {
            image_px: self.image_px,
            classes: self.classes,
            strides: self.strides.clone(),
            widths: widths.to_vec(),
            dim: self.dim,
            top_down: self.top_down,
            prior: 0.01,
        }
    }

    pub fn teacher_detector(&self) -> DetectorConfig {
        self.detector(&self.teacher_widths)
    }

    pub fn student_detector(&self) -> DetectorConfig {
        self.detector(&self.student_widths)
    }

    pub fn encoding(&self) -> EncodingConfig {
        EncodingConfig {
            classes: self.classes,
            d_pe: self.d_pe,
            d_s: self.d_s,
            temperature: self.pe_temperature,
            jitter: self.jitter,
            drop_info: self.drop_info,
            use_scale: self.use_scale,
            image_px: self.image_px,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            dim: self.dim,
            heads: self.heads,
            pe_width: self.d_pe + 2,
            enc_width: self.encoding().width(),
            depth: self.depth,
        }
    }

    pub fn aux_tasks(&self) -> AuxTasks {
        AuxTasks { identification: self.aux_identification, localization: self.aux_localization }
    }

    pub fn distill_options(&self) -> DistillOptions {
        DistillOptions { detach_masks: self.detach_masks }
    }

    /// Small budgets for smoke runs and tests.
    pub fn quick() -> Self {
        Self {
            train_scenes: 32,
            eval_scenes: 16,
            teacher_iters: 20,
            student_iters: 12,
            warmup: 4,
            eval_every: 6,
            batch: 4,
            ..Self::default()
        }
    }
}
