//! Teacher pretraining and the joint student/decoder loop.

use std::time::Instant;

use icd_core::decoder::{Decoder, DecoderOutput};
use icd_core::instance::{condition_set, encode_batch, Instance};
use icd_core::losses::{aux_loss, distill_loss, total_loss, AuxHeads};
use icd_core::optim::Optimizer;
use icd_core::pyramid::{
    det_loss, flatten_pyramid, inherit_parameters, FeaturePyramid, FlatPyramid, Level, ToyDetector,
};
use icd_core::{GroupName, Tensor};
use log::{debug, info};
use rand::seq::index::sample;
use rand::Rng;

use crate::attention::variant_masks;
use crate::config::{AttentionVariant, DetectorOptimizer, ExperimentConfig};
use crate::eval::{evaluate_toy_ap, EvalParams};
use crate::metrics::{LossWindow, MetricsRow};
use crate::rng::{stream, Stream};
use crate::scene::{batch_images, Dataset, Scene};
use crate::{HarnessError, Result};

pub fn eval_params(cfg: &ExperimentConfig) -> EvalParams {
    EvalParams { score_threshold: cfg.score_threshold, nms_iou: cfg.nms_iou, match_iou: cfg.match_iou }
}

pub fn new_teacher(cfg: &ExperimentConfig) -> Result<ToyDetector> {
    Ok(ToyDetector::new(
        cfg.teacher_detector(),
        GroupName::Teacher,
        &mut stream(cfg.teacher_seed, Stream::TeacherInit),
    )?)
}

pub fn new_student(cfg: &ExperimentConfig) -> Result<ToyDetector> {
    Ok(ToyDetector::new(cfg.student_detector(), GroupName::Student, &mut stream(cfg.seed, Stream::StudentInit))?)
}

fn detector_optimizer(cfg: &ExperimentConfig, lr: f64) -> Optimizer {
    match cfg.detector_optimizer {
        DetectorOptimizer::AdamW => Optimizer::adamw(lr, cfg.weight_decay),
        DetectorOptimizer::Sgd => Optimizer::sgd(lr, cfg.momentum, cfg.weight_decay),
    }
}

/// Half-cosine decay from `base` to zero over `total` iterations.
pub fn cosine_lr(base: f64, it: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * it as f64 / total as f64).cos())
}

fn targets(scenes: &[Scene], idx: &[usize]) -> Vec<Vec<Instance>> {
    idx.iter().map(|&i| scenes[i].instances.clone()).collect()
}

fn draw_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, batch: usize) -> Vec<usize> {
    sample(rng, n, batch.min(n)).into_vec()
}

fn check_finite(v: f64, it: usize, seed: u64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Diverged { iter: it, seed, what: format!("{what} = {v}") })
    }
}

pub struct TeacherRun {
    pub detector: ToyDetector,
    pub rows: Vec<MetricsRow>,
    pub toy_ap: f64,
}

pub fn train_teacher(cfg: &ExperimentConfig, data: &Dataset) -> Result<TeacherRun> {
    let teacher = new_teacher(cfg)?;
    let mut opt = detector_optimizer(cfg, cfg.lr_teacher);
    let mut batches = stream(cfg.teacher_seed, Stream::Batches);
    let mut window = LossWindow::default();
    let mut rows = Vec::new();
    let params = eval_params(cfg);
    let started = Instant::now();
    for it in 0..cfg.teacher_iters {
        let idx = draw_batch(&mut batches, data.train.len(), cfg.batch);
        let imgs = batch_images(idx.iter().map(|&i| &data.train[i]))?;
        let (_, preds) = teacher.forward(&imgs)?;
        let loss = det_loss(&preds, &targets(&data.train, &idx))?;
        check_finite(loss.item(), it, cfg.teacher_seed, "teacher det loss")?;
        window.push(loss.item(), 0.0, 0.0, 0.0);
        loss.backward()?;
        opt.set_lr(cosine_lr(cfg.lr_teacher, it, cfg.teacher_iters));
        opt.step(&teacher.group);
        let done = it + 1;
        if done % cfg.eval_every.max(1) == 0 || done == cfg.teacher_iters {
            let ap = evaluate_toy_ap(&teacher, &data.eval, &params)?;
            let row = window.take("teacher", done, ap);
            info!("teacher iter {done}: det {:.4} ap {ap:.4} ({:.1?})", row.loss_det, started.elapsed());
            rows.push(row);
        }
    }
    let toy_ap = match rows.last() {
        Some(r) => r.toy_ap,
        None => evaluate_toy_ap(&teacher, &data.eval, &params)?,
    };
    info!("teacher final toy AP {toy_ap:.4}");
    Ok(TeacherRun { detector: teacher, rows, toy_ap })
}

/// Teacher pyramids of every training scene, computed once.
pub struct TeacherCache {
    /// `(stride, H, W)` per level.
    pub shapes: Vec<(usize, usize, usize)>,
    pub dim: usize,
    /// Per scene, per level, `[D×H×W]`.
    feats: Vec<Vec<Vec<f64>>>,
}

impl TeacherCache {
    pub fn build(teacher: &ToyDetector, scenes: &[Scene]) -> Result<Self> {
        teacher.group.set_trainable(false);
        let mut feats = Vec::with_capacity(scenes.len());
        let mut shapes = Vec::new();
        for chunk in scenes.chunks(16) {
            let p = teacher.backbone_forward(&batch_images(chunk)?)?;
            shapes = p.levels.iter().map(|l| (l.stride, l.feat.shape()[2], l.feat.shape()[3])).collect();
            for b in 0..chunk.len() {
                feats.push(
                    p.levels
                        .iter()
                        .map(|l| {
                            let per = l.feat.numel() / chunk.len();
                            l.feat.data()[b * per..(b + 1) * per].to_vec()
                        })
                        .collect(),
                );
            }
        }
        teacher.group.set_trainable(true);
        Ok(Self { shapes, dim: teacher.cfg.dim, feats })
    }

    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }

    pub fn pyramid(&self, idx: &[usize]) -> Result<FeaturePyramid> {
        let levels = self
            .shapes
            .iter()
            .enumerate()
            .map(|(k, &(stride, h, w))| {
                let data: Vec<f64> = idx.iter().flat_map(|&i| self.feats[i][k].iter().copied()).collect();
                Ok(Level { stride, feat: Tensor::new(data, &[idx.len(), self.dim, h, w])? })
            })
            .collect::<Result<_>>()?;
        Ok(FeaturePyramid { levels })
    }
}

/// Which student loop to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunKind {
    /// Detection loss only; no decoder is built.
    Baseline,
    /// The joint loop with the configured λ, variant and inherit flag.
    Distill,
}

pub struct StudentRun {
    pub name: String,
    pub student: ToyDetector,
    pub decoder: Option<Decoder>,
    pub aux: Option<AuxHeads>,
    pub rows: Vec<MetricsRow>,
    pub toy_ap: f64,
    pub inherited: usize,
}

/// Decoder, aux heads and their optimizers.
pub struct DecoderState {
    pub decoder: Decoder,
    pub aux: AuxHeads,
    opt_decoder: Optimizer,
    opt_aux: Optimizer,
}

impl DecoderState {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let mut rng = stream(cfg.seed, Stream::DecoderInit);
        let decoder = Decoder::new(cfg.decoder(), &mut rng)?;
        let aux = AuxHeads::new(cfg.dim, &mut rng)?;
        Ok(Self {
            decoder,
            aux,
            opt_decoder: Optimizer::adamw(cfg.lr_decoder, cfg.decoder_weight_decay),
            opt_aux: Optimizer::adamw(cfg.lr_aux, cfg.decoder_weight_decay),
        })
    }

    pub fn step(&mut self) {
        self.opt_decoder.step(&self.decoder.group);
        self.opt_aux.step(&self.aux.group);
    }
}

/// One decoder pass over a teacher batch with its condition set.
pub struct Conditioned {
    pub flat: FlatPyramid,
    pub instances: Vec<Instance>,
    pub counts: Vec<usize>,
    pub out: DecoderOutput,
    pub aux_idf: Tensor,
    pub aux_reg: Tensor,
}

pub struct ConditionRngs {
    pub fakes: rand_chacha::ChaCha8Rng,
    pub encoding: rand_chacha::ChaCha8Rng,
}

impl ConditionRngs {
    pub fn new(seed: u64) -> Self {
        Self { fakes: stream(seed, Stream::Fakes), encoding: stream(seed, Stream::Encoding) }
    }
}

pub fn condition_batch(
    cfg: &ExperimentConfig,
    data: &Dataset,
    cache: &TeacherCache,
    idx: &[usize],
    state: &DecoderState,
    rngs: &mut ConditionRngs,
) -> Result<Conditioned> {
    let flat = flatten_pyramid(&cache.pyramid(idx)?, cfg.d_pe, cfg.pe_temperature)?;
    let mut instances = Vec::new();
    let mut counts = Vec::with_capacity(idx.len());
    for &i in idx {
        let set = condition_set(&data.train[i].instances, &data.stats, cfg.fake_ratio, cfg.image_px, &mut rngs.fakes)?;
        counts.push(set.len());
        instances.extend(set);
    }
    let (enc, centers) = encode_batch(&instances, &cfg.encoding(), &mut rngs.encoding)?;
    let out = state.decoder.forward(&flat, &enc, &counts)?;
    let (aux_idf, aux_reg) = aux_loss(&out.g, &instances, &centers, &state.aux, cfg.aux_tasks())?;
    Ok(Conditioned { flat, instances, counts, out, aux_idf, aux_reg })
}

/// Trains only the decoder and aux heads on teacher features.
pub fn pretrain_decoder(
    cfg: &ExperimentConfig,
    data: &Dataset,
    cache: &TeacherCache,
    state: &mut DecoderState,
    iters: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut batches = stream(seed ^ 0x5EED, Stream::Batches);
    let mut rngs = ConditionRngs::new(seed ^ 0x5EED);
    let mut losses = Vec::with_capacity(iters);
    for it in 0..iters {
        let idx = draw_batch(&mut batches, data.train.len(), cfg.batch);
        let c = condition_batch(cfg, data, cache, &idx, state, &mut rngs)?;
        let (i, r) = (c.aux_idf.item(), c.aux_reg.item());
        check_finite(i + r, it, seed, "decoder aux loss")?;
        losses.push((i, r));
        c.aux_idf.add(&c.aux_reg)?.backward()?;
        state.step();
    }
    Ok(losses)
}

fn check_teacher(cfg: &ExperimentConfig, teacher: &ToyDetector, cache: &TeacherCache, data: &Dataset) -> Result<()> {
    if teacher.cfg != cfg.teacher_detector() {
        return Err(HarnessError::Config("teacher checkpoint does not match the configured teacher".into()));
    }
    if cache.len() != data.train.len() || cache.dim != cfg.dim {
        return Err(HarnessError::Config("teacher feature cache does not match the dataset".into()));
    }
    Ok(())
}

/// The joint loop. Student gets `L_det + λ·L_distill`, decoder and aux heads
/// get `L_aux`; one backward over the sum feeds all three optimizers.
pub fn distill_student(
    cfg: &ExperimentConfig,
    data: &Dataset,
    teacher: &ToyDetector,
    cache: &TeacherCache,
    kind: RunKind,
    name: &str,
) -> Result<StudentRun> {
    cfg.validate()?;
    check_teacher(cfg, teacher, cache, data)?;
    let student = new_student(cfg)?;
    let inherited = if cfg.inherit { inherit_parameters(&student, teacher) } else { 0 };
    let mut opt = detector_optimizer(cfg, cfg.lr_student);
    let mut batches = stream(cfg.seed, Stream::Batches);
    let mut state = match kind {
        RunKind::Baseline => None,
        RunKind::Distill => {
            let mut s = DecoderState::new(cfg)?;
            if cfg.decoder_pretrain_iters > 0 {
                pretrain_decoder(cfg, data, cache, &mut s, cfg.decoder_pretrain_iters, cfg.seed)?;
            }
            Some(s)
        }
    };
    let mut rngs = ConditionRngs::new(cfg.seed);
    let mut window = LossWindow::default();
    let mut rows = Vec::new();
    let params = eval_params(cfg);
    let started = Instant::now();
    for it in 0..cfg.student_iters {
        let idx = draw_batch(&mut batches, data.train.len(), cfg.batch);
        let imgs = batch_images(idx.iter().map(|&i| &data.train[i]))?;
        let (sp, preds) = student.forward(&imgs)?;
        let det = det_loss(&preds, &targets(&data.train, &idx))?;
        check_finite(det.item(), it, cfg.seed, "student det loss")?;
        let (total, idf, reg, dist) = match &state {
            None => (det.clone(), 0.0, 0.0, 0.0),
            Some(st) => {
                let c = condition_batch(cfg, data, cache, &idx, st, &mut rngs)?;
                let distill = if cfg.lambda > 0.0 && it >= cfg.warmup {
                    let sflat = flatten_pyramid(&sp, cfg.d_pe, cfg.pe_temperature)?;
                    let sv = st.decoder.student_values(&sflat, cfg.freeze_student_values)?;
                    let know = c.out.last();
                    let masks = match cfg.attention {
                        AttentionVariant::Icd => know.masks.clone(),
                        v => variant_masks(v, &c.flat, &c.instances, &c.counts, cfg.heads)?,
                    };
                    let flags: Vec<bool> = c.instances.iter().map(|i| i.is_real).collect();
                    distill_loss(&masks, &c.counts, &know.values, &sv, &flags, cfg.distill_options())?
                } else {
                    Tensor::scalar(0.0)
                };
                let (i, r, d) = (c.aux_idf.item(), c.aux_reg.item(), distill.item());
                check_finite(i + r + d, it, cfg.seed, "aux/distill loss")?;
                let b = total_loss(det.clone(), c.aux_idf, c.aux_reg, distill, cfg.lambda)?;
                (b.total, i, r, d)
            }
        };
        window.push(det.item(), idf, reg, dist);
        total.backward()?;
        opt.set_lr(cosine_lr(cfg.lr_student, it, cfg.student_iters));
        opt.step(&student.group);
        if let Some(st) = state.as_mut() {
            st.step();
        }
        let done = it + 1;
        if done % cfg.eval_every.max(1) == 0 || done == cfg.student_iters {
            let ap = evaluate_toy_ap(&student, &data.eval, &params)?;
            let row = window.take(name, done, ap);
            debug!(
                "{name} iter {done}: det {:.4} idf {:.4} reg {:.4} distill {:.5} ap {ap:.4} ({:.1?})",
                row.loss_det,
                row.loss_aux_idf,
                row.loss_aux_reg,
                row.loss_distill,
                started.elapsed()
            );
            rows.push(row);
        }
    }
    let toy_ap = match rows.last() {
        Some(r) => r.toy_ap,
        None => evaluate_toy_ap(&student, &data.eval, &params)?,
    };
    info!("{name}: toy AP {toy_ap:.4} in {:.1?}", started.elapsed());
    let (decoder, aux) = match state {
        Some(s) => (Some(s.decoder), Some(s.aux)),
        None => (None, None),
    };
    Ok(StudentRun { name: name.to_string(), student, decoder, aux, rows, toy_ap, inherited })
}

/// Dataset, trained teacher and its feature cache.
pub struct Prepared {
    pub data: Dataset,
    pub teacher: TeacherRun,
    pub cache: TeacherCache,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let data = crate::scene::build_dataset(cfg)?;
    let teacher = train_teacher(cfg, &data)?;
    let cache = TeacherCache::build(&teacher.detector, &data.train)?;
    Ok(Prepared { data, teacher, cache })
}

pub fn save_teacher(path: &std::path::Path, teacher: &ToyDetector, data: &Dataset) -> Result<()> {
    let mut tensors = crate::checkpoint::group_tensors(&teacher.group);
    tensors.extend(crate::checkpoint::stats_tensors(&data.stats)?);
    crate::checkpoint::save(path, &tensors)
}

/// A teacher built from `cfg` with parameters read from `path`.
pub fn load_teacher(cfg: &ExperimentConfig, path: &std::path::Path) -> Result<ToyDetector> {
    let teacher = new_teacher(cfg)?;
    crate::checkpoint::restore_group(&teacher.group, &crate::checkpoint::load(path)?)?;
    Ok(teacher)
}

/// Like [`prepare`], but reuses a saved teacher.
pub fn prepare_from(cfg: &ExperimentConfig, teacher_path: &std::path::Path) -> Result<Prepared> {
    let data = crate::scene::build_dataset(cfg)?;
    let detector = load_teacher(cfg, teacher_path)?;
    let toy_ap = evaluate_toy_ap(&detector, &data.eval, &eval_params(cfg))?;
    let cache = TeacherCache::build(&detector, &data.train)?;
    Ok(Prepared { data, teacher: TeacherRun { detector, rows: Vec::new(), toy_ap }, cache })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::build_dataset;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig { teacher_iters: 6, student_iters: 6, warmup: 2, eval_every: 3, ..ExperimentConfig::quick() }
    }

    #[test]
    fn cosine_schedule_ends() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-15);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn zero_iterations_keep_initialisation() {
        let cfg = ExperimentConfig { teacher_iters: 0, ..tiny() };
        let data = build_dataset(&cfg).unwrap();
        let run = train_teacher(&cfg, &data).unwrap();
        let fresh = new_teacher(&cfg).unwrap();
        for ((n1, a), (n2, b)) in run.detector.group.iter().zip(fresh.group.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn teacher_budget_is_three_student_budgets() {
        let cfg = ExperimentConfig::default();
        assert!((cfg.teacher_iters as f64 / cfg.student_iters as f64 - 3.0).abs() < 0.5);
    }

    #[test]
    fn zero_lambda_matches_baseline_exactly() {
        let cfg = ExperimentConfig { lambda: 0.0, ..tiny() };
        let p = prepare(&cfg).unwrap();
        let base = distill_student(&cfg, &p.data, &p.teacher.detector, &p.cache, RunKind::Baseline, "b").unwrap();
        let dist = distill_student(&cfg, &p.data, &p.teacher.detector, &p.cache, RunKind::Distill, "d").unwrap();
        assert!(dist.decoder.is_some());
        for ((_, a), (_, b)) in base.student.group.iter().zip(dist.student.group.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(base.toy_ap.to_bits(), dist.toy_ap.to_bits());
        assert!(dist.rows.iter().all(|r| r.loss_distill == 0.0));
        assert!(dist.rows.iter().any(|r| r.loss_aux_idf > 0.0));
    }

    #[test]
    fn distillation_changes_the_student_after_warmup() {
        let cfg = tiny();
        let p = prepare(&cfg).unwrap();
        let base = distill_student(&cfg, &p.data, &p.teacher.detector, &p.cache, RunKind::Baseline, "b").unwrap();
        let dist = distill_student(&cfg, &p.data, &p.teacher.detector, &p.cache, RunKind::Distill, "d").unwrap();
        assert!(dist.rows.last().unwrap().loss_distill > 0.0);
        let differs =
            base.student.group.iter().zip(dist.student.group.iter()).any(|((_, a), (_, b))| a.to_vec() != b.to_vec());
        assert!(differs);
    }

    #[test]
    fn mismatched_teacher_is_rejected_before_training() {
        let cfg = tiny();
        let p = prepare(&cfg).unwrap();
        let other = ExperimentConfig { teacher_widths: vec![8, 8, 8], ..cfg.clone() };
        let err = distill_student(&other, &p.data, &p.teacher.detector, &p.cache, RunKind::Distill, "x");
        assert!(matches!(err, Err(HarnessError::Config(_))));
    }

    #[test]
    fn inherit_reproduces_teacher_head_on_same_features() {
        let cfg = ExperimentConfig { student_widths: vec![16, 32, 64], ..tiny() };
        let data = build_dataset(&cfg).unwrap();
        let teacher = train_teacher(&cfg, &data).unwrap().detector;
        let student = new_student(&cfg).unwrap();
        let copied = inherit_parameters(&student, &teacher);
        assert_eq!(copied, 2 * cfg.strides.len() + 4);
        let imgs = batch_images(&data.eval[..2]).unwrap();
        let feats = student.backbone_forward(&imgs).unwrap();
        let a = student.head_forward(&feats).unwrap();
        let b = teacher.head_forward(&feats).unwrap();
        assert_eq!(a.logits.to_vec(), b.logits.to_vec());
        assert_eq!(a.ltrb_units.to_vec(), b.ltrb_units.to_vec());
    }

    #[test]
    fn cache_matches_live_teacher() {
        let cfg = tiny();
        let data = build_dataset(&cfg).unwrap();
        let teacher = new_teacher(&cfg).unwrap();
        let cache = TeacherCache::build(&teacher, &data.train).unwrap();
        let idx = [3, 0];
        let cached = cache.pyramid(&idx).unwrap();
        let live = teacher.backbone_forward(&batch_images(idx.iter().map(|&i| &data.train[i])).unwrap()).unwrap();
        for (a, b) in cached.levels.iter().zip(&live.levels) {
            assert_eq!(a.feat.shape(), b.feat.shape());
            assert_eq!(a.feat.to_vec(), b.feat.to_vec());
        }
    }
}
