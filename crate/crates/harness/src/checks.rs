//! Finite-difference gradient suite and the gradient-routing audit on the
//! real training graph at toy size.

use icd_core::decoder::Decoder;
use icd_core::instance::{compute_stats, condition_set, encode_batch, Instance};
use icd_core::losses::verify_gradient_routing;
use icd_core::losses::{aux_loss, distill_loss, total_loss, AuxHeads, DistillOptions, LossKind, RoutingReport};
use icd_core::pyramid::{det_loss, flatten_pyramid, ToyDetector};
use icd_core::tensor::{finite_diff_check, GradCheckOptions, GradCheckReport};
use icd_core::{GroupName, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::rng::derive_seed;
use crate::scene::{batch_images, generate_scene, Scene, SceneParams};
use crate::Result;

pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::param((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape).unwrap()
}

/// Random values bounded away from zero, for ops with a kink there.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::param(v, shape).unwrap()
}

type OpFn = Box<dyn Fn(&[Tensor]) -> std::result::Result<Tensor, TensorError>>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mut cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = Vec::new();
    let u = |s: &[usize], rng: &mut ChaCha8Rng| random(s, -1.5, 1.5, rng);
    cases.push(("relu", vec![off_zero(&[3, 4], rng)], Box::new(|t| Ok(t[0].relu()))));
    cases.push(("sigmoid", vec![u(&[3, 4], rng)], Box::new(|t| Ok(t[0].sigmoid()))));
    cases.push(("exp", vec![u(&[3, 4], rng)], Box::new(|t| Ok(t[0].exp()))));
    cases.push(("ln", vec![random(&[3, 4], 0.2, 2.0, rng)], Box::new(|t| Ok(t[0].ln()))));
    cases.push(("abs", vec![off_zero(&[3, 4], rng)], Box::new(|t| Ok(t[0].abs()))));
    cases.push(("square", vec![u(&[3, 4], rng)], Box::new(|t| Ok(t[0].square()))));
    cases.push((
        "clamp",
        vec![off_zero(&[3, 4], rng)],
        Box::new(|t| t[0].clamp(-0.05, 0.05).add(&t[0].clamp(-1.7, 1.7))),
    ));
    cases.push(("scale", vec![u(&[3, 4], rng)], Box::new(|t| Ok(t[0].scale(-2.5)))));
    cases.push(("add_scalar", vec![u(&[3, 4], rng)], Box::new(|t| Ok(t[0].add_scalar(0.7).square()))));
    cases.push(("add", vec![u(&[3, 4], rng), u(&[3, 4], rng)], Box::new(|t| t[0].add(&t[1]))));
    cases.push(("sub", vec![u(&[3, 4], rng), u(&[3, 4], rng)], Box::new(|t| t[0].sub(&t[1]))));
    cases.push(("mul", vec![u(&[3, 4], rng), u(&[3, 4], rng)], Box::new(|t| t[0].mul(&t[1]))));
    cases.push(("add_bias", vec![u(&[3, 4], rng), u(&[4], rng)], Box::new(|t| t[0].add_bias(&t[1]))));
    cases.push(("matmul", vec![u(&[3, 5], rng), u(&[5, 4], rng)], Box::new(|t| t[0].matmul(&t[1]))));
    cases.push(("t", vec![u(&[3, 4], rng)], Box::new(|t| t[0].t())));
    cases.push(("reshape", vec![u(&[3, 4], rng)], Box::new(|t| t[0].reshape(&[2, 6]))));
    cases.push(("permute", vec![u(&[2, 3, 4], rng)], Box::new(|t| t[0].permute(&[2, 0, 1]))));
    cases.push(("narrow", vec![u(&[3, 5], rng)], Box::new(|t| t[0].narrow(1, 1, 3))));
    cases.push((
        "concat",
        vec![u(&[2, 3], rng), u(&[2, 2], rng)],
        Box::new(|t| Tensor::concat(&[t[0].clone(), t[1].clone()], 1)),
    ));
    cases.push(("sum", vec![u(&[3, 4], rng)], Box::new(|t| Ok(t[0].sum().square()))));
    cases.push(("mean", vec![u(&[3, 4], rng)], Box::new(|t| Ok(t[0].mean().square()))));
    cases.push(("mean_last", vec![u(&[3, 4], rng)], Box::new(|t| t[0].mean_last())));
    cases.push(("softmax", vec![u(&[3, 4], rng)], Box::new(|t| t[0].softmax())));
    cases.push(("layernorm", vec![u(&[3, 6], rng)], Box::new(|t| t[0].layernorm_pf())));
    cases.push((
        "bce_with_logits",
        vec![u(&[3, 4], rng)],
        Box::new(|t| t[0].bce_with_logits(&[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])),
    ));
    cases.push((
        "conv2d",
        vec![u(&[2, 2, 5, 5], rng), u(&[3, 2, 3, 3], rng), u(&[3], rng)],
        Box::new(|t| t[0].conv2d(&t[1], Some(&t[2]), 2, 1)),
    ));
    cases.push((
        "conv2d_1x1",
        vec![u(&[1, 3, 4, 4], rng), u(&[2, 3, 1, 1], rng)],
        Box::new(|t| t[0].conv2d(&t[1], None, 1, 0)),
    ));
    cases.push(("upsample2x", vec![u(&[1, 2, 2, 3], rng)], Box::new(|t| t[0].upsample2x())));
    cases
}

/// Every primitive op, projected to a scalar through fixed random weights.
pub fn op_gradchecks(opts: &GradCheckOptions) -> Result<Vec<NamedReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    for (name, inputs, op) in op_cases(&mut rng) {
        let y = op(&inputs)?;
        let w = Tensor::new((0..y.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect(), y.shape())?;
        let named: Vec<(String, Tensor)> =
            inputs.iter().enumerate().map(|(i, t)| (format!("{name}.x{i}"), t.clone())).collect();
        let report =
            finite_diff_check(|| -> icd_core::Result<Tensor> { Ok(op(&inputs)?.mul(&w)?.sum()) }, &named, opts)?;
        out.push(NamedReport { name: name.to_string(), report });
    }
    Ok(out)
}

/// Toy-size teacher, student, decoder and aux heads on real scenes.
pub struct Rig {
    pub cfg: ExperimentConfig,
    pub teacher: ToyDetector,
    pub student: ToyDetector,
    pub decoder: Decoder,
    pub aux: AuxHeads,
    pub scenes: Vec<Scene>,
    pub instances: Vec<Instance>,
    pub counts: Vec<usize>,
    pub encodings: Tensor,
    pub centers: Vec<(f64, f64)>,
}

pub fn rig_config() -> ExperimentConfig {
    ExperimentConfig {
        image_px: 32,
        classes: 2,
        strides: vec![8, 16],
        dim: 8,
        heads: 2,
        depth: 2,
        d_pe: 4,
        d_s: 2,
        teacher_widths: vec![3, 4, 6],
        student_widths: vec![2, 3, 4],
        fake_ratio: 2,
        max_objects: 2,
        lambda: 3.0,
        ..ExperimentConfig::default()
    }
}

impl Rig {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = rig_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = ToyDetector::new(cfg.teacher_detector(), GroupName::Teacher, &mut rng)?;
        let student = ToyDetector::new(cfg.student_detector(), GroupName::Student, &mut rng)?;
        let decoder = Decoder::new(cfg.decoder(), &mut rng)?;
        let aux = AuxHeads::new(cfg.dim, &mut rng)?;
        teacher.group.set_trainable(false);
        // Zero biases put ReLU inputs exactly on the kink wherever a patch
        // is all zero.
        for g in [&teacher.group, &student.group] {
            for (name, t) in g.iter() {
                if name.ends_with(".bias") && !name.starts_with("head.out") {
                    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.05..0.2));
                }
            }
        }
        let params =
            SceneParams { image_px: cfg.image_px, classes: cfg.classes, max_objects: cfg.max_objects, noise: 0.05 };
        let scenes: Vec<Scene> =
            (0..2).map(|i| generate_scene(&params, derive_seed(seed, i))).collect::<Result<_>>()?;
        let stats = compute_stats(scenes.iter().flat_map(|s| s.instances.iter()), cfg.classes)?;
        let mut instances = Vec::new();
        let mut counts = Vec::new();
        for s in &scenes {
            let set = condition_set(&s.instances, &stats, cfg.fake_ratio, cfg.image_px, &mut rng)?;
            counts.push(set.len());
            instances.extend(set);
        }
        let (encodings, centers) = encode_batch(&instances, &cfg.encoding(), &mut rng)?;
        Ok(Self { cfg, teacher, student, decoder, aux, scenes, instances, counts, encodings, centers })
    }

    fn images(&self) -> Result<Tensor> {
        batch_images(&self.scenes)
    }

    fn targets(&self) -> Vec<Vec<Instance>> {
        self.scenes.iter().map(|s| s.instances.clone()).collect()
    }

    fn flags(&self) -> Vec<bool> {
        self.instances.iter().map(|i| i.is_real).collect()
    }

    /// `(det, aux_idf, aux_reg, distill)` as in one training iteration.
    pub fn losses(&self, opts: DistillOptions, freeze_values: bool) -> Result<[Tensor; 4]> {
        let c = &self.cfg;
        let imgs = self.images()?;
        let tflat = flatten_pyramid(&self.teacher.backbone_forward(&imgs)?, c.d_pe, c.pe_temperature)?;
        let (sp, preds) = self.student.forward(&imgs)?;
        let det = det_loss(&preds, &self.targets())?;
        let out = self.decoder.forward(&tflat, &self.encodings, &self.counts)?;
        let (idf, reg) = aux_loss(&out.g, &self.instances, &self.centers, &self.aux, c.aux_tasks())?;
        let sflat = flatten_pyramid(&sp, c.d_pe, c.pe_temperature)?;
        let sv = self.decoder.student_values(&sflat, freeze_values)?;
        let k = out.last();
        let distill = distill_loss(&k.masks, &self.counts, &k.values, &sv, &self.flags(), opts)?;
        Ok([det, idf, reg, distill])
    }

    /// `L_total` with the stop-gradient inputs (masks, teacher values and
    /// the value projection used on student features) fixed as constants
    /// snapshotted now, so the finite differences see the same function the
    /// backward pass differentiates.
    pub fn total_with_snapshots(&self) -> Result<impl Fn() -> icd_core::Result<Tensor> + '_> {
        let c = &self.cfg;
        let imgs = self.images()?;
        let tflat = flatten_pyramid(&self.teacher.backbone_forward(&imgs)?, c.d_pe, c.pe_temperature)?;
        let out = self.decoder.forward(&tflat, &self.encodings, &self.counts)?;
        let k = out.last();
        let masks: Vec<Tensor> = k.masks.iter().map(Tensor::detach).collect();
        let tvals: Vec<Tensor> = k.values.iter().map(Tensor::detach).collect();
        let fv: Vec<(Tensor, Tensor)> =
            self.decoder.last_layer().f_v.iter().map(|l| (l.weight.detach(), l.bias.detach())).collect();
        let flags = self.flags();
        let targets = self.targets();
        Ok(move || -> icd_core::Result<Tensor> {
            let (sp, preds) = self.student.forward(&imgs)?;
            let det = det_loss(&preds, &targets)?;
            let out = self.decoder.forward(&tflat, &self.encodings, &self.counts)?;
            let (idf, reg) = aux_loss(&out.g, &self.instances, &self.centers, &self.aux, c.aux_tasks())?;
            let sflat = flatten_pyramid(&sp, c.d_pe, c.pe_temperature)?;
            let (b, l, d) = (sflat.batch(), sflat.len(), sflat.dim());
            let a = sflat.a.reshape(&[b * l, d])?;
            let sv = fv
                .iter()
                .map(|(w, bias)| Ok(a.matmul(&w.t()?)?.add_bias(bias)?))
                .collect::<icd_core::Result<Vec<_>>>()?;
            let distill = distill_loss(&masks, &self.counts, &tvals, &sv, &flags, DistillOptions::default())?;
            Ok(total_loss(det, idf, reg, distill, c.lambda)?.total)
        })
    }
}

/// Composed `L_total` against finite differences over student, decoder and
/// aux parameters, sampling `entries` per tensor.
pub fn total_gradcheck(seed: u64, opts: &GradCheckOptions) -> Result<NamedReport> {
    let rig = Rig::new(seed)?;
    // The snapshot objective must agree with the live graph.
    let live = total_loss_value(&rig)?;
    let f = rig.total_with_snapshots()?;
    let snap = f()?.item();
    if (live - snap).abs() > 1e-12 * live.abs().max(1.0) {
        return Err(crate::HarnessError::Config(format!("snapshot objective {snap} differs from live {live}")));
    }
    let mut params = rig.student.group.named();
    params.extend(rig.decoder.group.named());
    params.extend(rig.aux.group.named());
    let report = finite_diff_check(&f, &params, opts)?;
    Ok(NamedReport { name: "L_total".into(), report })
}

fn total_loss_value(rig: &Rig) -> Result<f64> {
    let [det, idf, reg, distill] = rig.losses(DistillOptions::default(), true)?;
    Ok(total_loss(det, idf, reg, distill, rig.cfg.lambda)?.total.item())
}

pub fn full_gradcheck(opts: &GradCheckOptions, composed_entries: Option<usize>) -> Result<Vec<NamedReport>> {
    let mut all = op_gradchecks(opts)?;
    let composed = GradCheckOptions { max_entries: composed_entries, ..opts.clone() };
    all.push(total_gradcheck(31, &composed)?);
    Ok(all)
}

/// The loss × group audit; `mutate` removes the stop-gradient on masks.
pub fn routing_check(seed: u64, mutate: bool) -> Result<RoutingReport> {
    let rig = Rig::new(seed)?;
    let opts = DistillOptions { detach_masks: !mutate };
    let [det, idf, reg, distill] = rig.losses(opts, true)?;
    let aux = idf.add(&reg)?;
    let groups = [&rig.teacher.group, &rig.student.group, &rig.decoder.group, &rig.aux.group];
    Ok(verify_gradient_routing(&[(LossKind::Aux, aux), (LossKind::Distill, distill), (LossKind::Det, det)], &groups)?)
}
