//! Auxiliary identification/localisation loss, the instance-conditional
//! distillation loss, total-loss assembly and gradient-routing audits.

use std::fmt;

use log::debug;
use rand::Rng;

use crate::decoder::Knowledge;
use crate::instance::Instance;
use crate::nn::{Linear, Mlp3};
use crate::params::{GroupName, ParamGroup};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const BCE_CLAMP: f64 = 1e-7;

/// Shared trunk with objectness and box predictors.
#[derive(Clone, Debug)]
pub struct AuxHeads {
    pub group: ParamGroup,
    pub trunk: Mlp3,
    pub obj: Linear,
    pub reg: Linear,
}

impl AuxHeads {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        let mut g = ParamGroup::new(GroupName::Aux);
        let trunk = Mlp3::new(&mut g, "trunk", dim, dim, dim, rng)?;
        let obj = Linear::new(&mut g, "obj", dim, 1, rng)?;
        let reg = Linear::new(&mut g, "reg", dim, 4, rng)?;
        Ok(Self { group: g, trunk, obj, reg })
    }

    /// `(p_obj [N], p_reg [N×4])`, both through a sigmoid.
    pub fn forward(&self, g: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.trunk.forward(g)?.relu();
        let n = g.shape()[0];
        let p = self.obj.forward(&h)?.sigmoid().reshape(&[n])?;
        Ok((p, self.reg.forward(&h)?.sigmoid()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionTarget {
    /// `[l, t, r, b]` from the encoded centre to the box sides.
    pub ltrb: [f64; 4],
    /// Normalised box `(w, h)`.
    pub size: (f64, f64),
}

pub fn regression_targets(inst: &Instance, center: (f64, f64)) -> RegressionTarget {
    let [x1, y1, x2, y2] = inst.corners();
    let (x, y) = center;
    RegressionTarget { ltrb: [x - x1, y - y1, x2 - x, y2 - y], size: inst.size() }
}

/// Mean BCE over all instances, real and fake. `p` is `[N]`.
pub fn identification_loss(p: &Tensor, is_real: &[bool]) -> Result<Tensor> {
    let n = is_real.len();
    if p.numel() != n || n == 0 {
        return Err(Error::Data(format!("{} predictions for {n} instances", p.numel())));
    }
    let p = p.reshape(&[n])?.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let pos: Vec<f64> = is_real.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
    let neg: Vec<f64> = pos.iter().map(|v| 1.0 - v).collect();
    let lp = p.ln().mul(&Tensor::new(pos, &[n])?)?;
    let lq = p.scale(-1.0).add_scalar(1.0).ln().mul(&Tensor::new(neg, &[n])?)?;
    Ok(lp.add(&lq)?.sum().scale(-1.0 / n as f64))
}

/// Size-normalised L1 over real instances, divided by their count. Returns
/// a constant zero when there are no real instances.
pub fn localization_loss(pred: &Tensor, targets: &[RegressionTarget], is_real: &[bool]) -> Result<Tensor> {
    let n = targets.len();
    if pred.shape() != [n, 4] || is_real.len() != n {
        return Err(Error::Data(format!("regression predictions {:?} for {n} targets", pred.shape())));
    }
    let n_real = is_real.iter().filter(|&&r| r).count();
    if n_real == 0 {
        debug!("localisation loss: no real instances");
        return Ok(Tensor::scalar(0.0));
    }
    let mut t = Vec::with_capacity(n * 4);
    let mut w = Vec::with_capacity(n * 4);
    for (tg, &real) in targets.iter().zip(is_real) {
        t.extend_from_slice(&tg.ltrb);
        let (bw, bh) = tg.size;
        if real {
            w.extend_from_slice(&[1.0 / bw, 1.0 / bh, 1.0 / bw, 1.0 / bh]);
        } else {
            w.extend_from_slice(&[0.0; 4]);
        }
    }
    Ok(pred.sub(&Tensor::new(t, &[n, 4])?)?.abs().mul(&Tensor::new(w, &[n, 4])?)?.sum().scale(1.0 / n_real as f64))
}

/// Which auxiliary sub-tasks contribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AuxTasks {
    pub identification: bool,
    pub localization: bool,
}

impl Default for AuxTasks {
    fn default() -> Self {
        Self { identification: true, localization: true }
    }
}

/// `(L_idf, L_reg)` on the aggregated features `g` `[N×D]`.
pub fn aux_loss(
    g: &Tensor,
    instances: &[Instance],
    centers: &[(f64, f64)],
    heads: &AuxHeads,
    tasks: AuxTasks,
) -> Result<(Tensor, Tensor)> {
    if g.shape()[0] != instances.len() || centers.len() != instances.len() {
        return Err(Error::Data(format!("{} features for {} instances", g.shape()[0], instances.len())));
    }
    let (p_obj, p_reg) = heads.forward(g)?;
    let flags: Vec<bool> = instances.iter().map(|i| i.is_real).collect();
    let idf = if tasks.identification { identification_loss(&p_obj, &flags)? } else { Tensor::scalar(0.0) };
    let reg = if tasks.localization {
        let targets: Vec<_> = instances.iter().zip(centers).map(|(i, &c)| regression_targets(i, c)).collect();
        localization_loss(&p_reg, &targets, &flags)?
    } else {
        Tensor::scalar(0.0)
    };
    Ok((idf, reg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DistillOptions {
    /// Stop gradients through the attention masks.
    pub detach_masks: bool,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self { detach_masks: true }
    }
}

/// `1/(M·N_r) Σ_j Σ_i δ_i ⟨m_ij, rowmean((LN(V^S_j) − LN(V^T_j))²)⟩`.
///
/// `masks` are per head `[N×L]` with rows grouped by image per `counts`;
/// `teacher_values` and `student_values` are per head `[B·L×d]`. Teacher
/// values are always treated as constants.
pub fn distill_loss(
    masks: &[Tensor],
    counts: &[usize],
    teacher_values: &[Tensor],
    student_values: &[Tensor],
    is_real: &[bool],
    opts: DistillOptions,
) -> Result<Tensor> {
    let heads = masks.len();
    if heads == 0 || teacher_values.len() != heads || student_values.len() != heads {
        return Err(Error::Config("distillation needs matching masks and values per head".into()));
    }
    let n: usize = counts.iter().sum();
    if is_real.len() != n {
        return Err(Error::Data(format!("{} flags for {n} instances", is_real.len())));
    }
    let cells = masks[0].shape()[1];
    let rows = counts.len() * cells;
    for (t, s) in teacher_values.iter().zip(student_values) {
        if t.shape() != s.shape() || t.shape()[0] != rows {
            return Err(Error::Config(format!(
                "teacher values {:?} and student values {:?} disagree (expected {rows} rows)",
                t.shape(),
                s.shape()
            )));
        }
    }
    let n_real = is_real.iter().filter(|&&r| r).count();
    if n_real == 0 {
        debug!("distillation loss: no real instances");
        return Ok(Tensor::scalar(0.0));
    }
    let mut acc: Option<Tensor> = None;
    for j in 0..heads {
        let vt = teacher_values[j].detach().layernorm_pf()?;
        let mse = student_values[j].layernorm_pf()?.sub(&vt)?.square().mean_last()?;
        let m = if opts.detach_masks { masks[j].detach() } else { masks[j].clone() };
        let mut off = 0;
        for (b, &nb) in counts.iter().enumerate() {
            let flags = &is_real[off..off + nb];
            if flags.iter().any(|&r| r) {
                let delta: Vec<f64> = flags.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
                let w = Tensor::new(delta, &[1, nb])?.matmul(&m.narrow(0, off, nb)?)?;
                let term = w.matmul(&mse.narrow(0, b * cells, cells)?.reshape(&[cells, 1])?)?;
                acc = Some(match acc {
                    Some(a) => a.add(&term)?,
                    None => term,
                });
            }
            off += nb;
        }
    }
    Ok(acc.expect("at least one real instance").reshape(&[])?.scale(1.0 / (heads * n_real) as f64))
}

/// Convenience over [`distill_loss`] reading masks from knowledge.
pub fn distill_from_knowledge(
    teacher: &Knowledge,
    student_values: &[Tensor],
    instances: &[Instance],
    opts: DistillOptions,
) -> Result<Tensor> {
    let flags: Vec<bool> = instances.iter().map(|i| i.is_real).collect();
    distill_loss(&teacher.masks, &teacher.counts, &teacher.values, student_values, &flags, opts)
}

#[derive(Clone, Debug)]
pub struct LossBundle {
    pub det: Tensor,
    pub aux_idf: Tensor,
    pub aux_reg: Tensor,
    pub distill: Tensor,
    pub total: Tensor,
    pub lambda: f64,
}

impl LossBundle {
    /// The loss the student optimises: `L_det + λ·L_distill`.
    pub fn student_objective(&self) -> Result<Tensor> {
        Ok(self.det.add(&self.distill.scale(self.lambda))?)
    }

    pub fn aux(&self) -> Result<Tensor> {
        Ok(self.aux_idf.add(&self.aux_reg)?)
    }
}

/// `L_total = L_det + (L_idf + L_reg) + λ·L_distill`.
pub fn total_loss(det: Tensor, aux_idf: Tensor, aux_reg: Tensor, distill: Tensor, lambda: f64) -> Result<LossBundle> {
    let total = det.add(&aux_idf)?.add(&aux_reg)?.add(&distill.scale(lambda))?;
    Ok(LossBundle { det, aux_idf, aux_reg, distill, total, lambda })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Aux,
    Distill,
    Det,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Aux => "L_aux",
            LossKind::Distill => "L_distill",
            LossKind::Det => "L_det",
        })
    }
}

/// Whether `loss` may update `group`.
pub fn routing_allowed(loss: LossKind, group: GroupName) -> bool {
    matches!(
        (loss, group),
        (LossKind::Aux, GroupName::Decoder | GroupName::Aux) | (LossKind::Distill | LossKind::Det, GroupName::Student)
    )
}

#[derive(Clone, Debug)]
pub struct RoutingCell {
    pub loss: LossKind,
    pub group: GroupName,
    pub allowed: bool,
    pub max_abs_grad: f64,
    pub grad_norm: f64,
    pub worst_param: Option<String>,
    /// Frozen groups hold no gradient buffers at all.
    pub grads_absent: bool,
}

impl RoutingCell {
    /// Forbidden cells must be exactly zero; allowed cells must carry some
    /// gradient.
    pub fn passed(&self) -> bool {
        if self.allowed {
            self.max_abs_grad > 0.0
        } else {
            self.max_abs_grad == 0.0
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RoutingReport {
    pub cells: Vec<RoutingCell>,
}

impl RoutingReport {
    pub fn passed(&self) -> bool {
        self.cells.iter().all(RoutingCell::passed)
    }

    pub fn forbidden(&self) -> impl Iterator<Item = &RoutingCell> {
        self.cells.iter().filter(|c| !c.allowed)
    }

    pub fn leaks(&self) -> Vec<&RoutingCell> {
        self.forbidden().filter(|c| c.max_abs_grad != 0.0).collect()
    }
}

impl fmt::Display for RoutingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cells {
            writeln!(
                f,
                "{:<9} -> {:<7} {:<9} max|g|={:.3e} norm={:.3e}{}{}  {}",
                c.loss.to_string(),
                c.group.as_str(),
                if c.allowed { "allowed" } else { "forbidden" },
                c.max_abs_grad,
                c.grad_norm,
                c.worst_param.as_ref().map(|p| format!(" at {p}")).unwrap_or_default(),
                if c.grads_absent { " (no grad buffers)" } else { "" },
                if c.passed() { "ok" } else { "FAIL" },
            )?;
        }
        Ok(())
    }
}

/// Back-propagates every loss on its own and records which groups receive
/// gradient. Gradients are zeroed before each loss and after the audit.
pub fn verify_gradient_routing(losses: &[(LossKind, Tensor)], groups: &[&ParamGroup]) -> Result<RoutingReport> {
    let mut report = RoutingReport::default();
    for (kind, loss) in losses {
        groups.iter().for_each(|g| g.zero_grad());
        loss.backward()?;
        for g in groups {
            let (max_abs_grad, worst_param) = g.max_abs_grad();
            report.cells.push(RoutingCell {
                loss: *kind,
                group: g.name(),
                allowed: routing_allowed(*kind, g.name()),
                max_abs_grad,
                grad_norm: g.grad_norm(),
                worst_param,
                grads_absent: g.iter().all(|(_, t)| t.grad_ref().is_none()),
            });
        }
    }
    groups.iter().for_each(|g| g.zero_grad());
    Ok(report)
}
