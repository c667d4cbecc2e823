//! Instance-conditional decoder: per-head keys and values over the flattened
//! teacher pyramid, query-conditioned attention masks, and aggregation into
//! one feature per instance.

use rand::Rng;

use crate::nn::{Linear, Mlp3};
use crate::params::{GroupName, ParamGroup};
use crate::pyramid::FlatPyramid;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    /// Raw positional width (`d_pe + 2` with the level tag).
    pub pe_width: usize,
    /// Instance encoding width.
    pub enc_width: usize,
    pub depth: usize,
}

impl DecoderConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.dim)));
        }
        if self.head_dim() < 2 {
            return Err(Error::Config("head width must be at least 2 for the value norm".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("decoder depth must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub f_pe: Linear,
    pub f_k: Vec<Linear>,
    pub f_v: Vec<Linear>,
    pub f_q: Vec<Linear>,
    pub out_proj: Linear,
    pub ffn: [Linear; 2],
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub group: ParamGroup,
    /// Query MLP over instance encodings.
    pub f_q: Mlp3,
    pub layers: Vec<DecoderLayer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Teacher,
    Student,
}

/// Masks and values of one decoder layer.
#[derive(Clone, Debug)]
pub struct Knowledge {
    /// Per head `[N×L]`; row `i` is `m_ij`.
    pub masks: Vec<Tensor>,
    /// Per head `[B·L×d]`.
    pub values: Vec<Tensor>,
    /// Instances per image, in row order.
    pub counts: Vec<usize>,
    pub cells: usize,
    pub source: Source,
}

impl Knowledge {
    pub fn heads(&self) -> usize {
        self.masks.len()
    }

    pub fn instances(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `m_ij` as a plain vector.
    pub fn mask(&self, i: usize, j: usize) -> Vec<f64> {
        let l = self.cells;
        self.masks[j].data()[i * l..(i + 1) * l].to_vec()
    }

    /// Image index of every instance row.
    pub fn image_of(&self) -> Vec<usize> {
        self.counts.iter().enumerate().flat_map(|(b, &n)| std::iter::repeat_n(b, n)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[N×D]` queries fed to the first layer.
    pub queries: Tensor,
    /// `[N×D]` aggregated features of the last layer.
    pub g: Tensor,
    /// Knowledge of every layer, first to last.
    pub knowledge: Vec<Knowledge>,
}

impl DecoderOutput {
    pub fn last(&self) -> &Knowledge {
        self.knowledge.last().expect("decoder has at least one layer")
    }
}

/// `softmax(q·Kᵀ/√d)` row-wise: `q` is `[n×d]`, `k` is `[L×d]`.
pub fn attend(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = k.shape()[1] as f64;
    Ok(q.matmul(&k.t()?)?.scale(1.0 / d.sqrt()).softmax()?)
}

fn tile_rows(t: &Tensor, times: usize) -> Result<Tensor> {
    if times == 1 {
        return Ok(t.clone());
    }
    Ok(Tensor::concat(&vec![t.clone(); times], 0)?)
}

impl DecoderLayer {
    fn new<R: Rng + ?Sized>(g: &mut ParamGroup, prefix: &str, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let (dim, d) = (cfg.dim, cfg.head_dim());
        let per_head = |g: &mut ParamGroup, kind: &str, rng: &mut R| -> Result<Vec<Linear>> {
            (0..cfg.heads).map(|j| Linear::new(g, &format!("{prefix}.{kind}.{j}"), dim, d, rng)).collect()
        };
        let f_pe = Linear::new(g, &format!("{prefix}.f_pe"), cfg.pe_width, dim, rng)?;
        let f_k = per_head(g, "f_k", rng)?;
        let f_v = per_head(g, "f_v", rng)?;
        let f_q = per_head(g, "f_q", rng)?;
        let out_proj = Linear::new(g, &format!("{prefix}.out_proj"), dim, dim, rng)?;
        let ffn = [
            Linear::new(g, &format!("{prefix}.ffn.0"), dim, dim, rng)?,
            Linear::new(g, &format!("{prefix}.ffn.1"), dim, dim, rng)?,
        ];
        Ok(Self { f_pe, f_k, f_v, f_q, out_proj, ffn })
    }

    /// `K_j = F_k_j(A + F_pe(P))` over the whole batch, `[B·L×d]` per head.
    pub fn compute_keys(&self, flat: &FlatPyramid) -> Result<Vec<Tensor>> {
        let (b, l, dim) = (flat.batch(), flat.len(), flat.dim());
        let a = flat.a.reshape(&[b * l, dim])?;
        let pe = tile_rows(&self.f_pe.forward(&flat.p_raw)?, b)?;
        let base = a.add(&pe)?;
        self.f_k.iter().map(|f| f.forward(&base)).collect()
    }

    /// `V_j = F_v_j(A)`. With `frozen`, the projection weights are constants
    /// and only `A` receives gradients.
    pub fn compute_values(&self, flat: &FlatPyramid, frozen: bool) -> Result<Vec<Tensor>> {
        let (b, l, dim) = (flat.batch(), flat.len(), flat.dim());
        let a = flat.a.reshape(&[b * l, dim])?;
        self.f_v.iter().map(|f| if frozen { f.forward_frozen(&a) } else { f.forward(&a) }).collect()
    }

    /// Per head `[N×L]` masks; instance rows are grouped by image per `counts`.
    pub fn attention_masks(
        &self,
        keys: &[Tensor],
        queries: &Tensor,
        counts: &[usize],
        cells: usize,
    ) -> Result<Vec<Tensor>> {
        let n: usize = counts.iter().sum();
        if queries.shape()[0] != n {
            return Err(Error::Data(format!("{} query rows for {n} instances", queries.shape()[0])));
        }
        let mut masks = Vec::with_capacity(keys.len());
        for (k, fq) in keys.iter().zip(&self.f_q) {
            let qj = fq.forward(queries)?;
            let mut parts = Vec::new();
            let mut off = 0;
            for (b, &nb) in counts.iter().enumerate() {
                if nb == 0 {
                    continue;
                }
                let kb = k.narrow(0, b * cells, cells)?;
                parts.push(attend(&qj.narrow(0, off, nb)?, &kb)?);
                off += nb;
            }
            masks.push(if parts.len() == 1 { parts.pop().unwrap() } else { Tensor::concat(&parts, 0)? });
        }
        Ok(masks)
    }

    /// Concatenated head outputs `o_ij = Σ_l m_ijl·V_jl`, `[N×D]`.
    pub fn head_outputs(k: &Knowledge) -> Result<Tensor> {
        let mut heads = Vec::with_capacity(k.heads());
        for (m, v) in k.masks.iter().zip(&k.values) {
            let mut parts = Vec::new();
            let mut off = 0;
            for (b, &nb) in k.counts.iter().enumerate() {
                if nb == 0 {
                    continue;
                }
                let vb = v.narrow(0, b * k.cells, k.cells)?;
                parts.push(m.narrow(0, off, nb)?.matmul(&vb)?);
                off += nb;
            }
            heads.push(if parts.len() == 1 { parts.pop().unwrap() } else { Tensor::concat(&parts, 0)? });
        }
        Ok(if heads.len() == 1 { heads.pop().unwrap() } else { Tensor::concat(&heads, 1)? })
    }

    /// `u = q + OutProj(o)`, `g = norm(u + FFN(norm(u)))`.
    pub fn aggregate(&self, k: &Knowledge, queries: &Tensor) -> Result<Tensor> {
        let o = self.out_proj.forward(&Self::head_outputs(k)?)?;
        let u = queries.add(&o)?;
        let h = self.ffn[1].forward(&self.ffn[0].forward(&u.layernorm_pf()?)?.relu())?;
        Ok(u.add(&h)?.layernorm_pf()?)
    }

    pub fn decode_knowledge(
        &self,
        flat: &FlatPyramid,
        queries: &Tensor,
        counts: &[usize],
        source: Source,
    ) -> Result<Knowledge> {
        if counts.len() != flat.batch() {
            return Err(Error::Data(format!("{} instance counts for batch of {}", counts.len(), flat.batch())));
        }
        let keys = self.compute_keys(flat)?;
        let masks = self.attention_masks(&keys, queries, counts, flat.len())?;
        let values = self.compute_values(flat, false)?;
        Ok(Knowledge { masks, values, counts: counts.to_vec(), cells: flat.len(), source })
    }
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut g = ParamGroup::new(GroupName::Decoder);
        let f_q = Mlp3::new(&mut g, "f_q", cfg.enc_width, cfg.dim, cfg.dim, rng)?;
        let layers = (0..cfg.depth)
            .map(|i| DecoderLayer::new(&mut g, &format!("layer{i}"), &cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, group: g, f_q, layers })
    }

    pub fn last_layer(&self) -> &DecoderLayer {
        self.layers.last().expect("decoder has at least one layer")
    }

    /// Full pass: encodings `[N×E]` grouped by image per `counts`. Each
    /// cascade layer queries with the previous layer's output.
    pub fn forward(&self, flat: &FlatPyramid, encodings: &Tensor, counts: &[usize]) -> Result<DecoderOutput> {
        let queries = self.f_q.forward(encodings)?;
        let mut q = queries.clone();
        let mut knowledge = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let k = layer.decode_knowledge(flat, &q, counts, Source::Teacher)?;
            q = layer.aggregate(&k, &q)?;
            knowledge.push(k);
        }
        Ok(DecoderOutput { queries, g: q, knowledge })
    }

    /// Student values through the last layer's projections.
    pub fn student_values(&self, flat: &FlatPyramid, frozen_weights: bool) -> Result<Vec<Tensor>> {
        self.last_layer().compute_values(flat, frozen_weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{flatten_pyramid, FeaturePyramid, Level};
    use crate::tensor::{finite_diff_check, GradCheckOptions};
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| r.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    /// Batch of `b` images, levels 4×4 and 2×2 (L = 20).
    fn flat(b: usize, dim: usize, r: &mut ChaCha8Rng) -> FlatPyramid {
        let p = FeaturePyramid {
            levels: vec![
                Level { stride: 8, feat: random(&[b, dim, 4, 4], r) },
                Level { stride: 16, feat: random(&[b, dim, 2, 2], r) },
            ],
        };
        flatten_pyramid(&p, 4, 10_000.0).unwrap()
    }

    fn cfg(heads: usize) -> DecoderConfig {
        DecoderConfig { dim: 8, heads, pe_width: 6, enc_width: 5, depth: 1 }
    }

    fn perturb_biases(g: &ParamGroup, r: &mut ChaCha8Rng) {
        for (name, t) in g.iter() {
            if name.ends_with(".bias") {
                t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.2..0.2));
            }
        }
    }

    #[test]
    fn rejects_bad_head_split() {
        assert!(Decoder::new(DecoderConfig { heads: 3, ..cfg(1) }, &mut rng(0)).is_err());
        assert!(Decoder::new(DecoderConfig { heads: 8, ..cfg(1) }, &mut rng(0)).is_err());
        assert!(Decoder::new(DecoderConfig { depth: 0, ..cfg(2) }, &mut rng(0)).is_err());
    }

    #[test]
    fn hand_computed_attention() {
        let k = Tensor::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]).unwrap();
        let q = Tensor::new(vec![2.0, -1.0], &[1, 2]).unwrap();
        let m = attend(&q, &k).unwrap().to_vec();
        let s = 2f64.sqrt();
        let logits = [2.0 / s, -1.0 / s, 1.0 / s];
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        for (got, l) in m.iter().zip(logits) {
            assert!((got - l.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_keys_give_uniform_masks() {
        let dec = Decoder::new(cfg(2), &mut rng(1)).unwrap();
        let layer = &dec.layers[0];
        let keys = vec![Tensor::full(&[20, 4], 0.3); 2];
        let q = random(&[3, 8], &mut rng(2));
        for m in layer.attention_masks(&keys, &q, &[3], 20).unwrap() {
            assert!(m.to_vec().iter().all(|&v| (v - 0.05).abs() < 1e-15));
        }
    }

    #[test]
    fn saturated_key_takes_all_mass() {
        let mut k = vec![0.0; 20 * 2];
        k[7 * 2] = 200.0;
        let k = Tensor::new(k, &[20, 2]).unwrap();
        let q = Tensor::new(vec![1.0, 0.0], &[1, 2]).unwrap();
        let m = attend(&q, &k).unwrap().to_vec();
        assert!((m[7] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn keys_without_positional_projection() {
        let mut r = rng(3);
        let dec = Decoder::new(cfg(2), &mut r).unwrap();
        let layer = &dec.layers[0];
        let f = flat(2, 8, &mut r);
        for t in layer.f_pe.params() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let keys = layer.compute_keys(&f).unwrap();
        let a = f.a.reshape(&[40, 8]).unwrap();
        for (k, fk) in keys.iter().zip(&layer.f_k) {
            assert_eq!(k.to_vec(), fk.forward(&a).unwrap().to_vec());
        }
        // Zero features leave purely positional keys, identical across images.
        let zero = FlatPyramid { a: Tensor::zeros(&[2, 20, 8]), ..f.clone() };
        let mut r2 = rng(3);
        let dec2 = Decoder::new(cfg(2), &mut r2).unwrap();
        let keys = dec2.layers[0].compute_keys(&zero).unwrap();
        let k = keys[0].to_vec();
        assert_eq!(&k[..80], &k[80..]);
    }

    #[test]
    fn values_identity_and_bias() {
        let mut r = rng(4);
        let dec = Decoder::new(DecoderConfig { heads: 1, ..cfg(1) }, &mut r).unwrap();
        let layer = &dec.layers[0];
        {
            let mut w = layer.f_v[0].weight.data_mut();
            w.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..8 {
                w[i * 8 + i] = 1.0;
            }
        }
        let f = flat(1, 8, &mut r);
        let v = layer.compute_values(&f, false).unwrap();
        assert_eq!(v[0].to_vec(), f.a.to_vec());
        layer.f_v[0].weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        layer.f_v[0].bias.data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let v = layer.compute_values(&f, false).unwrap()[0].to_vec();
        for row in v.chunks(8) {
            assert_eq!(row, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        }
        // Same features through the shared projection agree bit for bit.
        let same = FlatPyramid { a: Tensor::new(f.a.to_vec(), f.a.shape()).unwrap(), ..f.clone() };
        assert_eq!(
            layer.compute_values(&same, true).unwrap()[0].to_vec(),
            layer.compute_values(&f, false).unwrap()[0].to_vec()
        );
    }

    #[test]
    fn knowledge_shapes_and_permutation() {
        let mut r = rng(5);
        let dec = Decoder::new(cfg(4), &mut r).unwrap();
        let f = flat(2, 8, &mut r);
        let enc = random(&[5, 5], &mut r);
        let out = dec.forward(&f, &enc, &[3, 2]).unwrap();
        let k = out.last();
        assert_eq!(k.heads(), 4);
        for m in &k.masks {
            assert_eq!(m.shape(), &[5, 20]);
        }
        assert_eq!(out.g.shape(), &[5, 8]);
        assert_eq!(k.image_of(), vec![0, 0, 0, 1, 1]);

        // Swap the first two instances of image 0.
        let e = enc.to_vec();
        let mut swapped = e.clone();
        swapped[..5].copy_from_slice(&e[5..10]);
        swapped[5..10].copy_from_slice(&e[..5]);
        let out2 = dec.forward(&f, &Tensor::new(swapped, &[5, 5]).unwrap(), &[3, 2]).unwrap();
        for j in 0..4 {
            assert_eq!(k.mask(0, j), out2.last().mask(1, j));
            assert_eq!(k.mask(1, j), out2.last().mask(0, j));
            assert_eq!(k.mask(4, j), out2.last().mask(4, j));
        }
        // Repeated evaluation is bit-identical.
        let again = dec.forward(&f, &enc, &[3, 2]).unwrap();
        for j in 0..4 {
            assert_eq!(k.masks[j].to_vec(), again.last().masks[j].to_vec());
        }
    }

    #[test]
    fn masks_are_probability_vectors() {
        let mut r = rng(6);
        for heads in [1, 2, 4] {
            let dec = Decoder::new(cfg(heads), &mut r).unwrap();
            let f = flat(3, 8, &mut r);
            let out = dec.forward(&f, &random(&[6, 5], &mut r), &[2, 0, 4]).unwrap();
            for m in &out.last().masks {
                for row in m.to_vec().chunks(20) {
                    assert!(row.iter().all(|&v| v >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn one_hot_mask_selects_value_row() {
        let mut r = rng(7);
        let values = vec![random(&[20, 4], &mut r), random(&[20, 4], &mut r)];
        let mut m0 = vec![0.0; 20];
        m0[13] = 1.0;
        let mut m1 = vec![0.0; 20];
        m1[2] = 1.0;
        let k = Knowledge {
            masks: vec![Tensor::new(m0, &[1, 20]).unwrap(), Tensor::new(m1, &[1, 20]).unwrap()],
            values: values.clone(),
            counts: vec![1],
            cells: 20,
            source: Source::Teacher,
        };
        let o = DecoderLayer::head_outputs(&k).unwrap().to_vec();
        assert_eq!(&o[..4], &values[0].to_vec()[13 * 4..14 * 4]);
        assert_eq!(&o[4..], &values[1].to_vec()[2 * 4..3 * 4]);
    }

    #[test]
    fn residual_path_survives_zero_projections() {
        let mut r = rng(8);
        let dec = Decoder::new(cfg(2), &mut r).unwrap();
        let layer = &dec.layers[0];
        for t in layer.out_proj.params().into_iter().chain(layer.ffn.iter().flat_map(Linear::params)) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let f = flat(1, 8, &mut r);
        let q = random(&[3, 8], &mut r);
        let k = layer.decode_knowledge(&f, &q, &[3], Source::Teacher).unwrap();
        let g = layer.aggregate(&k, &q).unwrap().to_vec();
        let expect = q.layernorm_pf().unwrap().to_vec();
        for (a, b) in g.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroing_one_head_changes_only_its_block() {
        let mut r = rng(9);
        let dec = Decoder::new(cfg(4), &mut r).unwrap();
        perturb_biases(&dec.group, &mut r);
        let layer = &dec.layers[0];
        let f = flat(2, 8, &mut r);
        let q = random(&[4, 8], &mut r);
        let before = DecoderLayer::head_outputs(&layer.decode_knowledge(&f, &q, &[1, 3], Source::Teacher).unwrap())
            .unwrap()
            .to_vec();
        for lin in [&layer.f_q[2], &layer.f_k[2], &layer.f_v[2]] {
            lin.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let after = DecoderLayer::head_outputs(&layer.decode_knowledge(&f, &q, &[1, 3], Source::Teacher).unwrap())
            .unwrap()
            .to_vec();
        for (idx, (a, b)) in before.iter().zip(&after).enumerate() {
            let head = (idx % 8) / 2;
            if head == 2 {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn convex_combination_bounds() {
        let mut r = rng(10);
        let dec = Decoder::new(cfg(2), &mut r).unwrap();
        perturb_biases(&dec.group, &mut r);
        let f = flat(1, 8, &mut r);
        let out = dec.forward(&f, &random(&[4, 5], &mut r), &[4]).unwrap();
        let k = out.last();
        let o = DecoderLayer::head_outputs(k).unwrap().to_vec();
        for (j, v) in k.values.iter().enumerate() {
            let v = v.to_vec();
            for c in 0..4 {
                let col: Vec<f64> = v.chunks(4).map(|row| row[c]).collect();
                let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)));
                for i in 0..4 {
                    let x = o[i * 8 + j * 4 + c];
                    assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn keys_gradcheck() {
        let mut r = rng(11);
        let dec = Decoder::new(cfg(2), &mut r).unwrap();
        perturb_biases(&dec.group, &mut r);
        let layer = &dec.layers[0];
        let f = flat(2, 8, &mut r);
        let params: Vec<_> =
            dec.group.named().into_iter().filter(|(n, _)| n.contains("f_k") || n.contains("f_pe")).collect();
        let report = finite_diff_check(
            || -> Result<Tensor> {
                let mut acc = Tensor::scalar(0.0);
                for k in layer.compute_keys(&f)? {
                    acc = acc.add(&k.sigmoid().sum())?;
                }
                Ok(acc)
            },
            &params,
            &GradCheckOptions { tol: 1e-5, ..Default::default() },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn full_decoder_gradcheck() {
        for depth in [1, 2] {
            let mut r = rng(12 + depth as u64);
            let dec = Decoder::new(DecoderConfig { depth, ..cfg(2) }, &mut r).unwrap();
            perturb_biases(&dec.group, &mut r);
            let f = flat(2, 8, &mut r);
            let a = f.a.detach();
            a.set_requires_grad(true);
            let f = FlatPyramid { a: a.clone(), ..f };
            let enc = random(&[3, 5], &mut r);
            let target = random(&[3, 8], &mut r);
            let mut params = dec.group.named();
            params.push(("A".into(), a));
            let report = finite_diff_check(
                || -> Result<Tensor> {
                    let out = dec.forward(&f, &enc, &[2, 1])?;
                    Ok(out.g.sub(&target)?.square().sum())
                },
                &params,
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed(), "depth {depth}: {report:?}");
        }
    }

    proptest! {
        #[test]
        fn temperature_scaling_keeps_normalisation(seed in 0u64..500, t in 0.01f64..100.0) {
            let mut r = rng(seed);
            let q = random(&[3, 4], &mut r).scale(t);
            let k = random(&[20, 4], &mut r);
            let m = attend(&q, &k).unwrap().to_vec();
            for row in m.chunks(20) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
