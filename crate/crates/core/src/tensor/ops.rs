// Differentiable operations. Backward closures read parent values at
// backward time, so leaves must not be mutated between forward and backward.

use super::kernels::{self, ConvGeom};
use super::{numel, Result, Tensor, TensorError};

const LAYERNORM_EPS: f64 = 1e-5;

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tensor {
    fn map_unary(&self, op: &'static str, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let x = self.to_vec();
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        if !self.requires_grad() {
            return Tensor::from_op(y, self.shape().to_vec(), op, &[], |_, _| vec![]);
        }
        let saved_y = y.clone();
        Tensor::from_op(y, self.shape().to_vec(), op, &[self], move |g, _| {
            let dx = g.iter().zip(x.iter().zip(&saved_y)).map(|(g, (&x, &y))| g * df(x, y)).collect();
            vec![Some(dx)]
        })
    }

    pub fn relu(&self) -> Tensor {
        self.map_unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map_unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Tensor {
        self.map_unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.map_unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&self) -> Tensor {
        self.map_unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Tensor {
        self.map_unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map_unary("clamp", move |x| x.clamp(lo, hi), move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map_unary("scale", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map_unary("add_scalar", move |x| x + s, |_, _| 1.0)
    }

    fn zip_same(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self, other));
        }
        let a = self.data();
        let b = other.data();
        Ok(a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let y = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(Tensor::from_op(y, self.shape().to_vec(), "add", &[self, other], |g, p| {
            p.iter().map(|t| t.requires_grad().then(|| g.to_vec())).collect()
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let y = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(Tensor::from_op(y, self.shape().to_vec(), "sub", &[self, other], |g, p| {
            vec![p[0].requires_grad().then(|| g.to_vec()), p[1].requires_grad().then(|| g.iter().map(|v| -v).collect())]
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let y = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(Tensor::from_op(y, self.shape().to_vec(), "mul", &[self, other], |g, p| {
            let a = p[0].data();
            let b = p[1].data();
            vec![
                p[0].requires_grad().then(|| g.iter().zip(b.iter()).map(|(g, b)| g * b).collect()),
                p[1].requires_grad().then(|| g.iter().zip(a.iter()).map(|(g, a)| g * a).collect()),
            ]
        }))
    }

    /// Adds `bias[n]` to every row of a `[..., n]` tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| shape_err("add_bias", self, bias))?;
        if bias.shape() != [n] {
            return Err(shape_err("add_bias", self, bias));
        }
        let b = bias.data();
        let y: Vec<f64> = self.data().iter().enumerate().map(|(i, x)| x + b[i % n]).collect();
        drop(b);
        Ok(Tensor::from_op(y, self.shape().to_vec(), "add_bias", &[self, bias], move |g, p| {
            let db = p[1].requires_grad().then(|| {
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                db
            });
            vec![p[0].requires_grad().then(|| g.to_vec()), db]
        }))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(shape_err("matmul", self, other));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let mut y = vec![0.0; m * n];
        kernels::mm_acc(&self.data(), &other.data(), &mut y, m, k, n);
        Ok(Tensor::from_op(y, vec![m, n], "matmul", &[self, other], move |g, p| {
            let da = p[0].requires_grad().then(|| {
                let mut da = vec![0.0; m * k];
                kernels::mm_nt_acc(g, &p[1].data(), &mut da, m, n, k);
                da
            });
            let db = p[1].requires_grad().then(|| {
                let mut db = vec![0.0; k * n];
                kernels::mm_tn_acc(&p[0].data(), g, &mut db, k, m, n);
                db
            });
            vec![da, db]
        }))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(invalid("t", format!("expected 2-D, got {:?}", self.shape())));
        }
        self.permute(&[1, 0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(TensorError::Shape { op: "reshape", lhs: self.shape().to_vec(), rhs: shape.to_vec() });
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), "reshape", &[self], |g, _| vec![Some(g.to_vec())]))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("bad axes {axes:?} for shape {:?}", self.shape())));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let mut in_strides = vec![1usize; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        // For each output element, the flat input offset it reads.
        let total = self.numel();
        let mut src = Vec::with_capacity(total);
        let mut idx = vec![0usize; nd];
        for _ in 0..total {
            src.push(idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum::<usize>());
            for d in (0..nd).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let x = self.data();
        let y: Vec<f64> = src.iter().map(|&s| x[s]).collect();
        drop(x);
        Ok(Tensor::from_op(y, out_shape, "permute", &[self], move |g, _| {
            let mut dx = vec![0.0; total];
            for (gv, &s) in g.iter().zip(&src) {
                dx[s] += gv;
            }
            vec![Some(dx)]
        }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(TensorError::Axis { op: "narrow", axis, shape: self.shape().to_vec() });
        }
        let (outer, ext, inner) = split_axis(self.shape(), axis);
        if len == 0 || start + len > ext {
            return Err(invalid("narrow", format!("range {start}+{len} exceeds extent {ext}")));
        }
        let x = self.data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            y.extend_from_slice(&x[base..base + len * inner]);
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = self.numel();
        Ok(Tensor::from_op(y, shape, "narrow", &[self], move |g, _| {
            let mut dx = vec![0.0; total];
            for o in 0..outer {
                let base = o * ext * inner + start * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        if axis >= first.ndim() {
            return Err(TensorError::Axis { op: "concat", axis, shape: first.shape().to_vec() });
        }
        for p in &parts[1..] {
            let ok = p.ndim() == first.ndim()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", first, p));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let exts: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_ext: usize = exts.iter().sum();
        let mut y = Vec::with_capacity(outer * total_ext * inner);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (d, &e) in datas.iter().zip(&exts) {
                y.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        drop(datas);
        let mut shape = first.shape().to_vec();
        shape[axis] = total_ext;
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::from_op(y, shape, "concat", &refs, move |g, p| {
            let mut out: Vec<Option<Vec<f64>>> = p
                .iter()
                .zip(&exts)
                .map(|(t, &e)| t.requires_grad().then(|| Vec::with_capacity(outer * e * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (slot, &e) in out.iter_mut().zip(&exts) {
                    if let Some(v) = slot {
                        v.extend_from_slice(&g[off..off + e * inner]);
                    }
                    off += e * inner;
                }
            }
            out
        }))
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![], "sum", &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op(vec![s], vec![], "mean", &[self], move |g, _| vec![Some(vec![g[0] / n as f64; n])])
    }

    /// Mean over the last axis; drops that axis.
    pub fn mean_last(&self) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| invalid("mean_last", "scalar input"))?;
        let y: Vec<f64> = self.data().chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let shape = self.shape()[..self.ndim() - 1].to_vec();
        Ok(Tensor::from_op(y, shape, "mean_last", &[self], move |g, _| {
            let dx = g.iter().flat_map(|&v| std::iter::repeat_n(v / n as f64, n)).collect();
            vec![Some(dx)]
        }))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| invalid("softmax", "scalar input"))?;
        let mut y = self.to_vec();
        for row in y.chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let saved = y.clone();
        Ok(Tensor::from_op(y, self.shape().to_vec(), "softmax", &[self], move |g, _| {
            let mut dx = vec![0.0; g.len()];
            for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(saved.chunks(n)) {
                let s = kernels::dot(gr, yr);
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - s);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Parameter-free layer norm over the last axis (population variance,
    /// epsilon 1e-5 inside the square root).
    pub fn layernorm_pf(&self) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| invalid("layernorm_pf", "scalar input"))?;
        if n < 2 {
            return Err(invalid("layernorm_pf", "normalised axis needs at least 2 entries"));
        }
        let mut y = self.to_vec();
        let mut inv_std = Vec::with_capacity(y.len() / n);
        for row in y.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let saved = y.clone();
        Ok(Tensor::from_op(y, self.shape().to_vec(), "layernorm_pf", &[self], move |g, _| {
            let mut dx = vec![0.0; g.len()];
            for (r, ((dr, gr), yr)) in dx.chunks_mut(n).zip(g.chunks(n)).zip(saved.chunks(n)).enumerate() {
                let mg = gr.iter().sum::<f64>() / n as f64;
                let mgy = kernels::dot(gr, yr) / n as f64;
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = inv_std[r] * (gv - mg - yv * mgy);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Elementwise binary cross-entropy on logits against constant targets:
    /// `max(x,0) - x·t + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&self, targets: &[f64]) -> Result<Tensor> {
        if targets.len() != self.numel() {
            return Err(invalid("bce_with_logits", format!("{} targets for shape {:?}", targets.len(), self.shape())));
        }
        let t = targets.to_vec();
        let y: Vec<f64> =
            self.data().iter().zip(&t).map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()).collect();
        Ok(Tensor::from_op(y, self.shape().to_vec(), "bce_with_logits", &[self], move |g, p| {
            let x = p[0].data();
            let dx = g.iter().zip(x.iter().zip(&t)).map(|(g, (&x, &t))| g * (sigmoid(x) - t)).collect();
            vec![Some(dx)]
        }))
    }

    /// 2-D convolution over `[B×C×H×W]` with weight `[O×C×kh×kw]` and
    /// optional bias `[O]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        if self.ndim() != 4 || weight.ndim() != 4 || self.shape()[1] != weight.shape()[1] {
            return Err(shape_err("conv2d", self, weight));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (o, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
        if let Some(bias) = bias {
            if bias.shape() != [o] {
                return Err(shape_err("conv2d", weight, bias));
            }
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err("conv2d", self, weight));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { c, h, w, kh, kw, stride, pad, ho, wo };
        let (r, pcols) = (geom.col_rows(), geom.col_cols());
        let keep_cols = weight.requires_grad();
        let x = self.data();
        let wd = weight.data();
        let mut y = vec![0.0; b * o * pcols];
        let mut cols_all = if keep_cols { vec![0.0; b * r * pcols] } else { Vec::new() };
        let mut cols = vec![0.0; r * pcols];
        for bi in 0..b {
            im2col(&x[bi * c * h * w..(bi + 1) * c * h * w], &geom, &mut cols);
            let yb = &mut y[bi * o * pcols..(bi + 1) * o * pcols];
            if let Some(bias) = bias {
                let bd = bias.data();
                for (oi, row) in yb.chunks_mut(pcols).enumerate() {
                    row.iter_mut().for_each(|v| *v = bd[oi]);
                }
            }
            kernels::mm_acc(&wd, &cols, yb, o, r, pcols);
            if keep_cols {
                cols_all[bi * r * pcols..(bi + 1) * r * pcols].copy_from_slice(&cols);
            }
        }
        drop(x);
        drop(wd);
        let mut parents = vec![self, weight];
        if let Some(bias) = bias {
            parents.push(bias);
        }
        Ok(Tensor::from_op(y, vec![b, o, ho, wo], "conv2d", &parents, move |g, p| {
            let dx = p[0].requires_grad().then(|| {
                let wd = p[1].data();
                let mut dx = vec![0.0; b * c * h * w];
                let mut dcols = vec![0.0; r * pcols];
                for bi in 0..b {
                    dcols.iter_mut().for_each(|v| *v = 0.0);
                    kernels::mm_tn_acc(&wd, &g[bi * o * pcols..(bi + 1) * o * pcols], &mut dcols, r, o, pcols);
                    kernels::col2im_acc(&dcols, &geom, &mut dx[bi * c * h * w..(bi + 1) * c * h * w]);
                }
                dx
            });
            let dw = p[1].requires_grad().then(|| {
                let mut dw = vec![0.0; o * r];
                for bi in 0..b {
                    kernels::mm_nt_acc(
                        &g[bi * o * pcols..(bi + 1) * o * pcols],
                        &cols_all[bi * r * pcols..(bi + 1) * r * pcols],
                        &mut dw,
                        o,
                        pcols,
                        r,
                    );
                }
                dw
            });
            let mut out = vec![dx, dw];
            if p.len() == 3 {
                out.push(p[2].requires_grad().then(|| {
                    let mut db = vec![0.0; o];
                    for bi in 0..b {
                        for (oi, row) in g[bi * o * pcols..(bi + 1) * o * pcols].chunks(pcols).enumerate() {
                            db[oi] += row.iter().sum::<f64>();
                        }
                    }
                    db
                }));
            }
            out
        }))
    }

    /// Nearest-neighbour 2× upsampling of `[B×C×H×W]`.
    pub fn upsample2x(&self) -> Result<Tensor> {
        if self.ndim() != 4 {
            return Err(invalid("upsample2x", format!("expected 4-D, got {:?}", self.shape())));
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let x = self.data();
        let mut y = vec![0.0; b * c * 4 * h * w];
        for plane in 0..b * c {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    y[(plane * 2 * h + yy) * 2 * w + xx] = x[(plane * h + yy / 2) * w + xx / 2];
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(y, vec![b, c, 2 * h, 2 * w], "upsample2x", &[self], move |g, _| {
            let mut dx = vec![0.0; b * c * h * w];
            for plane in 0..b * c {
                for yy in 0..2 * h {
                    for xx in 0..2 * w {
                        dx[(plane * h + yy / 2) * w + xx / 2] += g[(plane * 2 * h + yy) * 2 * w + xx];
                    }
                }
            }
            vec![Some(dx)]
        }))
    }
}

use kernels::im2col;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
