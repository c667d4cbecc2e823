//! Parameterised layers and fixed embeddings.

use rand::Rng;

use crate::params::ParamGroup;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Kaiming-uniform (ReLU gain) initialisation over `fan_in`.
fn kaiming_uniform<R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Affine map `x·Wᵀ + b` over the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        group: &mut ParamGroup,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = Tensor::new(kaiming_uniform(out_dim * in_dim, in_dim, rng), &[out_dim, in_dim])?;
        let bias = Tensor::zeros(&[out_dim]);
        group.register(format!("{name}.weight"), &weight)?;
        group.register(format!("{name}.bias"), &bias)?;
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, &self.weight, &self.bias)
    }

    /// Same map with the weights treated as constants: gradients reach `x`
    /// but never the layer.
    pub fn forward_frozen(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, &self.weight.detach(), &self.bias.detach())
    }

    fn apply(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let in_dim = self.in_dim();
        let shape = x.shape().to_vec();
        if shape.last() != Some(&in_dim) {
            return Err(Error::Tensor(crate::tensor::TensorError::Shape {
                op: "linear",
                lhs: shape,
                rhs: self.weight.shape().to_vec(),
            }));
        }
        let rows = x.numel() / in_dim;
        let y = x.reshape(&[rows, in_dim])?.matmul(&w.t()?)?.add_bias(b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(&out_shape)?)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Three linear layers with ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp3 {
    pub layers: [Linear; 3],
}

impl Mlp3 {
    pub fn new<R: Rng + ?Sized>(
        group: &mut ParamGroup,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            layers: [
                Linear::new(group, &format!("{name}.0"), in_dim, hidden, rng)?,
                Linear::new(group, &format!("{name}.1"), hidden, hidden, rng)?,
                Linear::new(group, &format!("{name}.2"), hidden, out_dim, rng)?,
            ],
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.layers[0].forward(x)?.relu();
        let h = self.layers[1].forward(&h)?.relu();
        self.layers[2].forward(&h)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Square-kernel convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        group: &mut ParamGroup,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = Tensor::new(kaiming_uniform(out_ch * fan_in, fan_in, rng), &[out_ch, in_ch, kernel, kernel])?;
        let bias = Tensor::zeros(&[out_ch]);
        group.register(format!("{name}.weight"), &weight)?;
        group.register(format!("{name}.bias"), &bias)?;
        Ok(Self { weight, bias, stride, pad })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(&self.weight, Some(&self.bias), self.stride, self.pad)?)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Fixed sine/cosine encoding of a scalar `u`: entries `2k` and `2k+1` are
/// `sin(u·s_k)` and `cos(u·s_k)` with `s_k = temperature^(-2k/dim)`.
pub fn sine_pos_embed(u: f64, dim: usize, temperature: f64) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("positional embedding width must be even and positive, got {dim}")));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let s = temperature.powf(-(2.0 * k as f64) / dim as f64);
        out.push((u * s).sin());
        out.push((u * s).cos());
    }
    Ok(out)
}

pub fn one_hot(index: usize, count: usize) -> Result<Vec<f64>> {
    if index >= count {
        return Err(Error::Index { index, count });
    }
    let mut v = vec![0.0; count];
    v[index] = 1.0;
    Ok(v)
}
