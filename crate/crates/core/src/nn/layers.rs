use candle_core::{Module, Tensor, D};

use super::{conv2d_bias, Init, Vb};
use crate::sr::lora::LoraAdapter;
use crate::Result;

/// Numerically stable softmax over the last axis, composed from primitives
/// so it is differentiable.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let xc = x.broadcast_sub(&max)?;
    let lse = xc.exp()?.sum_keepdim(D::Minus1)?.log()?;
    xc.broadcast_sub(&lse)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    xc.broadcast_div(&(var + eps)?.sqrt()?)?
        .broadcast_mul(gamma)?
        .broadcast_add(beta)
}

pub fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let g = x.reshape((b, groups, (c / groups) * h * w))?;
    let mean = g.mean_keepdim(D::Minus1)?;
    let gc = g.broadcast_sub(&mean)?;
    let var = gc.sqr()?.mean_keepdim(D::Minus1)?;
    gc.broadcast_div(&(var + eps)?.sqrt()?)?
        .reshape((b, c, h * w))?
        .broadcast_mul(&gamma.reshape((1, c, 1))?)?
        .broadcast_add(&beta.reshape((1, c, 1))?)?
        .reshape((b, c, h, w))
}

/// Scaled dot-product attention over `(B, heads, N, d)` tensors.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> candle_core::Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (d as f64).sqrt()))?;
    softmax_last(&scores)?.matmul(v)
}

fn effective_weight(weight: &Tensor, adapter: &Option<LoraAdapter>) -> candle_core::Result<Tensor> {
    match adapter {
        None => Ok(weight.clone()),
        Some(a) => weight + a.delta()?.reshape(weight.shape())?,
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    adapter: Option<LoraAdapter>,
}

impl Linear {
    pub fn new(vb: Vb, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = vb.get(&[out_dim, in_dim], "weight", Init::FanIn(in_dim))?;
        let bias = if bias {
            Some(vb.get(&[out_dim], "bias", Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias, adapter: vb.adapter() })
    }

    pub fn new_with_init(vb: Vb, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = vb.get(&[out_dim, in_dim], "weight", init)?;
        let bias = if bias {
            Some(vb.get(&[out_dim], "bias", Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias, adapter: vb.adapter() })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let w = effective_weight(&self.weight, &self.adapter)?;
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("linear input has rank >= 1");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let mut y = x.reshape((rows, in_dim))?.matmul(&w.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank >= 1") = w.dim(0)?;
        y.reshape(out_dims)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
    adapter: Option<LoraAdapter>,
}

impl Conv2d {
    pub fn new(vb: Vb, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        Self::new_with_init(vb, in_ch, out_ch, kernel, stride, pad, Init::FanIn(in_ch * kernel * kernel))
    }

    pub fn new_with_init(
        vb: Vb,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = vb.get(&[out_ch, in_ch, kernel, kernel], "weight", init)?;
        let bias = Some(vb.get(&[out_ch], "bias", Init::Zeros)?);
        Ok(Self { weight, bias, stride, pad, adapter: vb.adapter() })
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let w = effective_weight(&self.weight, &self.adapter)?;
        conv2d_bias(x, &w, self.bias.as_ref(), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(vb: Vb, channels: usize, groups: usize) -> Result<Self> {
        let groups = groups.min(channels).max(1);
        debug_assert_eq!(channels % groups, 0);
        Ok(Self {
            gamma: vb.get(&[channels], "weight", Init::Ones)?,
            beta: vb.get(&[channels], "bias", Init::Zeros)?,
            groups,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        group_norm(x, self.groups, &self.gamma, &self.beta, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(vb: Vb, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: vb.get(&[dim], "weight", Init::Ones)?,
            beta: vb.get(&[dim], "bias", Init::Zeros)?,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, 1e-5)
    }
}

/// Multi-head attention with queries from `x: (B, N, dim)` and keys/values
/// from `context: (B, M, context_dim)`. Self-attention passes `x` twice.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new(vb: Vb, dim: usize, context_dim: usize, head_dim: usize) -> Result<Self> {
        let heads = (dim / head_dim).max(1);
        let inner = heads * head_dim;
        Ok(Self {
            to_q: Linear::new(vb.pp("to_q"), dim, inner, false)?,
            to_k: Linear::new(vb.pp("to_k"), context_dim, inner, false)?,
            to_v: Linear::new(vb.pp("to_v"), context_dim, inner, false)?,
            to_out: Linear::new(vb.pp("to_out"), inner, dim, true)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        x.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor) -> candle_core::Result<Tensor> {
        let q = self.split_heads(&self.to_q.forward(x)?)?;
        let k = self.split_heads(&self.to_k.forward(context)?)?;
        let v = self.split_heads(&self.to_v.forward(context)?)?;
        let (b, h, n, d) = q.dims4()?;
        let o = attention(&q, &k, &v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, h * d))?;
        self.to_out.forward(&o)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(vb: Vb, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(vb.pp("fc1"), dim, hidden, true)?,
            fc2: Linear::new(vb.pp("fc2"), hidden, dim, true)?,
        })
    }
}

impl Module for FeedForward {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}
