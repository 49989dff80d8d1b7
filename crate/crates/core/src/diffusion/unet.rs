use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::features::TOKEN_DIM;
use crate::nn::{Conv2d, CrossAttention, FeedForward, GroupNorm, Init, LayerNorm, Linear, Vb};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Eff,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "eff" => Ok(Self::Eff),
            other => Err(Error::config(format!("unknown U-Net variant `{other}`"))),
        }
    }
}

const FULL_BASE: usize = 64;
const FULL_HEAD_DIM: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Level indices (0 = finest) that carry attention.
    pub attn_levels: Vec<usize>,
    pub head_dim: usize,
    pub token_dim: usize,
    pub variant: Variant,
    pub in_channels: usize,
    pub groups: usize,
}

impl UNetConfig {
    pub fn full() -> Self {
        Self {
            base_channels: FULL_BASE,
            channel_mults: vec![1, 2, 4],
            attn_levels: vec![1, 2],
            head_dim: FULL_HEAD_DIM,
            token_dim: TOKEN_DIM,
            variant: Variant::Full,
            in_channels: 4,
            groups: 8,
        }
    }

    /// Base channels and head dimension halved.
    pub fn eff() -> Self {
        Self {
            base_channels: FULL_BASE / 2,
            head_dim: FULL_HEAD_DIM / 2,
            variant: Variant::Eff,
            ..Self::full()
        }
    }

    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::Full => Self::full(),
            Variant::Eff => Self::eff(),
        }
    }

    /// Small network for gradient checks and fast unit tests.
    pub fn micro(token_dim: usize) -> Self {
        Self {
            base_channels: 8,
            channel_mults: vec![1, 2],
            attn_levels: vec![1],
            head_dim: 8,
            token_dim,
            variant: Variant::Full,
            in_channels: 4,
            groups: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            return Err(Error::config("U-Net needs at least one level"));
        }
        if self.attn_levels.iter().any(|l| *l >= self.channel_mults.len()) {
            return Err(Error::config("attention level beyond the U-Net depth"));
        }
        for m in &self.channel_mults {
            let c = self.base_channels * m;
            if c % self.groups != 0 || c % self.head_dim != 0 {
                return Err(Error::config(format!(
                    "{c} channels incompatible with {} groups / head dim {}",
                    self.groups, self.head_dim
                )));
            }
        }
        Ok(())
    }

    pub fn downsample(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(vb: Vb, cin: usize, cout: usize, temb_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(vb.pp("norm1"), cin, groups)?,
            conv1: Conv2d::new(vb.pp("conv1"), cin, cout, 3, 1, 1)?,
            temb: Linear::new(vb.pp("temb"), temb_dim, cout, true)?,
            norm2: GroupNorm::new(vb.pp("norm2"), cout, groups)?,
            conv2: Conv2d::new(vb.pp("conv2"), cout, cout, 3, 1, 1)?,
            skip: if cin != cout { Some(Conv2d::new(vb.pp("skip"), cin, cout, 1, 1, 0)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(&temb.silu()?)?;
        let (b, c) = t.dims2()?;
        let h = h.broadcast_add(&t.reshape((b, c, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        match &self.skip {
            Some(s) => s.forward(x)? + h,
            None => x + h,
        }
    }
}

/// Self-attention, cross-attention to the conditioning tokens, and a
/// feed-forward layer over the flattened spatial grid.
struct SpatialTransformer {
    norm: GroupNorm,
    proj_in: Linear,
    ln1: LayerNorm,
    attn1: CrossAttention,
    ln2: LayerNorm,
    attn2: CrossAttention,
    ln3: LayerNorm,
    ff: FeedForward,
    proj_out: Linear,
}

impl SpatialTransformer {
    fn new(vb: Vb, ch: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(vb.pp("norm"), ch, cfg.groups)?,
            proj_in: Linear::new(vb.pp("proj_in"), ch, ch, true)?,
            ln1: LayerNorm::new(vb.pp("ln1"), ch)?,
            attn1: CrossAttention::new(vb.pp("attn1"), ch, ch, cfg.head_dim)?,
            ln2: LayerNorm::new(vb.pp("ln2"), ch)?,
            attn2: CrossAttention::new(vb.pp("attn2"), ch, cfg.token_dim, cfg.head_dim)?,
            ln3: LayerNorm::new(vb.pp("ln3"), ch)?,
            ff: FeedForward::new(vb.pp("ff"), ch, ch * 2)?,
            proj_out: Linear::new(vb.pp("proj_out"), ch, ch, true)?,
        })
    }

    fn forward(&self, x: &Tensor, context: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let t = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let t = self.proj_in.forward(&t)?;
        let n = self.ln1.forward(&t)?;
        let t = (&t + self.attn1.forward(&n, &n)?)?;
        let t = (&t + self.attn2.forward(&self.ln2.forward(&t)?, context)?)?;
        let t = (&t + self.ff.forward(&self.ln3.forward(&t)?)?)?;
        let t = self.proj_out.forward(&t)?;
        let t = t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        x + t
    }
}

struct Level {
    res: ResBlock,
    attn: Option<SpatialTransformer>,
}

impl Level {
    fn forward(&self, x: &Tensor, temb: &Tensor, ctx: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.res.forward(x, temb)?;
        match &self.attn {
            Some(a) => a.forward(&h, ctx),
            None => Ok(h),
        }
    }
}

/// ε-predicting U-Net with cross-attention conditioning.
pub struct UNet {
    cfg: UNetConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: SpatialTransformer,
    mid2: ResBlock,
    up: Vec<Level>,
    upsample: Vec<Conv2d>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(vb: Vb, cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let base = cfg.base_channels;
        let temb = base * 4;
        let chans: Vec<usize> = cfg.channel_mults.iter().map(|m| base * m).collect();
        let n = chans.len();
        let time1 = Linear::new(vb.pp("time1"), base, temb, true)?;
        let time2 = Linear::new(vb.pp("time2"), temb, temb, true)?;
        let conv_in = Conv2d::new(vb.pp("conv_in"), cfg.in_channels, base, 3, 1, 1)?;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = base;
        for (i, &c) in chans.iter().enumerate() {
            let v = vb.pp(format!("down{i}"));
            down.push(Level {
                res: ResBlock::new(v.pp("res"), prev, c, temb, cfg.groups)?,
                attn: if cfg.attn_levels.contains(&i) {
                    Some(SpatialTransformer::new(v.pp("attn"), c, cfg)?)
                } else {
                    None
                },
            });
            if i + 1 < n {
                downsample.push(Conv2d::new(v.pp("downsample"), c, c, 3, 2, 1)?);
            }
            prev = c;
        }
        let mid1 = ResBlock::new(vb.pp("mid.res1"), prev, prev, temb, cfg.groups)?;
        let mid_attn = SpatialTransformer::new(vb.pp("mid.attn"), prev, cfg)?;
        let mid2 = ResBlock::new(vb.pp("mid.res2"), prev, prev, temb, cfg.groups)?;
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for i in (0..n).rev() {
            let v = vb.pp(format!("up{i}"));
            let c = chans[i];
            up.push(Level {
                res: ResBlock::new(v.pp("res"), prev + c, c, temb, cfg.groups)?,
                attn: if cfg.attn_levels.contains(&i) {
                    Some(SpatialTransformer::new(v.pp("attn"), c, cfg)?)
                } else {
                    None
                },
            });
            if i > 0 {
                upsample.push(Conv2d::new(v.pp("upsample"), c, c, 3, 1, 1)?);
            }
            prev = c;
        }
        let out_norm = GroupNorm::new(vb.pp("out_norm"), base, cfg.groups)?;
        let conv_out = Conv2d::new_with_init(vb.pp("conv_out"), base, cfg.in_channels, 3, 1, 1, Init::Zeros)?;
        Ok(Self {
            cfg: cfg.clone(),
            time1,
            time2,
            conv_in,
            down,
            downsample,
            mid1,
            mid_attn,
            mid2,
            up,
            upsample,
            out_norm,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// `x_t: (B, C, h, w)`, one timestep per element, `context: (B, M, D)`.
    pub fn forward(&self, x: &Tensor, ts: &[usize], context: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!("U-Net expects {} channels, got {c}", self.cfg.in_channels)));
        }
        let f = self.cfg.downsample();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("latent {h}x{w} not divisible by {f}")));
        }
        if ts.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch of {b}", ts.len())));
        }
        let (cb, _, cd) = context.dims3()?;
        if cb != b || cd != self.cfg.token_dim {
            return Err(Error::Shape(format!(
                "context {:?} does not match batch {b} / token dim {}",
                context.dims(),
                self.cfg.token_dim
            )));
        }
        let temb = timestep_embedding(ts, self.cfg.base_channels, x.dtype())?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;
        let mut hcur = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, lvl) in self.down.iter().enumerate() {
            hcur = lvl.forward(&hcur, &temb, context)?;
            skips.push(hcur.clone());
            if let Some(d) = self.downsample.get(i) {
                hcur = d.forward(&hcur)?;
            }
        }
        hcur = self.mid1.forward(&hcur, &temb)?;
        hcur = self.mid_attn.forward(&hcur, context)?;
        hcur = self.mid2.forward(&hcur, &temb)?;
        for (i, lvl) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            hcur = lvl.forward(&Tensor::cat(&[&hcur, &skip], 1)?, &temb, context)?;
            if let Some(u) = self.upsample.get(i) {
                hcur = u.forward(&crate::nn::upsample_nearest2x(&hcur)?)?;
            }
        }
        Ok(self.conv_out.forward(&self.out_norm.forward(&hcur)?.silu()?)?)
    }
}

/// Attention projections plus the first convolution of every residual block.
pub fn unet_lora_suffixes() -> &'static [&'static str] {
    &["to_q", "to_k", "to_v", "to_out", "conv1"]
}
