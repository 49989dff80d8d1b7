//! Variational latent autoencoder with spatial factor 8 and 4 latent
//! channels. Images enter as `[0,1]` and are mapped to `[-1,1]` internally.
//! Latents handed to the diffusion model are multiplied by a stored scale so
//! they have roughly unit variance.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint};
use crate::image::batch_to_tensor;
use crate::nn::{Conv2d, ParamStore, Vb};
use crate::sr::lora::LoraSet;
use crate::train::{self, CsvLog};
use crate::{Error, ImageBuffer, Result};

pub const LATENT_CHANNELS: usize = 4;
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub latent_channels: usize,
    pub down_factor: usize,
    pub channel_widths: Vec<usize>,
    pub kl_weight: f64,
    pub perceptual_weight: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            latent_channels: LATENT_CHANNELS,
            down_factor: 8,
            channel_widths: vec![32, 64, 128, 128],
            kl_weight: 1e-6,
            perceptual_weight: 0.1,
        }
    }
}

impl CodecConfig {
    /// Single-channel widths, for gradient checks.
    pub fn micro() -> Self {
        Self { channel_widths: vec![1, 1, 1, 1], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_widths.is_empty() {
            return Err(Error::config("codec needs at least one channel width"));
        }
        if self.down_factor != 1 << (self.channel_widths.len() - 1) {
            return Err(Error::config(format!(
                "down factor {} does not match {} levels",
                self.down_factor,
                self.channel_widths.len()
            )));
        }
        if self.latent_channels != LATENT_CHANNELS {
            return Err(Error::config(format!("latent channels must be {LATENT_CHANNELS}")));
        }
        Ok(())
    }
}

/// Mean and log-variance, each `(B, 4, H/8, W/8)`.
#[derive(Clone, Debug)]
pub struct LatentDistribution {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

impl LatentDistribution {
    /// `KL(q ‖ N(0, I))`, averaged over elements.
    pub fn kl(&self) -> Result<Tensor> {
        let var = self.log_variance.exp()?;
        let t = ((self.mean.sqr()? + var)? - 1.0)?.sub(&self.log_variance)?;
        Ok((t.mean_all()? * 0.5)?)
    }
}

/// `x + conv(silu(x))`.
struct Res {
    conv: Conv2d,
}

impl Res {
    fn new(vb: Vb, ch: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(vb.pp("conv"), ch, ch, 3, 1, 1)? })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x + self.conv.forward(&x.silu()?)?
    }
}

pub struct Encoder {
    conv_in: Conv2d,
    res: Vec<Res>,
    down: Vec<Conv2d>,
    conv_out: Conv2d,
    latent: usize,
}

impl Encoder {
    pub fn new(vb: Vb, cfg: &CodecConfig) -> Result<Self> {
        let w = &cfg.channel_widths;
        let conv_in = Conv2d::new(vb.pp("conv_in"), 3, w[0], 3, 1, 1)?;
        let mut res = Vec::new();
        let mut down = Vec::new();
        for i in 0..w.len() {
            res.push(Res::new(vb.pp(format!("res{i}")), w[i])?);
            if i + 1 < w.len() {
                down.push(Conv2d::new(vb.pp(format!("down{i}")), w[i], w[i + 1], 3, 2, 1)?);
            }
        }
        let conv_out = Conv2d::new(vb.pp("conv_out"), w[w.len() - 1], 2 * cfg.latent_channels, 3, 1, 1)?;
        Ok(Self { conv_in, res, down, conv_out, latent: cfg.latent_channels })
    }

    /// Unscaled distribution for `x` in `[0,1]`.
    pub fn forward(&self, x: &Tensor) -> Result<LatentDistribution> {
        let mut h = self.conv_in.forward(&((x * 2.0)? - 1.0)?)?;
        for (i, r) in self.res.iter().enumerate() {
            h = r.forward(&h)?;
            if let Some(d) = self.down.get(i) {
                h = d.forward(&h)?;
            }
        }
        let out = self.conv_out.forward(&h.silu()?)?;
        let mean = out.narrow(1, 0, self.latent)?;
        let log_variance = out
            .narrow(1, self.latent, self.latent)?
            .clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok(LatentDistribution { mean, log_variance })
    }
}

pub struct Decoder {
    conv_in: Conv2d,
    res: Vec<Res>,
    up: Vec<Conv2d>,
    conv_out: Conv2d,
}

impl Decoder {
    pub fn new(vb: Vb, cfg: &CodecConfig) -> Result<Self> {
        let w = &cfg.channel_widths;
        let n = w.len();
        let conv_in = Conv2d::new(vb.pp("conv_in"), cfg.latent_channels, w[n - 1], 3, 1, 1)?;
        let mut res = Vec::new();
        let mut up = Vec::new();
        for i in (0..n).rev() {
            res.push(Res::new(vb.pp(format!("res{i}")), w[i])?);
            if i > 0 {
                up.push(Conv2d::new(vb.pp(format!("up{i}")), w[i], w[i - 1], 3, 1, 1)?);
            }
        }
        let conv_out = Conv2d::new(vb.pp("conv_out"), w[0], 3, 3, 1, 1)?;
        Ok(Self { conv_in, res, up, conv_out })
    }

    /// Unscaled latent to an unclamped image in (about) `[0,1]`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(z)?;
        for (i, r) in self.res.iter().enumerate() {
            h = r.forward(&h)?;
            if let Some(u) = self.up.get(i) {
                h = u.forward(&crate::nn::upsample_nearest2x(&h)?)?;
            }
        }
        let out = self.conv_out.forward(&h.silu()?)?;
        Ok(((out + 1.0)? * 0.5)?)
    }
}

pub struct Codec {
    cfg: CodecConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    scale: f64,
}

impl Codec {
    pub fn new(cfg: CodecConfig, store: ParamStore, scale: f64) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(store.root().pp("enc"), &cfg)?;
        let decoder = Decoder::new(store.root().pp("dec"), &cfg)?;
        Ok(Self { cfg, store, encoder, decoder, scale })
    }

    pub fn init(cfg: CodecConfig, seed: u64, dtype: DType, trainable: bool) -> Result<Self> {
        Self::new(cfg, ParamStore::new(seed, dtype, trainable), 1.0)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn latent_scale(&self) -> f64 {
        self.scale
    }

    /// Encoder over the same frozen weights with `adapters` attached.
    pub fn adapted_encoder(&self, adapters: &LoraSet) -> Result<Encoder> {
        Encoder::new(self.store.root().pp("enc").with_adapters(Some(adapters)), &self.cfg)
    }

    /// Weight paths eligible for encoder adapters.
    pub fn encoder_targets(&self) -> Vec<String> {
        crate::sr::lora::select_targets(&self.store, "enc.", &[""])
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let f = self.cfg.down_factor;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::dim(format!("image {h}x{w} is not divisible by {f}")));
        }
        Ok(())
    }

    /// Unscaled distribution, the form the training objective sees.
    pub fn encode_raw(&self, x: &Tensor) -> Result<LatentDistribution> {
        let (_, _, h, w) = x.dims4()?;
        self.check_dims(h, w)?;
        self.encoder.forward(x)
    }

    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        if z.dim(1)? != self.cfg.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {} channels, expected {}",
                z.dim(1)?,
                self.cfg.latent_channels
            )));
        }
        self.decoder.forward(z)
    }

    /// Scaled distribution for a `(B, 3, H, W)` batch.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<LatentDistribution> {
        scale_dist(self.encode_raw(x)?, self.scale)
    }

    /// Scaled-latent mean through an adapted encoder.
    pub fn encode_with(&self, encoder: &Encoder, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.check_dims(h, w)?;
        Ok((encoder.forward(x)?.mean * self.scale)?)
    }

    /// Scaled latent to an unclamped image batch.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        self.decode_raw(&(z / self.scale)?)
    }

    pub fn encode(&self, img: &ImageBuffer) -> Result<LatentDistribution> {
        self.check_dims(img.height(), img.width())?;
        self.encode_tensor(&img.to_tensor(self.dtype(), self.store.device())?)
    }

    /// Decodes a scaled latent `(B, 4, h, w)` or `(4, h, w)`; values are
    /// clamped to `[0,1]`.
    pub fn decode(&self, z: &Tensor) -> Result<Vec<ImageBuffer>> {
        let z = if z.rank() == 3 { z.unsqueeze(0)? } else { z.clone() };
        let out = self.decode_tensor(&z.to_dtype(self.dtype())?)?.clamp(0.0, 1.0)?;
        ImageBuffer::from_tensor(&out)
    }

    pub fn reconstruct(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        let d = self.encode(img)?;
        Ok(self.decode(&d.mean)?.remove(0))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({ "config": self.cfg, "latent_scale": self.scale });
        save_checkpoint(&self.store.named_tensors(), path, &config_hash(&self.cfg)?, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let cfg: CodecConfig = ck.meta("config")?;
        let scale: f64 = ck.meta("latent_scale")?;
        Self::new(cfg, ParamStore::from_tensors(ck.tensors.clone(), dtype, false)?, scale)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?, DType::F32)
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.store.named_tensors()
    }
}

fn scale_dist(d: LatentDistribution, scale: f64) -> Result<LatentDistribution> {
    Ok(LatentDistribution {
        mean: (d.mean * scale)?,
        log_variance: (d.log_variance + 2.0 * scale.ln())?,
    })
}

/// `z = mean + exp(log_variance / 2) ⊙ n`, `n ~ N(0, I)` from `rng`.
pub fn reparameterize<R: Rng>(dist: &LatentDistribution, rng: &mut R) -> Result<Tensor> {
    let n = dist.mean.elem_count();
    let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let noise = Tensor::from_vec(noise, dist.mean.shape(), dist.mean.device())?.to_dtype(dist.mean.dtype())?;
    let std = (&dist.log_variance * 0.5)?.exp()?;
    Ok((&dist.mean + std.mul(&noise)?)?)
}

fn pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?.mean(5)?.mean(3)?)
}

/// Mean absolute difference of horizontal and vertical image gradients at
/// three dyadic scales.
pub fn gradient_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut total: Option<Tensor> = None;
    let mut levels = 0usize;
    for level in 0..3 {
        let (_, _, h, w) = a.dims4()?;
        if h < 2 || w < 2 {
            break;
        }
        let mut lvl = None;
        for (dim, len) in [(2usize, h), (3usize, w)] {
            let ga = (a.narrow(dim, 1, len - 1)? - a.narrow(dim, 0, len - 1)?)?;
            let gb = (b.narrow(dim, 1, len - 1)? - b.narrow(dim, 0, len - 1)?)?;
            let d = (ga - gb)?.abs()?.mean_all()?;
            lvl = Some(match lvl {
                Some(t) => (t + d)?,
                None => d,
            });
        }
        let lvl = lvl.expect("two directions");
        total = Some(match total {
            Some(t) => (t + lvl)?,
            None => lvl,
        });
        levels += 1;
        if level < 2 && h % 2 == 0 && w % 2 == 0 && h >= 4 && w >= 4 {
            a = pool2(&a)?;
            b = pool2(&b)?;
        } else {
            break;
        }
    }
    let total = total.ok_or_else(|| Error::dim("image too small for gradient distance"))?;
    Ok((total / (2 * levels) as f64)?)
}

pub struct CodecLoss {
    pub total: Tensor,
    pub l1: f64,
    pub kl: f64,
    pub perceptual: f64,
}

/// `L1 + kl_weight·KL + perceptual_weight·gradient_distance`.
pub fn codec_loss(img: &Tensor, recon: &Tensor, dist: &LatentDistribution, cfg: &CodecConfig) -> Result<CodecLoss> {
    if img.dims() != recon.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", img.dims(), recon.dims())));
    }
    let l1 = (img - recon)?.abs()?.mean_all()?;
    let mut total = l1.clone();
    let kl = dist.kl()?;
    if cfg.kl_weight != 0.0 {
        total = (total + (&kl * cfg.kl_weight)?)?;
    }
    let perc = gradient_distance(img, recon)?;
    if cfg.perceptual_weight != 0.0 {
        total = (total + (&perc * cfg.perceptual_weight)?)?;
    }
    Ok(CodecLoss { l1: train::scalar(&l1)?, kl: train::scalar(&kl)?, perceptual: train::scalar(&perc)?, total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Square crop size drawn from each patch; the codec is convolutional
    /// so it applies to any multiple of 8 afterwards.
    pub crop: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { steps: 500, batch: 8, crop: 64, lr: 1e-3, weight_decay: 0.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub losses: Vec<f64>,
    pub l1: Vec<f64>,
}

fn random_crops<R: Rng>(patches: &[ImageBuffer], n: usize, crop: usize, rng: &mut R) -> Result<Vec<ImageBuffer>> {
    (0..n)
        .map(|_| {
            let p = &patches[rng.gen_range(0..patches.len())];
            let (h, w) = p.dims();
            let c = crop.min(h).min(w);
            let y = rng.gen_range(0..=h - c);
            let x = rng.gen_range(0..=w - c);
            p.crop(y, x, c, c)
        })
        .collect()
}

/// Mean latent standard deviation over `patches`, used to set the scale.
fn latent_std(codec: &Codec, patches: &[ImageBuffer]) -> Result<f64> {
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for chunk in patches.chunks(16) {
        let x = batch_to_tensor(chunk, codec.dtype(), &Device::Cpu)?;
        let m: Vec<f32> = codec.encode_raw(&x)?.mean.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        for v in m {
            sum += v as f64;
            sq += (v as f64).powi(2);
            n += 1;
        }
    }
    let mean = sum / n as f64;
    Ok((sq / n as f64 - mean * mean).max(1e-12).sqrt())
}

/// Trains encoder and decoder from scratch, then fixes the latent scale to
/// `1/std` of the training latents.
pub fn train_codec(
    patches: &[ImageBuffer],
    cfg: &CodecConfig,
    tc: &CodecTrainConfig,
    csv: Option<&Path>,
) -> Result<(Codec, CodecTrainReport)> {
    if patches.is_empty() {
        return Err(Error::Dataset("codec training set is empty".into()));
    }
    if tc.crop % cfg.down_factor != 0 {
        return Err(Error::config(format!("crop {} not divisible by {}", tc.crop, cfg.down_factor)));
    }
    let codec = Codec::init(cfg.clone(), tc.seed, DType::F32, true)?;
    let mut opt = train::adamw(codec.store.vars(), tc.lr, tc.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(3);
    let mut log = CsvLog::create(csv, "step,loss,l1,kl,perceptual,lr")?;
    let mut report = CodecTrainReport { losses: Vec::new(), l1: Vec::new() };
    for step in 0..tc.steps {
        let batch = random_crops(patches, tc.batch, tc.crop, &mut rng)?;
        let x = batch_to_tensor(&batch, DType::F32, &Device::Cpu)?;
        let dist = codec.encode_raw(&x)?;
        let z = reparameterize(&dist, &mut rng)?;
        let recon = codec.decode_raw(&z)?;
        let loss = codec_loss(&x, &recon, &dist, cfg)?;
        let v = train::step(&mut opt, &loss.total, step, "codec loss")?;
        report.losses.push(v);
        report.l1.push(loss.l1);
        log.row(&[step as f64, v, loss.l1, loss.kl, loss.perceptual, tc.lr])?;
        if step % 50 == 0 {
            log::debug!("codec step {step}: loss {v:.4} l1 {:.4}", loss.l1);
        }
    }
    log.flush()?;
    let frozen = ParamStore::from_tensors(codec.store.named_tensors(), DType::F32, false)?;
    let sample = patches
        .iter()
        .take(256)
        .map(|p| {
            let c = tc.crop.min(p.height()).min(p.width()) / cfg.down_factor * cfg.down_factor;
            p.crop((p.height() - c) / 2, (p.width() - c) / 2, c, c)
        })
        .filter(|p| p.as_ref().map(|p| p.height() == tc.crop).unwrap_or(true))
        .collect::<Result<Vec<_>>>()?;
    if sample.is_empty() {
        return Err(Error::Dataset(format!("no patch reaches the {} crop size", tc.crop)));
    }
    let probe = Codec::new(cfg.clone(), frozen, 1.0)?;
    let std = latent_std(&probe, &sample)?;
    let codec = Codec::new(cfg.clone(), probe.store, 1.0 / std)?;
    Ok((codec, report))
}

/// Mean validation L1 of `decode(encode(x).mean)`.
pub fn validation_l1(codec: &Codec, patches: &[ImageBuffer]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in patches.chunks(16) {
        let x = batch_to_tensor(chunk, codec.dtype(), &Device::Cpu)?;
        let recon = codec.decode_tensor(&codec.encode_tensor(&x)?.mean)?.clamp(0.0, 1.0)?;
        total += train::scalar(&(x - recon)?.abs()?.mean_all()?)? * chunk.len() as f64;
    }
    Ok(total / patches.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, |y, x, c| 0.5 + 0.4 * ((y as f32 * 0.3 + x as f32 * 0.2 + c as f32).sin()))
    }

    #[test]
    fn latent_shapes() {
        let codec = Codec::init(CodecConfig::default(), 0, DType::F32, false).unwrap();
        let d = codec.encode(&textured(64, 64)).unwrap();
        assert_eq!(d.mean.dims(), &[1, 4, 8, 8]);
        assert_eq!(d.log_variance.dims(), d.mean.dims());
        assert!(codec.encode(&textured(65, 64)).is_err());
        let out = codec.decode(&d.mean).unwrap();
        assert_eq!(out[0].dims(), (64, 64));
    }

    #[test]
    fn zero_latent_decodes_to_valid_image() {
        let codec = Codec::init(CodecConfig::default(), 1, DType::F32, false).unwrap();
        let z = Tensor::zeros((4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let img = codec.decode(&z).unwrap().remove(0);
        assert_eq!(img.dims(), (64, 64));
        assert!(img.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        let bad = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(codec.decode(&bad).is_err());
    }

    #[test]
    fn config_invariants() {
        let mut c = CodecConfig::default();
        c.down_factor = 4;
        assert!(c.validate().is_err());
        let mut c = CodecConfig::default();
        c.latent_channels = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kl_closed_form() {
        let dev = Device::Cpu;
        let d = LatentDistribution {
            mean: Tensor::ones((1, 4, 2, 2), DType::F64, &dev).unwrap(),
            log_variance: Tensor::zeros((1, 4, 2, 2), DType::F64, &dev).unwrap(),
        };
        assert!((train::scalar(&d.kl().unwrap()).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn loss_zero_at_perfect_reconstruction() {
        let dev = Device::Cpu;
        let x = textured(16, 16).to_tensor(DType::F64, &dev).unwrap();
        let d = LatentDistribution {
            mean: Tensor::zeros((1, 4, 2, 2), DType::F64, &dev).unwrap(),
            log_variance: Tensor::zeros((1, 4, 2, 2), DType::F64, &dev).unwrap(),
        };
        let l = codec_loss(&x, &x, &d, &CodecConfig::default()).unwrap();
        assert_eq!(train::scalar(&l.total).unwrap(), 0.0);
    }

    #[test]
    fn kl_weight_zero_ignores_distribution() {
        let dev = Device::Cpu;
        let x = textured(16, 16).to_tensor(DType::F64, &dev).unwrap();
        let y = (&x * 0.9).unwrap();
        let cfg = CodecConfig { kl_weight: 0.0, ..CodecConfig::default() };
        let mk = |m: f64| LatentDistribution {
            mean: Tensor::full(m, (1, 4, 2, 2), &dev).unwrap(),
            log_variance: Tensor::full(m, (1, 4, 2, 2), &dev).unwrap(),
        };
        let a = train::scalar(&codec_loss(&x, &y, &mk(0.0), &cfg).unwrap().total).unwrap();
        let b = train::scalar(&codec_loss(&x, &y, &mk(3.0), &cfg).unwrap().total).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reparameterize_is_seeded_and_collapses_at_min_variance() {
        let dev = Device::Cpu;
        let mean = Tensor::full(0.25f32, (1, 4, 2, 2), &dev).unwrap();
        let d = LatentDistribution {
            mean: mean.clone(),
            log_variance: Tensor::full(LOGVAR_MIN as f32, (1, 4, 2, 2), &dev).unwrap(),
        };
        let z = reparameterize(&d, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let diff = train::scalar(&(z - &mean).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(diff < 1e-6);
        let d = LatentDistribution { mean, log_variance: Tensor::zeros((1, 4, 2, 2), DType::F32, &dev).unwrap() };
        let a = reparameterize(&d, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = reparameterize(&d, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let av: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
        let bv: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(av, bv);
    }

    #[test]
    fn empty_dataset_is_error() {
        assert!(matches!(
            train_codec(&[], &CodecConfig::default(), &CodecTrainConfig::default(), None),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let patches: Vec<ImageBuffer> = (0..4).map(|i| textured(16, 16 + 8 * (i % 2))).collect();
        let square: Vec<ImageBuffer> = (0..2).map(|_| textured(16, 16)).collect();
        let tc = CodecTrainConfig { steps: 3, batch: 2, crop: 16, ..Default::default() };
        let cfg = CodecConfig { channel_widths: vec![4, 4, 4, 4], ..CodecConfig::default() };
        let (codec, _) = train_codec(&patches, &cfg, &tc, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("codec.ckpt");
        codec.save(&p).unwrap();
        let back = Codec::load(&p).unwrap();
        assert_eq!(back.latent_scale(), codec.latent_scale());
        let v1 = validation_l1(&codec, &square).unwrap();
        let v2 = validation_l1(&back, &square).unwrap();
        assert_eq!(v1, v2);
    }
}
