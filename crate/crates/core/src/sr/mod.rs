//! One-step super-resolution on top of a frozen foundation model.
//!
//! The generator lifts the LR image with bicubic ×4, encodes it through a
//! LoRA-adapted encoder, runs the U-Net once at `t_star`, and decodes. The
//! latent estimate is `z + x̂0(z, ε_adapted) − x̂0(z, ε_base)`, so fresh
//! (zero) adapters reproduce the codec-filtered bicubic image bit for bit.

pub mod lora;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, load_checkpoint, prefixed, save_checkpoint, Checkpoint};
use crate::codec::{Codec, Encoder};
use crate::degradation::{degrade, resize_to, sample_recipe, DegradationConfig, ResizeMode};
use crate::diffusion::{q_sample_batch, randn, Conditioning, DiffusionModel, NoiseSchedule};
use crate::features::FeatureNet;
use crate::image::batch_to_tensor;
use crate::nn::checksum_tensors;
use crate::train::{self, CsvLog};
use crate::{Error, ImageBuffer, Result};

pub use crate::diffusion::predict_x0;
use lora::{attach_lora, LoraSet};

pub const SCALE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrConfig {
    pub t_star: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lambda_mse: f64,
    pub lambda_percep: f64,
    pub lambda_vsd: f64,
    pub lr: f64,
    pub fake_lr: f64,
    pub batch: usize,
    pub patch: usize,
    pub steps: usize,
    pub seed: u64,
    pub vsd_t_min: usize,
    pub vsd_t_max: usize,
    /// Conditioning the generator and both score nets see.
    pub conditioning: Conditioning,
    /// Verify the frozen FM checksum every this many fake-score updates.
    pub verify_every: usize,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            t_star: 999,
            lora_rank: 4,
            lora_alpha: 4.0,
            lambda_mse: 1.0,
            lambda_percep: 0.5,
            lambda_vsd: 0.1,
            lr: 5e-5,
            fake_lr: 5e-5,
            batch: 8,
            patch: 64,
            steps: 3000,
            seed: 0,
            vsd_t_min: 20,
            vsd_t_max: 980,
            conditioning: Conditioning::Feature,
            verify_every: 50,
        }
    }
}

impl SrConfig {
    pub fn validate(&self, t: usize) -> Result<()> {
        if self.t_star >= t {
            return Err(Error::config(format!("t_star {} outside [0, {t})", self.t_star)));
        }
        if [self.lambda_mse, self.lambda_percep, self.lambda_vsd].iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if self.lora_rank == 0 {
            return Err(Error::config("LoRA rank must be >= 1"));
        }
        if self.vsd_t_min > self.vsd_t_max || self.vsd_t_max >= t {
            return Err(Error::config(format!("VSD range [{}, {}] invalid", self.vsd_t_min, self.vsd_t_max)));
        }
        if self.patch % (SCALE * 2) != 0 || self.batch == 0 {
            return Err(Error::config(format!("patch {} / batch {} invalid", self.patch, self.batch)));
        }
        Ok(())
    }
}

/// Conditioning inputs for one batch of LR images.
#[derive(Clone, Copy, Debug)]
pub enum SrCond<'a> {
    /// Use the generator's configured mode; labels are needed for label mode.
    Auto(Option<&'a [usize]>),
    Null,
}

/// The frozen networks plus trainable adapters that make up the generator.
pub struct SrGenerator {
    cfg: SrConfig,
    codec: Codec,
    encoder: Encoder,
    base: DiffusionModel,
    adapted: DiffusionModel,
    enc_lora: LoraSet,
    unet_lora: LoraSet,
    features: Option<FeatureNet>,
}

impl SrGenerator {
    /// Fresh zero-initialized adapters over `codec` and `fm`.
    pub fn new(cfg: SrConfig, codec: Codec, fm: DiffusionModel, features: Option<FeatureNet>) -> Result<Self> {
        let enc_lora = attach_lora(codec.store(), &codec.encoder_targets(), cfg.lora_rank, cfg.lora_alpha, cfg.seed)?;
        let unet_lora =
            attach_lora(fm.store(), &fm.lora_targets(), cfg.lora_rank, cfg.lora_alpha, cfg.seed.wrapping_add(1))?;
        Self::with_adapters(cfg, codec, fm, features, enc_lora, unet_lora)
    }

    pub fn with_adapters(
        cfg: SrConfig,
        codec: Codec,
        fm: DiffusionModel,
        features: Option<FeatureNet>,
        enc_lora: LoraSet,
        unet_lora: LoraSet,
    ) -> Result<Self> {
        cfg.validate(fm.schedule().t)?;
        if cfg.conditioning == Conditioning::Feature && features.is_none() {
            return Err(Error::config("feature conditioning needs a feature network"));
        }
        if cfg.conditioning != Conditioning::Null && cfg.conditioning != fm.config().conditioning {
            return Err(Error::config(format!(
                "generator conditioning {:?} does not match FM conditioning {:?}",
                cfg.conditioning,
                fm.config().conditioning
            )));
        }
        let encoder = codec.adapted_encoder(&enc_lora)?;
        let adapted = fm.with_adapters(&unet_lora)?;
        Ok(Self { cfg, codec, encoder, base: fm, adapted, enc_lora, unet_lora, features })
    }

    pub fn config(&self) -> &SrConfig {
        &self.cfg
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn fm(&self) -> &DiffusionModel {
        &self.base
    }

    pub fn features(&self) -> Option<&FeatureNet> {
        self.features.as_ref()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut v = self.enc_lora.vars();
        v.extend(self.unet_lora.vars());
        v
    }

    pub fn trainable_values(&self) -> usize {
        self.enc_lora.trainable_values() + self.unet_lora.trainable_values()
    }

    pub fn adapter_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = prefixed("enc_lora", self.enc_lora.store().named_tensors());
        out.extend(prefixed("unet_lora", self.unet_lora.store().named_tensors()));
        out
    }

    /// `(B, M, D)` context for a batch of LR images.
    pub fn context(&self, lr: &[ImageBuffer], cond: SrCond) -> Result<Tensor> {
        let b = lr.len();
        let mode = match cond {
            SrCond::Null => Conditioning::Null,
            SrCond::Auto(_) => self.cfg.conditioning,
        };
        let input = match mode {
            Conditioning::Feature => {
                let net = self.features.as_ref().ok_or_else(|| Error::config("no feature network"))?;
                crate::diffusion::CondInput::Tokens(net.extract_batch(lr)?.detach())
            }
            Conditioning::Label => match cond {
                SrCond::Auto(Some(l)) if l.len() == b => crate::diffusion::CondInput::Labels(l.to_vec()),
                _ => return Err(Error::config("label conditioning needs one label per image")),
            },
            Conditioning::Null => crate::diffusion::CondInput::Null(b),
        };
        Ok(self.base.context(&input)?.to_dtype(self.codec.dtype())?)
    }

    /// Generator latent `x̂0` for a bicubic-upsampled batch.
    pub fn latent(&self, lr_up: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let z = self.codec.encode_with(&self.encoder, lr_up)?;
        let ts = vec![self.cfg.t_star; z.dim(0)?];
        let sched = self.base.schedule();
        let eps_a = self.adapted.eps(&z, &ts, ctx)?;
        let eps_b = self.base.eps(&z, &ts, ctx)?;
        let x_a = predict_x0(&z, &eps_a, self.cfg.t_star, sched)?;
        let x_b = predict_x0(&z, &eps_b, self.cfg.t_star, sched)?;
        Ok((&z + (x_a - x_b)?)?)
    }

    /// Unclamped SR batch and its latent.
    pub fn forward(&self, lr_up: &Tensor, ctx: &Tensor) -> Result<(Tensor, Tensor)> {
        let z = self.latent(lr_up, ctx)?;
        Ok((self.codec.decode_tensor(&z)?, z))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.cfg,
            "fm_config_hash": config_hash(self.base.config())?,
            "codec_config_hash": config_hash(self.codec.config())?,
        });
        save_checkpoint(&self.adapter_tensors(), path, &config_hash(&self.cfg)?, meta)
    }

    pub fn from_checkpoint(
        ck: &Checkpoint,
        codec: Codec,
        fm: DiffusionModel,
        features: Option<FeatureNet>,
    ) -> Result<Self> {
        let cfg: SrConfig = ck.meta("config")?;
        let fm_hash: String = ck.meta("fm_config_hash")?;
        if fm_hash != config_hash(fm.config())? {
            return Err(Error::Checkpoint("adapters were trained against a different FM".into()));
        }
        let dtype = codec.dtype();
        let enc = LoraSet::from_tensors(ck.with_prefix("enc_lora"), cfg.lora_rank, cfg.lora_alpha, dtype)?;
        let unet = LoraSet::from_tensors(ck.with_prefix("unet_lora"), cfg.lora_rank, cfg.lora_alpha, dtype)?;
        Self::with_adapters(cfg, codec, fm, features, enc, unet)
    }

    pub fn load(path: impl AsRef<Path>, codec: Codec, fm: DiffusionModel, features: Option<FeatureNet>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?, codec, fm, features)
    }
}

pub fn bicubic_up(lr: &ImageBuffer) -> Result<ImageBuffer> {
    resize_to(lr, lr.height() * SCALE, lr.width() * SCALE, ResizeMode::Bicubic)
}

/// ×4 super-resolution of a single LR image.
pub fn sr_generate(lr: &ImageBuffer, gen: &SrGenerator, cond: SrCond) -> Result<ImageBuffer> {
    Ok(sr_generate_batch(std::slice::from_ref(lr), gen, cond)?.remove(0))
}

pub fn sr_generate_batch(lr: &[ImageBuffer], gen: &SrGenerator, cond: SrCond) -> Result<Vec<ImageBuffer>> {
    let f = gen.codec.config().down_factor;
    for img in lr {
        let (h, w) = img.dims();
        if h == 0 || w == 0 || (h * SCALE) % f != 0 || (w * SCALE) % f != 0 {
            return Err(Error::dim(format!("LR {h}x{w}: ×{SCALE} size not divisible by {f}")));
        }
    }
    let up = lr.iter().map(bicubic_up).collect::<Result<Vec<_>>>()?;
    let x = batch_to_tensor(&up, gen.codec.dtype(), gen.codec.store().device())?;
    let ctx = gen.context(lr, cond)?;
    let (out, _) = gen.forward(&x, &ctx)?;
    ImageBuffer::from_tensor(&out.clamp(0.0, 1.0)?)
}

#[derive(Clone, Debug)]
pub struct RecLoss {
    pub total: Tensor,
    pub mse: Tensor,
    pub percep: Option<Tensor>,
}

/// `λ_mse·MSE(sr, hr) + λ_percep·perceptual(sr, hr)`.
pub fn rec_loss(sr: &Tensor, hr: &Tensor, net: Option<&FeatureNet>, lambda_mse: f64, lambda_percep: f64) -> Result<RecLoss> {
    if sr.dims() != hr.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", sr.dims(), hr.dims())));
    }
    let mse = (sr - hr)?.sqr()?.mean_all()?;
    let mut total = (&mse * lambda_mse)?;
    let mut percep = None;
    if lambda_percep > 0.0 {
        let net = net.ok_or_else(|| Error::config("perceptual weight set without a feature network"))?;
        let p = net.perceptual_tensor(sr, hr)?;
        total = (total + (&p * lambda_percep)?)?;
        percep = Some(p);
    }
    Ok(RecLoss { total, mse, percep })
}

/// Frozen real score, trainable fake score, and the fake optimizer.
pub struct VsdState {
    real: DiffusionModel,
    fake: DiffusionModel,
    fake_lora: LoraSet,
    opt: candle_nn::AdamW,
    real_checksum: String,
    updates: usize,
    verify_every: usize,
}

impl VsdState {
    /// The real score is `fm` itself; the fake score is `fm` plus its own
    /// zero-initialized adapters.
    pub fn new(fm: &DiffusionModel, rank: usize, alpha: f64, lr: f64, seed: u64, verify_every: usize) -> Result<Self> {
        let real = fm.frozen_copy()?;
        let fake_lora = attach_lora(real.store(), &real.lora_targets(), rank, alpha, seed)?;
        let fake = real.with_adapters(&fake_lora)?;
        let opt = train::adamw(fake_lora.vars(), lr, 0.0)?;
        let real_checksum = real.store().checksum()?;
        Ok(Self { real, fake, fake_lora, opt, real_checksum, updates: 0, verify_every })
    }

    pub fn real(&self) -> &DiffusionModel {
        &self.real
    }

    pub fn fake(&self) -> &DiffusionModel {
        &self.fake
    }

    pub fn fake_lora(&self) -> &LoraSet {
        &self.fake_lora
    }

    pub fn real_checksum(&self) -> &str {
        &self.real_checksum
    }

    pub fn verify_real(&self) -> Result<()> {
        let now = self.real.store().checksum()?;
        if now != self.real_checksum {
            return Err(Error::FrozenWeightsChanged(format!("real score {} -> {}", self.real_checksum, now)));
        }
        Ok(())
    }
}

/// `w(t)·(ε_real(x_t) − ε_fake(x_t))` at a random `t ∈ [t_min, t_max]`,
/// detached from both score networks.
pub fn vsd_generator_grad<R: Rng>(
    z_gen: &Tensor,
    ctx: &Tensor,
    state: &VsdState,
    t_range: (usize, usize),
    rng: &mut R,
) -> Result<Tensor> {
    let ctx = ctx.detach();
    vsd_direction(
        z_gen,
        state.real.schedule(),
        t_range,
        rng,
        |x, ts| state.real.eps(x, ts, &ctx),
        |x, ts| state.fake.eps(x, ts, &ctx),
    )
}

/// The VSD direction for arbitrary ε-predictors `real` and `fake`.
pub fn vsd_direction<R, F, G>(
    z_gen: &Tensor,
    sched: &NoiseSchedule,
    t_range: (usize, usize),
    rng: &mut R,
    mut real: F,
    mut fake: G,
) -> Result<Tensor>
where
    R: Rng,
    F: FnMut(&Tensor, &[usize]) -> Result<Tensor>,
    G: FnMut(&Tensor, &[usize]) -> Result<Tensor>,
{
    let z = z_gen.detach();
    let b = z.dim(0)?;
    let ts: Vec<usize> = (0..b).map(|_| rng.gen_range(t_range.0..=t_range.1)).collect();
    let eps = randn(z.dims(), z.dtype(), rng)?;
    let x_t = q_sample_batch(&z, &ts, &eps, sched)?;
    let e_real = real(&x_t, &ts)?;
    let e_fake = fake(&x_t, &ts)?;
    Ok((e_real - e_fake)?.detach())
}

/// One ε-MSE step of the fake score on generator samples.
pub fn fake_score_update<R: Rng>(z_gen: &Tensor, ctx: &Tensor, state: &mut VsdState, rng: &mut R) -> Result<f64> {
    let z = z_gen.detach();
    let b = z.dim(0)?;
    let t_max = state.real.schedule().t;
    let ts: Vec<usize> = (0..b).map(|_| rng.gen_range(0..t_max)).collect();
    let eps = randn(z.dims(), z.dtype(), rng)?;
    let x_t = q_sample_batch(&z, &ts, &eps, state.real.schedule())?;
    let pred = state.fake.eps(&x_t, &ts, &ctx.detach())?;
    let loss = (pred - eps)?.sqr()?.mean_all()?;
    let v = train::step(&mut state.opt, &loss, state.updates, "fake score loss")?;
    state.updates += 1;
    if state.verify_every > 0 && state.updates % state.verify_every == 0 {
        state.verify_real()?;
    }
    Ok(v)
}

/// Composite generator objective: weighted reconstruction terms plus the
/// VSD surrogate `λ_vsd · mean(g ⊙ z)` for a detached direction `g`.
pub fn generator_loss(gen: &SrGenerator, sr: &Tensor, z: &Tensor, hr: &Tensor, g: Option<&Tensor>) -> Result<(Tensor, RecLoss)> {
    let cfg = &gen.cfg;
    let rec = rec_loss(sr, hr, gen.features.as_ref(), cfg.lambda_mse, cfg.lambda_percep)?;
    let loss = match g {
        Some(g) => (&rec.total + ((g.detach() * z)?.mean_all()? * cfg.lambda_vsd)?)?,
        None => rec.total.clone(),
    };
    Ok((loss, rec))
}

/// Ground-truth HR patches plus labels for SR training.
pub struct SrData<'a> {
    pub hr: &'a [ImageBuffer],
    pub labels: Option<&'a [usize]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrTrainReport {
    pub losses: Vec<f64>,
    pub mse: Vec<f64>,
    pub fake_losses: Vec<f64>,
    pub fm_checksum: String,
}

/// HR/LR pairs for `idx`, each LR synthesized from a per-sample recipe.
pub fn degrade_batch<R: Rng>(
    hr: &[ImageBuffer],
    idx: &[usize],
    deg: &DegradationConfig,
    rng: &mut R,
) -> Result<(Vec<ImageBuffer>, Vec<ImageBuffer>)> {
    let mut hs = Vec::with_capacity(idx.len());
    let mut ls = Vec::with_capacity(idx.len());
    for &i in idx {
        let recipe = sample_recipe(rng.gen(), deg)?;
        ls.push(degrade(&hr[i], &recipe)?);
        hs.push(hr[i].clone());
    }
    Ok((hs, ls))
}

/// Alternating generator / fake-score training. On a non-finite loss the
/// adapters from the last good step are written to `last_good` (when
/// given) and the error is returned.
pub fn train_sr(
    gen: &SrGenerator,
    data: &SrData,
    deg: &DegradationConfig,
    csv: Option<&Path>,
    last_good: Option<&Path>,
) -> Result<SrTrainReport> {
    let cfg = gen.cfg.clone();
    let n = data.hr.len();
    if n == 0 {
        return Err(Error::Dataset("SR training set is empty".into()));
    }
    if data.hr.iter().any(|h| h.dims() != (cfg.patch, cfg.patch)) {
        return Err(Error::Dataset(format!("SR patches must be {0}x{0}", cfg.patch)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(5);
    let mut opt = train::adamw(gen.trainable_vars(), cfg.lr, 0.0)?;
    let mut vsd = if cfg.lambda_vsd > 0.0 {
        Some(VsdState::new(&gen.base, cfg.lora_rank, cfg.lora_alpha, cfg.fake_lr, cfg.seed.wrapping_add(2), cfg.verify_every)?)
    } else {
        None
    };
    let fm_checksum = gen.base.store().checksum()?;
    let mut log = CsvLog::create(csv, "step,loss,mse,percep,fake_loss,lr")?;
    let mut report = SrTrainReport { losses: vec![], mse: vec![], fake_losses: vec![], fm_checksum: fm_checksum.clone() };
    let dtype = gen.codec.dtype();
    let dev = gen.codec.store().device().clone();
    let mut good = gen.adapter_tensors_snapshot()?;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..n)).collect();
        let (hr, lr) = degrade_batch(data.hr, &idx, deg, &mut rng)?;
        let labels: Option<Vec<usize>> = data.labels.map(|l| idx.iter().map(|i| l[*i]).collect());
        let up = lr.iter().map(bicubic_up).collect::<Result<Vec<_>>>()?;
        let x = batch_to_tensor(&up, dtype, &dev)?;
        let y = batch_to_tensor(&hr, dtype, &dev)?;
        let ctx = gen.context(&lr, SrCond::Auto(labels.as_deref()))?;
        let (sr, z) = gen.forward(&x, &ctx)?;
        let g = match &vsd {
            Some(state) => Some(vsd_generator_grad(&z, &ctx, state, (cfg.vsd_t_min, cfg.vsd_t_max), &mut rng)?),
            None => None,
        };
        let (loss, rec) = generator_loss(gen, &sr, &z, &y, g.as_ref())?;
        let v = match train::step(&mut opt, &loss, step, "SR generator loss") {
            Ok(v) => v,
            Err(e) => {
                if let Some(p) = last_good {
                    save_checkpoint(&good, p, &config_hash(&cfg)?, serde_json::json!({ "config": cfg, "step": step }))?;
                }
                return Err(e);
            }
        };
        let fake = match &mut vsd {
            Some(state) => fake_score_update(&z, &ctx, state, &mut rng)?,
            None => 0.0,
        };
        let mse = train::scalar(&rec.mse)?;
        let percep = rec.percep.as_ref().map(train::scalar).transpose()?.unwrap_or(0.0);
        log.row(&[step as f64, v, mse, percep, fake, cfg.lr])?;
        if step % 50 == 0 {
            log::debug!("sr step {step}: loss {v:.5} mse {mse:.5} fake {fake:.4}");
        }
        report.losses.push(v);
        report.mse.push(mse);
        report.fake_losses.push(fake);
        if last_good.is_some() {
            good = gen.adapter_tensors_snapshot()?;
        }
    }
    log.flush()?;
    if let Some(state) = &vsd {
        state.verify_real()?;
    }
    if gen.base.store().checksum()? != fm_checksum {
        return Err(Error::FrozenWeightsChanged("base FM changed during SR training".into()));
    }
    Ok(report)
}

impl SrGenerator {
    fn adapter_tensors_snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.adapter_tensors()
            .into_iter()
            .map(|(k, v)| Ok((k, v.copy()?)))
            .collect()
    }

    /// SHA-256 of the adapter tensors.
    pub fn adapter_checksum(&self) -> Result<String> {
        checksum_tensors(&self.adapter_tensors())
    }
}

/// Copies of the SR inputs in `dtype`, for numerical checks.
pub fn lr_batch(lr: &[ImageBuffer], dtype: DType) -> Result<Tensor> {
    let up = lr.iter().map(bicubic_up).collect::<Result<Vec<_>>>()?;
    batch_to_tensor(&up, dtype, &candle_core::Device::Cpu)
}
