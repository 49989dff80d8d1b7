//! Latent diffusion core: schedule, forward process, the conditioned U-Net,
//! foundation-model training, and DDIM sampling.

mod schedule;
mod unet;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint};
use crate::features::{CondTables, TOKEN_DIM};
use crate::nn::{ema_update, ParamStore};
use crate::sr::lora::LoraSet;
use crate::train::{self, CsvLog};
use crate::{Error, Result};

pub use schedule::{make_schedule, predict_x0, predict_x0_batch, q_sample, q_sample_batch, NoiseSchedule};
pub use unet::{timestep_embedding, unet_lora_suffixes, UNet, UNetConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Feature,
    Label,
    Null,
}

impl std::str::FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(Self::Feature),
            "label" => Ok(Self::Label),
            "null" => Ok(Self::Null),
            other => Err(Error::config(format!("unknown conditioning `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmConfig {
    pub unet: UNetConfig,
    pub conditioning: Conditioning,
    pub num_labels: usize,
    /// Length of the conditioning sequence (feature tokens, or label tokens).
    pub seq_len: usize,
    pub schedule: ScheduleConfig,
}

impl FmConfig {
    pub fn new(unet: UNetConfig, conditioning: Conditioning, num_labels: usize, feature_seq_len: usize) -> Self {
        let seq_len = match conditioning {
            Conditioning::Label => crate::features::LABEL_SEQ_LEN,
            _ => feature_seq_len,
        };
        Self { unet, conditioning, num_labels, seq_len, schedule: ScheduleConfig::default() }
    }
}

/// Conditioning for one batch.
#[derive(Clone, Debug)]
pub enum CondInput {
    /// `(B, N, D)` precomputed tokens.
    Tokens(Tensor),
    Labels(Vec<usize>),
    Null(usize),
}

impl CondInput {
    pub fn batch(&self) -> Result<usize> {
        Ok(match self {
            CondInput::Tokens(t) => t.dim(0)?,
            CondInput::Labels(l) => l.len(),
            CondInput::Null(b) => *b,
        })
    }
}

/// A foundation model: U-Net plus its learned label and null tokens.
pub struct DiffusionModel {
    cfg: FmConfig,
    store: ParamStore,
    unet: UNet,
    cond: CondTables,
    sched: NoiseSchedule,
}

impl DiffusionModel {
    pub fn new(cfg: FmConfig, store: ParamStore, adapters: Option<&LoraSet>) -> Result<Self> {
        let root = store.root();
        let unet = UNet::new(root.pp("unet").with_adapters(adapters), &cfg.unet)?;
        let labels = if cfg.conditioning == Conditioning::Label { cfg.num_labels } else { 0 };
        let cond = CondTables::new(root.pp("cond"), labels, cfg.unet.token_dim)?;
        let sched = cfg.schedule.build()?;
        Ok(Self { cfg, store, unet, cond, sched })
    }

    pub fn init(cfg: FmConfig, seed: u64, dtype: DType, trainable: bool) -> Result<Self> {
        Self::new(cfg, ParamStore::new(seed, dtype, trainable), None)
    }

    /// A second view of the same frozen weights with `adapters` attached.
    pub fn with_adapters(&self, adapters: &LoraSet) -> Result<Self> {
        let store = ParamStore::from_tensors(self.store.named_tensors(), self.store.dtype(), false)?;
        Self::new(self.cfg.clone(), store, Some(adapters))
    }

    /// Frozen copy with the same weights.
    pub fn frozen_copy(&self) -> Result<Self> {
        let store = ParamStore::from_tensors(self.store.named_tensors(), self.store.dtype(), false)?;
        Self::new(self.cfg.clone(), store, None)
    }

    pub fn config(&self) -> &FmConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn cond_tables(&self) -> &CondTables {
        &self.cond
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn unet_parameters(&self) -> usize {
        self.store
            .named_tensors()
            .iter()
            .filter(|(k, _)| k.starts_with("unet."))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// LoRA target paths inside the U-Net.
    pub fn lora_targets(&self) -> Vec<String> {
        crate::sr::lora::select_targets(&self.store, "unet.", unet_lora_suffixes())
    }

    /// `(B, M, D)` context for `cond`.
    pub fn context(&self, cond: &CondInput) -> Result<Tensor> {
        let dtype = self.store.dtype();
        match cond {
            CondInput::Tokens(t) => {
                let (_, n, d) = t.dims3()?;
                if d != self.cfg.unet.token_dim {
                    return Err(Error::Shape(format!("token dim {d}, model expects {}", self.cfg.unet.token_dim)));
                }
                if n != self.cfg.seq_len {
                    return Err(Error::Shape(format!("{n} tokens, model expects {}", self.cfg.seq_len)));
                }
                Ok(t.to_dtype(dtype)?)
            }
            CondInput::Labels(l) => self.cond.label_batch(l),
            CondInput::Null(b) => self.cond.null_batch(*b, self.cfg.seq_len),
        }
    }

    /// ε̂ for a batch.
    pub fn eps(&self, x_t: &Tensor, ts: &[usize], context: &Tensor) -> Result<Tensor> {
        self.unet.forward(x_t, ts, context)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(
            &self.store.named_tensors(),
            path,
            &config_hash(&self.cfg)?,
            serde_json::json!({ "config": self.cfg }),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let cfg: FmConfig = ck.meta("config")?;
        Self::new(cfg, ParamStore::from_tensors(ck.tensors.clone(), dtype, false)?, None)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?, DType::F32)
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.store.named_tensors()
    }
}

pub fn randn<R: Rng>(shape: &[usize], dtype: DType, rng: &mut R) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FMTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    /// Pixel patch size the latents were cut from (bookkeeping only).
    pub patch: usize,
    pub cond_dropout_p: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub weight_decay: f64,
    /// Emit a preview every this many steps; 0 disables.
    pub preview_every: usize,
}

impl Default for FMTrainConfig {
    // Reference regime: batch 120, 700k iterations, 512×512 patches.
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 32,
            steps: 5000,
            patch: 64,
            cond_dropout_p: 0.1,
            ema_decay: 0.999,
            seed: 0,
            weight_decay: 0.0,
            preview_every: 0,
        }
    }
}

impl FMTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cond_dropout_p) {
            return Err(Error::config(format!("cond_dropout_p {} outside [0,1)", self.cond_dropout_p)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        Ok(())
    }
}

/// Training set for a foundation model: latents with matching conditioning.
pub struct FmData {
    /// `(N, 4, h, w)` scaled latents.
    pub latents: Tensor,
    /// `(N, seq, D)` feature tokens, when conditioning on features.
    pub tokens: Option<Tensor>,
    pub labels: Option<Vec<usize>>,
}

impl FmData {
    pub fn len(&self) -> Result<usize> {
        Ok(self.latents.dim(0)?)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    /// Conditioning for rows `idx` under `mode`.
    pub fn cond(&self, idx: &[usize], mode: Conditioning) -> Result<CondInput> {
        match mode {
            Conditioning::Feature => {
                let t = self.tokens.as_ref().ok_or_else(|| Error::Dataset("no feature tokens".into()))?;
                Ok(CondInput::Tokens(t.index_select(&index_tensor(idx)?, 0)?))
            }
            Conditioning::Label => {
                let l = self.labels.as_ref().ok_or_else(|| Error::Dataset("no labels".into()))?;
                Ok(CondInput::Labels(idx.iter().map(|i| l[*i]).collect()))
            }
            Conditioning::Null => Ok(CondInput::Null(idx.len())),
        }
    }

    pub fn latents_at(&self, idx: &[usize]) -> Result<Tensor> {
        Ok(self.latents.index_select(&index_tensor(idx)?, 0)?)
    }
}

pub fn index_tensor(idx: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(idx.iter().map(|i| *i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?)
}

/// Mutable state of one FM training run.
pub struct FmTrainer {
    pub model: DiffusionModel,
    pub ema: ParamStore,
    opt: candle_nn::AdamW,
    rng: ChaCha8Rng,
    pub cfg: FMTrainConfig,
    pub step: usize,
    /// Number of samples whose conditioning was replaced by the null token.
    pub null_count: usize,
}

impl FmTrainer {
    pub fn new(fm_cfg: FmConfig, cfg: FMTrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = DiffusionModel::init(fm_cfg, cfg.seed, DType::F32, true)?;
        Self::from_model(model, cfg)
    }

    pub fn from_model(model: DiffusionModel, cfg: FMTrainConfig) -> Result<Self> {
        let ema = ParamStore::from_tensors(model.store.named_tensors(), model.store.dtype(), false)?;
        let opt = train::adamw(model.store.vars(), cfg.lr, cfg.weight_decay)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(4);
        Ok(Self { model, ema, opt, rng, cfg, step: 0, null_count: 0 })
    }

    /// Context for a batch with per-sample conditioning dropout.
    fn dropped_context(&mut self, cond: &CondInput) -> Result<Tensor> {
        let ctx = self.model.context(cond)?;
        if self.cfg.cond_dropout_p <= 0.0 || matches!(cond, CondInput::Null(_)) {
            return Ok(ctx);
        }
        let (b, n, _) = ctx.dims3()?;
        let mask: Vec<f32> = (0..b)
            .map(|_| if self.rng.gen_bool(self.cfg.cond_dropout_p) { 1.0 } else { 0.0 })
            .collect();
        let dropped = mask.iter().filter(|m| **m > 0.0).count();
        if dropped == 0 {
            return Ok(ctx);
        }
        self.null_count += dropped;
        let m = Tensor::from_vec(mask, (b, 1, 1), &Device::Cpu)?.to_dtype(ctx.dtype())?;
        let null = self.model.cond.null_batch(b, n)?;
        Ok((ctx.broadcast_mul(&(1.0 - &m)?)? + null.broadcast_mul(&m)?)?)
    }

    /// One ε-MSE step on `(latents, cond)`; updates weights and the EMA copy.
    pub fn train_step(&mut self, latents: &Tensor, cond: &CondInput) -> Result<f64> {
        let b = latents.dim(0)?;
        let t_max = self.model.sched.t;
        let ts: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..t_max)).collect();
        let eps = randn(latents.dims(), latents.dtype(), &mut self.rng)?;
        let x_t = q_sample_batch(latents, &ts, &eps, &self.model.sched)?;
        let ctx = self.dropped_context(cond)?;
        let pred = self.model.eps(&x_t, &ts, &ctx)?;
        let loss = (pred - eps)?.sqr()?.mean_all()?;
        let v = train::step(&mut self.opt, &loss, self.step, "FM loss")?;
        self.step += 1;
        let warm = (1.0 + self.step as f64) / (10.0 + self.step as f64);
        ema_update(&self.ema, &self.model.store, self.cfg.ema_decay.min(warm))?;
        Ok(v)
    }

    /// Draws a random batch from `data` and trains on it.
    pub fn train_on(&mut self, data: &FmData) -> Result<f64> {
        let n = data.len()?;
        let idx: Vec<usize> = (0..self.cfg.batch).map(|_| self.rng.gen_range(0..n)).collect();
        let lat = data.latents_at(&idx)?;
        let cond = data.cond(&idx, self.model.cfg.conditioning)?;
        self.train_step(&lat, &cond)
    }

    /// The EMA weights as a frozen model.
    pub fn ema_model(&self) -> Result<DiffusionModel> {
        DiffusionModel::new(
            self.model.cfg.clone(),
            ParamStore::from_tensors(self.ema.named_tensors(), self.ema.dtype(), false)?,
            None,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmTrainReport {
    pub losses: Vec<f64>,
    pub null_count: usize,
}

/// Full FM training loop. Returns the EMA model.
pub fn train_fm(
    data: &FmData,
    fm_cfg: &FmConfig,
    cfg: &FMTrainConfig,
    csv: Option<&Path>,
    mut preview: Option<&mut dyn FnMut(usize, &DiffusionModel) -> Result<()>>,
) -> Result<(DiffusionModel, FmTrainReport)> {
    if data.is_empty()? {
        return Err(Error::Dataset("FM training set is empty".into()));
    }
    let mut tr = FmTrainer::new(fm_cfg.clone(), cfg.clone())?;
    let mut log = CsvLog::create(csv, "step,loss,lr")?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let v = tr.train_on(data)?;
        losses.push(v);
        log.row(&[step as f64, v, cfg.lr])?;
        if step % 100 == 0 {
            log::debug!("fm step {step}: loss {v:.4}");
        }
        if cfg.preview_every > 0 && (step + 1) % cfg.preview_every == 0 {
            if let Some(cb) = preview.as_deref_mut() {
                cb(step + 1, &tr.ema_model()?)?;
            }
        }
    }
    log.flush()?;
    let null_count = tr.null_count;
    Ok((tr.ema_model()?, FmTrainReport { losses, null_count }))
}

/// DDIM timesteps for `steps` updates, descending from `T−1`.
pub fn ddim_timesteps(t: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t {
        return Err(Error::config(format!("DDIM steps {steps} outside 1..={t}")));
    }
    Ok((0..steps).rev().map(|i| (i + 1) * t / steps - 1).collect())
}

/// Deterministic (η = 0) DDIM loop from `x_t` over `timesteps`, with the
/// noise estimate supplied by `eps_fn`.
pub fn ddim_loop<F>(x_t: Tensor, timesteps: &[usize], sched: &NoiseSchedule, mut eps_fn: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut x = x_t;
    for (i, &t) in timesteps.iter().enumerate() {
        let eps = eps_fn(&x, t)?;
        let x0 = predict_x0(&x, &eps, t, sched)?;
        let a_prev = timesteps.get(i + 1).map(|p| sched.alpha_bar[*p]).unwrap_or(1.0);
        x = ((x0 * a_prev.sqrt())? + (eps * (1.0 - a_prev).sqrt())?)?;
    }
    Ok(x)
}

/// Samples latents of `shape` conditioned on `cond`. With `guidance ≠ 1`
/// the estimate is `ε_null + guidance·(ε_cond − ε_null)`.
pub fn ddim_sample<R: Rng>(
    model: &DiffusionModel,
    cond: &CondInput,
    shape: &[usize],
    steps: usize,
    rng: &mut R,
    guidance: f64,
) -> Result<Tensor> {
    if guidance < 0.0 {
        return Err(Error::config("guidance must be non-negative"));
    }
    let sched = &model.sched;
    let ts = ddim_timesteps(sched.t, steps)?;
    let b = shape[0];
    let ctx = model.context(cond)?;
    let null = model.context(&CondInput::Null(b))?;
    let x_t = randn(shape, model.store.dtype(), rng)?;
    ddim_loop(x_t, &ts, sched, |x, t| {
        let tv = vec![t; b];
        let e_c = model.eps(x, &tv, &ctx)?;
        if guidance == 1.0 {
            return Ok(e_c);
        }
        let e_n = model.eps(x, &tv, &null)?;
        Ok((&e_n + ((e_c - &e_n)? * guidance)?)?)
    })
}

pub const DEFAULT_TOKEN_DIM: usize = TOKEN_DIM;

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_cfg(cond: Conditioning) -> FmConfig {
        FmConfig::new(UNetConfig::micro(8), cond, 3, 5)
    }

    #[test]
    fn unet_output_shape_and_null_path() {
        let m = DiffusionModel::init(FmConfig::new(UNetConfig::full(), Conditioning::Feature, 0, 65), 0, DType::F32, false)
            .unwrap();
        let x = randn(&[1, 4, 8, 8], DType::F32, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let toks = randn(&[1, 65, 96], DType::F32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ctx = m.context(&CondInput::Tokens(toks)).unwrap();
        assert_eq!(m.eps(&x, &[10], &ctx).unwrap().dims(), &[1, 4, 8, 8]);
        let null = m.context(&CondInput::Null(1)).unwrap();
        let out = m.eps(&x, &[10], &null).unwrap();
        assert_eq!(out.dims(), &[1, 4, 8, 8]);
        let bad = randn(&[1, 3, 8, 8], DType::F32, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(m.eps(&bad, &[10], &null).is_err());
    }

    #[test]
    fn eff_variant_is_structurally_smaller() {
        let full = DiffusionModel::init(FmConfig::new(UNetConfig::full(), Conditioning::Feature, 0, 65), 0, DType::F32, false)
            .unwrap();
        let eff = DiffusionModel::init(FmConfig::new(UNetConfig::eff(), Conditioning::Feature, 0, 65), 0, DType::F32, false)
            .unwrap();
        let ratio = eff.unet_parameters() as f64 / full.unet_parameters() as f64;
        assert!(ratio <= 0.35, "ratio {ratio}");
        assert_eq!(UNetConfig::eff().base_channels * 2, UNetConfig::full().base_channels);
        assert_eq!(UNetConfig::eff().head_dim * 2, UNetConfig::full().head_dim);
    }

    #[test]
    fn ddim_timestep_layout() {
        assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![999]);
        assert_eq!(ddim_timesteps(10, 5).unwrap(), vec![9, 7, 5, 3, 1]);
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn ddim_with_linear_oracle_matches_scalar_recurrence() {
        let sched = NoiseSchedule::default();
        let ts = ddim_timesteps(1000, 7).unwrap();
        let x0 = Tensor::new(&[0.3f64, -1.2, 2.0], &Device::Cpu).unwrap();
        let out: Vec<f64> = ddim_loop(x0, &ts, &sched, |x, _| Ok(x.clone())).unwrap().to_vec1().unwrap();
        for (i, start) in [0.3f64, -1.2, 2.0].iter().enumerate() {
            let mut x = *start;
            for (k, &t) in ts.iter().enumerate() {
                let a = sched.alpha_bar[t];
                let ap = if k + 1 < ts.len() { sched.alpha_bar[ts[k + 1]] } else { 1.0 };
                let x0 = (x - (1.0 - a).sqrt() * x) / a.sqrt();
                x = ap.sqrt() * x0 + (1.0 - ap).sqrt() * x;
            }
            assert!((out[i] - x).abs() <= 1e-9 * x.abs().max(1.0), "{} vs {x}", out[i]);
        }
    }

    #[test]
    fn single_step_ddim_is_x0_prediction() {
        let sched = NoiseSchedule::default();
        let x = Tensor::new(&[0.5f64, -0.25], &Device::Cpu).unwrap();
        let e = Tensor::new(&[0.1f64, 0.2], &Device::Cpu).unwrap();
        let out: Vec<f64> = ddim_loop(x.clone(), &[999], &sched, |_, _| Ok(e.clone())).unwrap().to_vec1().unwrap();
        let direct: Vec<f64> = predict_x0(&x, &e, 999, &sched).unwrap().to_vec1().unwrap();
        assert_eq!(out, direct);
    }

    #[test]
    fn guidance_one_uses_conditional_estimate_only() {
        let m = DiffusionModel::init(micro_cfg(Conditioning::Label), 2, DType::F32, false).unwrap();
        let cond = CondInput::Labels(vec![1]);
        let a = ddim_sample(&m, &cond, &[1, 4, 4, 4], 3, &mut ChaCha8Rng::seed_from_u64(3), 1.0).unwrap();
        let ctx = m.context(&cond).unwrap();
        let ts = ddim_timesteps(1000, 3).unwrap();
        let x_t = randn(&[1, 4, 4, 4], DType::F32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = ddim_loop(x_t, &ts, m.schedule(), |x, t| m.eps(x, &[t], &ctx)).unwrap();
        let av: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
        let bv: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(av, bv);
    }

    fn micro_data() -> FmData {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        FmData {
            latents: randn(&[4, 4, 4, 4], DType::F32, &mut rng).unwrap(),
            tokens: Some(randn(&[4, 5, 8], DType::F32, &mut rng).unwrap()),
            labels: Some(vec![0, 1, 2, 0]),
        }
    }

    #[test]
    fn zero_dropout_never_takes_null_path() {
        let cfg = FMTrainConfig { batch: 4, steps: 5, cond_dropout_p: 0.0, ..Default::default() };
        let (_, rep) = train_fm(&micro_data(), &micro_cfg(Conditioning::Feature), &cfg, None, None).unwrap();
        assert_eq!(rep.null_count, 0);
        let cfg = FMTrainConfig { batch: 4, steps: 5, cond_dropout_p: 0.5, ..Default::default() };
        let (_, rep) = train_fm(&micro_data(), &micro_cfg(Conditioning::Feature), &cfg, None, None).unwrap();
        assert!(rep.null_count > 0);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let cfg = FMTrainConfig { batch: 2, steps: 4, ..Default::default() };
        let (_, a) = train_fm(&micro_data(), &micro_cfg(Conditioning::Label), &cfg, None, None).unwrap();
        let (_, b) = train_fm(&micro_data(), &micro_cfg(Conditioning::Label), &cfg, None, None).unwrap();
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn dropout_probability_validated() {
        let cfg = FMTrainConfig { cond_dropout_p: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = DiffusionModel::init(micro_cfg(Conditioning::Label), 4, DType::F32, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fm.ckpt");
        m.save(&p).unwrap();
        let back = DiffusionModel::load(&p).unwrap();
        assert_eq!(back.store().checksum().unwrap(), m.store().checksum().unwrap());
        assert_eq!(back.config(), m.config());
    }
}
