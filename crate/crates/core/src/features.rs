//! Conditioning tokens. A small vision transformer trained by two-crop
//! self-distillation provides dense patch tokens plus a global token; a label
//! embedding table and a learned null token provide the coarse and empty
//! alternatives.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::degradation::{bicubic_matrix, resize_to, ResizeMode};
pub use crate::nn::ema_update;
use crate::nn::{
    log_softmax_last, softmax_last, Conv2d, CrossAttention, FeedForward, Init, LayerNorm, Linear, ParamStore, Vb,
};
use crate::train::{self, CsvLog};
use crate::{Error, ImageBuffer, Result};

pub const TOKEN_DIM: usize = 96;
pub const LABEL_SEQ_LEN: usize = 8;
pub const COV_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    Feature,
    Label,
    Null,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningTokens {
    /// Row-major `N×D`.
    pub tokens: Vec<f32>,
    pub len: usize,
    pub dim: usize,
    pub source: TokenSource,
    /// Patch grid for feature tokens, `(0, 0)` otherwise.
    pub grid: (usize, usize),
}

impl ConditioningTokens {
    pub fn from_tensor(t: &Tensor, source: TokenSource, grid: (usize, usize)) -> Result<Self> {
        let t = if t.rank() == 3 { t.squeeze(0)? } else { t.clone() };
        let (len, dim) = t.dims2()?;
        let tokens: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("conditioning tokens contain non-finite values".into()));
        }
        Ok(Self { tokens, len, dim, source, grid })
    }

    /// `(1, N, D)`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.tokens.clone(), (1, self.len, self.dim), device)?.to_dtype(dtype)?)
    }

    pub fn global(&self) -> &[f32] {
        &self.tokens[..self.dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Canonical extraction resolution.
    pub input_size: usize,
    pub teacher_momentum: f64,
    pub center_momentum: f64,
    pub proto_count: usize,
    pub head_hidden: usize,
    pub bottleneck: usize,
    pub temp_teacher: f64,
    pub temp_student: f64,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            dim: TOKEN_DIM,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            input_size: 64,
            teacher_momentum: 0.99,
            center_momentum: 0.9,
            proto_count: 64,
            head_hidden: 128,
            bottleneck: 48,
            temp_teacher: 0.04,
            temp_student: 0.1,
        }
    }
}

impl FeatureNetConfig {
    /// Tiny network for gradient and unit tests.
    pub fn micro() -> Self {
        Self {
            patch_size: 4,
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            input_size: 8,
            proto_count: 8,
            head_hidden: 8,
            bottleneck: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if !(self.teacher_momentum > 0.9 && self.teacher_momentum < 1.0) {
            return Err(Error::config(format!("teacher momentum {} outside (0.9, 1)", self.teacher_momentum)));
        }
        if self.input_size % self.patch_size != 0 || self.patch_size == 0 {
            return Err(Error::config("input size must be a multiple of the patch size"));
        }
        if self.proto_count < 2 {
            return Err(Error::config("need at least two prototypes"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    /// Patch tokens plus the global token.
    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid() + 1
    }
}

struct Block {
    ln1: LayerNorm,
    attn: CrossAttention,
    ln2: LayerNorm,
    mlp: FeedForward,
}

impl Block {
    fn new(vb: Vb, cfg: &FeatureNetConfig) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(vb.pp("ln1"), cfg.dim)?,
            attn: CrossAttention::new(vb.pp("attn"), cfg.dim, cfg.dim, cfg.dim / cfg.heads)?,
            ln2: LayerNorm::new(vb.pp("ln2"), cfg.dim)?,
            mlp: FeedForward::new(vb.pp("mlp"), cfg.dim, cfg.dim * cfg.mlp_ratio)?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        &x + self.mlp.forward(&self.ln2.forward(&x)?)?
    }
}

struct DinoHead {
    fc1: Linear,
    fc2: Linear,
    proto: Linear,
}

impl DinoHead {
    fn new(vb: Vb, cfg: &FeatureNetConfig) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(vb.pp("fc1"), cfg.dim, cfg.head_hidden, true)?,
            fc2: Linear::new(vb.pp("fc2"), cfg.head_hidden, cfg.bottleneck, true)?,
            proto: Linear::new(vb.pp("proto"), cfg.bottleneck, cfg.proto_count, false)?,
        })
    }

    fn forward(&self, global: &Tensor) -> candle_core::Result<Tensor> {
        let z = self.fc2.forward(&self.fc1.forward(global)?.gelu()?)?;
        let norm = (z.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
        self.proto.forward(&z.broadcast_div(&norm)?)
    }
}

/// Toy vision transformer: patch embedding, a prepended global token,
/// pre-norm blocks, final layer norm.
pub struct FeatureNet {
    cfg: FeatureNetConfig,
    store: ParamStore,
    patch_embed: Conv2d,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Option<DinoHead>,
}

impl FeatureNet {
    /// Builds the network on `store`, creating missing parameters when the
    /// store allows it. `with_head` adds the distillation head.
    pub fn new(cfg: FeatureNetConfig, store: ParamStore, with_head: bool) -> Result<Self> {
        cfg.validate()?;
        let vb = store.root();
        let n = cfg.seq_len();
        let p = cfg.patch_size;
        let patch_embed = Conv2d::new(vb.pp("patch_embed"), 3, cfg.dim, p, p, 0)?;
        let cls = vb.get(&[1, 1, cfg.dim], "cls", Init::Normal(0.02))?;
        let pos = vb.get(&[1, n, cfg.dim], "pos", Init::Normal(0.02))?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(vb.pp("blocks").pp(i), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(vb.pp("norm"), cfg.dim)?;
        let head = if with_head { Some(DinoHead::new(vb.pp("head"), &cfg)?) } else { None };
        Ok(Self { cfg, store, patch_embed, cls, pos, blocks, norm, head })
    }

    pub fn init(cfg: FeatureNetConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::new(cfg, ParamStore::new(seed, dtype, false), false)
    }

    pub fn config(&self) -> &FeatureNetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Backbone tensors only; the distillation head is not part of the
    /// extractor.
    pub fn backbone_tensors(&self) -> BTreeMap<String, Tensor> {
        self.store
            .named_tensors()
            .into_iter()
            .filter(|(k, _)| !k.starts_with("head."))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let hash = crate::checkpoint::config_hash(&self.cfg)?;
        save_checkpoint(&self.backbone_tensors(), path, &hash, serde_json::json!({ "config": self.cfg }))
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let cfg: FeatureNetConfig = ck.meta("config")?;
        let tensors = ck
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("head."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self::new(cfg, ParamStore::from_tensors(tensors, dtype, false)?, false)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?, DType::F32)
    }

    /// Per-block hidden states and the final normalized tokens for a batch
    /// `(B, 3, S, S)` at the canonical size.
    pub fn forward_layers(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let s = self.cfg.input_size;
        let (b, c, h, w) = x.dims4()?;
        if c != 3 || h != s || w != s {
            return Err(Error::Shape(format!("feature net expects (B,3,{s},{s}), got {:?}", x.dims())));
        }
        let x = ((x * 2.0)? - 1.0)?;
        let p = self.patch_embed.forward(&x)?;
        let p = p.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let cls = self.cls.broadcast_as((b, 1, self.cfg.dim))?.contiguous()?;
        let mut hcur = Tensor::cat(&[&cls, &p], 1)?.broadcast_add(&self.pos)?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            hcur = blk.forward(&hcur)?;
            layers.push(hcur.clone());
        }
        let out = self.norm.forward(&hcur)?;
        Ok((layers, out))
    }

    /// `(B, N, D)` tokens for images already at the canonical size.
    pub fn tokens(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_layers(x)?.1)
    }

    fn canonical(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        let s = self.cfg.input_size;
        if img.dims() == (s, s) {
            Ok(img.clone())
        } else {
            resize_to(img, s, s, ResizeMode::Bicubic)
        }
    }

    pub fn extract_tokens(&self, img: &ImageBuffer) -> Result<ConditioningTokens> {
        let t = self.extract_batch(std::slice::from_ref(img))?;
        let g = self.cfg.grid();
        ConditioningTokens::from_tensor(&t.get(0)?, TokenSource::Feature, (g, g))
    }

    /// `(B, N, D)` tokens, each image bicubic-resized to the canonical size.
    pub fn extract_batch(&self, images: &[ImageBuffer]) -> Result<Tensor> {
        let canon = images.iter().map(|i| self.canonical(i)).collect::<Result<Vec<_>>>()?;
        let x = crate::image::batch_to_tensor(&canon, self.dtype(), self.store.device())?;
        let mut outs = Vec::new();
        for chunk in 0..x.dim(0)?.div_ceil(64) {
            let start = chunk * 64;
            let len = (x.dim(0)? - start).min(64);
            outs.push(self.tokens(&x.narrow(0, start, len)?)?);
        }
        Ok(Tensor::cat(&outs, 0)?)
    }

    /// Global-token mean and unbiased covariance over `images`, with
    /// `COV_EPS·I` added.
    pub fn feature_stats(&self, images: &[ImageBuffer]) -> Result<FeatureStats> {
        if images.is_empty() {
            return Err(Error::Dataset("feature statistics of an empty set".into()));
        }
        let t = self.extract_batch(images)?;
        let g: Vec<Vec<f32>> = t.narrow(1, 0, 1)?.squeeze(1)?.to_dtype(DType::F32)?.to_vec2()?;
        let rows: Vec<Vec<f64>> = g.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
        FeatureStats::from_rows(&rows)
    }

    /// Differentiable feature distance for `(B, 3, H, W)` batches in `[0,1]`,
    /// averaged over the batch. Sizes that tile the canonical resolution are
    /// split into canonical crops; other sizes are bicubic-resized.
    pub fn perceptual_tensor(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        let both = Tensor::cat(&[a, b], 0)?;
        let both = self.to_canonical_tensor(&both)?;
        let crops = both.dim(0)? / 2;
        let (layers, _) = self.forward_layers(&both)?;
        let mut total: Option<Tensor> = None;
        for l in &layers {
            let patches = l.narrow(1, 1, l.dim(1)? - 1)?;
            let norm = (patches.sqr()?.sum_keepdim(D::Minus1)? + 1e-10)?.sqrt()?;
            let u = patches.broadcast_div(&norm)?;
            let (ua, ub) = (u.narrow(0, 0, crops)?, u.narrow(0, crops, crops)?);
            // Sum over channels, mean over tokens, crops and layers.
            let d = ((ua - ub)?.sqr()?.sum(D::Minus1)?.mean_all()? / layers.len() as f64)?;
            total = Some(match total {
                Some(t) => (t + d)?,
                None => d,
            });
        }
        total.ok_or_else(|| Error::config("feature net has no blocks"))
    }

    fn to_canonical_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.cfg.input_size;
        let (b, c, h, w) = x.dims4()?;
        if h % s == 0 && w % s == 0 {
            if (h, w) == (s, s) {
                return Ok(x.clone());
            }
            let (nh, nw) = (h / s, w / s);
            return Ok(x
                .reshape((b, c, nh, s, nw, s))?
                .permute((0, 2, 4, 1, 3, 5))?
                .contiguous()?
                .reshape((b * nh * nw, c, s, s))?);
        }
        let dev = x.device();
        let rh = Tensor::from_vec(bicubic_matrix(h, s), (s, h), dev)?.to_dtype(x.dtype())?;
        let rw = Tensor::from_vec(bicubic_matrix(w, s), (s, w), dev)?.to_dtype(x.dtype())?;
        // R_h · X · R_wᵀ on every (b, c) plane.
        let planes = x.reshape((b * c * h, w))?.matmul(&rw.t()?)?;
        let planes = planes.reshape((b * c, h, s))?.transpose(1, 2)?.contiguous()?;
        let planes = planes.reshape((b * c * s, h))?.matmul(&rh.t()?)?;
        Ok(planes.reshape((b, c, s, s))?.transpose(2, 3)?.contiguous()?)
    }

    pub fn perceptual_distance(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        if a == b {
            return Ok(0.0);
        }
        let ta = a.to_tensor(self.dtype(), self.store.device())?;
        let tb = b.to_tensor(self.dtype(), self.store.device())?;
        Ok(train::scalar(&self.perceptual_tensor(&ta, &tb)?)?.max(0.0))
    }

    fn head_logits(&self, x: &Tensor) -> Result<Tensor> {
        let head = self.head.as_ref().ok_or_else(|| Error::config("network built without a head"))?;
        let tokens = self.tokens(x)?;
        Ok(head.forward(&tokens.narrow(1, 0, 1)?.squeeze(1)?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `D×D`.
    pub cov: Vec<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance of `rows`, plus `COV_EPS·I`. A
    /// single row has zero sample covariance.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(Vec::len).ok_or_else(|| Error::Dataset("no feature rows".into()))?;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        if n > 1 {
            for r in rows {
                for i in 0..d {
                    let di = r[i] - mean[i];
                    for j in 0..d {
                        cov[i * d + j] += di * (r[j] - mean[j]);
                    }
                }
            }
            cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
        }
        for i in 0..d {
            cov[i * d + i] += COV_EPS;
        }
        Ok(Self { mean, cov })
    }
}

/// Learned label tokens and null token. Lives inside the diffusion model's
/// parameter store under `cond.`.
pub struct CondTables {
    label_table: Option<Tensor>,
    null: Tensor,
    num_labels: usize,
}

impl CondTables {
    pub fn new(vb: Vb, num_labels: usize, dim: usize) -> Result<Self> {
        let label_table = if num_labels > 0 {
            Some(vb.get(&[num_labels, LABEL_SEQ_LEN, dim], "label_table", Init::Normal(1.0))?)
        } else {
            None
        };
        let null = vb.get(&[1, dim], "null", Init::Normal(1.0))?;
        Ok(Self { label_table, null, num_labels })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// `(B, 8, D)` token blocks for `labels`.
    pub fn label_batch(&self, labels: &[usize]) -> Result<Tensor> {
        let table = self
            .label_table
            .as_ref()
            .ok_or_else(|| Error::config("model has no label table"))?;
        if let Some(bad) = labels.iter().find(|l| **l >= self.num_labels) {
            return Err(Error::config(format!("label {bad} out of range (table has {})", self.num_labels)));
        }
        let idx = Tensor::from_vec(labels.iter().map(|l| *l as u32).collect::<Vec<_>>(), labels.len(), table.device())?;
        Ok(table.index_select(&idx, 0)?)
    }

    pub fn label_tokens(&self, label: usize) -> Result<ConditioningTokens> {
        ConditioningTokens::from_tensor(&self.label_batch(&[label])?, TokenSource::Label, (0, 0))
    }

    /// `(B, len, D)` copies of the null token.
    pub fn null_batch(&self, batch: usize, len: usize) -> Result<Tensor> {
        let d = self.null.dim(1)?;
        Ok(self.null.unsqueeze(0)?.broadcast_as((batch, len, d))?.contiguous()?)
    }

    pub fn null_tokens(&self, len: usize) -> Result<ConditioningTokens> {
        ConditioningTokens::from_tensor(&self.null_batch(1, len)?, TokenSource::Null, (0, 0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub min_patches: usize,
    /// Steps before the collapse guard is armed.
    pub collapse_warmup: usize,
    /// Steps of assignments pooled into the guard's histogram.
    pub collapse_window: usize,
    /// Guard threshold as a fraction of `ln(proto_count)`.
    pub collapse_fraction: f64,
}

impl Default for FeatureTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 32,
            lr: 5e-4,
            weight_decay: 0.04,
            seed: 0,
            min_patches: 1000,
            collapse_warmup: 20,
            collapse_window: 10,
            collapse_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrainReport {
    pub losses: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// One augmented view: random crop, horizontal flip, and a resolution jitter
/// (area downscale by 1, 2 or 4, then bicubic back up).
pub fn augment_view<R: Rng>(img: &ImageBuffer, size: usize, rng: &mut R) -> Result<ImageBuffer> {
    let (h, w) = img.dims();
    let side = h.min(w);
    let lo = (side / 2).max(1);
    let c = rng.gen_range(lo..=side);
    let y0 = rng.gen_range(0..=h - c);
    let x0 = rng.gen_range(0..=w - c);
    let mut v = img.crop(y0, x0, c, c)?;
    if rng.gen_bool(0.5) {
        v = ImageBuffer::from_fn(c, c, |y, x, ch| v.get(y, c - 1 - x, ch));
    }
    let v = resize_to(&v, size, size, ResizeMode::Bicubic)?;
    let f = [1usize, 2, 4][rng.gen_range(0..3)];
    if f > 1 && size / f >= 1 {
        let small = resize_to(&v, size / f, size / f, ResizeMode::Area)?;
        return resize_to(&small, size, size, ResizeMode::Bicubic);
    }
    Ok(v)
}

fn entropy_of_counts(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

fn argmax_rows(t: &Tensor) -> Result<Vec<usize>> {
    let rows: Vec<Vec<f32>> = t.to_dtype(DType::F32)?.to_vec2()?;
    Ok(rows
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best })
                .0
        })
        .collect())
}

/// Two-crop self-distillation. Returns the student with its head and the
/// per-step loss and guard-entropy curves.
pub fn train_feature_net(
    patches: &[ImageBuffer],
    cfg: &FeatureNetConfig,
    tc: &FeatureTrainConfig,
    csv: Option<&Path>,
) -> Result<(FeatureNet, FeatureTrainReport)> {
    cfg.validate()?;
    if patches.len() < tc.min_patches {
        return Err(Error::Dataset(format!(
            "feature training needs at least {} patches, got {}",
            tc.min_patches,
            patches.len()
        )));
    }
    let student = FeatureNet::new(cfg.clone(), ParamStore::new(tc.seed, DType::F32, true), true)?;
    let teacher_store = ParamStore::from_tensors(student.store.named_tensors(), DType::F32, false)?;
    let teacher = FeatureNet::new(cfg.clone(), teacher_store, true)?;
    let mut opt = train::adamw(student.store.vars(), tc.lr, tc.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(2);
    let dev = Device::Cpu;
    let k = cfg.proto_count;
    let mut center = Tensor::zeros((1, k), DType::F32, &dev)?;
    let threshold = tc.collapse_fraction * (k as f64).ln();
    let mut log = CsvLog::create(csv, "step,loss,entropy,lr")?;
    let mut window: std::collections::VecDeque<Vec<usize>> = Default::default();
    let mut report = FeatureTrainReport { losses: Vec::new(), entropies: Vec::new() };

    for step in 0..tc.steps {
        let mut views = [Vec::with_capacity(tc.batch), Vec::with_capacity(tc.batch)];
        for _ in 0..tc.batch {
            let img = &patches[rng.gen_range(0..patches.len())];
            for v in &mut views {
                v.push(augment_view(img, cfg.input_size, &mut rng)?);
            }
        }
        let x: Vec<Tensor> = views
            .iter()
            .map(|v| crate::image::batch_to_tensor(v, DType::F32, &dev))
            .collect::<Result<_>>()?;
        let t_out: Vec<Tensor> = x
            .iter()
            .map(|xi| Ok(teacher.head_logits(xi)?.detach()))
            .collect::<Result<_>>()?;
        let s_out: Vec<Tensor> = x.iter().map(|xi| student.head_logits(xi)).collect::<Result<_>>()?;

        let t_probs: Vec<Tensor> = t_out
            .iter()
            .map(|t| Ok(softmax_last(&(t.broadcast_sub(&center)? / cfg.temp_teacher)?)?))
            .collect::<Result<_>>()?;
        let s_logp: Vec<Tensor> = s_out
            .iter()
            .map(|s| Ok(log_softmax_last(&(s / cfg.temp_student)?)?))
            .collect::<Result<_>>()?;
        let ce = |t: &Tensor, s: &Tensor| -> Result<Tensor> {
            Ok(((t * s)?.sum(D::Minus1)?.mean_all()? * -1.0)?)
        };
        let loss = ((ce(&t_probs[0], &s_logp[1])? + ce(&t_probs[1], &s_logp[0])?)? * 0.5)?;
        let lv = train::step(&mut opt, &loss, step, "distillation loss")?;
        ema_update(&teacher.store, &student.store, cfg.teacher_momentum)?;

        let batch_mean = Tensor::cat(&t_out, 0)?.mean_keepdim(0)?;
        center = ((center * cfg.center_momentum)? + (batch_mean * (1.0 - cfg.center_momentum))?)?;

        let mut assigned = argmax_rows(&t_out[0])?;
        assigned.extend(argmax_rows(&t_out[1])?);
        window.push_back(assigned);
        if window.len() > tc.collapse_window.max(1) {
            window.pop_front();
        }
        let mut counts = vec![0usize; k];
        window.iter().flatten().for_each(|a| counts[*a] += 1);
        let entropy = entropy_of_counts(&counts);
        report.losses.push(lv);
        report.entropies.push(entropy);
        log.row(&[step as f64, lv, entropy, tc.lr])?;
        if step + 1 >= tc.collapse_warmup && entropy < threshold {
            log.flush()?;
            return Err(Error::Collapse { step, entropy, threshold });
        }
        if step % 50 == 0 {
            log::debug!("features step {step}: loss {lv:.4} entropy {entropy:.3}");
        }
    }
    log.flush()?;
    Ok((student, report))
}
