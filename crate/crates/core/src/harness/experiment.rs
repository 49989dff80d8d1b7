//! The toy-scale comparison run: codec → features → FM[feature], FM[label]
//! → SR rows (feature / label / null) → evaluation on the shared test split.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{extract_patches, ingest, DatasetManifest, IngestConfig, Patch, Split};
use super::report::{emit_report, ExperimentReport, ReportRow};
use super::toy::write_toy_dataset;
use crate::checkpoint::config_hash;
use crate::codec::{train_codec, validation_l1, Codec, CodecConfig, CodecTrainConfig, CodecTrainReport};
use crate::degradation::{degrade, sample_recipe, DegradationConfig};
use crate::diffusion::{
    train_fm, Conditioning, DiffusionModel, FMTrainConfig, FmConfig, FmData, FmTrainReport, UNetConfig,
    Variant,
};
use crate::features::{train_feature_net, FeatureNet, FeatureNetConfig, FeatureTrainConfig, FeatureTrainReport};
use crate::image::batch_to_tensor;
use crate::metrics::{evaluate_pairs, MetricReport};
use crate::sr::{bicubic_up, sr_generate_batch, train_sr, SrCond, SrConfig, SrData, SrGenerator, SrTrainReport};
use crate::{Error, ImageBuffer, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// Image folder; `None` synthesizes the procedural toy set.
    pub dir: Option<PathBuf>,
    pub toy_count: usize,
    pub toy_size: usize,
    pub ingest: IngestConfig,
    /// Random training crops drawn from the train split.
    pub train_patches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecSection {
    pub config: CodecConfig,
    pub train: CodecTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSection {
    pub config: FeatureNetConfig,
    pub train: FeatureTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSection {
    pub variant: Variant,
    /// Replaces the variant's preset architecture when set.
    pub unet: Option<UNetConfig>,
    pub train: FMTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrSection {
    pub config: SrConfig,
    pub degradation: DegradationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    /// Upper bound on evaluated test patches.
    pub test_count: usize,
    pub crop_border: usize,
    pub grid_rows: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Data,
    Codec,
    Features,
    Fm,
    Sr,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Data, Stage::Codec, Stage::Features, Stage::Fm, Stage::Sr, Stage::Eval];
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| serde_json::to_value(st).ok().and_then(|v| v.as_str().map(|v| v == s)).unwrap_or(false))
            .ok_or_else(|| Error::config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Stages to execute; the others must already have their artifacts.
    pub stages: Vec<Stage>,
    pub data: DataSection,
    pub codec: CodecSection,
    pub features: FeatureSection,
    pub diffusion: DiffusionSection,
    pub sr: SrSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Desk-scale toy comparison.
    pub fn toy(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            name: "toy".into(),
            seed: 0,
            output_dir: output_dir.into(),
            stages: Stage::ALL.to_vec(),
            data: DataSection {
                dir: None,
                toy_count: 3000,
                toy_size: 64,
                ingest: IngestConfig::default(),
                train_patches: 2000,
            },
            codec: CodecSection {
                config: CodecConfig { channel_widths: vec![16, 32, 64, 64], ..CodecConfig::default() },
                train: CodecTrainConfig { steps: 1500, batch: 8, crop: 32, lr: 1e-3, ..Default::default() },
            },
            features: FeatureSection {
                config: FeatureNetConfig::default(),
                train: FeatureTrainConfig { steps: 300, batch: 16, ..Default::default() },
            },
            diffusion: DiffusionSection {
                variant: Variant::Eff,
                unet: None,
                train: FMTrainConfig { steps: 600, batch: 16, lr: 2e-4, ..Default::default() },
            },
            sr: SrSection {
                config: SrConfig { steps: 300, batch: 4, lr: 1e-3, fake_lr: 1e-3, ..Default::default() },
                degradation: DegradationConfig::default(),
            },
            eval: EvalSection { test_count: 120, crop_border: 4, grid_rows: 5 },
        }
    }

    /// Minutes-scale preset exercising every stage with tiny budgets.
    pub fn smoke(output_dir: impl Into<PathBuf>) -> Self {
        let mut c = Self::toy(output_dir);
        c.name = "smoke".into();
        c.data.toy_count = 240;
        c.data.train_patches = 96;
        c.codec.config.channel_widths = vec![8, 8, 16, 16];
        c.codec.train = CodecTrainConfig { steps: 10, batch: 4, crop: 32, lr: 1e-3, ..Default::default() };
        c.features.config = FeatureNetConfig { dim: 32, depth: 1, heads: 2, proto_count: 16, head_hidden: 32, bottleneck: 16, ..Default::default() };
        c.features.train = FeatureTrainConfig { steps: 4, batch: 4, min_patches: 16, collapse_warmup: 1000, ..Default::default() };
        c.diffusion.unet = Some(UNetConfig {
            base_channels: 8,
            channel_mults: vec![1, 2],
            attn_levels: vec![1],
            head_dim: 8,
            groups: 4,
            ..UNetConfig::eff()
        });
        c.diffusion.train = FMTrainConfig { steps: 4, batch: 4, ..Default::default() };
        c.sr.config = SrConfig { steps: 3, batch: 2, ..c.sr.config };
        c.eval = EvalSection { test_count: 6, crop_border: 4, grid_rows: 3 };
        c
    }

    pub fn preset(name: &str, output_dir: impl Into<PathBuf>) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy(output_dir)),
            "smoke" => Ok(Self::smoke(output_dir)),
            other => Err(Error::config(format!("unknown preset `{other}` (toy, smoke)"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// U-Net architecture with the token width of the feature network.
    pub fn unet_config(&self) -> UNetConfig {
        let mut u = self.diffusion.unet.clone().unwrap_or_else(|| UNetConfig::for_variant(self.diffusion.variant));
        u.token_dim = self.features.config.dim;
        u
    }

    /// The same config with every stage seed derived from the global seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.data.ingest.seed = self.seed.wrapping_add(1);
        c.codec.train.seed = self.seed.wrapping_add(2);
        c.features.train.seed = self.seed.wrapping_add(3);
        c.diffusion.train.seed = self.seed.wrapping_add(4);
        c.sr.config.seed = self.seed.wrapping_add(5);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.config.validate()?;
        self.features.config.validate()?;
        self.unet_config().validate()?;
        self.data.ingest.validate()?;
        self.diffusion.train.validate()?;
        self.sr.degradation.validate()?;
        self.sr.config.validate(1000)?;
        if self.data.ingest.patch_policy.train_crop != self.sr.config.patch {
            return Err(Error::config("SR patch must equal the training crop"));
        }
        Ok(())
    }
}

/// Artifact layout under the output directory.
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn codec(&self) -> PathBuf {
        self.root.join("codec.ckpt")
    }
    pub fn features(&self) -> PathBuf {
        self.root.join("features.ckpt")
    }
    pub fn fm(&self, c: Conditioning) -> PathBuf {
        self.root.join(format!("fm_{}.ckpt", cond_name(c)))
    }
    pub fn sr(&self, row: &str) -> PathBuf {
        self.root.join(format!("sr_{row}.ckpt"))
    }
}

fn cond_name(c: Conditioning) -> &'static str {
    match c {
        Conditioning::Feature => "feature",
        Conditioning::Label => "label",
        Conditioning::Null => "null",
    }
}

/// The three compared rows: name, FM conditioning, generator conditioning.
pub const ROWS: [(&str, Conditioning, Conditioning); 3] = [
    ("f2i", Conditioning::Feature, Conditioning::Feature),
    ("t2i_standin", Conditioning::Label, Conditioning::Label),
    ("null", Conditioning::Feature, Conditioning::Null),
];

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub codec: Option<CodecTrainReport>,
    pub codec_val_l1: Option<f64>,
    pub features: Option<FeatureTrainReport>,
    pub fm: BTreeMap<String, FmTrainReport>,
    pub sr: BTreeMap<String, SrTrainReport>,
}

pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub report: ExperimentReport,
    pub row_metrics: BTreeMap<String, MetricReport>,
    pub bicubic: MetricReport,
    pub codec_bicubic: MetricReport,
    /// Held-out codec reconstruction (HR → codec → HR).
    pub codec_recon: MetricReport,
    pub training: TrainingSummary,
    pub seconds: BTreeMap<String, f64>,
}

fn require(stage: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingStage { stage: stage.into(), path: path.to_path_buf() })
    }
}

fn images(p: &[Patch]) -> Vec<ImageBuffer> {
    p.iter().map(|p| p.image.clone()).collect()
}

/// Scaled latent means of `patches`, batched.
pub fn encode_patches(codec: &Codec, patches: &[ImageBuffer]) -> Result<candle_core::Tensor> {
    let mut outs = Vec::new();
    for chunk in patches.chunks(32) {
        let x = batch_to_tensor(chunk, codec.dtype(), codec.store().device())?;
        outs.push(codec.encode_tensor(&x)?.mean.detach());
    }
    Ok(candle_core::Tensor::cat(&outs, 0)?)
}

/// Test pairs: HR center crops with their degraded LR counterparts. The
/// degradation recipe of test image `i` is seeded from `(seed, i)`.
pub fn test_pairs(test: &[Patch], deg: &DegradationConfig, seed: u64) -> Result<Vec<(String, ImageBuffer, ImageBuffer)>> {
    test.iter()
        .enumerate()
        .map(|(i, p)| {
            let recipe = sample_recipe(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), deg)?;
            Ok((p.id.clone(), degrade(&p.image, &recipe)?, p.image.clone()))
        })
        .collect()
}

fn timed<T>(seconds: &mut BTreeMap<String, f64>, key: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f()?;
    seconds.insert(key.to_string(), t.elapsed().as_secs_f64());
    log::info!("stage {key} done in {:.1}s", t.elapsed().as_secs_f64());
    Ok(out)
}

/// Runs the requested stages in dependency order and writes every artifact
/// plus the comparison report into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let paths = Paths { root: cfg.output_dir.clone() };
    std::fs::create_dir_all(&paths.root)?;
    cfg.save(&paths.root.join("config.resolved.json"))?;
    let run = |s: Stage| cfg.stages.contains(&s);
    let mut seconds = BTreeMap::new();
    let mut training = TrainingSummary::default();

    // Data.
    let manifest = if run(Stage::Data) {
        timed(&mut seconds, "data", || {
            let dir = match &cfg.data.dir {
                Some(d) => d.clone(),
                None => {
                    let d = paths.data();
                    write_toy_dataset(&d, cfg.data.toy_count, cfg.data.toy_size, cfg.seed)?;
                    d
                }
            };
            let m = ingest(&dir, &cfg.data.ingest)?;
            m.save(&paths.manifest())?;
            Ok(m)
        })?
    } else {
        require("data", &paths.manifest())?;
        DatasetManifest::load(&paths.manifest())?
    };
    let policy = &cfg.data.ingest.patch_policy;
    let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed);
    prng.set_stream(7);
    let train = extract_patches(&manifest, Split::Train, policy.train_crop, cfg.data.train_patches, &mut prng)?;
    let val = extract_patches(&manifest, Split::Val, policy.eval_crop, 0, &mut prng)?;
    let mut test = extract_patches(&manifest, Split::Test, policy.eval_crop, 0, &mut prng)?;
    test.truncate(cfg.eval.test_count);
    let train_imgs = images(&train);
    let labels: Vec<usize> = train.iter().map(|p| p.label.unwrap_or(0)).collect();
    let num_labels = manifest.num_labels().max(1);

    // Codec.
    let codec = if run(Stage::Codec) {
        timed(&mut seconds, "codec", || {
            let (codec, rep) =
                train_codec(&train_imgs, &cfg.codec.config, &cfg.codec.train, Some(&paths.root.join("codec_loss.csv")))?;
            codec.save(paths.codec())?;
            training.codec_val_l1 = Some(validation_l1(&codec, &images(&val))?);
            training.codec = Some(rep);
            Ok(())
        })?;
        Codec::load(paths.codec())?
    } else {
        require("codec", &paths.codec())?;
        Codec::load(paths.codec())?
    };

    // Features.
    let features = if run(Stage::Features) {
        timed(&mut seconds, "features", || {
            let (net, rep) = train_feature_net(
                &train_imgs,
                &cfg.features.config,
                &cfg.features.train,
                Some(&paths.root.join("features_loss.csv")),
            )?;
            net.save(paths.features())?;
            training.features = Some(rep);
            Ok(())
        })?;
        FeatureNet::load(paths.features())?
    } else {
        require("features", &paths.features())?;
        FeatureNet::load(paths.features())?
    };

    // Foundation models.
    let unet_cfg = cfg.unet_config();
    let seq_len = cfg.features.config.seq_len();
    let fm_conds = [Conditioning::Feature, Conditioning::Label];
    if run(Stage::Fm) {
        let latents = encode_patches(&codec, &train_imgs)?;
        let tokens = features.extract_batch(&train_imgs)?.detach();
        let data = FmData { latents, tokens: Some(tokens), labels: Some(labels.clone()) };
        for c in fm_conds {
            let key = format!("fm_{}", cond_name(c));
            timed(&mut seconds, &key, || {
                let fm_cfg = FmConfig::new(unet_cfg.clone(), c, num_labels, seq_len);
                let csv = paths.root.join(format!("{key}_loss.csv"));
                let (model, rep) = train_fm(&data, &fm_cfg, &cfg.diffusion.train, Some(&csv), None)?;
                model.save(paths.fm(c))?;
                training.fm.insert(cond_name(c).to_string(), rep);
                Ok(())
            })?;
        }
    } else {
        for c in fm_conds {
            require(&format!("fm[{}]", cond_name(c)), &paths.fm(c))?;
        }
    }

    // SR rows.
    let load_gen = |fm_c: Conditioning, gen_c: Conditioning| -> Result<SrGenerator> {
        let sc = SrConfig { conditioning: gen_c, ..cfg.sr.config.clone() };
        let feats = if gen_c == Conditioning::Feature || sc.lambda_percep > 0.0 {
            Some(FeatureNet::load(paths.features())?)
        } else {
            None
        };
        SrGenerator::new(sc, Codec::load(paths.codec())?, DiffusionModel::load(paths.fm(fm_c))?, feats)
    };
    let mut gens = BTreeMap::new();
    for (row, fm_c, gen_c) in ROWS {
        if run(Stage::Sr) {
            let gen = load_gen(fm_c, gen_c)?;
            timed(&mut seconds, &format!("sr_{row}"), || {
                let data = SrData { hr: &train_imgs, labels: Some(&labels) };
                let csv = paths.root.join(format!("sr_{row}_loss.csv"));
                let rep = train_sr(&gen, &data, &cfg.sr.degradation, Some(&csv), Some(&paths.sr(&format!("{row}.lastgood"))))?;
                gen.save(paths.sr(row))?;
                training.sr.insert(row.to_string(), rep);
                Ok(())
            })?;
            gens.insert(row, gen);
        } else {
            require(&format!("sr[{row}]"), &paths.sr(row))?;
            let fm = DiffusionModel::load(paths.fm(fm_c))?;
            let feats = Some(FeatureNet::load(paths.features())?);
            gens.insert(row, SrGenerator::load(paths.sr(row), Codec::load(paths.codec())?, fm, feats)?);
        }
    }
    std::fs::write(paths.root.join("training.json"), serde_json::to_string_pretty(&training)?)?;

    // Evaluation.
    let pairs = test_pairs(&test, &cfg.sr.degradation, cfg.seed)?;
    let test_labels: Vec<usize> = test.iter().map(|p| p.label.unwrap_or(0)).collect();
    let border = cfg.eval.crop_border;
    let t0 = Instant::now();
    let bic: Vec<ImageBuffer> = pairs.iter().map(|p| bicubic_up(&p.1)).collect::<Result<_>>()?;
    let with = |imgs: &[ImageBuffer]| -> Vec<(String, ImageBuffer, ImageBuffer)> {
        pairs.iter().zip(imgs).map(|(p, s)| (p.0.clone(), s.clone(), p.2.clone())).collect()
    };
    let bicubic = evaluate_pairs(&with(&bic), &features, border, vec![])?;
    let cbic: Vec<ImageBuffer> = bic.iter().map(|b| codec.reconstruct(b)).collect::<Result<_>>()?;
    let codec_bicubic = evaluate_pairs(&with(&cbic), &features, border, vec![])?;
    let recon: Vec<ImageBuffer> = pairs.iter().map(|p| codec.reconstruct(&p.2)).collect::<Result<_>>()?;
    let codec_recon = evaluate_pairs(&with(&recon), &features, border, vec![])?;

    let full_params = DiffusionModel::init(
        FmConfig::new(UNetConfig { token_dim: unet_cfg.token_dim, ..UNetConfig::full() }, Conditioning::Feature, 0, seq_len),
        0,
        DType::F32,
        false,
    )?
    .unet_parameters();
    let lrs: Vec<ImageBuffer> = pairs.iter().map(|p| p.1.clone()).collect();
    let mut rows = Vec::new();
    let mut row_metrics = BTreeMap::new();
    let mut grids = Vec::new();
    for (row, _, _) in ROWS {
        let gen = &gens[row];
        let mut srs = Vec::with_capacity(lrs.len());
        for (chunk, lab) in lrs.chunks(16).zip(test_labels.chunks(16)) {
            srs.extend(sr_generate_batch(chunk, gen, SrCond::Auto(Some(lab)))?);
        }
        let rep = evaluate_pairs(&with(&srs), &features, border, vec![])?;
        let params = gen.fm().unet_parameters();
        rows.push(ReportRow {
            name: row.to_string(),
            conditioning: gen.config().conditioning,
            fm_params: params,
            param_ratio_vs_full: params as f64 / full_params as f64,
            trainable_params: gen.trainable_values(),
            metrics: rep.aggregate.clone(),
        });
        let n = cfg.eval.grid_rows.min(pairs.len());
        grids.push((row.to_string(), (0..n).map(|i| (bic[i].clone(), srs[i].clone(), pairs[i].2.clone())).collect()));
        row_metrics.insert(row.to_string(), rep);
    }
    seconds.insert("eval".into(), t0.elapsed().as_secs_f64());
    let report = ExperimentReport {
        name: cfg.name.clone(),
        config_hash: config_hash(&ExperimentConfig { output_dir: PathBuf::new(), ..cfg.clone() })?,
        seed: cfg.seed,
        variant: cfg.diffusion.variant,
        test_count: pairs.len(),
        rows,
        bicubic: bicubic.aggregate.clone(),
        codec_bicubic: codec_bicubic.aggregate.clone(),
        codec_reconstruction: codec_recon.aggregate.clone(),
    };
    emit_report(&paths.root, &report, &row_metrics, &grids)?;
    std::fs::write(paths.root.join("timings.json"), serde_json::to_string_pretty(&seconds)?)?;
    Ok(ExperimentOutcome {
        dir: paths.root,
        report,
        row_metrics,
        bicubic,
        codec_bicubic,
        codec_recon,
        training,
        seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_roundtrip() {
        for name in ["toy", "smoke"] {
            let c = ExperimentConfig::preset(name, "/tmp/x").unwrap();
            c.validate().unwrap();
            let s = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<ExperimentConfig>(&s).unwrap(), c);
        }
        assert!(ExperimentConfig::preset("huge", "/tmp/x").is_err());
    }

    #[test]
    fn illegal_conditioning_rejected_by_parser() {
        let c = ExperimentConfig::smoke("/tmp/x");
        let s = serde_json::to_string(&c).unwrap().replace("\"feature\"", "\"text\"");
        assert!(serde_json::from_str::<ExperimentConfig>(&s).is_err());
    }

    #[test]
    fn missing_upstream_stage_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::smoke(dir.path());
        c.stages = vec![Stage::Eval];
        match run_experiment(&c) {
            Err(Error::MissingStage { stage, .. }) => assert_eq!(stage, "data"),
            other => panic!("expected a missing-stage error, got {:?}", other.err()),
        }
    }
}
