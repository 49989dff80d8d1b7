use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use featsr::codec::{train_codec, validation_l1, Codec};
use featsr::degradation::{degrade, sample_recipe, DegradationRecipe};
use featsr::diffusion::{train_fm, Conditioning, DiffusionModel, FmConfig, FmData};
use featsr::features::{train_feature_net, FeatureNet};
use featsr::harness::experiment::encode_patches;
use featsr::harness::{
    extract_patches, ingest, run_experiment, DatasetManifest, ExperimentConfig, ExperimentReport, Split, Stage,
};
use featsr::metrics::evaluate_set;
use featsr::sr::{sr_generate, train_sr, SrCond, SrConfig, SrData, SrGenerator};
use featsr::tiler::{plan_tiles, tiled_apply, BlendProfile};
use featsr::ImageBuffer;

#[derive(Parser)]
#[command(name = "featsr", version, about = "Feature-conditioned latent diffusion super-resolution")]
struct Cli {
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Root for relative output paths.
    #[arg(long, global = true, env = "FEATSR_OUT", default_value = ".")]
    out_root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config JSON; its sections configure every stage.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset used when no config file is given.
    #[arg(long, default_value = "toy")]
    preset: String,
}

impl ConfigArgs {
    fn load(&self, out: &Path) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::preset(&self.preset, out)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Curate an image folder into a split manifest.
    Ingest {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variance_threshold: Option<f64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write degraded LR images and their recipes.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replay a saved recipe for every image.
        #[arg(long)]
        recipe: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write training or evaluation patches from a manifest.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the latent codec.
    TrainCodec {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the self-distilled feature network.
    TrainFeatures {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the conditional latent diffusion model.
    TrainFm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value = "feature")]
        conditioning: Conditioning,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train LoRA adapters for one-step super-resolution.
    TrainSr {
        #[arg(long)]
        fm: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Generator conditioning; defaults to the FM's own.
        #[arg(long)]
        conditioning: Option<Conditioning>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Super-resolve an image or a folder of images.
    Infer {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        fm: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Class label for label-conditioned generators.
        #[arg(long)]
        label: Option<usize>,
        /// Use null conditioning.
        #[arg(long)]
        null: bool,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long, default_value_t = 32)]
        overlap: usize,
        #[arg(long, default_value = "linear")]
        blend: BlendProfile,
    },
    /// Score a folder of SR outputs against HR references.
    Eval {
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 4)]
        crop_border: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline and emit the comparison report.
    Experiment {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Subset of stages; the rest reuse artifacts in the output dir.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<Stage>>,
    },
    /// Print the table of a finished experiment.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("png" | "jpg" | "jpeg"))
        })
        .collect();
    v.sort();
    Ok(v)
}

fn inputs(p: &Path) -> Result<Vec<PathBuf>> {
    if p.is_dir() {
        list_pngs(p)
    } else {
        Ok(vec![p.to_path_buf()])
    }
}

fn train_images(manifest: &Path, cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<ImageBuffer>, Vec<usize>, usize)> {
    let m = DatasetManifest::load(manifest)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let crop = cfg.data.ingest.patch_policy.train_crop;
    let patches = extract_patches(&m, Split::Train, crop, cfg.data.train_patches, &mut rng)?;
    let labels = patches.iter().map(|p| p.label.unwrap_or(0)).collect();
    Ok((patches.into_iter().map(|p| p.image).collect(), labels, m.num_labels().max(1)))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let root = cli.out_root.clone();
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Ingest { dir, out, variance_threshold, config } => {
            let mut ic = config.load(&root)?.data.ingest;
            ic.seed = seed;
            if let Some(t) = variance_threshold {
                ic.variance_threshold = t;
            }
            let m = ingest(&dir, &ic)?;
            let out = resolve(&root, &out);
            m.save(&out)?;
            println!(
                "{} images: train {} val {} test {}, rejected {}",
                m.entries.len(),
                m.count(Split::Train),
                m.count(Split::Val),
                m.count(Split::Test),
                m.rejected.len()
            );
        }
        Cmd::Degrade { input, out, recipe, config } => {
            let deg = config.load(&root)?.sr.degradation;
            let fixed = match recipe {
                Some(p) => Some(DegradationRecipe::from_json(&std::fs::read_to_string(p)?)?),
                None => None,
            };
            let out = resolve(&root, &out);
            std::fs::create_dir_all(&out)?;
            for (i, path) in inputs(&input)?.iter().enumerate() {
                let r = match &fixed {
                    Some(r) => r.clone(),
                    None => sample_recipe(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), &deg)?,
                };
                let lr = degrade(&ImageBuffer::load(path)?, &r)?;
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("img");
                lr.save_png(out.join(format!("{stem}.png")))?;
                std::fs::write(out.join(format!("{stem}.recipe.json")), r.to_json()?)?;
            }
        }
        Cmd::Extract { data, split, size, count, out } => {
            let m = DatasetManifest::load(&data)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = resolve(&root, &out);
            std::fs::create_dir_all(&out)?;
            let patches = extract_patches(&m, split, size, count, &mut rng)?;
            for p in &patches {
                p.image.save_png(out.join(format!("{}.png", p.id)))?;
            }
            println!("{} patches", patches.len());
        }
        Cmd::TrainCodec { data, out, steps, config } => {
            let cfg = config.load(&root)?;
            let mut tc = cfg.codec.train.clone();
            tc.seed = seed;
            if let Some(s) = steps {
                tc.steps = s;
            }
            let (imgs, _, _) = train_images(&data, &cfg, seed)?;
            let out = resolve(&root, &out);
            let (codec, _) = train_codec(&imgs, &cfg.codec.config, &tc, Some(&out.with_extension("csv")))?;
            codec.save(&out)?;
            println!("train L1 {:.5}", validation_l1(&codec, &imgs[..imgs.len().min(64)])?);
        }
        Cmd::TrainFeatures { data, out, steps, config } => {
            let cfg = config.load(&root)?;
            let mut tc = cfg.features.train.clone();
            tc.seed = seed;
            if let Some(s) = steps {
                tc.steps = s;
            }
            let (imgs, _, _) = train_images(&data, &cfg, seed)?;
            let out = resolve(&root, &out);
            let (net, rep) = train_feature_net(&imgs, &cfg.features.config, &tc, Some(&out.with_extension("csv")))?;
            net.save(&out)?;
            if let Some(l) = rep.losses.last() {
                println!("final loss {l:.5}");
            }
        }
        Cmd::TrainFm { data, codec, features, conditioning, out, steps, config } => {
            let cfg = config.load(&root)?;
            let mut tc = cfg.diffusion.train.clone();
            tc.seed = seed;
            if let Some(s) = steps {
                tc.steps = s;
            }
            if conditioning == Conditioning::Null {
                bail!("train-fm conditioning must be feature or label");
            }
            let (imgs, labels, num_labels) = train_images(&data, &cfg, seed)?;
            let codec = Codec::load(&codec)?;
            let net = FeatureNet::load(&features)?;
            let fd = FmData {
                latents: encode_patches(&codec, &imgs)?,
                tokens: Some(net.extract_batch(&imgs)?.detach()),
                labels: Some(labels),
            };
            let fm_cfg = FmConfig::new(cfg.unet_config(), conditioning, num_labels, net.config().seq_len());
            let out = resolve(&root, &out);
            let (model, rep) = train_fm(&fd, &fm_cfg, &tc, Some(&out.with_extension("csv")), None)?;
            model.save(&out)?;
            println!("final loss {:.5}, null-conditioned samples {}", rep.losses.last().unwrap_or(&f64::NAN), rep.null_count);
        }
        Cmd::TrainSr { fm, features, codec, data, conditioning, out, steps, config } => {
            let cfg = config.load(&root)?;
            let fm = DiffusionModel::load(&fm)?;
            let mut sc = SrConfig { seed, conditioning: conditioning.unwrap_or(fm.config().conditioning), ..cfg.sr.config.clone() };
            if let Some(s) = steps {
                sc.steps = s;
            }
            let (imgs, labels, _) = train_images(&data, &cfg, seed)?;
            let gen = SrGenerator::new(sc, Codec::load(&codec)?, fm, Some(FeatureNet::load(&features)?))?;
            let out = resolve(&root, &out);
            let rep = train_sr(
                &gen,
                &SrData { hr: &imgs, labels: Some(&labels) },
                &cfg.sr.degradation,
                Some(&out.with_extension("csv")),
                Some(&out.with_extension("lastgood.ckpt")),
            )?;
            gen.save(&out)?;
            println!("final loss {:.5}, FM checksum {}", rep.losses.last().unwrap_or(&f64::NAN), rep.fm_checksum);
        }
        Cmd::Infer { input, out, sr, fm, codec, features, label, null, tile, overlap, blend } => {
            let feats = features.map(|p| FeatureNet::load(&p)).transpose()?;
            let gen = SrGenerator::load(&sr, Codec::load(&codec)?, DiffusionModel::load(&fm)?, feats)?;
            let labels = label.map(|l| vec![l]);
            let cond = || if null { SrCond::Null } else { SrCond::Auto(labels.as_deref()) };
            let out = resolve(&root, &out);
            std::fs::create_dir_all(&out)?;
            for path in inputs(&input)? {
                let lr = ImageBuffer::load(&path)?;
                let img = match tile {
                    Some(t) => {
                        let plan = plan_tiles(lr.height(), lr.width(), t, overlap)?.with_profile(blend);
                        log::info!("{}: {} tiles", path.display(), plan.tile_count());
                        tiled_apply(|x| Ok(sr_generate(x, &gen, cond())?), &lr, &plan, featsr::sr::SCALE)?
                    }
                    None => sr_generate(&lr, &gen, cond())?,
                };
                let name = path.file_name().context("input file name")?;
                img.save_png(out.join(name).with_extension("png"))?;
            }
        }
        Cmd::Eval { sr, hr, features, crop_border, out } => {
            let net = FeatureNet::load(&features)?;
            let rep = evaluate_set(&sr, &hr, &net, crop_border)?;
            let out = resolve(&root, &out);
            std::fs::create_dir_all(&out)?;
            rep.write(&out.join("metrics.csv"), &out.join("metrics.json"), "")?;
            let a = &rep.aggregate;
            println!("PSNR {:.3} SSIM {:.4} percep {:.4} FID {:?}", a.psnr_db, a.ssim, a.percep, a.fid);
            if !rep.unmatched.is_empty() {
                println!("unmatched: {}", rep.unmatched.join(", "));
            }
        }
        Cmd::Experiment { config, out, stages } => {
            let dir = resolve(&root, out.as_deref().unwrap_or(Path::new("runs/experiment")));
            let mut cfg = config.load(&dir)?;
            cfg.output_dir = dir;
            if config.config.is_none() || seed != 0 {
                cfg.seed = seed;
            }
            if let Some(s) = stages {
                cfg.stages = s;
            }
            let o = run_experiment(&cfg)?;
            print!("{}", std::fs::read_to_string(o.dir.join("summary.txt"))?);
        }
        Cmd::Report { dir } => {
            let r: ExperimentReport = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json"))?)?;
            print!("{}", r.to_table());
        }
    }
    Ok(())
}
