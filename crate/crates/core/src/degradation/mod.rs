//! Seeded two-stage synthetic degradation: HR patch → realistic LR.
//!
//! Each stage runs blur → resize → noise → JPEG; then an optional sinc
//! (ringing) filter and a final resize to exactly `HR / scale_factor`.
//! Every random choice lives in a [`DegradationRecipe`], and the noise
//! realization is drawn from a stream keyed by the recipe seed, so
//! [`degrade`] is a pure function of `(hr, recipe)`.

mod config;
mod jpeg;
mod kernels;
mod noise;
mod resize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, ImageBuffer, Result};

pub use config::{DegradationConfig, KernelConfig, Range};
pub use jpeg::jpeg_roundtrip;
pub use kernels::{apply_kernel, sample_blur_kernel, BlurKernel, KernelKind};
pub use noise::{add_noise, NoiseKind, NoiseSpec};
pub use resize::{bicubic_matrix, resize, resize_to, ResizeMode};

/// JPEG quality that means "skip compression" inside a recipe.
pub const JPEG_DISABLED: u8 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blur: BlurKernel,
    pub resize_scale: f64,
    pub resize_mode: ResizeMode,
    pub noise: NoiseSpec,
    pub jpeg_quality: u8,
}

impl StageSpec {
    /// A stage that leaves its input untouched.
    pub fn identity() -> Self {
        Self {
            blur: BlurKernel::delta(3),
            resize_scale: 1.0,
            resize_mode: ResizeMode::Area,
            noise: NoiseSpec::none(),
            jpeg_quality: JPEG_DISABLED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.blur.validate()?;
        if !(self.resize_scale > 0.0) {
            return Err(Error::config(format!("resize scale {} must be > 0", self.resize_scale)));
        }
        self.noise.validate()?;
        if !((30..=95).contains(&self.jpeg_quality) || self.jpeg_quality == JPEG_DISABLED) {
            return Err(Error::config(format!("jpeg quality {} outside [30,95]", self.jpeg_quality)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecipe {
    pub seed: u64,
    pub stages: [StageSpec; 2],
    pub final_sinc: Option<BlurKernel>,
    pub final_resize_mode: ResizeMode,
    pub scale_factor: u32,
}

impl DegradationRecipe {
    /// The degenerate recipe whose only effect is the final area resize.
    pub fn identity(scale_factor: u32) -> Self {
        Self {
            seed: 0,
            stages: [StageSpec::identity(), StageSpec::identity()],
            final_sinc: None,
            final_resize_mode: ResizeMode::Area,
            scale_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale_factor, 2 | 4) {
            return Err(Error::config(format!("scale factor {} not in {{2, 4}}", self.scale_factor)));
        }
        for s in &self.stages {
            s.validate()?;
        }
        if let Some(k) = &self.final_sinc {
            k.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }
}

fn sample_stage(rng: &mut ChaCha8Rng, config: &DegradationConfig, resize: Range) -> Result<StageSpec> {
    let blur = sample_blur_kernel(rng, &config.kernel)?;
    let resize_scale = resize.sample(rng);
    let resize_mode = ResizeMode::ALL[rng.gen_range(0..3)];
    let gray = rng.gen_bool(config.gray_prob);
    let noise = if rng.gen_bool(config.gaussian_prob) {
        NoiseSpec::gaussian(config.gaussian_sigma.sample(rng), gray)
    } else {
        NoiseSpec::poisson(config.poisson_scale.sample(rng), gray)
    };
    let jpeg_quality = rng.gen_range(config.jpeg_quality.0..=config.jpeg_quality.1);
    Ok(StageSpec { blur, resize_scale, resize_mode, noise, jpeg_quality })
}

pub fn sample_recipe(seed: u64, config: &DegradationConfig) -> Result<DegradationRecipe> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = sample_stage(&mut rng, config, config.stage1_resize)?;
    let second = sample_stage(&mut rng, config, config.stage2_resize)?;
    let final_sinc = if rng.gen_bool(config.final_sinc_prob) {
        let lo = config.kernel.size_min / 2;
        let hi = config.kernel.size_max / 2;
        let size = 2 * rng.gen_range(lo..=hi) + 1;
        Some(BlurKernel::sinc(size, config.final_sinc_cutoff.sample(&mut rng)))
    } else {
        None
    };
    let final_resize_mode = ResizeMode::ALL[rng.gen_range(0..3)];
    Ok(DegradationRecipe {
        seed,
        stages: [first, second],
        final_sinc,
        final_resize_mode,
        scale_factor: config.scale_factor,
    })
}

/// Applies a kernel, center-cropping it first when the image is smaller.
fn blur_fitted(img: &ImageBuffer, kernel: &BlurKernel) -> Result<ImageBuffer> {
    let limit = img.height().min(img.width());
    if kernel.size <= limit {
        return apply_kernel(img, kernel);
    }
    let (size, weights) = kernel.cropped_weights(limit)?;
    kernels::apply_weights(img, size, &weights)
}

fn run_stage(img: &ImageBuffer, stage: &StageSpec, rng: &mut ChaCha8Rng) -> Result<ImageBuffer> {
    let blurred = blur_fitted(img, &stage.blur)?;
    let (h, w) = blurred.dims();
    let oh = ((h as f64 * stage.resize_scale).round() as usize).max(1);
    let ow = ((w as f64 * stage.resize_scale).round() as usize).max(1);
    let resized = resize_to(&blurred, oh, ow, stage.resize_mode)?;
    let noisy = add_noise(&resized, &stage.noise, rng)?;
    if stage.jpeg_quality == JPEG_DISABLED {
        Ok(noisy)
    } else {
        jpeg_roundtrip(&noisy, stage.jpeg_quality)
    }
}

pub fn degrade(hr: &ImageBuffer, recipe: &DegradationRecipe) -> Result<ImageBuffer> {
    recipe.validate()?;
    let sf = recipe.scale_factor as usize;
    let (h, w) = hr.dims();
    if h % sf != 0 || w % sf != 0 {
        return Err(Error::dim(format!("HR {h}x{w} not divisible by scale factor {sf}")));
    }
    // Stream 1 keeps the noise realization independent of parameter sampling.
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    rng.set_stream(1);
    let mut img = hr.clone();
    for stage in &recipe.stages {
        img = run_stage(&img, stage, &mut rng)?;
    }
    if let Some(sinc) = &recipe.final_sinc {
        img = blur_fitted(&img, sinc)?;
    }
    resize_to(&img, h / sf, w / sf, recipe.final_resize_mode)
}
