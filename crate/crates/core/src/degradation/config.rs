use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi {
            return Err(Error::config(format!("range `{name}` has lo {} > hi {}", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..self.hi)
        }
    }
}

/// Blur-kernel sampling table. Kind probabilities are ordered
/// iso, aniso, generalized, plateau, sinc.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub size_min: usize,
    pub size_max: usize,
    pub sigma: Range,
    pub generalized_beta: Range,
    pub plateau_beta: Range,
    pub kind_probs: [f64; 5],
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            size_min: 7,
            size_max: 21,
            sigma: Range::new(0.2, 3.0),
            generalized_beta: Range::new(0.5, 4.0),
            plateau_beta: Range::new(1.0, 2.0),
            kind_probs: [0.45, 0.25, 0.12, 0.03, 0.15],
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size_min < 3 || self.size_min > self.size_max || self.size_min % 2 == 0 || self.size_max % 2 == 0 {
            return Err(Error::config(format!(
                "kernel sizes [{}, {}] must be odd, >= 3 and ordered",
                self.size_min, self.size_max
            )));
        }
        self.sigma.validate("sigma")?;
        self.generalized_beta.validate("generalized_beta")?;
        self.plateau_beta.validate("plateau_beta")?;
        if self.sigma.lo <= 0.0 {
            return Err(Error::config("sigma range must be positive"));
        }
        if self.kind_probs.iter().any(|p| *p < 0.0) || self.kind_probs.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("kernel kind probabilities must be non-negative with positive sum"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub kernel: KernelConfig,
    /// Stage-1 resize, relative to the HR input.
    pub stage1_resize: Range,
    /// Stage-2 resize, relative to the stage-1 output.
    pub stage2_resize: Range,
    pub gaussian_prob: f64,
    pub gaussian_sigma: Range,
    pub gray_prob: f64,
    pub poisson_scale: Range,
    pub jpeg_quality: (u8, u8),
    pub final_sinc_prob: f64,
    pub final_sinc_cutoff: Range,
    pub scale_factor: u32,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            kernel: KernelConfig::default(),
            stage1_resize: Range::new(0.15, 1.5),
            stage2_resize: Range::new(0.3, 1.2),
            gaussian_prob: 0.5,
            gaussian_sigma: Range::new(1.0 / 255.0, 30.0 / 255.0),
            gray_prob: 0.4,
            poisson_scale: Range::new(0.05, 3.0),
            jpeg_quality: (30, 95),
            final_sinc_prob: 0.8,
            final_sinc_cutoff: Range::new(PI / 3.0, PI),
            scale_factor: 4,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.stage1_resize.validate("stage1_resize")?;
        self.stage2_resize.validate("stage2_resize")?;
        self.gaussian_sigma.validate("gaussian_sigma")?;
        self.poisson_scale.validate("poisson_scale")?;
        self.final_sinc_cutoff.validate("final_sinc_cutoff")?;
        if self.stage1_resize.lo <= 0.0 || self.stage2_resize.lo <= 0.0 {
            return Err(Error::config("resize scales must be positive"));
        }
        if self.gaussian_sigma.lo < 0.0 || self.poisson_scale.lo <= 0.0 {
            return Err(Error::config("noise ranges must be non-negative (poisson positive)"));
        }
        for p in [self.gaussian_prob, self.gray_prob, self.final_sinc_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("probability {p} outside [0,1]")));
            }
        }
        let (qlo, qhi) = self.jpeg_quality;
        if qlo > qhi || qlo < 30 || qhi > 95 {
            return Err(Error::config(format!("jpeg quality range [{qlo}, {qhi}] outside [30, 95]")));
        }
        if !matches!(self.scale_factor, 2 | 4) {
            return Err(Error::config(format!("scale factor {} not in {{2, 4}}", self.scale_factor)));
        }
        Ok(())
    }
}
