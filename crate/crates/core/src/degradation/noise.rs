use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::{Error, ImageBuffer, Result};

/// Intensity levels the Poisson model counts photons at.
const POISSON_LEVELS: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Poisson,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Standard deviation on the `[0,1]` scale (gaussian).
    pub sigma: f64,
    /// Multiplier on the shot-noise residual (poisson).
    pub scale: f64,
    /// One noise field shared by all channels.
    pub gray: bool,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self { kind: NoiseKind::Gaussian, sigma: 0.0, scale: 1.0, gray: false }
    }

    pub fn gaussian(sigma: f64, gray: bool) -> Self {
        Self { kind: NoiseKind::Gaussian, sigma, scale: 1.0, gray }
    }

    pub fn poisson(scale: f64, gray: bool) -> Self {
        Self { kind: NoiseKind::Poisson, sigma: 0.0, scale, gray }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::config(format!("noise sigma {} outside [0,1]", self.sigma)));
        }
        if self.kind == NoiseKind::Poisson && !(self.scale > 0.0) {
            return Err(Error::config(format!("poisson scale {} must be positive", self.scale)));
        }
        Ok(())
    }

    fn is_noop(&self) -> bool {
        self.kind == NoiseKind::Gaussian && self.sigma == 0.0
    }
}

fn poisson_residual<R: Rng + ?Sized>(v: f64, rng: &mut R) -> f64 {
    let lambda = v.max(0.0) * POISSON_LEVELS;
    if lambda <= 0.0 {
        return 0.0;
    }
    let k: f64 = Poisson::new(lambda).expect("positive rate").sample(rng);
    k / POISSON_LEVELS - v
}

pub fn add_noise<R: Rng + ?Sized>(img: &ImageBuffer, spec: &NoiseSpec, rng: &mut R) -> Result<ImageBuffer> {
    spec.validate()?;
    if spec.is_noop() {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    let data = out.data_mut();
    match spec.kind {
        NoiseKind::Gaussian => {
            let normal = Normal::new(0.0, spec.sigma).expect("validated sigma");
            for px in data.chunks_exact_mut(3) {
                if spec.gray {
                    let n: f64 = normal.sample(rng);
                    px.iter_mut().for_each(|v| *v = (*v as f64 + n) as f32);
                } else {
                    for v in px.iter_mut() {
                        let n: f64 = normal.sample(rng);
                        *v = (*v as f64 + n) as f32;
                    }
                }
            }
        }
        NoiseKind::Poisson => {
            for px in data.chunks_exact_mut(3) {
                if spec.gray {
                    let luma = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
                    let n = poisson_residual(luma, rng) * spec.scale;
                    px.iter_mut().for_each(|v| *v = (*v as f64 + n) as f32);
                } else {
                    for v in px.iter_mut() {
                        let n = poisson_residual(*v as f64, rng) * spec.scale;
                        *v = (*v as f64 + n) as f32;
                    }
                }
            }
        }
    }
    Ok(out.clamp01())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigma_is_identity() {
        let img = ImageBuffer::from_fn(5, 5, |y, x, c| ((y + x + c) % 4) as f32 / 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(add_noise(&img, &NoiseSpec::gaussian(0.0, false), &mut rng).unwrap(), img);
    }

    #[test]
    fn gaussian_std_matches_sigma() {
        // 578² pixels × 3 channels ≈ 10⁶ samples.
        let img = ImageBuffer::filled(578, 578, [0.5, 0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = add_noise(&img, &NoiseSpec::gaussian(0.1, false), &mut rng).unwrap();
        let diffs: Vec<f64> = out.data().iter().map(|v| *v as f64 - 0.5).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.1).abs() / 0.1 < 0.02, "std {std}");
    }

    #[test]
    fn gray_noise_is_shared_across_channels() {
        let img = ImageBuffer::filled(16, 16, [0.5, 0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [NoiseSpec::gaussian(0.05, true), NoiseSpec::poisson(1.0, true)] {
            let out = add_noise(&img, &spec, &mut rng).unwrap();
            for px in out.data().chunks_exact(3) {
                assert_eq!(px[0], px[1]);
                assert_eq!(px[1], px[2]);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let img = ImageBuffer::filled(2, 2, [0.5; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(add_noise(&img, &NoiseSpec::gaussian(-0.1, false), &mut rng).is_err());
        assert!(add_noise(&img, &NoiseSpec::poisson(0.0, false), &mut rng).is_err());
    }
}
