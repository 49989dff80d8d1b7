use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::KernelConfig;
use crate::{Error, ImageBuffer, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    IsoGaussian,
    AnisoGaussian,
    GeneralizedGaussian,
    Plateau,
    Sinc,
}

impl KernelKind {
    pub const ALL: [KernelKind; 5] = [
        KernelKind::IsoGaussian,
        KernelKind::AnisoGaussian,
        KernelKind::GeneralizedGaussian,
        KernelKind::Plateau,
        KernelKind::Sinc,
    ];
}

/// A blur kernel described by its family and parameters. Weights are derived
/// on demand, so a serialized kernel regenerates bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurKernel {
    pub kind: KernelKind,
    pub size: usize,
    pub params: BTreeMap<String, f64>,
}

impl BlurKernel {
    pub fn iso_gaussian(size: usize, sigma: f64) -> Self {
        Self::gaussian_family(KernelKind::IsoGaussian, size, sigma, sigma, 0.0, None)
    }

    pub fn aniso_gaussian(size: usize, sigma_x: f64, sigma_y: f64, rotation: f64) -> Self {
        Self::gaussian_family(KernelKind::AnisoGaussian, size, sigma_x, sigma_y, rotation, None)
    }

    pub fn generalized_gaussian(size: usize, sigma_x: f64, sigma_y: f64, rotation: f64, beta: f64) -> Self {
        Self::gaussian_family(KernelKind::GeneralizedGaussian, size, sigma_x, sigma_y, rotation, Some(beta))
    }

    pub fn plateau(size: usize, sigma_x: f64, sigma_y: f64, rotation: f64, beta: f64) -> Self {
        Self::gaussian_family(KernelKind::Plateau, size, sigma_x, sigma_y, rotation, Some(beta))
    }

    pub fn sinc(size: usize, cutoff: f64) -> Self {
        let mut params = BTreeMap::new();
        params.insert("cutoff_rad".to_string(), cutoff);
        Self { kind: KernelKind::Sinc, size, params }
    }

    /// Zero-width Gaussian: all weight on the center tap.
    pub fn delta(size: usize) -> Self {
        Self::iso_gaussian(size, 0.0)
    }

    fn gaussian_family(
        kind: KernelKind,
        size: usize,
        sigma_x: f64,
        sigma_y: f64,
        rotation: f64,
        beta: Option<f64>,
    ) -> Self {
        let mut params = BTreeMap::new();
        params.insert("sigma_x".to_string(), sigma_x);
        params.insert("sigma_y".to_string(), sigma_y);
        params.insert("rotation_rad".to_string(), rotation);
        if let Some(b) = beta {
            params.insert("beta".to_string(), b);
        }
        Self { kind, size, params }
    }

    fn param(&self, name: &str) -> Result<f64> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("{:?} kernel missing `{name}`", self.kind)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 1 || self.size % 2 == 0 {
            return Err(Error::config(format!("kernel size {} must be odd", self.size)));
        }
        Ok(())
    }

    /// Row-major `size×size` weights normalized to unit sum.
    pub fn weights(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.size;
        let r = (n / 2) as f64;
        let mut w = vec![0.0f64; n * n];
        match self.kind {
            KernelKind::Sinc => {
                let cutoff = self.param("cutoff_rad")?;
                for y in 0..n {
                    for x in 0..n {
                        let (dx, dy) = (x as f64 - r, y as f64 - r);
                        let d = (dx * dx + dy * dy).sqrt();
                        w[y * n + x] = if d == 0.0 {
                            cutoff * cutoff / (4.0 * PI)
                        } else {
                            cutoff * libm::j1(cutoff * d) / (2.0 * PI * d)
                        };
                    }
                }
            }
            kind => {
                let (sx, sy) = (self.param("sigma_x")?, self.param("sigma_y")?);
                let theta = self.param("rotation_rad")?;
                if sx <= 0.0 || sy <= 0.0 {
                    w[(n / 2) * n + n / 2] = 1.0;
                    return Ok(w);
                }
                let beta = match kind {
                    KernelKind::GeneralizedGaussian | KernelKind::Plateau => self.param("beta")?,
                    _ => 1.0,
                };
                // Inverse of R·diag(sx², sy²)·Rᵀ.
                let (c, s) = (theta.cos(), theta.sin());
                let (ix, iy) = (1.0 / (sx * sx), 1.0 / (sy * sy));
                let a = c * c * ix + s * s * iy;
                let b = c * s * (ix - iy);
                let d = s * s * ix + c * c * iy;
                for y in 0..n {
                    for x in 0..n {
                        let (u, v) = (x as f64 - r, y as f64 - r);
                        let q = a * u * u + 2.0 * b * u * v + d * v * v;
                        w[y * n + x] = match kind {
                            KernelKind::Plateau => 1.0 / (1.0 + q.powf(beta)),
                            KernelKind::GeneralizedGaussian => (-0.5 * q.powf(beta)).exp(),
                            _ => (-0.5 * q).exp(),
                        };
                    }
                }
            }
        }
        let sum: f64 = w.iter().sum();
        if !sum.is_finite() || sum == 0.0 {
            return Err(Error::config(format!("degenerate {:?} kernel", self.kind)));
        }
        for v in &mut w {
            *v /= sum;
        }
        Ok(w)
    }

    /// Center crop to `size` taps, renormalized. Used when an intermediate
    /// image is smaller than the sampled kernel.
    pub fn cropped_weights(&self, size: usize) -> Result<(usize, Vec<f64>)> {
        let full = self.weights()?;
        if size >= self.size {
            return Ok((self.size, full));
        }
        let size = if size % 2 == 0 { size - 1 } else { size }.max(1);
        let off = (self.size - size) / 2;
        let mut w = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                w.push(full[(y + off) * self.size + x + off]);
            }
        }
        let sum: f64 = w.iter().sum();
        if sum.abs() < 1e-12 {
            // A sinc crop can cancel out; fall back to the identity tap.
            w.iter_mut().for_each(|v| *v = 0.0);
            w[(size / 2) * size + size / 2] = 1.0;
        } else {
            w.iter_mut().for_each(|v| *v /= sum);
        }
        Ok((size, w))
    }
}

pub fn sample_blur_kernel<R: Rng + ?Sized>(rng: &mut R, config: &KernelConfig) -> Result<BlurKernel> {
    config.validate()?;
    let kind = sample_kind(rng, &config.kind_probs);
    let size = {
        let lo = config.size_min / 2;
        let hi = config.size_max / 2;
        2 * rng.gen_range(lo..=hi) + 1
    };
    let sigma = |rng: &mut R| config.sigma.sample(rng);
    let kernel = match kind {
        KernelKind::IsoGaussian => BlurKernel::iso_gaussian(size, sigma(rng)),
        KernelKind::AnisoGaussian => {
            let (sx, sy) = distinct_pair(rng, config);
            BlurKernel::aniso_gaussian(size, sx, sy, rng.gen_range(-PI..PI))
        }
        KernelKind::GeneralizedGaussian | KernelKind::Plateau => {
            let (sx, sy, rot) = if rng.gen_bool(0.5) {
                let s = sigma(rng);
                (s, s, 0.0)
            } else {
                let (sx, sy) = distinct_pair(rng, config);
                (sx, sy, rng.gen_range(-PI..PI))
            };
            if kind == KernelKind::Plateau {
                BlurKernel::plateau(size, sx, sy, rot, config.plateau_beta.sample(rng))
            } else {
                BlurKernel::generalized_gaussian(size, sx, sy, rot, config.generalized_beta.sample(rng))
            }
        }
        KernelKind::Sinc => {
            let cutoff = if size < 13 {
                rng.gen_range(PI / 3.0..PI)
            } else {
                rng.gen_range(PI / 5.0..PI)
            };
            BlurKernel::sinc(size, cutoff)
        }
    };
    Ok(kernel)
}

fn distinct_pair<R: Rng + ?Sized>(rng: &mut R, config: &KernelConfig) -> (f64, f64) {
    let sx = config.sigma.sample(rng);
    let mut sy = config.sigma.sample(rng);
    while sy == sx && config.sigma.hi > config.sigma.lo {
        sy = config.sigma.sample(rng);
    }
    (sx, sy)
}

fn sample_kind<R: Rng + ?Sized>(rng: &mut R, probs: &[f64; 5]) -> KernelKind {
    let total: f64 = probs.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (kind, p) in KernelKind::ALL.iter().zip(probs) {
        if u < *p {
            return *kind;
        }
        u -= p;
    }
    KernelKind::IsoGaussian
}

#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// 2-D correlation with reflect padding; output clamped to `[0,1]`.
pub fn apply_kernel(img: &ImageBuffer, kernel: &BlurKernel) -> Result<ImageBuffer> {
    let weights = kernel.weights()?;
    apply_weights(img, kernel.size, &weights)
}

pub(crate) fn apply_weights(img: &ImageBuffer, size: usize, weights: &[f64]) -> Result<ImageBuffer> {
    let (h, w) = img.dims();
    if size > h || size > w {
        return Err(Error::dim(format!("kernel {size}x{size} larger than image {h}x{w}")));
    }
    let r = (size / 2) as isize;
    let src = img.data();
    let mut out = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for ky in 0..size {
                let sy = reflect(y as isize + ky as isize - r, h);
                for kx in 0..size {
                    let wt = weights[ky * size + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    let sx = reflect(x as isize + kx as isize - r, w);
                    let p = (sy * w + sx) * 3;
                    acc[0] += wt * src[p] as f64;
                    acc[1] += wt * src[p + 1] as f64;
                    acc[2] += wt * src[p + 2] as f64;
                }
            }
            let o = (y * w + x) * 3;
            for c in 0..3 {
                out[o + c] = (acc[c] as f32).clamp(0.0, 1.0);
            }
        }
    }
    ImageBuffer::new(h, w, out)
}
