use serde::{Deserialize, Serialize};

use super::kernels::reflect;
use crate::{Error, ImageBuffer, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    Area,
    Bilinear,
    Bicubic,
}

impl ResizeMode {
    pub const ALL: [ResizeMode; 3] = [ResizeMode::Area, ResizeMode::Bilinear, ResizeMode::Bicubic];
}

const CUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (CUBIC_A + 2.0) * x * x * x - (CUBIC_A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        CUBIC_A * x * x * x - 5.0 * CUBIC_A * x * x + 8.0 * CUBIC_A * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Per-output-sample source taps along one axis.
fn axis_taps(n_in: usize, n_out: usize, mode: ResizeMode) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| match mode {
            ResizeMode::Area => {
                let start = (o * n_in) / n_out;
                let end = ((o + 1) * n_in).div_ceil(n_out);
                let w = 1.0 / (end - start) as f64;
                (start..end).map(|i| (i, w)).collect()
            }
            ResizeMode::Bilinear => {
                let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let t = src - i0 as f64;
                if i0 == i1 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - t), (i1, t)]
                }
            }
            ResizeMode::Bicubic => {
                let src = (o as f64 + 0.5) * ratio - 0.5;
                let base = src.floor();
                let t = src - base;
                (-1..=2)
                    .map(|k| {
                        let idx = reflect(base as isize + k, n_in);
                        (idx, cubic(t - k as f64))
                    })
                    .collect()
            }
        })
        .collect()
}

/// Rescales by `scale` on both axes; output dims are `round(dim·scale)`.
pub fn resize(img: &ImageBuffer, scale: f64, mode: ResizeMode) -> Result<ImageBuffer> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::config(format!("resize scale {scale} must be positive")));
    }
    let (h, w) = img.dims();
    let oh = (h as f64 * scale).round() as usize;
    let ow = (w as f64 * scale).round() as usize;
    resize_to(img, oh, ow, mode)
}

pub fn resize_to(img: &ImageBuffer, oh: usize, ow: usize, mode: ResizeMode) -> Result<ImageBuffer> {
    let (h, w) = img.dims();
    if oh == 0 || ow == 0 {
        return Err(Error::dim(format!("resize of {h}x{w} produces empty {oh}x{ow}")));
    }
    if (oh, ow) == (h, w) {
        return Ok(img.clone());
    }
    let rows = axis_taps(h, oh, mode);
    let cols = axis_taps(w, ow, mode);
    let src = img.data();
    // Horizontal pass into f64, then vertical.
    let mut tmp = vec![0.0f64; h * ow * 3];
    for y in 0..h {
        for (x, taps) in cols.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for &(i, wt) in taps {
                let p = (y * w + i) * 3;
                for c in 0..3 {
                    acc[c] += wt * src[p + c] as f64;
                }
            }
            tmp[(y * ow + x) * 3..][..3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0f32; oh * ow * 3];
    for (y, taps) in rows.iter().enumerate() {
        for x in 0..ow {
            let mut acc = [0.0f64; 3];
            for &(i, wt) in taps {
                let p = (i * ow + x) * 3;
                for c in 0..3 {
                    acc[c] += wt * tmp[p + c];
                }
            }
            for c in 0..3 {
                out[(y * ow + x) * 3 + c] = (acc[c] as f32).clamp(0.0, 1.0);
            }
        }
    }
    ImageBuffer::new(oh, ow, out)
}

/// Bicubic interpolation matrix `(n_out, n_in)` for one axis, matching
/// [`resize_to`] with [`ResizeMode::Bicubic`]. Used to resize inside the
/// autograd graph as `R_h · X · R_wᵀ`.
pub fn bicubic_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    if n_in == n_out {
        for i in 0..n_in {
            m[i * n_in + i] = 1.0;
        }
        return m;
    }
    for (o, taps) in axis_taps(n_in, n_out, ResizeMode::Bicubic).into_iter().enumerate() {
        for (i, wt) in taps {
            m[o * n_in + i] += wt;
        }
    }
    m
}
