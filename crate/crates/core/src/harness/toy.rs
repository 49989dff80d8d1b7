//! Procedural labelled image set used when no image folder is supplied and
//! by the test suites. Every image is a pure function of `(class, seed)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ImageBuffer, Result};

pub const TOY_CLASSES: [&str; 6] = ["discs", "squares", "stripes", "checks", "rings", "triangles"];

fn luma(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
}

/// A color whose luma differs from `other` by at least `gap`.
fn contrasting<R: Rng>(rng: &mut R, other: [f32; 3], gap: f32) -> [f32; 3] {
    loop {
        let c = color(rng);
        if (luma(c) - luma(other)).abs() >= gap {
            return c;
        }
    }
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Coverage of a signed distance (positive inside), about half a pixel wide.
fn soft(d: f32) -> f32 {
    1.0 / (1.0 + (-d * 4.0).exp())
}

/// Piecewise-constant, high-contrast shapes with crisp anti-aliased edges.
pub fn toy_image(class: usize, seed: u64, size: usize) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ class as u64);
    let c0 = color(&mut rng);
    let c1 = contrasting(&mut rng, c0, 0.45);
    let s = size as f32;
    let (cx, cy) = (rng.gen_range(0.2 * s..0.8 * s), rng.gen_range(0.2 * s..0.8 * s));
    let th = rng.gen_range(0.0..std::f32::consts::PI);
    let (ct, st) = (th.cos(), th.sin());
    let img = match class % TOY_CLASSES.len() {
        0 => {
            let discs: Vec<(f32, f32, f32, [f32; 3])> = (0..rng.gen_range(2..5))
                .map(|_| {
                    let r = rng.gen_range(s / 10.0..s / 4.0);
                    (rng.gen_range(0.0..s), rng.gen_range(0.0..s), r, contrasting(&mut rng, c0, 0.35))
                })
                .collect();
            ImageBuffer::from_fn(size, size, |y, x, c| {
                let mut v = c0[c];
                for d in &discs {
                    let r = ((x as f32 - d.0).powi(2) + (y as f32 - d.1).powi(2)).sqrt();
                    let w = soft(d.2 - r);
                    v = v * (1.0 - w) + d.3[c] * w;
                }
                v
            })
        }
        1 => {
            let half = rng.gen_range(s / 6.0..s / 3.0);
            ImageBuffer::from_fn(size, size, |y, x, c| {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let (u, v) = (ct * dx + st * dy, -st * dx + ct * dy);
                let d = half - u.abs().max(v.abs());
                mix(c0, c1, soft(d))[c]
            })
        }
        2 => {
            let period = rng.gen_range(12.0..32.0f32);
            let phase = rng.gen_range(0.0..period);
            ImageBuffer::from_fn(size, size, |y, x, c| {
                let u = (ct * x as f32 + st * y as f32 + phase).rem_euclid(period);
                let d = (period / 4.0) - (u - period / 2.0).abs();
                mix(c0, c1, soft(d))[c]
            })
        }
        3 => {
            let cell = rng.gen_range(10.0..24.0f32);
            ImageBuffer::from_fn(size, size, |y, x, c| {
                let u = (ct * x as f32 + st * y as f32) / cell;
                let v = (-st * x as f32 + ct * y as f32) / cell;
                let du = (u - u.round()).abs() * cell;
                let dv = (v - v.round()).abs() * cell;
                let sign = if (u.floor() + v.floor()) as i64 % 2 == 0 { 1.0 } else { -1.0 };
                mix(c0, c1, soft(sign * du.min(dv)))[c]
            })
        }
        4 => {
            let width = rng.gen_range(5.0..12.0f32);
            ImageBuffer::from_fn(size, size, |y, x, c| {
                let r = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                let u = r.rem_euclid(2.0 * width);
                let d = width / 2.0 - (u - width).abs();
                mix(c0, c1, soft(d))[c]
            })
        }
        _ => {
            let tris: Vec<([(f32, f32); 3], [f32; 3])> = (0..rng.gen_range(1..4))
                .map(|_| {
                    let (tx, ty) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
                    let r = rng.gen_range(s / 6.0..s / 2.5);
                    let a0 = rng.gen_range(0.0..std::f32::consts::TAU);
                    let pts = [0.0f32, 1.0, 2.0].map(|k| {
                        let a = a0 + k * std::f32::consts::TAU / 3.0 + rng.gen_range(-0.4..0.4);
                        (tx + r * a.cos(), ty + r * a.sin())
                    });
                    (pts, contrasting(&mut rng, c0, 0.35))
                })
                .collect();
            ImageBuffer::from_fn(size, size, |y, x, c| {
                let (px, py) = (x as f32, y as f32);
                let mut v = c0[c];
                for (pts, col) in &tris {
                    let mut d = f32::INFINITY;
                    let area = (pts[1].0 - pts[0].0) * (pts[2].1 - pts[0].1) - (pts[1].1 - pts[0].1) * (pts[2].0 - pts[0].0);
                    let orient = area.signum();
                    for k in 0..3 {
                        let (a, b) = (pts[k], pts[(k + 1) % 3]);
                        let (ex, ey) = (b.0 - a.0, b.1 - a.1);
                        let len = (ex * ex + ey * ey).sqrt().max(1e-6);
                        d = d.min(orient * (ex * (py - a.1) - ey * (px - a.0)) / len);
                    }
                    let w = soft(d);
                    v = v * (1.0 - w) + col[c] * w;
                }
                v
            })
        }
    };
    img.clamp01()
}

/// `(image, label)` pairs cycling through the classes.
pub fn toy_set(count: usize, size: usize, seed: u64) -> Vec<(ImageBuffer, usize)> {
    (0..count)
        .map(|i| {
            let class = i % TOY_CLASSES.len();
            (toy_image(class, seed.wrapping_add(i as u64), size), class)
        })
        .collect()
}

/// Writes `count` PNGs plus a `labels.csv` (`file,label`) into `dir`.
pub fn write_toy_dataset(dir: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut labels = String::from("file,label\n");
    for (i, (img, label)) in toy_set(count, size, seed).into_iter().enumerate() {
        let name = format!("toy_{i:05}.png");
        img.save_png(dir.join(&name))?;
        labels.push_str(&format!("{name},{label}\n"));
    }
    std::fs::write(dir.join("labels.csv"), labels)?;
    Ok(())
}
