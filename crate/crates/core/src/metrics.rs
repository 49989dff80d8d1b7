//! Full-reference image quality: Y-channel PSNR and SSIM, a feature-space
//! perceptual distance, and the Fréchet distance between feature statistics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::features::{FeatureNet, FeatureStats};
use crate::{Error, ImageBuffer, Result};

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Luma plane on the studio-swing `[16, 235]` scale.
#[derive(Clone, Debug, PartialEq)]
pub struct YPlane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl YPlane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} samples for {height}x{width} plane", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn crop_border(&self, border: usize) -> Result<Self> {
        if 2 * border >= self.height || 2 * border >= self.width {
            return Err(Error::dim(format!("border {border} too large for {}x{}", self.height, self.width)));
        }
        let (h, w) = (self.height - 2 * border, self.width - 2 * border);
        let mut data = Vec::with_capacity(h * w);
        for y in border..border + h {
            data.extend_from_slice(&self.data[y * self.width + border..][..w]);
        }
        Ok(Self { height: h, width: w, data })
    }
}

pub fn rgb_to_y(img: &ImageBuffer) -> YPlane {
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| 16.0 + 65.481 * p[0] as f64 + 128.553 * p[1] as f64 + 24.966 * p[2] as f64)
        .collect();
    YPlane { height: img.height(), width: img.width(), data }
}

fn check_same(a: &YPlane, b: &YPlane) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "planes {}x{} and {}x{} differ",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `10·log10(255² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &YPlane, b: &YPlane) -> Result<f64> {
    check_same(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering with the SSIM window.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| win[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid region of an 11×11 Gaussian (σ=1.5) window.
pub fn ssim(a: &YPlane, b: &YPlane) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let win = gaussian_window();
    let aa: Vec<f64> = a.data.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.data.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(&a.data, h, w, &win);
    let mu_b = filter_valid(&b.data, h, w, &win);
    let e_aa = filter_valid(&aa, h, w, &win);
    let e_bb = filter_valid(&bb, h, w, &win);
    let e_ab = filter_valid(&ab, h, w, &win);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// Feature-space distance between two images under the in-repo feature net.
pub fn perceptual_distance(a: &ImageBuffer, b: &ImageBuffer, net: &FeatureNet) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    net.perceptual_distance(a, b)
}

fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^{1/2})`, with the trace term computed as
/// `Tr((√Σa Σb √Σa)^{1/2})` so only symmetric eigendecompositions are needed.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::Shape(format!("feature dims {d} vs {}", b.dim())));
    }
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let sa = (&sa + sa.transpose()) * 0.5;
    let sb = (&sb + sb.transpose()) * 0.5;
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let root_a = sqrtm_psd(&sa);
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    Ok((mean_term + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub percep: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr_db: f64,
    pub ssim: f64,
    pub percep: f64,
    pub fid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<ImageRecord>,
    pub aggregate: Aggregate,
    pub count: usize,
    pub unmatched: Vec<String>,
}

/// Column heads in report order; higher-is-better marked ↑.
pub const REPORT_COLUMNS: [&str; 4] = ["PSNR↑", "SSIM↑", "percep↓", "FID↓"];
pub const CSV_HEADER: &str = "id,psnr_db,ssim,percep";

impl MetricReport {
    /// Aggregates are recomputed from `records` in order, so they always
    /// equal the per-image means.
    pub fn from_records(records: Vec<ImageRecord>, fid: Option<f64>, unmatched: Vec<String>) -> Self {
        let n = records.len().max(1) as f64;
        let mean = |f: fn(&ImageRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        let aggregate = Aggregate {
            psnr_db: mean(|r| r.psnr_db),
            ssim: mean(|r| r.ssim),
            percep: mean(|r| r.percep),
            fid: if records.len() >= 2 { fid } else { None },
        };
        Self { count: records.len(), records, aggregate, unmatched }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!("{},{},{},{}\n", r.id, r.psnr_db, r.ssim, r.percep));
        }
        s
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path, config_hash: &str) -> Result<()> {
        std::fs::write(csv_path, self.to_csv())?;
        let json = serde_json::json!({
            "config_hash": config_hash,
            "columns": REPORT_COLUMNS,
            "aggregate": self.aggregate,
            "count": self.count,
            "unmatched": self.unmatched,
            "records": self.records,
        });
        std::fs::write(json_path, serde_json::to_string_pretty(&json)?)?;
        Ok(())
    }
}

/// Per-image metrics for paired images. Both sides are cropped by
/// `crop_border` pixels before PSNR/SSIM.
pub fn evaluate_pairs(
    pairs: &[(String, ImageBuffer, ImageBuffer)],
    net: &FeatureNet,
    crop_border: usize,
    unmatched: Vec<String>,
) -> Result<MetricReport> {
    let mut records = Vec::with_capacity(pairs.len());
    for (id, sr, hr) in pairs {
        if sr.dims() != hr.dims() {
            return Err(Error::Shape(format!("`{id}`: SR {:?} vs HR {:?}", sr.dims(), hr.dims())));
        }
        let (ys, yh) = (rgb_to_y(sr), rgb_to_y(hr));
        let (ys, yh) = if crop_border > 0 {
            (ys.crop_border(crop_border)?, yh.crop_border(crop_border)?)
        } else {
            (ys, yh)
        };
        records.push(ImageRecord {
            id: id.clone(),
            psnr_db: psnr(&ys, &yh)?,
            ssim: ssim(&ys, &yh)?,
            percep: perceptual_distance(sr, hr, net)?,
        });
    }
    let fid_value = if pairs.len() >= 2 {
        let srs: Vec<ImageBuffer> = pairs.iter().map(|p| p.1.clone()).collect();
        let hrs: Vec<ImageBuffer> = pairs.iter().map(|p| p.2.clone()).collect();
        Some(fid(&net.feature_stats(&srs)?, &net.feature_stats(&hrs)?)?)
    } else {
        None
    };
    Ok(MetricReport::from_records(records, fid_value, unmatched))
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Evaluates every filename present in both directories. Names present in
/// only one are listed in `unmatched` and excluded from aggregates.
pub fn evaluate_set(sr_dir: &Path, hr_dir: &Path, net: &FeatureNet, crop_border: usize) -> Result<MetricReport> {
    let srs = list_images(sr_dir)?;
    let hrs = list_images(hr_dir)?;
    let mut unmatched: Vec<String> = srs
        .keys()
        .filter(|k| !hrs.contains_key(*k))
        .chain(hrs.keys().filter(|k| !srs.contains_key(*k)))
        .cloned()
        .collect();
    unmatched.sort();
    let mut pairs = Vec::new();
    for (name, sr_path) in &srs {
        if let Some(hr_path) = hrs.get(name) {
            pairs.push((name.clone(), ImageBuffer::load(sr_path)?, ImageBuffer::load(hr_path)?));
        }
    }
    evaluate_pairs(&pairs, net, crop_border, unmatched)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> YPlane {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        YPlane::new(h, w, data).unwrap()
    }

    #[test]
    fn luma_anchor_points() {
        let y = |rgb: [f32; 3]| rgb_to_y(&ImageBuffer::filled(1, 1, rgb)).data[0];
        assert!((y([1.0, 1.0, 1.0]) - 235.0).abs() < 1e-9);
        assert!((y([0.0, 0.0, 0.0]) - 16.0).abs() < 1e-12);
        assert!((y([1.0, 0.0, 0.0]) - 81.481).abs() < 1e-9);
    }

    #[test]
    fn psnr_offset_law() {
        let a = plane(16, 16, |y, x| 60.0 + ((y * 16 + x) % 50) as f64);
        for (delta, expect) in [(25.5, 20.0), (2.55, 40.0)] {
            let b = YPlane::new(16, 16, a.data.iter().map(|v| v + delta).collect()).unwrap();
            let p = psnr(&a, &b).unwrap();
            assert!((p - expect).abs() < 1e-9, "{p}");
        }
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_shape_mismatch() {
        assert!(psnr(&plane(4, 4, |_, _| 0.0), &plane(4, 5, |_, _| 0.0)).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let a = plane(32, 32, |y, x| 128.0 + 60.0 * ((x as f64 * 0.7).sin() * (y as f64 * 0.45).cos()));
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = YPlane::new(32, 32, a.data.iter().map(|v| 255.0 - v).collect()).unwrap();
        let s = ssim(&a, &inv).unwrap();
        assert!(s < 0.1, "{s}");
        assert_eq!(ssim(&a, &inv).unwrap(), ssim(&inv, &a).unwrap());
    }

    #[test]
    fn ssim_constant_planes_closed_form() {
        let (ma, mb) = (100.0, 110.0);
        let a = plane(12, 12, |_, _| ma);
        let b = plane(12, 12, |_, _| mb);
        let c1 = (0.01f64 * 255.0).powi(2);
        let expect = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_planes() {
        assert!(ssim(&plane(10, 20, |_, _| 0.0), &plane(10, 20, |_, _| 0.0)).is_err());
    }

    fn stats1(mean: f64, std: f64) -> FeatureStats {
        FeatureStats { mean: vec![mean], cov: vec![std * std] }
    }

    #[test]
    fn fid_one_dimensional_closed_form() {
        assert!((fid(&stats1(0.0, 1.0), &stats1(3.0, 1.0)).unwrap() - 9.0).abs() < 1e-6);
        assert!((fid(&stats1(0.0, 1.0), &stats1(0.0, 2.0)).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fid_identity_and_symmetry() {
        let d = 5;
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = if i == j { 1.0 + i as f64 } else { 0.3 };
            }
        }
        let a = FeatureStats { mean: vec![0.1, 0.2, 0.3, 0.4, 0.5], cov: cov.clone() };
        let mut cov_b = cov;
        cov_b[0] = 4.0;
        let b = FeatureStats { mean: vec![0.0; d], cov: cov_b };
        assert!(fid(&a, &a).unwrap() <= 1e-3);
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-9 && ab > 0.0);
    }

    #[test]
    fn fid_dimension_mismatch() {
        let b = FeatureStats { mean: vec![0.0, 0.0], cov: vec![1.0, 0.0, 0.0, 1.0] };
        assert!(fid(&stats1(0.0, 1.0), &b).is_err());
    }

    #[test]
    fn report_aggregates_are_recomputed_means() {
        let records = vec![
            ImageRecord { id: "a".into(), psnr_db: 30.0, ssim: 0.9, percep: 0.1 },
            ImageRecord { id: "b".into(), psnr_db: 20.0, ssim: 0.7, percep: 0.3 },
        ];
        let r = MetricReport::from_records(records, Some(1.5), vec![]);
        assert_eq!(r.aggregate.psnr_db, (30.0 + 20.0) / 2.0);
        assert_eq!(r.aggregate.fid, Some(1.5));
        assert!(r.to_csv().starts_with("id,psnr_db,ssim,percep\n"));
        let single = MetricReport::from_records(r.records[..1].to_vec(), Some(2.0), vec![]);
        assert_eq!(single.aggregate.fid, None);
    }
}
