//! Comparison report: metric tables, image grids, and a run summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Conditioning, Variant};
use crate::metrics::{Aggregate, MetricReport};
use crate::{ImageBuffer, Result};

/// Published DRealSR row of the full-scale feature-conditioned model
/// (PSNR, SSIM, LPIPS, DISTS, FID). Context only.
pub const REFERENCE_ROW: (&str, [f64; 5]) = ("DRealSR / F2IDiff-SR", [29.71, 0.820, 0.240, 0.190, 125.06]);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub conditioning: Conditioning,
    pub fm_params: usize,
    pub param_ratio_vs_full: f64,
    pub trainable_params: usize,
    pub metrics: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub variant: Variant,
    pub test_count: usize,
    pub rows: Vec<ReportRow>,
    pub bicubic: Aggregate,
    pub codec_bicubic: Aggregate,
    pub codec_reconstruction: Aggregate,
}

impl ExperimentReport {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub const CSV_HEADER: &'static str = "row,conditioning,psnr_db,ssim,percep,fid,fm_params,param_ratio_vs_full";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        let fid = |a: &Aggregate| a.fid.map(|f| f.to_string()).unwrap_or_default();
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{:?},{},{},{},{},{},{}",
                r.name, r.conditioning, m.psnr_db, m.ssim, m.percep, fid(m), r.fm_params, r.param_ratio_vs_full
            );
        }
        for (name, m) in [("bicubic", &self.bicubic), ("codec_bicubic", &self.codec_bicubic)] {
            let _ = writeln!(s, "{name},,{},{},{},{},,", m.psnr_db, m.ssim, m.percep, fid(m));
        }
        s
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>9} {:>7} {:>8} {:>9} {:>10} {:>7}\n",
            "row", "PSNR", "SSIM", "percep", "FID", "FM params", "ratio"
        );
        let fid = |a: &Aggregate| a.fid.map(|f| format!("{f:.4}")).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{:<14} {:>9.3} {:>7.4} {:>8.4} {:>9} {:>10} {:>7.3}",
                r.name,
                m.psnr_db,
                m.ssim,
                m.percep,
                fid(m),
                r.fm_params,
                r.param_ratio_vs_full
            );
        }
        for (name, m) in [("bicubic", &self.bicubic), ("codec_bicubic", &self.codec_bicubic)] {
            let _ =
                writeln!(s, "{:<14} {:>9.3} {:>7.4} {:>8.4} {:>9} {:>10} {:>7}", name, m.psnr_db, m.ssim, m.percep, fid(m), "-", "-");
        }
        s
    }
}

/// Stacks `(bicubic | SR | HR)` triplets into one image, one triplet per row.
pub fn triplet_grid(triplets: &[(ImageBuffer, ImageBuffer, ImageBuffer)]) -> Result<ImageBuffer> {
    let (h, w) = triplets.first().map(|t| t.2.dims()).unwrap_or((0, 0));
    let mut grid = ImageBuffer::filled(h * triplets.len().max(1), w * 3, [0.0; 3]);
    for (r, (a, b, c)) in triplets.iter().enumerate() {
        for (col, img) in [a, b, c].into_iter().enumerate() {
            if img.dims() != (h, w) {
                return Err(crate::Error::Shape(format!("grid cell {:?}, expected {:?}", img.dims(), (h, w))));
            }
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        grid.set(r * h + y, col * w + x, ch, img.get(y, x, ch));
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Writes `report.{json,csv}`, per-row metric tables, one grid PNG per row,
/// and `summary.txt`.
pub fn emit_report(
    dir: &Path,
    report: &ExperimentReport,
    rows: &BTreeMap<String, MetricReport>,
    grids: &[(String, Vec<(ImageBuffer, ImageBuffer, ImageBuffer)>)],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    std::fs::write(dir.join("report.csv"), report.to_csv())?;
    for (name, m) in rows {
        m.write(&dir.join(format!("metrics_{name}.csv")), &dir.join(format!("metrics_{name}.json")), &report.config_hash)?;
    }
    for (name, triplets) in grids {
        if !triplets.is_empty() {
            triplet_grid(triplets)?.save_png(dir.join(format!("grid_{name}.png")))?;
        }
    }
    let (ref_name, v) = REFERENCE_ROW;
    let mut s = String::new();
    let _ = writeln!(s, "experiment: {}", report.name);
    let _ = writeln!(s, "config hash: {}", report.config_hash);
    let _ = writeln!(s, "seed: {}", report.seed);
    let _ = writeln!(s, "FM variant: {:?}", report.variant);
    let _ = writeln!(s, "test images: {}\n", report.test_count);
    s.push_str(&report.to_table());
    let _ = writeln!(s, "\ncodec reconstruction PSNR on HR test crops: {:.3}", report.codec_reconstruction.psnr_db);
    let _ = writeln!(
        s,
        "\nreference (not reproduced at desk scale): {ref_name}: PSNR {:.2}, SSIM {:.3}, LPIPS {:.3}, DISTS {:.3}, FID {:.2}",
        v[0], v[1], v[2], v[3], v[4]
    );
    std::fs::write(dir.join("summary.txt"), s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agg(p: f64) -> Aggregate {
        Aggregate { psnr_db: p, ssim: 0.5, percep: 0.1, fid: Some(1.0) }
    }

    fn report() -> ExperimentReport {
        let row = |n: &str, c| ReportRow {
            name: n.into(),
            conditioning: c,
            fm_params: 10,
            param_ratio_vs_full: 0.3,
            trainable_params: 4,
            metrics: agg(20.0),
        };
        ExperimentReport {
            name: "t".into(),
            config_hash: "abc".into(),
            seed: 0,
            variant: Variant::Eff,
            test_count: 5,
            rows: vec![
                row("f2i", Conditioning::Feature),
                row("t2i_standin", Conditioning::Label),
                row("null", Conditioning::Null),
            ],
            bicubic: agg(19.0),
            codec_bicubic: agg(18.0),
            codec_reconstruction: agg(25.0),
        }
    }

    #[test]
    fn grid_is_rows_by_three() {
        let t = (ImageBuffer::filled(8, 6, [0.1; 3]), ImageBuffer::filled(8, 6, [0.5; 3]), ImageBuffer::filled(8, 6, [0.9; 3]));
        let g = triplet_grid(&vec![t; 5]).unwrap();
        assert_eq!(g.dims(), (40, 18));
        assert_eq!(g.get(9, 7, 0), 0.5);
    }

    #[test]
    fn emitted_files_and_summary_reference() {
        let dir = tempfile::tempdir().unwrap();
        let r = report();
        let t = (ImageBuffer::filled(8, 8, [0.1; 3]), ImageBuffer::filled(8, 8, [0.5; 3]), ImageBuffer::filled(8, 8, [0.9; 3]));
        emit_report(dir.path(), &r, &BTreeMap::new(), &[("f2i".into(), vec![t; 5])]).unwrap();
        let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("not reproduced at desk scale"));
        assert!(summary.contains("29.71") && summary.contains("125.06"));
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3 + 2);
        assert_eq!(ImageBuffer::load(dir.path().join("grid_f2i.png")).unwrap().dims(), (40, 24));
        let back: ExperimentReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
