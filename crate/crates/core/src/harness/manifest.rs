//! Dataset manifests: seeded splits, flat-image rejection, patch extraction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, ImageBuffer, Result};

pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest root.
    pub file: String,
    pub split: Split,
    pub label: Option<usize>,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPolicy {
    pub train_crop: usize,
    pub eval_crop: usize,
}

impl Default for PatchPolicy {
    fn default() -> Self {
        Self { train_crop: 64, eval_crop: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub seed: u64,
    /// Train / val fractions; the remainder is test.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub variance_threshold: f64,
    pub patch_policy: PatchPolicy,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            train_fraction: 0.8,
            val_fraction: 0.1,
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            patch_policy: PatchPolicy::default(),
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.train_fraction) || !ok(self.val_fraction) || self.train_fraction + self.val_fraction > 1.0 {
            return Err(Error::config("split fractions must lie in [0,1] and sum to at most 1"));
        }
        if self.variance_threshold < 0.0 {
            return Err(Error::config("variance threshold must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub patch_policy: PatchPolicy,
    pub variance_threshold: f64,
    pub rejected: Vec<String>,
}

/// Uniform value in `[0,1)` from the seeded hash of a filename.
pub fn split_hash(seed: u64, file: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(file.as_bytes());
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (v >> 11) as f64 / (1u64 << 53) as f64
}

fn read_labels(dir: &Path) -> Result<BTreeMap<String, usize>> {
    let path = dir.join("labels.csv");
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let text = std::fs::read_to_string(&path)?;
    for (i, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (file, label) = line
            .split_once(',')
            .ok_or_else(|| Error::Dataset(format!("labels.csv line {}: expected `file,label`", i + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::Dataset(format!("labels.csv line {}: bad label `{label}`", i + 1)))?;
        out.insert(file.trim().to_string(), label);
    }
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg"))
}

/// Scans `dir` for PNG/JPEG files, assigns splits by seeded filename hash,
/// and rejects images whose luminance variance is below the threshold.
/// Labels are read from an optional `labels.csv` (`file,label`).
pub fn ingest(dir: &Path, cfg: &IngestConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut files: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_string))
        .collect();
    files.sort();
    let labels = read_labels(dir)?;
    let mut entries = Vec::new();
    let mut rejected = Vec::new();
    let mut decoded = 0;
    for file in files {
        let img = match ImageBuffer::load(dir.join(&file)) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping undecodable `{file}`: {e}");
                continue;
            }
        };
        decoded += 1;
        let variance = img.luma_mean_var().1;
        if variance < cfg.variance_threshold {
            rejected.push(file);
            continue;
        }
        let u = split_hash(cfg.seed, &file);
        let split = if u < cfg.train_fraction {
            Split::Train
        } else if u < cfg.train_fraction + cfg.val_fraction {
            Split::Val
        } else {
            Split::Test
        };
        let label = labels.get(&file).copied();
        entries.push(ManifestEntry { file, split, label, variance });
    }
    if decoded == 0 {
        return Err(Error::Dataset(format!("no decodable PNG/JPEG images in {}", dir.display())));
    }
    Ok(DatasetManifest {
        root: dir.to_path_buf(),
        entries,
        seed: cfg.seed,
        patch_policy: cfg.patch_policy.clone(),
        variance_threshold: cfg.variance_threshold,
        rejected,
    })
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn num_labels(&self) -> usize {
        self.entries.iter().filter_map(|e| e.label).max().map_or(0, |m| m + 1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Loads a manifest and checks that every listed file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        for e in &m.entries {
            let p = m.root.join(&e.file);
            if !p.exists() {
                return Err(Error::Dataset(format!("manifest entry missing on disk: {}", p.display())));
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub id: String,
    pub image: ImageBuffer,
    pub label: Option<usize>,
    /// Top-left corner in the source image.
    pub origin: (usize, usize),
}

/// Patches from one split. Training patches are uniform random crops
/// cycling over the images (`count` in total); val/test give exactly one
/// center crop per image. Images smaller than `size` are skipped.
pub fn extract_patches<R: Rng>(
    manifest: &DatasetManifest,
    split: Split,
    size: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Patch>> {
    let mut images = Vec::new();
    for e in manifest.split(split) {
        let img = ImageBuffer::load(manifest.root.join(&e.file))?;
        if img.height() < size || img.width() < size {
            log::warn!("skipping `{}`: {}x{} smaller than patch {size}", e.file, img.height(), img.width());
            continue;
        }
        images.push((e, img));
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("no {split:?} images large enough for {size}px patches")));
    }
    let mut out = Vec::new();
    if split == Split::Train {
        for k in 0..count {
            let (e, img) = &images[k % images.len()];
            let y = rng.gen_range(0..=img.height() - size);
            let x = rng.gen_range(0..=img.width() - size);
            out.push(Patch {
                id: format!("{}#{k}", e.file),
                image: img.crop(y, x, size, size)?,
                label: e.label,
                origin: (y, x),
            });
        }
    } else {
        for (e, img) in &images {
            let (y, x) = ((img.height() - size) / 2, (img.width() - size) / 2);
            out.push(Patch { id: e.file.clone(), image: img.crop(y, x, size, size)?, label: e.label, origin: (y, x) });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn textured(n: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(n, n, |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn folder(count: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..count {
            textured(16, i as u64).save_png(dir.path().join(format!("img_{i:03}.png"))).unwrap();
        }
        dir
    }

    #[test]
    fn rerun_gives_identical_manifest_and_exact_partition() {
        let dir = folder(100);
        let cfg = IngestConfig::default();
        let a = ingest(dir.path(), &cfg).unwrap();
        assert_eq!(a, ingest(dir.path(), &cfg).unwrap());
        let total: usize = [Split::Train, Split::Val, Split::Test].iter().map(|s| a.count(*s)).sum();
        assert_eq!(total, 100);
        assert!(a.count(Split::Train) > 60);
    }

    #[test]
    fn seed_changes_some_assignment() {
        let dir = folder(30);
        let a = ingest(dir.path(), &IngestConfig { seed: 1, ..Default::default() }).unwrap();
        let b = ingest(dir.path(), &IngestConfig { seed: 2, ..Default::default() }).unwrap();
        assert!(a.entries.iter().zip(&b.entries).any(|(x, y)| x.split != y.split));
    }

    #[test]
    fn constant_image_rejected_and_labels_read() {
        let dir = folder(3);
        ImageBuffer::filled(16, 16, [0.4, 0.4, 0.4]).save_png(dir.path().join("flat.png")).unwrap();
        std::fs::write(dir.path().join("labels.csv"), "file,label\nimg_001.png,2\n").unwrap();
        let m = ingest(dir.path(), &IngestConfig::default()).unwrap();
        assert_eq!(m.rejected, vec!["flat.png".to_string()]);
        assert_eq!(m.entries.iter().find(|e| e.file == "img_001.png").unwrap().label, Some(2));
        assert_eq!(m.num_labels(), 3);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest(dir.path(), &IngestConfig::default()).is_err());
    }

    #[test]
    fn patch_policies() {
        let dir = tempfile::tempdir().unwrap();
        textured(512, 0).save_png(dir.path().join("big.png")).unwrap();
        let mut m = ingest(dir.path(), &IngestConfig::default()).unwrap();
        m.entries[0].split = Split::Train;
        let a = extract_patches(&m, Split::Train, 64, 10, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|p| p.image.dims() == (64, 64) && p.origin.0 <= 448 && p.origin.1 <= 448));
        let b = extract_patches(&m, Split::Train, 64, 10, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.iter().map(|p| p.origin).collect::<Vec<_>>(), b.iter().map(|p| p.origin).collect::<Vec<_>>());
        m.entries[0].split = Split::Val;
        let v = extract_patches(&m, Split::Val, 64, 10, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].origin, (224, 224));
    }

    #[test]
    fn manifest_roundtrip_checks_files() {
        let dir = folder(4);
        let m = ingest(dir.path(), &IngestConfig::default()).unwrap();
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        assert_eq!(DatasetManifest::load(&p).unwrap(), m);
        std::fs::remove_file(dir.path().join("img_000.png")).unwrap();
        assert!(DatasetManifest::load(&p).is_err());
    }
}
