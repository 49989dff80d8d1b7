//! Overlap-blended tiling. Large inputs are split into independently
//! processed tiles whose outputs are reassembled with separable weights that
//! form an exact partition of unity.

use serde::{Deserialize, Serialize};

use crate::{Error, ImageBuffer, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendProfile {
    #[default]
    LinearRamp,
    Hann,
}

impl std::str::FromStr for BlendProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "linear_ramp" => Ok(Self::LinearRamp),
            "hann" => Ok(Self::Hann),
            other => Err(Error::config(format!("unknown blend profile `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisPlan {
    pub dim: usize,
    /// Tile extent along this axis (the tile size, or `dim` if smaller).
    pub extent: usize,
    pub anchors: Vec<usize>,
}

impl AxisPlan {
    fn new(dim: usize, tile: usize, overlap: usize) -> Self {
        if dim <= tile {
            return Self { dim, extent: dim, anchors: vec![0] };
        }
        let stride = tile - overlap;
        let last = dim - tile;
        let mut anchors: Vec<usize> = (0..).map(|i| i * stride).take_while(|a| *a < last).collect();
        anchors.push(last);
        anchors.dedup();
        Self { dim, extent: tile, anchors }
    }

    fn scaled(&self, k: usize) -> Self {
        Self {
            dim: self.dim * k,
            extent: self.extent * k,
            anchors: self.anchors.iter().map(|a| a * k).collect(),
        }
    }

    /// Per-anchor weight profiles normalized so they sum to one at every
    /// coordinate. Ramps span the actual overlap with each neighbour.
    pub fn weights(&self, profile: BlendProfile) -> Vec<Vec<f64>> {
        let n = self.anchors.len();
        let mut raw: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (i, &a) in self.anchors.iter().enumerate() {
            let mut w = vec![1.0f64; self.extent];
            if i > 0 {
                let prev_end = self.anchors[i - 1] + self.extent;
                let ov = prev_end.saturating_sub(a).min(self.extent);
                for (k, v) in w.iter_mut().take(ov).enumerate() {
                    *v *= ramp(k, ov, profile);
                }
            }
            if i + 1 < n {
                let next = self.anchors[i + 1];
                let ov = (a + self.extent).saturating_sub(next).min(self.extent);
                for k in 0..ov {
                    w[self.extent - 1 - k] *= ramp(k, ov, profile);
                }
            }
            raw.push(w);
        }
        let mut sum = vec![0.0f64; self.dim];
        for (w, &a) in raw.iter().zip(&self.anchors) {
            for (k, v) in w.iter().enumerate() {
                sum[a + k] += v;
            }
        }
        for (w, &a) in raw.iter_mut().zip(&self.anchors) {
            for (k, v) in w.iter_mut().enumerate() {
                *v /= sum[a + k];
            }
        }
        raw
    }
}

/// Rising edge of width `width`, sampled at pixel centres.
fn ramp(k: usize, width: usize, profile: BlendProfile) -> f64 {
    let t = (k as f64 + 0.5) / width as f64;
    match profile {
        BlendProfile::LinearRamp => t,
        BlendProfile::Hann => (std::f64::consts::FRAC_PI_2 * t).sin().powi(2),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub rows: AxisPlan,
    pub cols: AxisPlan,
    pub tile: usize,
    pub overlap: usize,
    pub profile: BlendProfile,
}

impl TilePlan {
    pub fn tile_count(&self) -> usize {
        self.rows.anchors.len() * self.cols.anchors.len()
    }

    pub fn with_profile(mut self, profile: BlendProfile) -> Self {
        self.profile = profile;
        self
    }

    /// Row-major `(row_anchor, col_anchor)` pairs.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.rows
            .anchors
            .iter()
            .flat_map(|r| self.cols.anchors.iter().map(move |c| (*r, *c)))
            .collect()
    }
}

pub fn plan_tiles(h: usize, w: usize, tile: usize, overlap: usize) -> Result<TilePlan> {
    if tile <= overlap {
        return Err(Error::config(format!("tile {tile} must exceed overlap {overlap}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::dim("cannot tile an empty image"));
    }
    Ok(TilePlan {
        rows: AxisPlan::new(h, tile, overlap),
        cols: AxisPlan::new(w, tile, overlap),
        tile,
        overlap,
        profile: BlendProfile::default(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileWeights {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
}

/// Dense per-tile weight maps in row-major tile order.
pub fn blend_weights(plan: &TilePlan) -> Vec<TileWeights> {
    let wr = plan.rows.weights(plan.profile);
    let wc = plan.cols.weights(plan.profile);
    let mut out = Vec::with_capacity(plan.tile_count());
    for (ri, &row) in plan.rows.anchors.iter().enumerate() {
        for (ci, &col) in plan.cols.anchors.iter().enumerate() {
            let weights = wr[ri]
                .iter()
                .flat_map(|a| wc[ci].iter().map(move |b| a * b))
                .collect();
            out.push(TileWeights { row, col, height: plan.rows.extent, width: plan.cols.extent, weights });
        }
    }
    out
}

/// Runs `f` on every tile and blends the `k`-times-larger outputs. Tiles are
/// visited and accumulated in row-major order.
pub fn tiled_apply<F>(mut f: F, img: &ImageBuffer, plan: &TilePlan, k: usize) -> Result<ImageBuffer>
where
    F: FnMut(&ImageBuffer) -> Result<ImageBuffer>,
{
    if img.dims() != (plan.rows.dim, plan.cols.dim) {
        return Err(Error::dim(format!(
            "plan for {}x{} applied to {:?}",
            plan.rows.dim,
            plan.cols.dim,
            img.dims()
        )));
    }
    let rows = plan.rows.scaled(k);
    let cols = plan.cols.scaled(k);
    let wr = rows.weights(plan.profile);
    let wc = cols.weights(plan.profile);
    let (oh, ow) = (rows.dim, cols.dim);
    let mut acc = vec![0.0f64; oh * ow * 3];
    for (ri, &r) in plan.rows.anchors.iter().enumerate() {
        for (ci, &c) in plan.cols.anchors.iter().enumerate() {
            let tile = img.crop(r, c, plan.rows.extent, plan.cols.extent)?;
            let out = f(&tile)?;
            if out.dims() != (rows.extent, cols.extent) {
                return Err(Error::dim(format!(
                    "tile ({r},{c}) produced {:?}, expected {}x{}",
                    out.dims(),
                    rows.extent,
                    cols.extent
                )));
            }
            let (y0, x0) = (r * k, c * k);
            let src = out.data();
            for ty in 0..rows.extent {
                let wy = wr[ri][ty];
                let dst_row = ((y0 + ty) * ow + x0) * 3;
                for tx in 0..cols.extent {
                    let wgt = wy * wc[ci][tx];
                    let s = (ty * cols.extent + tx) * 3;
                    for ch in 0..3 {
                        acc[dst_row + tx * 3 + ch] += wgt * src[s + ch] as f64;
                    }
                }
            }
        }
    }
    ImageBuffer::new(oh, ow, acc.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_512_plan() {
        let p = plan_tiles(512, 512, 256, 32).unwrap();
        assert_eq!(p.rows.anchors, vec![0, 224, 256]);
        assert_eq!(p.tile_count(), 9);
    }

    #[test]
    fn small_image_gets_one_tile() {
        let p = plan_tiles(100, 80, 256, 32).unwrap();
        assert_eq!(p.tile_count(), 1);
        assert_eq!((p.rows.extent, p.cols.extent), (100, 80));
        let w = blend_weights(&p);
        assert!(w[0].weights.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn tile_not_larger_than_overlap() {
        assert!(plan_tiles(64, 64, 32, 32).is_err());
    }

    #[test]
    fn two_tile_seam_crosses_at_half() {
        // 480 = 256 + 224: exactly two tiles overlapping by 32.
        let p = plan_tiles(16, 480, 256, 32).unwrap();
        assert_eq!(p.cols.anchors, vec![0, 224]);
        let w = p.cols.weights(BlendProfile::LinearRamp);
        // Overlap is [224, 256); its middle sits between 239 and 240.
        let left = |x: usize| w[0][x];
        let right = |x: usize| w[1][x - 224];
        for x in 224..256 {
            assert!((left(x) + right(x) - 1.0).abs() < 1e-12);
        }
        assert!((left(239) + left(240) - 1.0).abs() < 1e-12);
        assert!(left(239) > 0.5 && left(240) < 0.5);
        assert_eq!(left(100), 1.0);
    }

    #[test]
    fn identity_is_exact() {
        let img = ImageBuffer::from_fn(70, 90, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
        for profile in [BlendProfile::LinearRamp, BlendProfile::Hann] {
            let plan = plan_tiles(70, 90, 32, 8).unwrap().with_profile(profile);
            let out = tiled_apply(|t| Ok(t.clone()), &img, &plan, 1).unwrap();
            let max = out.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(max <= 1e-6, "{max}");
        }
    }

    #[test]
    fn wrong_output_size_names_tile() {
        let img = ImageBuffer::filled(40, 40, [0.5; 3]);
        let plan = plan_tiles(40, 40, 32, 8).unwrap();
        let err = tiled_apply(|t| Ok(t.clone()), &img, &plan, 2).unwrap_err();
        assert!(err.to_string().contains("tile (0,0)"));
    }
}
