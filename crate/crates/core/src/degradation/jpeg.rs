use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};

use crate::{Error, ImageBuffer, Result};

/// Baseline JPEG encode at `quality` followed by decode.
pub fn jpeg_roundtrip(img: &ImageBuffer, quality: u8) -> Result<ImageBuffer> {
    if !(1..=100).contains(&quality) {
        return Err(Error::config(format!("jpeg quality {quality} outside [1,100]")));
    }
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode(rgb.as_raw(), img.width() as u32, img.height() as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Codec(e.to_string()))?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)
        .map_err(|e| Error::Codec(e.to_string()))?
        .to_rgb8();
    let out = ImageBuffer::from_rgb8(&decoded);
    if out.dims() != img.dims() {
        return Err(Error::Codec(format!("decoded {:?} != encoded {:?}", out.dims(), img.dims())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{psnr, rgb_to_y};

    fn textured() -> ImageBuffer {
        ImageBuffer::from_fn(64, 64, |y, x, c| {
            let v = ((x as f32 * 0.9).sin() * (y as f32 * 0.7).cos() + 1.0) / 2.0;
            (v * 0.8 + 0.1 * c as f32).clamp(0.0, 1.0)
        })
    }

    fn psnr_rgb(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
        psnr(&rgb_to_y(a), &rgb_to_y(b)).unwrap()
    }

    #[test]
    fn quality_100_on_gradient_is_near_lossless() {
        let img = ImageBuffer::from_fn(64, 64, |y, x, c| (x + y) as f32 / 128.0 * (0.5 + 0.2 * c as f32));
        let out = jpeg_roundtrip(&img, 100).unwrap();
        assert_eq!(out.dims(), img.dims());
        assert!(psnr_rgb(&img, &out) > 40.0);
    }

    #[test]
    fn lower_quality_costs_fidelity() {
        let img = textured();
        let q30 = psnr_rgb(&img, &jpeg_roundtrip(&img, 30).unwrap());
        let q95 = psnr_rgb(&img, &jpeg_roundtrip(&img, 95).unwrap());
        assert!(q30 < q95, "q30 {q30} q95 {q95}");
    }

    #[test]
    fn second_pass_is_nearly_idempotent() {
        let img = textured();
        let once = jpeg_roundtrip(&img, 75).unwrap();
        let twice = jpeg_roundtrip(&once, 75).unwrap();
        assert!(psnr_rgb(&once, &twice) > 45.0);
    }

    #[test]
    fn out_of_range_quality() {
        assert!(jpeg_roundtrip(&textured(), 0).is_err());
        assert!(jpeg_roundtrip(&textured(), 101).is_err());
    }
}
