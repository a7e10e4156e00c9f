use image::ImageFormat;

use super::ImageTensor;
use crate::{Error, Result};

const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

/// Decodes a PNG, converts it to luma grayscale and bilinearly resamples it to
/// `input_dims` (width, height).
pub fn preprocess(png_bytes: &[u8], input_dims: (usize, usize)) -> Result<ImageTensor> {
    let decoded = image::load_from_memory_with_format(png_bytes, ImageFormat::Png)
        .map_err(|e| Error::CorruptImage(e.to_string()))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let gray: Vec<f64> = rgb
        .pixels()
        .map(|p| {
            let [r, g, b] = p.0;
            let y = (LUMA_R * f64::from(r) + LUMA_G * f64::from(g) + LUMA_B * f64::from(b)) / 255.0;
            y.clamp(0.0, 1.0)
        })
        .collect();
    let source = ImageTensor::new(w, h, gray)?;
    Ok(bilinear_resample(&source, input_dims))
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn bilinear_resample(src: &ImageTensor, (dst_w, dst_h): (usize, usize)) -> ImageTensor {
    assert!(dst_w > 0 && dst_h > 0, "target dimensions must be positive");
    if src.dims() == (dst_w, dst_h) {
        return src.clone();
    }
    let xs = sample_axis(src.width(), dst_w);
    let ys = sample_axis(src.height(), dst_h);
    let mut out = Vec::with_capacity(dst_w * dst_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src.get(x0, y0) * (1.0 - fx) + src.get(x1, y0) * fx;
            let bottom = src.get(x0, y1) * (1.0 - fx) + src.get(x1, y1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    ImageTensor::new(dst_w, dst_h, out).expect("resample preserves invariants")
}

/// For each destination index: (lower source index, upper source index, fraction).
fn sample_axis(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    let max = (src_len - 1) as f64;
    (0..dst_len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageBuffer, Rgb, Rgba};

    fn png_rgb(w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Vec<u8> {
        let img = ImageBuffer::from_fn(w, h, |x, y| Rgb(f(x, y)));
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).unwrap();
        out.into_inner()
    }

    #[test]
    fn white_png_is_all_ones() {
        let t = preprocess(&png_rgb(40, 30, |_, _| [255, 255, 255]), (8, 6)).unwrap();
        assert!(t.pixels().iter().all(|&p| (p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn black_png_is_all_zeros() {
        let t = preprocess(&png_rgb(40, 30, |_, _| [0, 0, 0]), (8, 6)).unwrap();
        assert!(t.pixels().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn luma_weights_apply_per_channel() {
        let t = preprocess(&png_rgb(1, 1, |_, _| [255, 0, 0]), (1, 1)).unwrap();
        assert!((t.get(0, 0) - 0.299).abs() < 1e-12);
        let t = preprocess(&png_rgb(1, 1, |_, _| [0, 255, 0]), (1, 1)).unwrap();
        assert!((t.get(0, 0) - 0.587).abs() < 1e-12);
    }

    #[test]
    fn alpha_channel_is_ignored() {
        let img = ImageBuffer::from_fn(2, 2, |_, _| Rgba([255u8, 255, 255, 0]));
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).unwrap();
        let t = preprocess(&out.into_inner(), (2, 2)).unwrap();
        assert!(t.pixels().iter().all(|&p| (p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn checkerboard_upsample_matches_hand_stencil() {
        // 2x2 checkerboard [[1,0],[0,1]] upsampled to 4x4. With pixel-center
        // alignment the sample positions along each axis are 0, .25, .75, 1
        // (outer ones clamped), and f(u,v) = (1-u)(1-v) + uv.
        let png = png_rgb(2, 2, |x, y| if x == y { [255; 3] } else { [0; 3] });
        let t = preprocess(&png, (4, 4)).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0,   0.75,  0.25,  0.0,
            0.75,  0.625, 0.375, 0.25,
            0.25,  0.375, 0.625, 0.75,
            0.0,   0.25,  0.75,  1.0,
        ];
        for (got, want) in t.pixels().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn downsample_by_integer_factor_averages_pairs() {
        let src = ImageTensor::new(4, 1, vec![0.0, 1.0, 0.2, 0.4]).unwrap();
        let t = bilinear_resample(&src, (2, 1));
        assert!((t.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((t.get(1, 0) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn garbage_is_corrupt_image() {
        let err = preprocess(b"not a png", (4, 4)).unwrap_err();
        assert_eq!(err.kind(), "CorruptImage");
    }
}
