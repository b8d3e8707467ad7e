//! Frame decoding, resizing, normalization and mirroring.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-channel pixel means subtracted after scaling to `[0, 1]`.
pub const PIXEL_MEANS: [f64; 3] = [0.411, 0.432, 0.45];

/// Decodes PNG or PPM; grayscale images are replicated to three channels.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?;
    Ok(img.to_rgb8())
}

/// Writes a binary (P6) PPM.
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend_from_slice(img.as_raw());
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Bilinear sample of channel `ch` at continuous source coordinates using
/// half-pixel centers and edge clamping.
fn bilinear(img: &RgbImage, ch: usize, sx: f64, sy: f64) -> f64 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let x = (sx - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (sy - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let raw = img.as_raw();
    let px = |xx: usize, yy: usize| raw[(yy * w + xx) * 3 + ch] as f64;
    let top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
    let bottom = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resizes to `target = (width, height)`, scales to `[0, 1]` and subtracts
/// `means`, producing a channel-major `[3, H, W]` tensor.
pub fn normalize_image<T: Real>(img: &RgbImage, means: [f64; 3], target: (usize, usize)) -> Result<Tensor<T>> {
    let (tw, th) = target;
    if tw == 0 || th == 0 {
        return Err(Error::domain(format!("target size {tw}x{th} is empty")));
    }
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::domain("source image is empty"));
    }
    if means.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(Error::domain(format!("pixel means {means:?} outside [0, 1]")));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let same = w == tw && h == th;
    let (scale_x, scale_y) = (w as f64 / tw as f64, h as f64 / th as f64);
    let raw = img.as_raw();
    let mut data = Vec::with_capacity(3 * tw * th);
    for (ch, &mean) in means.iter().enumerate() {
        for y in 0..th {
            for x in 0..tw {
                let v = if same {
                    raw[(y * w + x) * 3 + ch] as f64
                } else {
                    bilinear(img, ch, (x as f64 + 0.5) * scale_x, (y as f64 + 0.5) * scale_y)
                };
                data.push(T::lit(v / 255.0 - mean));
            }
        }
    }
    Tensor::new(vec![3, th, tw], data)
}

/// Horizontal mirror of a `[C, H, W]` tensor.
pub fn mirror<T: Real>(frame: &Tensor<T>) -> Tensor<T> {
    let w = *frame.shape().last().expect("frame has a width axis");
    let mut out = frame.clone();
    out.set_requires_grad(false);
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

pub fn mirror_image(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(w: u32, h: u32, rgb: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb(rgb))
    }

    #[test]
    fn constant_at_mean_is_zero() {
        let img = constant(8, 4, [51, 51, 51]); // 0.2 exactly
        let t: Tensor<f64> = normalize_image(&img, [0.2, 0.2, 0.2], (8, 4)).unwrap();
        assert!(t.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn white_image_channels() {
        let img = constant(6, 5, [255, 255, 255]);
        let t: Tensor<f64> = normalize_image(&img, PIXEL_MEANS, (4, 2)).unwrap();
        assert_eq!(t.shape(), &[3, 2, 4]);
        for (ch, mean) in PIXEL_MEANS.iter().enumerate() {
            assert!(t.data()[ch * 8..(ch + 1) * 8].iter().all(|v| (v - (1.0 - mean)).abs() < 1e-12));
        }
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = constant(13, 7, [10, 200, 77]);
        let t: Tensor<f64> = normalize_image(&img, [0.0; 3], (32, 3)).unwrap();
        for ch in 0..3 {
            let v = &t.data()[ch * 96..(ch + 1) * 96];
            assert!(v.iter().all(|x| (x - v[0]).abs() < 1e-12));
        }
        assert!(normalize_image::<f64>(&img, [0.0; 3], (0, 3)).is_err());
    }

    #[test]
    fn mirror_is_involution() {
        let t = Tensor::<f32>::from_fn(&[3, 2, 5], |i| i as f32);
        let m = mirror(&t);
        assert_eq!(&m.data()[..5], &[4.0, 3.0, 2.0, 1.0, 0.0]);
        assert_eq!(mirror(&m), t);
    }

    #[test]
    fn mirror_commutes_with_normalization() {
        let img = RgbImage::from_fn(9, 4, |x, y| image::Rgb([(x * 20) as u8, (y * 50) as u8, ((x * y) % 256) as u8]));
        let a: Tensor<f64> = mirror(&normalize_image(&img, PIXEL_MEANS, (9, 4)).unwrap());
        let b: Tensor<f64> = normalize_image(&mirror_image(&img), PIXEL_MEANS, (9, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let path = dir.path().join("f.ppm");
        write_ppm(&path, &img).unwrap();
        assert_eq!(load_rgb(&path).unwrap(), img);
        assert!(load_rgb(&dir.path().join("missing.png")).is_err());
    }
}
