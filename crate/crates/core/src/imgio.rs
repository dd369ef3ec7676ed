//! 8-bit PNG persistence for rasters and mask sets.

use std::path::Path;

use image::{ImageBuffer, Rgb, Rgba};
use ndarray::Array3;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::num::{s, Scalar};
use crate::raster::Image;

fn quantize<F: Scalar>(v: F) -> u8 {
    let x = (v.max(F::zero()).min(F::one()) * s::<F>(255.0) + s::<F>(0.5)).to_f64_s();
    x as u8
}

fn dequantize<F: Scalar>(v: u8) -> F {
    s::<F>(v as f64 / 255.0)
}

pub fn save_rgb<F: Scalar>(img: &Image<F>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            quantize(img[[0, y, x]]),
            quantize(img[[1, y, x]]),
            quantize(img[[2, y, x]]),
        ])
    });
    buf.save(path)?;
    Ok(())
}

pub fn load_rgb<F: Scalar>(path: &Path) -> Result<Image<F>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(c, y, x)| dequantize(img.get_pixel(x as u32, y as u32).0[c]),
    ))
}

pub fn save_rgba<F: Scalar>(img: &Image<F>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 4 {
        return Err(Error::Shape(format!("expected 4 channels, got {c}")));
    }
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgba([
            quantize(img[[0, y, x]]),
            quantize(img[[1, y, x]]),
            quantize(img[[2, y, x]]),
            quantize(img[[3, y, x]]),
        ])
    });
    buf.save(path)?;
    Ok(())
}

pub fn load_rgba<F: Scalar>(path: &Path) -> Result<Image<F>> {
    let img = image::open(path)?.to_rgba8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (4, h as usize, w as usize),
        |(c, y, x)| dequantize(img.get_pixel(x as u32, y as u32).0[c]),
    ))
}

/// Packs (object, shadow, reflection, dilated union) into one RGBA PNG.
pub fn save_mask_set(
    object: &Mask,
    shadow: &Mask,
    reflection: &Mask,
    dilated: &Mask,
    path: &Path,
) -> Result<()> {
    let (h, w) = object.dim();
    let bit = |m: &Mask, y: usize, x: usize| if m[[y, x]] { 255u8 } else { 0u8 };
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgba([
            bit(object, y, x),
            bit(shadow, y, x),
            bit(reflection, y, x),
            bit(dilated, y, x),
        ])
    });
    buf.save(path)?;
    Ok(())
}

pub fn load_mask_set(path: &Path) -> Result<(Mask, Mask, Mask, Mask)> {
    let img = image::open(path)?.to_rgba8();
    let (w, h) = img.dimensions();
    let plane = |ch: usize| {
        Mask::from_shape_fn((h as usize, w as usize), |(y, x)| {
            img.get_pixel(x as u32, y as u32).0[ch] > 127
        })
    };
    Ok((plane(0), plane(1), plane(2), plane(3)))
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255u8 } else { 0 }])
    });
    buf.save(path)?;
    Ok(())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Path(path.to_path_buf(), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn rgb_round_trip_is_exact_on_the_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((3, 9, 7), |(c, y, x)| {
            ((c * 83 + y * 11 + x * 3) % 256) as f64 / 255.0
        });
        let path = dir.path().join("rt.png");
        save_rgb(&img, &path).unwrap();
        let back = load_rgb::<f64>(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rgba_round_trip_preserves_alpha() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((4, 5, 6), |(c, y, x)| {
            ((c + 2 * y + 5 * x) % 256) as f32 / 255.0
        });
        let path = dir.path().join("rt.png");
        save_rgba(&img, &path).unwrap();
        let back = load_rgba::<f32>(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn mask_set_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let m = |k: usize| Mask::from_shape_fn((10, 12), move |(y, x)| (y * 12 + x + k) % 3 == 0);
        let path = dir.path().join("masks.png");
        save_mask_set(&m(0), &m(1), &m(2), &m(0), &path).unwrap();
        let (a, b, c, d) = load_mask_set(&path).unwrap();
        assert_eq!(a, m(0));
        assert_eq!(b, m(1));
        assert_eq!(c, m(2));
        assert_eq!(d, m(0));
    }

    #[test]
    fn sha256_is_stable_and_content_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        std::fs::write(&p1, b"hello").unwrap();
        std::fs::write(&p2, b"hello").unwrap();
        assert_eq!(file_sha256(&p1).unwrap(), file_sha256(&p2).unwrap());
        std::fs::write(&p2, b"hellp").unwrap();
        assert_ne!(file_sha256(&p1).unwrap(), file_sha256(&p2).unwrap());
        assert!(file_sha256(&dir.path().join("missing")).is_err());
    }
}
