//! Float rasters (`[channel, row, col]`, values in [0,1]) and resampling.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::num::{s, Scalar};

/// RGB or RGBA raster, `[C, H, W]`.
pub type Image<F> = Array3<F>;

pub fn check_same_hw<F: Scalar>(a: &Image<F>, b: &Image<F>) -> Result<()> {
    if a.dim().1 != b.dim().1 || a.dim().2 != b.dim().2 {
        return Err(Error::Shape(format!(
            "raster dims {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Catmull-Rom cubic kernel (a = -0.5), the usual bicubic choice.
fn cubic<F: Scalar>(x: F) -> F {
    let a = s::<F>(-0.5);
    let x = x.abs();
    let one = F::one();
    let two = s::<F>(2.0);
    let three = s::<F>(3.0);
    if x <= one {
        (a + two) * x * x * x - (a + three) * x * x + one
    } else if x < two {
        a * x * x * x - s::<F>(5.0) * a * x * x + s::<F>(8.0) * a * x - s::<F>(4.0) * a
    } else {
        F::zero()
    }
}

/// Bicubic resample to `(new_h, new_w)` with center-aligned coordinates.
///
/// Identity when the size is unchanged (integer-aligned sample points give
/// kernel weights (0,1,0,0)).
pub fn resize_bicubic<F: Scalar>(img: &Image<F>, new_h: usize, new_w: usize) -> Image<F> {
    let (c, h, w) = img.dim();
    if h == new_h && w == new_w {
        return img.clone();
    }
    let sy = s::<F>(h as f64 / new_h as f64);
    let sx = s::<F>(w as f64 / new_w as f64);
    let half = s::<F>(0.5);
    let mut out = Array3::zeros((c, new_h, new_w));
    // Row/col weights are separable; precompute per output coordinate.
    let coords = |n_out: usize, scale: F, n_in: usize| -> Vec<(isize, [F; 4])> {
        (0..n_out)
            .map(|i| {
                let src = (s::<F>(i as f64) + half) * scale - half;
                let base = src.floor();
                let frac = src - base;
                let mut wts = [F::zero(); 4];
                for (k, wt) in wts.iter_mut().enumerate() {
                    *wt = cubic(frac - s::<F>(k as f64 - 1.0));
                }
                let _ = n_in;
                (base.to_f64_s() as isize, wts)
            })
            .collect()
    };
    let ys = coords(new_h, sy, h);
    let xs = coords(new_w, sx, w);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for ch in 0..c {
        for (oy, (ybase, yw)) in ys.iter().enumerate() {
            for (ox, (xbase, xw)) in xs.iter().enumerate() {
                let mut acc = F::zero();
                for (ky, ywt) in yw.iter().enumerate() {
                    if *ywt == F::zero() {
                        continue;
                    }
                    let yy = clamp(ybase + ky as isize - 1, h);
                    for (kx, xwt) in xw.iter().enumerate() {
                        if *xwt == F::zero() {
                            continue;
                        }
                        let xx = clamp(xbase + kx as isize - 1, w);
                        acc += *ywt * *xwt * img[[ch, yy, xx]];
                    }
                }
                out[[ch, oy, ox]] = acc;
            }
        }
    }
    out
}

/// Maps a [0,1] raster to the signed range [-1,1] used by the diffusion model.
pub fn to_signed<F: Scalar>(img: &Image<F>) -> Image<F> {
    img.mapv(|v| v * s::<F>(2.0) - F::one())
}

/// Inverse of [`to_signed`], clamped to [0,1].
pub fn to_unit<F: Scalar>(img: &Image<F>) -> Image<F> {
    img.mapv(|v| ((v + F::one()) * s::<F>(0.5)).max(F::zero()).min(F::one()))
}

/// Mean absolute difference between two rasters.
pub fn mean_abs_diff<F: Scalar>(a: &Image<F>, b: &Image<F>) -> F {
    let n = s::<F>(a.len() as f64);
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs())
        .sum::<F>()
        / n
}

/// Luminance plane (Rec.601 weights) of an RGB raster.
pub fn luminance<F: Scalar>(img: &Image<F>) -> Array2<F> {
    let (_, h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        s::<F>(0.299) * img[[0, y, x]] + s::<F>(0.587) * img[[1, y, x]] + s::<F>(0.114) * img[[2, y, x]]
    })
}
