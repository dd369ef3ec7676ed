//! Binary masks and the morphology used by the data pipeline.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geom::BBox;

/// Binary raster, indexed `[row, col]`.
pub type Mask = Array2<bool>;

pub fn popcount(mask: &Mask) -> usize {
    mask.iter().filter(|&&v| v).count()
}

pub fn union(a: &Mask, b: &Mask) -> Result<Mask> {
    check_dims(a, b)?;
    Ok(Array2::from_shape_fn(a.raw_dim(), |ix| a[ix] || b[ix]))
}

pub fn intersection_count(a: &Mask, b: &Mask) -> Result<usize> {
    check_dims(a, b)?;
    Ok(a.iter().zip(b.iter()).filter(|(&x, &y)| x && y).count())
}

pub fn check_dims(a: &Mask, b: &Mask) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "mask dims {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Tight axis-aligned bounding box of the set pixels, `None` if empty.
pub fn tight_bbox(mask: &Mask) -> Option<BBox> {
    let (h, w) = mask.dim();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x1 == 0 {
        None
    } else {
        Some(BBox { x0, y0, x1, y1 })
    }
}

/// Morphological dilation by a `kh x kw` all-ones structuring element.
///
/// The anchor convention for even kernels: a set pixel reaches rows
/// `-(kh/2) ..= kh/2 - 1 + kh%2` relative to itself, i.e. for a 40x40
/// kernel rows -20..=19 and cols -20..=19. Output stays inside the canvas.
pub fn dilate(mask: &Mask, kh: usize, kw: usize) -> Mask {
    let (h, w) = mask.dim();
    let (rlo, rhi) = half_extents(kh);
    let (clo, chi) = half_extents(kw);
    // Separable: dilate rows then columns.
    let mut rows = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                let y_start = y.saturating_sub(rlo);
                let y_end = (y + rhi).min(h - 1);
                for yy in y_start..=y_end {
                    rows[[yy, x]] = true;
                }
            }
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if rows[[y, x]] {
                let x_start = x.saturating_sub(clo);
                let x_end = (x + chi).min(w - 1);
                for xx in x_start..=x_end {
                    out[[y, xx]] = true;
                }
            }
        }
    }
    out
}

fn half_extents(k: usize) -> (usize, usize) {
    // odd k: reach k/2 both ways; even k: k/2 backward, k/2 - 1 forward
    let back = k / 2;
    let fwd = if k % 2 == 0 { k / 2 - 1 } else { k / 2 };
    (back, fwd)
}
