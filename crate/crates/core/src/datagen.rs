//! Data-generation pipeline: entity filtering, shadow-confidence logic,
//! reflection masks, mask union + dilation, two-stage inpainting and object
//! augmentation. Turns any (image, detections) input into an
//! (object, full background, composite) training triplet.

use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Canvas;
use crate::mask::{self, Mask};
use crate::num::{s, Scalar};
use crate::raster::Image;
use crate::rng;
use crate::scene::{DatasetManifest, DatasetRecord, MaskSet, SceneSpec, Split, DILATION_KERNEL};

pub const MIN_ENTITY_CONFIDENCE: f64 = 0.30;
pub const MIN_AREA_FRACTION: f64 = 0.01;
pub const MAX_AREA_FRACTION: f64 = 0.80;
pub const SHADOW_HIGH_CONFIDENCE: f64 = 0.80;
pub const SHADOW_LOW_CONFIDENCE: f64 = 0.60;
/// Std-dev bound (degrees) on object-shadow vector angles in the exception.
pub const SHADOW_ANGLE_SIGMA: f64 = 2.0;
/// "Similar size": relative area ratio bound between context objects.
pub const SIMILAR_AREA_FACTOR: f64 = 2.0;
/// Diffusion refiner noise strength in the two-stage inpainting.
pub const REFINER_STRENGTH: f64 = 0.3;
/// Reflection axis offset fraction (nu).
pub const REFLECTION_NU: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct EntityDetection {
    pub mask: Mask,
    pub confidence: f64,
    pub label: String,
    pub area_fraction: f64,
}

impl EntityDetection {
    pub fn from_mask(mask: Mask, confidence: f64, label: &str) -> Self {
        let area_fraction = mask::popcount(&mask) as f64 / mask.len() as f64;
        EntityDetection {
            mask,
            confidence,
            label: label.to_string(),
            area_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let measured = mask::popcount(&self.mask) as f64 / self.mask.len() as f64;
        if (measured - self.area_fraction).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "area_fraction {} disagrees with mask popcount fraction {measured}",
                self.area_fraction
            )));
        }
        Ok(())
    }

    pub fn centroid(&self) -> Option<[f64; 2]> {
        let n = mask::popcount(&self.mask);
        if n == 0 {
            return None;
        }
        let (mut sx, mut sy) = (0.0, 0.0);
        for ((y, x), &v) in self.mask.indexed_iter() {
            if v {
                sx += x as f64;
                sy += y as f64;
            }
        }
        Some([sx / n as f64, sy / n as f64])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShadowDetection {
    pub mask: Mask,
    pub confidence: f64,
    /// Object centroid -> shadow centroid.
    pub object_shadow_vector: [f64; 2],
}

#[derive(Clone, Debug)]
pub struct InpaintRequest<F: Scalar> {
    pub image: Image<F>,
    pub mask: Mask,
    pub preserve_strength: f64,
}

/// Keeps detections with confidence >= 0.30 and area fraction in (0.01, 0.80).
pub fn filter_entities(dets: Vec<EntityDetection>) -> Vec<EntityDetection> {
    dets.into_iter()
        .filter(|d| entity_drop_reason(d).is_none())
        .collect()
}

/// `None` if the entity survives the (i)-(ii) filters, else the drop reason.
pub fn entity_drop_reason(det: &EntityDetection) -> Option<&'static str> {
    if det.confidence < MIN_ENTITY_CONFIDENCE {
        Some("low_confidence")
    } else if det.area_fraction <= MIN_AREA_FRACTION {
        Some("too_small")
    } else if det.area_fraction >= MAX_AREA_FRACTION {
        Some("too_large")
    } else {
        None
    }
}

fn vector_angle_deg(v: [f64; 2]) -> f64 {
    v[1].atan2(v[0]).to_degrees()
}

/// Shadow retention rule. High-confidence shadows (> 0.80) are always kept.
/// Otherwise a shadow above 0.60 is kept only under the exception: among the
/// context objects of similar size to the shadow's own object (relative area
/// within a factor of 2), (a) there are at least two, (b) the standard
/// deviation of their object-shadow vector angles is below 2 degrees, and
/// (c) at least one of their shadows exceeds 0.80 confidence.
pub fn shadow_keep_decision(
    own_index: usize,
    context: &[(EntityDetection, ShadowDetection)],
) -> bool {
    let shadow = &context[own_index].1;
    if shadow.confidence > SHADOW_HIGH_CONFIDENCE {
        return true;
    }
    if shadow.confidence <= SHADOW_LOW_CONFIDENCE {
        return false;
    }
    let own_area = mask::popcount(&context[own_index].0.mask) as f64;
    let group: Vec<&(EntityDetection, ShadowDetection)> = context
        .iter()
        .filter(|(e, _)| {
            let a = mask::popcount(&e.mask) as f64;
            let (lo, hi) = if a < own_area { (a, own_area) } else { (own_area, a) };
            lo > 0.0 && hi / lo <= SIMILAR_AREA_FACTOR
        })
        .collect();
    if group.len() < 2 {
        return false;
    }
    let angles: Vec<f64> = group
        .iter()
        .map(|(_, sh)| vector_angle_deg(sh.object_shadow_vector))
        .collect();
    let mean = angles.iter().sum::<f64>() / angles.len() as f64;
    let var = angles.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / angles.len() as f64;
    if var.sqrt() >= SHADOW_ANGLE_SIGMA {
        return false;
    }
    group.iter().any(|(_, sh)| sh.confidence > SHADOW_HIGH_CONFIDENCE)
}

/// Reflection axis row: `y_axis = y_w - nu * (y_l - y_w)` where `y_w` is the
/// topmost row of the object's widest span and `y_l` its lowest occupied row.
pub fn reflection_axis(object_mask: &Mask) -> Result<f64> {
    let (h, w) = object_mask.dim();
    let mut best_width = 0usize;
    let mut y_w = 0usize;
    let mut y_l = 0usize;
    let mut any = false;
    for y in 0..h {
        let width = (0..w).filter(|&x| object_mask[[y, x]]).count();
        if width > 0 {
            any = true;
            y_l = y;
            if width > best_width {
                best_width = width;
                y_w = y;
            }
        }
    }
    if !any {
        return Err(Error::Invalid("empty object mask".into()));
    }
    Ok(y_w as f64 - REFLECTION_NU * (y_l as f64 - y_w as f64))
}

/// Mirrors the object mask about the computed axis; rows falling outside the
/// canvas are discarded. Mirrored row of `y` is `round(2 * y_axis - y)`.
pub fn reflection_mask(object_mask: &Mask, has_water: bool) -> Result<Mask> {
    let (h, w) = object_mask.dim();
    if !has_water {
        return Ok(Mask::from_elem((h, w), false));
    }
    let axis = reflection_axis(object_mask)?;
    let mut out = Mask::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if object_mask[[y, x]] {
                let ry = (2.0 * axis - y as f64).round();
                if ry >= 0.0 && ry < h as f64 {
                    out[[ry as usize, x]] = true;
                }
            }
        }
    }
    Ok(out)
}

/// Union of object, shadow and reflection masks, dilated by a 40x40 kernel.
pub fn build_inpaint_mask(masks: &MaskSet) -> Result<Mask> {
    let union = masks.union()?;
    Ok(mask::dilate(&union, DILATION_KERNEL, DILATION_KERNEL))
}

/// Abstract inpainter; desk-scale stand-ins for CM-GAN / SDXL.
pub trait InpainterBackend<F: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn apply(&self, image: &Image<F>, mask: &Mask, strength: f64) -> Result<Image<F>>;
}

/// Returns the known clean background inside the mask. Only possible because
/// scenes are synthetic; this is the pipeline's ground-truth inpainter.
pub struct OracleInpainter<F: Scalar> {
    pub background: Image<F>,
}

impl<F: Scalar> InpainterBackend<F> for OracleInpainter<F> {
    fn name(&self) -> &str {
        "oracle"
    }

    fn apply(&self, image: &Image<F>, mask: &Mask, _strength: f64) -> Result<Image<F>> {
        if self.background.dim() != image.dim() {
            return Err(Error::Shape("oracle background dims".into()));
        }
        let mut out = image.clone();
        for ((y, x), &m) in mask.indexed_iter() {
            if m {
                for c in 0..3 {
                    out[[c, y, x]] = self.background[[c, y, x]];
                }
            }
        }
        Ok(out)
    }
}

/// Fills the mask with the per-channel mean of the surrounding pixels.
pub struct MeanFillInpainter;

impl<F: Scalar> InpainterBackend<F> for MeanFillInpainter {
    fn name(&self) -> &str {
        "mean-fill"
    }

    fn apply(&self, image: &Image<F>, mask: &Mask, _strength: f64) -> Result<Image<F>> {
        let (c, h, w) = image.dim();
        let mut out = image.clone();
        for ch in 0..c {
            let mut sum = F::zero();
            let mut n = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if !mask[[y, x]] {
                        sum += image[[ch, y, x]];
                        n += 1;
                    }
                }
            }
            let fill = if n > 0 { sum / s::<F>(n as f64) } else { s::<F>(0.5) };
            for y in 0..h {
                for x in 0..w {
                    if mask[[y, x]] {
                        out[[ch, y, x]] = fill;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Passes the image through unchanged.
pub struct IdentityInpainter;

impl<F: Scalar> InpainterBackend<F> for IdentityInpainter {
    fn name(&self) -> &str {
        "identity"
    }

    fn apply(&self, image: &Image<F>, _mask: &Mask, _strength: f64) -> Result<Image<F>> {
        Ok(image.clone())
    }
}

/// Two-stage inpainting: remover then refiner (refiner runs at the request's
/// preserve strength, 0.3 by default). Pixels outside the mask are restored
/// bit-exactly after each stage, whatever the backend did to them.
pub fn inpaint_background<F: Scalar>(
    req: &InpaintRequest<F>,
    remover: &dyn InpainterBackend<F>,
    refiner: &dyn InpainterBackend<F>,
) -> Result<Image<F>> {
    let (_, h, w) = req.image.dim();
    if req.mask.dim() != (h, w) {
        return Err(Error::Shape("inpaint mask dims".into()));
    }
    let clamp_outside = |mut out: Image<F>| {
        for ((y, x), &m) in req.mask.indexed_iter() {
            if !m {
                for c in 0..out.dim().0 {
                    out[[c, y, x]] = req.image[[c, y, x]];
                }
            }
        }
        out
    };
    let removed = remover
        .apply(&req.image, &req.mask, 1.0)
        .map_err(|e| Error::Backend {
            stage: format!("remover:{}", remover.name()),
            msg: e.to_string(),
        })?;
    let removed = clamp_outside(removed);
    let refined = refiner
        .apply(&removed, &req.mask, req.preserve_strength)
        .map_err(|e| Error::Backend {
            stage: format!("refiner:{}", refiner.name()),
            msg: e.to_string(),
        })?;
    Ok(clamp_outside(refined))
}

// ---------------------------------------------------------------------------
// Object augmentation
// ---------------------------------------------------------------------------

/// Parameters drawn for one augmentation, exposed so bound audits can check
/// them directly.
#[derive(Clone, Debug)]
pub struct AugmentParams {
    /// Per-corner (dx, dy) jitter in pixels, |dx| <= strength * 0.15 * w.
    pub corner_jitter: [[f64; 2]; 4],
    /// Rotation in degrees, |rot| <= strength * 20.
    pub rotation_deg: f64,
    /// Scale factor in [1 - 0.2 * strength, 1 + 0.2 * strength].
    pub scale: f64,
    /// Per-channel additive shift, |shift| <= strength * 0.15.
    pub color_shift: [f64; 3],
}

pub fn augment_params(seed: u64, strength: f64, w: usize, h: usize) -> AugmentParams {
    let mut r = rng::stream_rng(seed, "augment");
    let jx = strength * 0.15 * w as f64;
    let jy = strength * 0.15 * h as f64;
    let mut corner_jitter = [[0.0; 2]; 4];
    for corner in corner_jitter.iter_mut() {
        corner[0] = if jx > 0.0 { r.gen_range(-jx..=jx) } else { 0.0 };
        corner[1] = if jy > 0.0 { r.gen_range(-jy..=jy) } else { 0.0 };
    }
    let rot_max = strength * 20.0;
    let rotation_deg = if rot_max > 0.0 {
        r.gen_range(-rot_max..=rot_max)
    } else {
        0.0
    };
    let scale = 1.0
        + if strength > 0.0 {
            r.gen_range(-0.2 * strength..=0.2 * strength)
        } else {
            0.0
        };
    let cs = strength * 0.15;
    let mut color_shift = [0.0; 3];
    for shift in color_shift.iter_mut() {
        *shift = if cs > 0.0 { r.gen_range(-cs..=cs) } else { 0.0 };
    }
    AugmentParams {
        corner_jitter,
        rotation_deg,
        scale,
        color_shift,
    }
}

/// 3x3 homography mapping the sprite corners to their jittered positions,
/// solved from the 8 point correspondences by Gaussian elimination.
fn homography(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> [[f64; 3]; 3] {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = (src[i][0], src[i][1]);
        let (u, v) = (dst[i][0], dst[i][1]);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Solve A[..8] * h = A[..,8] with h22 = 1.
    let mut m = [[0.0f64; 9]; 8];
    m.copy_from_slice(&a);
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        for k in col..9 {
            m[col][k] /= p;
        }
        for row in 0..8 {
            if row != col {
                let f = m[row][col];
                for k in col..9 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let h: Vec<f64> = (0..8).map(|i| m[i][8]).collect();
    [
        [h[0], h[1], h[2]],
        [h[3], h[4], h[5]],
        [h[6], h[7], 1.0],
    ]
}

fn apply_h(h: &[[f64; 3]; 3], x: f64, y: f64) -> [f64; 2] {
    let d = h[2][0] * x + h[2][1] * y + h[2][2];
    [
        (h[0][0] * x + h[0][1] * y + h[0][2]) / d,
        (h[1][0] * x + h[1][1] * y + h[1][2]) / d,
    ]
}

fn invert3(h: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = h[0][0] * (h[1][1] * h[2][2] - h[1][2] * h[2][1])
        - h[0][1] * (h[1][0] * h[2][2] - h[1][2] * h[2][0])
        + h[0][2] * (h[1][0] * h[2][1] - h[1][1] * h[2][0]);
    let c = |r: usize, c0: usize| {
        let (r1, r2) = match r {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let (c1, c2) = match c0 {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let sign = if (r + c0) % 2 == 0 { 1.0 } else { -1.0 };
        sign * (h[r1][c1] * h[r2][c2] - h[r1][c2] * h[r2][c1])
    };
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for cc in 0..3 {
            out[r][cc] = c(cc, r) / det; // adjugate transpose
        }
    }
    out
}

fn bilinear_sample<F: Scalar>(img: &Image<F>, x: f64, y: f64) -> Option<Vec<F>> {
    let (c, h, w) = img.dim();
    if x < -0.5 || y < -0.5 || x > w as f64 - 0.5 || y > h as f64 - 0.5 {
        return None;
    }
    let x0 = x.floor().clamp(0.0, w as f64 - 1.0) as usize;
    let y0 = y.floor().clamp(0.0, h as f64 - 1.0) as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (x - x0 as f64).clamp(0.0, 1.0);
    let fy = (y - y0 as f64).clamp(0.0, 1.0);
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let v00 = img[[ch, y0, x0]].to_f64_s();
        let v01 = img[[ch, y0, x1]].to_f64_s();
        let v10 = img[[ch, y1, x0]].to_f64_s();
        let v11 = img[[ch, y1, x1]].to_f64_s();
        let v = v00 * (1.0 - fx) * (1.0 - fy)
            + v01 * fx * (1.0 - fy)
            + v10 * (1.0 - fx) * fy
            + v11 * fx * fy;
        out.push(s::<F>(v));
    }
    Some(out)
}

/// Perspective warp, then affine (rotation + scale about the center), then a
/// per-channel color shift. Alpha goes through the geometry only. The zero
/// strength case returns the sprite untouched.
pub fn augment_object<F: Scalar>(sprite: &Image<F>, seed: u64, strength: f64) -> Image<F> {
    let (c, h, w) = sprite.dim();
    debug_assert_eq!(c, 4, "sprite must be RGBA");
    if strength == 0.0 {
        return sprite.clone();
    }
    let p = augment_params(seed, strength, w, h);
    let src = [
        [0.0, 0.0],
        [w as f64, 0.0],
        [w as f64, h as f64],
        [0.0, h as f64],
    ];
    let mut dst = src;
    for i in 0..4 {
        dst[i][0] += p.corner_jitter[i][0];
        dst[i][1] += p.corner_jitter[i][1];
    }
    let persp = homography(&src, &dst);
    let theta = p.rotation_deg.to_radians();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (cos, sin) = (theta.cos() * p.scale, theta.sin() * p.scale);
    // affine about center, composed after the perspective warp
    let affine = [
        [cos, -sin, cx - cos * cx + sin * cy],
        [sin, cos, cy - sin * cx - cos * cy],
        [0.0, 0.0, 1.0],
    ];
    let total = matmul3(&affine, &persp);
    let inv = invert3(&total);
    let mut out = Array3::zeros((4, h, w));
    for y in 0..h {
        for x in 0..w {
            let srcp = apply_h(&inv, x as f64 + 0.5, y as f64 + 0.5);
            if let Some(px) = bilinear_sample(sprite, srcp[0] - 0.5, srcp[1] - 0.5) {
                for ch in 0..4 {
                    out[[ch, y, x]] = px[ch];
                }
            }
        }
    }
    for ch in 0..3 {
        let shift = s::<F>(p.color_shift[ch]);
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = (out[[ch, y, x]] + shift).max(F::zero()).min(F::one());
            }
        }
    }
    out
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Pipeline orchestration
// ---------------------------------------------------------------------------

/// One source record: a natural image plus its detections. `shadows[i]` is
/// the shadow detection for entity `i`, if the detector produced one.
#[derive(Clone, Debug)]
pub struct PipelineInput<F: Scalar> {
    pub id: String,
    pub image: Image<F>,
    pub entities: Vec<EntityDetection>,
    pub shadows: Vec<Option<ShadowDetection>>,
    pub has_water: bool,
    pub scene_spec: Option<SceneSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntityDecision {
    pub id: String,
    pub entity_index: usize,
    pub kept: bool,
    pub reason: String,
    pub confidence: f64,
    pub area_fraction: f64,
    pub shadow_kept: Option<bool>,
    pub thresholds: DecisionThresholds,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecisionThresholds {
    pub min_confidence: f64,
    pub min_area: f64,
    pub max_area: f64,
    pub shadow_high: f64,
    pub shadow_low: f64,
}

impl Default for DecisionThresholds {
    fn default() -> Self {
        DecisionThresholds {
            min_confidence: MIN_ENTITY_CONFIDENCE,
            min_area: MIN_AREA_FRACTION,
            max_area: MAX_AREA_FRACTION,
            shadow_high: SHADOW_HIGH_CONFIDENCE,
            shadow_low: SHADOW_LOW_CONFIDENCE,
        }
    }
}

pub struct PipelineConfig {
    pub seed: u64,
    pub augment_strength: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            augment_strength: 0.5,
        }
    }
}

/// Runs steps (i)-(v) plus augmentation for every entity of every input,
/// emitting scene-layout records plus a `decisions.jsonl` audit trail.
/// Per-record failures are logged as decisions and skipped.
pub fn run_pipeline<F: Scalar>(
    source: impl Iterator<Item = PipelineInput<F>>,
    remover: &dyn InpainterBackend<F>,
    refiner: &dyn InpainterBackend<F>,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Path(out_dir.to_path_buf(), e))?;
    let mut decisions_file = std::fs::File::create(out_dir.join("decisions.jsonl"))?;
    let mut records = Vec::new();
    let mut emitted = 0u64;
    for input in source {
        for (idx, entity) in input.entities.iter().enumerate() {
            let shadow = input.shadows.get(idx).cloned().flatten();
            match process_entity(&input, idx, entity, shadow.as_ref(), remover, refiner, cfg, emitted, out_dir) {
                Ok((record, decision)) => {
                    writeln!(decisions_file, "{}", serde_json::to_string(&decision)?)?;
                    if let Some(record) = record {
                        records.push(record);
                        emitted += 1;
                    }
                }
                Err(e) => {
                    let decision = EntityDecision {
                        id: input.id.clone(),
                        entity_index: idx,
                        kept: false,
                        reason: format!("error: {e}"),
                        confidence: entity.confidence,
                        area_fraction: entity.area_fraction,
                        shadow_kept: None,
                        thresholds: DecisionThresholds::default(),
                    };
                    writeln!(decisions_file, "{}", serde_json::to_string(&decision)?)?;
                }
            }
        }
    }
    let manifest = DatasetManifest {
        seed: cfg.seed,
        n: records.len(),
        split_ratios: [1.0, 0.0, 0.0],
        records,
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

#[allow(clippy::too_many_arguments)]
fn process_entity<F: Scalar>(
    input: &PipelineInput<F>,
    idx: usize,
    entity: &EntityDetection,
    shadow: Option<&ShadowDetection>,
    remover: &dyn InpainterBackend<F>,
    refiner: &dyn InpainterBackend<F>,
    cfg: &PipelineConfig,
    emitted: u64,
    out_dir: &Path,
) -> Result<(Option<DatasetRecord>, EntityDecision)> {
    entity.validate()?;
    let mut decision = EntityDecision {
        id: input.id.clone(),
        entity_index: idx,
        kept: false,
        reason: "kept".into(),
        confidence: entity.confidence,
        area_fraction: entity.area_fraction,
        shadow_kept: None,
        thresholds: DecisionThresholds::default(),
    };
    if let Some(reason) = entity_drop_reason(entity) {
        decision.reason = reason.into();
        return Ok((None, decision));
    }

    // (iii) shadow retention
    let (h, w) = entity.mask.dim();
    let shadow_mask = match shadow {
        Some(sh) => {
            let context: Vec<(EntityDetection, ShadowDetection)> = input
                .entities
                .iter()
                .zip(input.shadows.iter())
                .filter_map(|(e, s)| s.clone().map(|s| (e.clone(), s)))
                .collect();
            let own = context
                .iter()
                .position(|(e, _)| e == entity)
                .unwrap_or(0);
            let keep = shadow_keep_decision(own, &context);
            decision.shadow_kept = Some(keep);
            if keep {
                sh.mask.clone()
            } else {
                Mask::from_elem((h, w), false)
            }
        }
        None => Mask::from_elem((h, w), false),
    };

    // (iv) reflection heuristic
    let refl = reflection_mask(&entity.mask, input.has_water)?;

    // (v) union + dilation, then two-stage inpainting
    let masks = MaskSet {
        object: entity.mask.clone(),
        shadow: shadow_mask,
        reflection: refl,
        dilated_union: Mask::from_elem((h, w), false),
    };
    let dilated = build_inpaint_mask(&masks)?;
    let masks = MaskSet {
        dilated_union: dilated.clone(),
        ..masks
    };
    let req = InpaintRequest {
        image: input.image.clone(),
        mask: dilated,
        preserve_strength: REFINER_STRENGTH,
    };
    let background = inpaint_background(&req, remover, refiner)?;

    // object sprite: tight crop with mask alpha, then augmentation
    let bbox = mask::tight_bbox(&entity.mask)
        .ok_or_else(|| Error::Invalid("entity mask empty".into()))?;
    let (bw, bh) = (bbox.width(), bbox.height());
    let mut sprite = Array3::zeros((4, bh, bw));
    for ly in 0..bh {
        for lx in 0..bw {
            if entity.mask[[bbox.y0 + ly, bbox.x0 + lx]] {
                for c in 0..3 {
                    sprite[[c, ly, lx]] = input.image[[c, bbox.y0 + ly, bbox.x0 + lx]];
                }
                sprite[[3, ly, lx]] = F::one();
            }
        }
    }
    let aug_seed = rng::derive_seed(cfg.seed, "pipeline-augment", emitted);
    let sprite = augment_object(&sprite, aug_seed, cfg.augment_strength);

    let sample = crate::scene::SceneSample {
        object_image: sprite,
        background,
        composite: input.image.clone(),
        masks,
        bbox,
        spec: input.scene_spec.clone().unwrap_or_else(|| placeholder_spec(w, h)),
    };
    let id = format!("{emitted:06}");
    let dir = out_dir.join(Split::Train.dir());
    let (files, hashes) = crate::scene::write_sample(&sample, &dir, &id)?;
    decision.kept = true;
    let record = DatasetRecord {
        id,
        split: Split::Train,
        spec: input.scene_spec.clone(),
        bbox,
        files,
        hashes,
    };
    Ok((Some(record), decision))
}

fn placeholder_spec(w: usize, h: usize) -> SceneSpec {
    SceneSpec {
        seed: 0,
        canvas: Canvas::new(w, h),
        ground_line: h / 2,
        has_water: false,
        light_direction: [0.0, 1.0],
        object_shape: crate::scene::ObjectShape::Box,
        object_color: [0.5, 0.5, 0.5],
        object_anchor: (w / 2, h / 2),
        object_size: (1, 1),
    }
}

/// Wraps a rendered scene dataset as a pipeline source with synthetic
/// detections (confidence 0.9, true masks and object-shadow vectors).
pub struct SceneSource<F: Scalar> {
    samples: std::vec::IntoIter<(String, crate::scene::SceneSample<F>)>,
}

impl<F: Scalar> SceneSource<F> {
    pub fn new(samples: Vec<(String, crate::scene::SceneSample<F>)>) -> Self {
        SceneSource {
            samples: samples.into_iter(),
        }
    }
}

impl<F: Scalar> Iterator for SceneSource<F> {
    type Item = PipelineInput<F>;

    fn next(&mut self) -> Option<Self::Item> {
        let (id, sample) = self.samples.next()?;
        let entity = EntityDetection::from_mask(sample.masks.object.clone(), 0.9, "object");
        let obj_centroid = entity.centroid().unwrap_or([0.0, 0.0]);
        let shadow_det = if mask::popcount(&sample.masks.shadow) > 0 {
            let sh = EntityDetection::from_mask(sample.masks.shadow.clone(), 0.9, "shadow");
            let sc = sh.centroid().unwrap_or(obj_centroid);
            Some(ShadowDetection {
                mask: sample.masks.shadow.clone(),
                confidence: 0.9,
                object_shadow_vector: [sc[0] - obj_centroid[0], sc[1] - obj_centroid[1]],
            })
        } else {
            None
        };
        Some(PipelineInput {
            id,
            image: sample.composite.clone(),
            entities: vec![entity],
            shadows: vec![shadow_det],
            has_water: sample.spec.has_water,
            scene_spec: Some(sample.spec.clone()),
        })
    }
}
