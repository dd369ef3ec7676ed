//! Procedural scene renderer. Produces (object, clean background, composite)
//! triplets with analytically defined shadows and water reflections, plus the
//! ground-truth masks a real segmentation/shadow stack would have to estimate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BBox, Canvas};
use crate::imgio;
use crate::mask::{self, Mask};
use crate::num::{s, Scalar};
use crate::raster::Image;
use crate::rng;

/// Shadow shear flattening: ground depth gained per pixel of object height.
pub const SHADOW_FLAT: f64 = 0.35;
/// Shadow darkening factor (40% opacity black).
pub const SHADOW_KEEP: f64 = 0.6;
/// Reflection blend weight of the mirrored object color.
pub const REFLECTION_OPACITY: f64 = 0.5;
/// Lower bound on the vertical light component used in the shear.
pub const MIN_LIGHT_Y: f64 = 0.2;
/// Structuring element for the inpainting mask union.
pub const DILATION_KERNEL: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Box,
    Ellipse,
    Triangle,
    CompositeOfTwo,
}

pub const ALL_SHAPES: [ObjectShape; 4] = [
    ObjectShape::Box,
    ObjectShape::Ellipse,
    ObjectShape::Triangle,
    ObjectShape::CompositeOfTwo,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas: Canvas,
    /// Row index of the floor/water boundary.
    pub ground_line: usize,
    pub has_water: bool,
    /// Unit vector, x to the right, y downward.
    pub light_direction: [f64; 2],
    pub object_shape: ObjectShape,
    pub object_color: [f64; 3],
    /// Foot point (column, row): bottom-center of the object.
    pub object_anchor: (usize, usize),
    /// (width, height) in pixels.
    pub object_size: (usize, usize),
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.object_size;
        if w < 1 || h < 1 {
            return Err(Error::SceneRejected(format!("degenerate object size {w}x{h}")));
        }
        let norm = (self.light_direction[0].powi(2) + self.light_direction[1].powi(2)).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::SceneRejected(format!("light direction norm {norm}")));
        }
        if self.has_water && self.ground_line >= self.canvas.height {
            return Err(Error::SceneRejected("water line below canvas".into()));
        }
        self.object_bbox()?;
        Ok(())
    }

    /// Bounding box implied by anchor (bottom-center) and size.
    pub fn object_bbox(&self) -> Result<BBox> {
        let (w, h) = self.object_size;
        let (cx, ay) = self.object_anchor;
        let x0 = cx
            .checked_sub(w / 2)
            .ok_or_else(|| Error::SceneRejected("object outside canvas (left)".into()))?;
        let y0 = (ay + 1)
            .checked_sub(h)
            .ok_or_else(|| Error::SceneRejected("object outside canvas (top)".into()))?;
        let bbox = BBox::new(x0, y0, x0 + w, ay + 1)?;
        if !bbox.fits(self.canvas) {
            return Err(Error::SceneRejected("object outside canvas".into()));
        }
        if self.has_water && bbox.y1 > self.ground_line + 1 {
            return Err(Error::SceneRejected("object below water line".into()));
        }
        Ok(bbox)
    }
}

#[derive(Clone, Debug)]
pub struct MaskSet {
    pub object: Mask,
    pub shadow: Mask,
    pub reflection: Mask,
    pub dilated_union: Mask,
}

impl MaskSet {
    pub fn union(&self) -> Result<Mask> {
        mask::union(&mask::union(&self.object, &self.shadow)?, &self.reflection)
    }
}

#[derive(Clone, Debug)]
pub struct SceneSample<F: Scalar> {
    /// Tight RGBA sprite of the object.
    pub object_image: Image<F>,
    /// Scene without object, shadow, or reflection (the inpainting oracle).
    pub background: Image<F>,
    pub composite: Image<F>,
    pub masks: MaskSet,
    pub bbox: BBox,
    pub spec: SceneSpec,
}

fn shape_hit(shape: ObjectShape, bw: usize, bh: usize, lx: usize, ly: usize) -> bool {
    let (fw, fh) = (bw as f64, bh as f64);
    let (x, y) = (lx as f64 + 0.5, ly as f64 + 0.5);
    match shape {
        ObjectShape::Box => true,
        ObjectShape::Ellipse => {
            let nx = (x - fw / 2.0) / (fw / 2.0);
            let ny = (y - fh / 2.0) / (fh / 2.0);
            nx * nx + ny * ny <= 1.0
        }
        ObjectShape::Triangle => (x - fw / 2.0).abs() <= (y / fh) * fw / 2.0,
        ObjectShape::CompositeOfTwo => {
            // ellipse top half over box bottom half
            if y >= fh / 2.0 {
                true
            } else {
                let nx = (x - fw / 2.0) / (fw / 2.0);
                let ny = (y - fh / 2.0) / (fh / 2.0);
                nx * nx + ny * ny <= 1.0
            }
        }
    }
}

/// Multiplicative texture so sprites carry scale-sensitive high frequencies.
fn texture(seed: u64, lx: usize, ly: usize) -> f64 {
    let phase = (seed % 97) as f64 / 97.0 * std::f64::consts::TAU;
    0.8 + 0.2 * ((3.0 * lx as f64 + 5.0 * ly as f64) * std::f64::consts::TAU / 17.0 + phase).sin()
}

fn object_pixel_color(spec: &SceneSpec, lx: usize, ly: usize) -> [f64; 3] {
    let t = texture(spec.seed, lx, ly);
    [
        (spec.object_color[0] * t).clamp(0.0, 1.0),
        (spec.object_color[1] * t).clamp(0.0, 1.0),
        (spec.object_color[2] * t).clamp(0.0, 1.0),
    ]
}

fn render_background<F: Scalar>(spec: &SceneSpec) -> Image<F> {
    let Canvas { width, height } = spec.canvas;
    let g = spec.ground_line.max(1);
    Array3::from_shape_fn((3, height, width), |(c, y, x)| {
        let v = if y < spec.ground_line {
            let t = y as f64 / g as f64;
            let top = [0.55, 0.70, 0.90];
            let bot = [0.75, 0.85, 0.95];
            top[c] + (bot[c] - top[c]) * t
        } else if spec.has_water {
            let base = [0.20, 0.35, 0.50];
            let ripple = 1.0 + 0.05 * ((y as f64) * std::f64::consts::TAU / 8.0).sin();
            (base[c] * ripple).clamp(0.0, 1.0)
        } else {
            let t = (y - spec.ground_line) as f64 / (height - spec.ground_line).max(1) as f64;
            let top = [0.48, 0.42, 0.32];
            let bot = [0.38, 0.33, 0.25];
            top[c] + (bot[c] - top[c]) * t + 0.02 * (((x / 4) + (y / 4)) % 2) as f64
        };
        s::<F>(v.clamp(0.0, 1.0))
    })
}

/// Deterministic rasterization of a scene.
///
/// Shadow rule: each object pixel `(x, y)` with height `h = anchor_row - y`
/// casts onto `(x + round(h * lx / max(ly, MIN_LIGHT_Y)), anchor_row +
/// round(h * SHADOW_FLAT))`; pixels falling on the object or off canvas are
/// dropped. Reflection rule: object pixels strictly above the water line
/// mirror to row `2 * ground_line - y` (strictly below the line), with a
/// seeded per-row horizontal jitter in {-1, 0, 1}.
pub fn render_scene<F: Scalar>(spec: &SceneSpec) -> Result<SceneSample<F>> {
    spec.validate()?;
    let canvas = spec.canvas;
    let (wc, hc) = (canvas.width, canvas.height);
    let bbox = spec.object_bbox()?;
    let (bw, bh) = (bbox.width(), bbox.height());
    let anchor_row = spec.object_anchor.1 as isize;

    let mut object = Mask::from_elem((hc, wc), false);
    for ly in 0..bh {
        for lx in 0..bw {
            if shape_hit(spec.object_shape, bw, bh, lx, ly) {
                object[[bbox.y0 + ly, bbox.x0 + lx]] = true;
            }
        }
    }
    if mask::popcount(&object) == 0 {
        return Err(Error::SceneRejected("empty object silhouette".into()));
    }

    // Shadow: shear of the silhouette onto the ground plane.
    let shear = spec.light_direction[0] / spec.light_direction[1].max(MIN_LIGHT_Y);
    let mut shadow = Mask::from_elem((hc, wc), false);
    for y in 0..hc {
        for x in 0..wc {
            if !object[[y, x]] {
                continue;
            }
            let h = anchor_row - y as isize;
            if h < 0 {
                continue;
            }
            let sx = x as isize + (h as f64 * shear).round() as isize;
            let sy = anchor_row + (h as f64 * SHADOW_FLAT).round() as isize;
            if sx >= 0 && sx < wc as isize && sy >= 0 && sy < hc as isize {
                let (sx, sy) = (sx as usize, sy as usize);
                if !object[[sy, sx]] {
                    shadow[[sy, sx]] = true;
                }
            }
        }
    }

    // Reflection: vertical mirror about the water line with ripple jitter.
    let mut reflection = Mask::from_elem((hc, wc), false);
    let mut refl_src: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    if spec.has_water {
        let g = spec.ground_line as isize;
        let mut jrng = rng::stream_rng(spec.seed, "ripple");
        let jitter: Vec<isize> = (0..hc).map(|_| jrng.gen_range(-1..=1)).collect();
        for y in 0..hc {
            for x in 0..wc {
                if !object[[y, x]] {
                    continue;
                }
                let ry = 2 * g - y as isize;
                if ry <= g || ry >= hc as isize {
                    continue;
                }
                let rx = x as isize + jitter[ry as usize];
                if rx < 0 || rx >= wc as isize {
                    continue;
                }
                let (rx, ry) = (rx as usize, ry as usize);
                if !object[[ry, rx]] {
                    reflection[[ry, rx]] = true;
                    refl_src.entry((ry, rx)).or_insert((y, x));
                }
            }
        }
    }

    let union = mask::union(&mask::union(&object, &shadow)?, &reflection)?;
    let dilated_union = mask::dilate(&union, DILATION_KERNEL, DILATION_KERNEL);

    let background = render_background::<F>(spec);
    let mut composite = background.clone();
    for y in 0..hc {
        for x in 0..wc {
            if shadow[[y, x]] {
                for c in 0..3 {
                    composite[[c, y, x]] = composite[[c, y, x]] * s::<F>(SHADOW_KEEP);
                }
            }
        }
    }
    for (&(ry, rx), &(sy, sx)) in &refl_src {
        let col = object_pixel_color(spec, sx - bbox.x0, sy - bbox.y0);
        for c in 0..3 {
            composite[[c, ry, rx]] = composite[[c, ry, rx]] * s::<F>(1.0 - REFLECTION_OPACITY)
                + s::<F>(col[c] * REFLECTION_OPACITY);
        }
    }
    for y in 0..hc {
        for x in 0..wc {
            if object[[y, x]] {
                let col = object_pixel_color(spec, x - bbox.x0, y - bbox.y0);
                for c in 0..3 {
                    composite[[c, y, x]] = s::<F>(col[c]);
                }
            }
        }
    }

    let mut sprite = Array3::zeros((4, bh, bw));
    for ly in 0..bh {
        for lx in 0..bw {
            if object[[bbox.y0 + ly, bbox.x0 + lx]] {
                let col = object_pixel_color(spec, lx, ly);
                for c in 0..3 {
                    sprite[[c, ly, lx]] = s::<F>(col[c]);
                }
                sprite[[3, ly, lx]] = F::one();
            }
        }
    }

    Ok(SceneSample {
        object_image: sprite,
        background,
        composite,
        masks: MaskSet {
            object,
            shadow,
            reflection,
            dilated_union,
        },
        bbox,
        spec: spec.clone(),
    })
}

// ---------------------------------------------------------------------------
// Spec sampling and dataset generation
// ---------------------------------------------------------------------------

/// Declared sampling distribution (tests recompute histograms against it):
/// shape uniform over the four variants, color per-channel U[0.15, 0.9],
/// width and height U{14..=26}, ground line U{40..=48}, water Bernoulli(1/2),
/// light angle U[30deg, 150deg].
pub fn sample_spec(canvas: Canvas, seed: u64) -> SceneSpec {
    let mut r = rng::stream_rng(seed, "scene-spec");
    let shape = ALL_SHAPES[r.gen_range(0..ALL_SHAPES.len())];
    let color = [
        r.gen_range(0.15..0.9),
        r.gen_range(0.15..0.9),
        r.gen_range(0.15..0.9),
    ];
    let max_side = (canvas.width.min(canvas.height) / 2).max(4);
    let w = r.gen_range(14..=26usize).min(max_side);
    let h = r.gen_range(14..=26usize).min(max_side);
    let ground_line = r.gen_range(40..=48usize).min(canvas.height - 2);
    let has_water = r.gen_bool(0.5);
    let anchor_row = if has_water {
        ground_line
    } else {
        r.gen_range(ground_line..=(ground_line + 8).min(canvas.height - 2))
    };
    let cx = r.gen_range(w / 2..=(canvas.width - w + w / 2));
    let theta = r.gen_range(30f64.to_radians()..150f64.to_radians());
    SceneSpec {
        seed,
        canvas,
        ground_line,
        has_water,
        light_direction: [theta.cos(), theta.sin()],
        object_shape: shape,
        object_color: color,
        object_anchor: (cx, anchor_row),
        object_size: (w, h),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub split: Split,
    /// Present for rendered scenes; pipeline outputs may omit it.
    pub spec: Option<SceneSpec>,
    pub bbox: BBox,
    pub files: BTreeMap<String, String>,
    pub hashes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n: usize,
    pub split_ratios: [f64; 3],
    pub records: Vec<DatasetRecord>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Path(path.to_path_buf(), e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn split_ids(&self, split: Split) -> Vec<&DatasetRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

/// Largest-share-first split sizes; train absorbs the rounding remainder.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split ratios sum to {sum}, not 1")));
    }
    let n_val = (n as f64 * ratios[1]).floor() as usize;
    let n_test = (n as f64 * ratios[2]).floor() as usize;
    Ok([n - n_val - n_test, n_val, n_test])
}

/// JSON sidecar stored next to each sample's rasters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub id: String,
    pub spec: SceneSpec,
    pub bbox: BBox,
}

pub fn write_sample<F: Scalar>(
    sample: &SceneSample<F>,
    dir: &Path,
    id: &str,
) -> Result<(BTreeMap<String, String>, BTreeMap<String, String>)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Path(dir.to_path_buf(), e))?;
    let mut files = BTreeMap::new();
    let mut put = |key: &str, name: String| files.insert(key.to_string(), name);
    let object = dir.join(format!("{id}.object.png"));
    let bg = dir.join(format!("{id}.bg.png"));
    let comp = dir.join(format!("{id}.comp.png"));
    let masks = dir.join(format!("{id}.masks.png"));
    let sidecar = dir.join(format!("{id}.json"));
    imgio::save_rgba(&sample.object_image, &object)?;
    imgio::save_rgb(&sample.background, &bg)?;
    imgio::save_rgb(&sample.composite, &comp)?;
    imgio::save_mask_set(
        &sample.masks.object,
        &sample.masks.shadow,
        &sample.masks.reflection,
        &sample.masks.dilated_union,
        &masks,
    )?;
    let sc = SampleSidecar {
        id: id.to_string(),
        spec: sample.spec.clone(),
        bbox: sample.bbox,
    };
    std::fs::write(&sidecar, serde_json::to_vec_pretty(&sc)?)?;
    for (key, path) in [
        ("object", &object),
        ("bg", &bg),
        ("comp", &comp),
        ("masks", &masks),
        ("sidecar", &sidecar),
    ] {
        put(key, path.file_name().unwrap().to_string_lossy().into_owned());
    }
    let mut hashes = BTreeMap::new();
    for (key, path) in [
        ("object", &object),
        ("bg", &bg),
        ("comp", &comp),
        ("masks", &masks),
        ("sidecar", &sidecar),
    ] {
        hashes.insert(key.to_string(), imgio::file_sha256(path)?);
    }
    Ok((files, hashes))
}

/// Loads one record back into memory.
pub fn load_sample<F: Scalar>(root: &Path, record: &DatasetRecord) -> Result<SceneSample<F>> {
    let dir = root.join(record.split.dir());
    let object_image = imgio::load_rgba(&dir.join(format!("{}.object.png", record.id)))?;
    let background = imgio::load_rgb(&dir.join(format!("{}.bg.png", record.id)))?;
    let composite = imgio::load_rgb(&dir.join(format!("{}.comp.png", record.id)))?;
    let (object, shadow, reflection, dilated_union) =
        imgio::load_mask_set(&dir.join(format!("{}.masks.png", record.id)))?;
    let spec = record
        .spec
        .clone()
        .ok_or_else(|| Error::Invalid(format!("record {} has no scene spec", record.id)))?;
    Ok(SceneSample {
        object_image,
        background,
        composite,
        masks: MaskSet {
            object,
            shadow,
            reflection,
            dilated_union,
        },
        bbox: record.bbox,
        spec,
    })
}

pub fn make_dataset<F: Scalar>(
    n: usize,
    seed: u64,
    split_ratios: [f64; 3],
    canvas: Canvas,
    root: &Path,
) -> Result<DatasetManifest> {
    if n < 1 {
        return Err(Error::Invalid("dataset size must be >= 1".into()));
    }
    let counts = split_counts(n, split_ratios)?;
    std::fs::create_dir_all(root).map_err(|e| Error::Path(root.to_path_buf(), e))?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let split = if i < counts[0] {
            Split::Train
        } else if i < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        let sample_seed = rng::derive_seed(seed, "scene", i as u64);
        let spec = sample_spec(canvas, sample_seed);
        let sample = render_scene::<F>(&spec)?;
        let id = format!("{i:06}");
        let dir = root.join(split.dir());
        let (files, hashes) = write_sample(&sample, &dir, &id)?;
        records.push(DatasetRecord {
            id,
            split,
            spec: Some(spec),
            bbox: sample.bbox,
            files,
            hashes,
        });
    }
    let manifest = DatasetManifest {
        seed,
        n,
        split_ratios,
        records,
    };
    let manifest_path = root.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask;

    fn canvas64() -> Canvas {
        Canvas::new(64, 64)
    }

    #[test]
    fn bbox_follows_anchor_and_size() {
        let spec = SceneSpec {
            seed: 1,
            canvas: canvas64(),
            ground_line: 44,
            has_water: false,
            light_direction: [0.0, 1.0],
            object_shape: ObjectShape::Box,
            object_color: [0.5, 0.4, 0.3],
            object_anchor: (30, 45),
            object_size: (10, 16),
        };
        let b = spec.object_bbox().unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (25, 30, 35, 46));
        assert_eq!(b.width(), 10);
        assert_eq!(b.height(), 16);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SceneSpec {
            seed: 1,
            canvas: canvas64(),
            ground_line: 44,
            has_water: true,
            light_direction: [0.0, 1.0],
            object_shape: ObjectShape::Box,
            object_color: [0.5, 0.4, 0.3],
            object_anchor: (30, 44),
            object_size: (10, 16),
        };
        spec.validate().unwrap();
        spec.light_direction = [0.5, 0.5];
        assert!(spec.validate().is_err());
        spec.light_direction = [0.0, 1.0];
        spec.object_anchor = (2, 44); // would run off the left edge
        assert!(spec.validate().is_err());
        spec.object_anchor = (30, 60); // below the water line
        assert!(spec.validate().is_err());
    }

    #[test]
    fn render_invariants_hold_across_seeds() {
        for seed in 0..24u64 {
            let spec = sample_spec(canvas64(), seed);
            let s = render_scene::<f64>(&spec).unwrap();
            let union = s.masks.union().unwrap();
            // composite equals background exactly outside all effect masks
            for ((y, x), &m) in union.indexed_iter() {
                for c in 0..3 {
                    if !m {
                        assert_eq!(s.composite[[c, y, x]], s.background[[c, y, x]]);
                    }
                }
            }
            // object mask is confined to and fills the bbox rows/cols
            assert_eq!(mask::tight_bbox(&s.masks.object), Some(s.bbox));
            // sprite alpha is the tight crop of the object mask
            assert_eq!(s.object_image.dim(), (4, s.bbox.height(), s.bbox.width()));
            for ly in 0..s.bbox.height() {
                for lx in 0..s.bbox.width() {
                    let a = s.object_image[[3, ly, lx]];
                    let m = s.masks.object[[s.bbox.y0 + ly, s.bbox.x0 + lx]];
                    assert_eq!(a > 0.5, m);
                }
            }
            // reflection appears only on water scenes, strictly below the line
            if !spec.has_water {
                assert_eq!(mask::popcount(&s.masks.reflection), 0);
            }
            for ((y, _), &m) in s.masks.reflection.indexed_iter() {
                if m {
                    assert!(y > spec.ground_line);
                }
            }
            // dilated union matches a fresh dilation of the union
            let fresh = mask::dilate(&union, DILATION_KERNEL, DILATION_KERNEL);
            assert_eq!(s.masks.dilated_union, fresh);
            // shadow and object never overlap
            assert_eq!(mask::intersection_count(&s.masks.object, &s.masks.shadow).unwrap(), 0);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = sample_spec(canvas64(), 9);
        let a = render_scene::<f32>(&spec).unwrap();
        let b = render_scene::<f32>(&spec).unwrap();
        assert_eq!(a.composite, b.composite);
        assert_eq!(a.masks.shadow, b.masks.shadow);
        assert_eq!(a.masks.reflection, b.masks.reflection);
    }

    #[test]
    fn sampled_specs_stay_in_declared_ranges() {
        let mut shape_counts = [0usize; 4];
        let mut water = 0usize;
        let n = 4000u64;
        for seed in 0..n {
            let spec = sample_spec(canvas64(), seed);
            spec.validate().unwrap();
            for c in spec.object_color {
                assert!((0.15..0.9).contains(&c));
            }
            assert!((14..=26).contains(&spec.object_size.0) || spec.object_size.0 == 32);
            assert!((40..=48).contains(&spec.ground_line));
            let angle = spec.light_direction[1].atan2(spec.light_direction[0]).to_degrees();
            assert!((30.0..150.0).contains(&angle));
            let idx = ALL_SHAPES.iter().position(|&s| s == spec.object_shape).unwrap();
            shape_counts[idx] += 1;
            water += spec.has_water as usize;
        }
        // Each uniform category should land within 5 sigma of its expectation.
        let exp = n as f64 / 4.0;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for &c in &shape_counts {
            assert!((c as f64 - exp).abs() < 5.0 * sigma, "{shape_counts:?}");
        }
        let exp_w = n as f64 / 2.0;
        let sigma_w = (n as f64 * 0.25).sqrt();
        assert!((water as f64 - exp_w).abs() < 5.0 * sigma_w, "{water}");
    }

    #[test]
    fn split_counts_round_down_val_and_test() {
        assert_eq!(split_counts(10, [0.8, 0.1, 0.1]).unwrap(), [8, 1, 1]);
        assert_eq!(split_counts(7, [0.8, 0.1, 0.1]).unwrap(), [7, 0, 0]);
        assert_eq!(split_counts(100, [0.9, 0.0, 0.1]).unwrap(), [90, 0, 10]);
        assert!(split_counts(10, [0.5, 0.1, 0.1]).is_err());
    }

    #[test]
    fn dataset_round_trips_and_is_reproducible() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let m_a = make_dataset::<f32>(6, 11, [0.5, 0.0, 0.5], canvas64(), dir_a.path()).unwrap();
        let m_b = make_dataset::<f32>(6, 11, [0.5, 0.0, 0.5], canvas64(), dir_b.path()).unwrap();
        assert_eq!(m_a.split_ids(Split::Train).len(), 3);
        assert_eq!(m_a.split_ids(Split::Test).len(), 3);
        // same seed -> byte-identical artifacts
        for (ra, rb) in m_a.records.iter().zip(&m_b.records) {
            assert_eq!(ra.hashes, rb.hashes);
        }
        let reloaded = DatasetManifest::load(&manifest_path(dir_a.path())).unwrap();
        assert_eq!(reloaded.records.len(), 6);
        for rec in &reloaded.records {
            let sample = load_sample::<f32>(dir_a.path(), rec).unwrap();
            let fresh = render_scene::<f32>(rec.spec.as_ref().unwrap()).unwrap();
            assert_eq!(sample.masks.object, fresh.masks.object);
            assert_eq!(sample.bbox, fresh.bbox);
            // 8-bit quantization: reload matches render to within one step
            let max_err = sample
                .composite
                .iter()
                .zip(fresh.composite.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err <= 1.0 / 255.0 + 1e-6, "{max_err}");
        }
    }
}
