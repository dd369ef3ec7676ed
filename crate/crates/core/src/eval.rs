//! Placement and identity metrics against synthetic ground truth: IoU,
//! best-of-n placement scores, pairwise diversity over a pooled-luminance
//! proxy, and an encoder-based identity score.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{self, Mask};
use crate::model::{pooled_encoder_embedding, StageCheckpoint};
use crate::num::Scalar;
use crate::raster::{luminance, Image};
use crate::rng::derive_seed;
use crate::sampler::{sample_diverse, CompositeResult, SampleRequest};
use crate::scene::SceneSample;

/// Paper protocol: five predictions per image.
pub const DEFAULT_N_PREDICTIONS: usize = 5;
pub const POOL_GRID: usize = 8;

pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape("iou operands".into()));
    }
    let na = mask::popcount(a);
    let nb = mask::popcount(b);
    if na == 0 && nb == 0 {
        return Ok(1.0);
    }
    if na == 0 || nb == 0 {
        return Ok(0.0);
    }
    let inter = mask::intersection_count(a, b)?;
    Ok(inter as f64 / (na + nb - inter) as f64)
}

/// Best IoU over an arbitrary nonempty prediction list.
pub fn max_iou(gt: &Mask, preds: &[Mask]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Invalid("no predictions".into()));
    }
    let mut best = 0.0f64;
    for p in preds {
        best = best.max(iou(gt, p)?);
    }
    Ok(best)
}

/// Max IoU over exactly five predictions plus the strict > 0.5 hit flag.
pub fn placement_scores(gt: &Mask, preds: &[Mask]) -> Result<(f64, bool)> {
    if preds.len() != DEFAULT_N_PREDICTIONS {
        return Err(Error::Invalid(format!(
            "placement protocol wants {DEFAULT_N_PREDICTIONS} predictions, got {}",
            preds.len()
        )));
    }
    let best = max_iou(gt, preds)?;
    Ok((best, best > 0.5))
}

/// 8x8 average-pooled luminance, the perceptual stand-in for diversity.
pub fn pooled_luminance<F: Scalar>(img: &Image<F>) -> Array2<f64> {
    let lum = luminance(img);
    let (h, w) = lum.dim();
    let mut out = Array2::<f64>::zeros((POOL_GRID, POOL_GRID));
    for gy in 0..POOL_GRID {
        for gx in 0..POOL_GRID {
            let y0 = gy * h / POOL_GRID;
            let y1 = ((gy + 1) * h / POOL_GRID).max(y0 + 1).min(h);
            let x0 = gx * w / POOL_GRID;
            let x1 = ((gx + 1) * w / POOL_GRID).max(x0 + 1).min(w);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += lum[[y, x]].to_f64_s();
                }
            }
            out[[gy, gx]] = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// L1 distance between pooled-luminance grids.
pub fn pooled_l1_distance<F: Scalar>(a: &Image<F>, b: &Image<F>) -> f64 {
    let pa = pooled_luminance(a);
    let pb = pooled_luminance(b);
    pa.iter()
        .zip(pb.iter())
        .map(|(&x, &y)| (x - y).abs())
        .sum::<f64>()
        / (POOL_GRID * POOL_GRID) as f64
}

/// Mean pairwise distance over all C(n,2) unordered pairs; the distance is
/// pluggable so a learned metric can replace the proxy.
pub fn pairwise_diversity_with<F: Scalar>(
    images: &[Image<F>],
    dist: impl Fn(&Image<F>, &Image<F>) -> f64,
) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::Invalid("diversity needs at least 2 images".into()));
    }
    let n = images.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            acc += dist(&images[i], &images[j]);
        }
    }
    Ok(acc / (n * (n - 1) / 2) as f64)
}

pub fn pairwise_diversity<F: Scalar>(images: &[Image<F>]) -> Result<f64> {
    pairwise_diversity_with(images, pooled_l1_distance)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Square crop around a predicted mask: side 2x the longer tight-box side,
/// centered on the box, clamped to the canvas.
pub fn identity_crop_box(mask: &Mask) -> Result<(usize, usize, usize, usize)> {
    let bbox = mask::tight_bbox(mask)
        .ok_or_else(|| Error::Invalid("identity undefined for an empty mask".into()))?;
    let (h, w) = mask.dim();
    let side = (2 * bbox.width().max(bbox.height())).min(h.min(w));
    let cx = (bbox.x0 + bbox.x1) / 2;
    let cy = (bbox.y0 + bbox.y1) / 2;
    let x0 = cx.saturating_sub(side / 2).min(w - side);
    let y0 = cy.saturating_sub(side / 2).min(h - side);
    Ok((x0, y0, x0 + side, y0 + side))
}

/// Cosine similarity between frozen-encoder embeddings of the input sprite
/// and the crop around the composited object.
pub fn identity_proxy<F: Scalar>(
    result: &CompositeResult<F>,
    sprite: &Image<F>,
    ckpt: &StageCheckpoint<F>,
) -> Result<f64> {
    let (x0, y0, x1, y1) = identity_crop_box(&result.predicted_mask)?;
    let mut crop = Array3::<F>::zeros((4, y1 - y0, x1 - x0));
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..3 {
                crop[[c, y - y0, x - x0]] = result.image[[c, y, x]];
            }
            crop[[3, y - y0, x - x0]] = F::one();
        }
    }
    let ea = pooled_encoder_embedding(&crop, ckpt)?;
    let eb = pooled_encoder_embedding(sprite, ckpt)?;
    let va: Vec<f64> = ea.iter().map(|v| v.to_f64_s()).collect();
    let vb: Vec<f64> = eb.iter().map(|v| v.to_f64_s()).collect();
    Ok(cosine(&va, &vb))
}

// ---------------------------------------------------------------------------
// Dataset-level evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    EmptyMask,
    Bbox,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub n_predictions: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: EvalMode::EmptyMask,
            n_predictions: DEFAULT_N_PREDICTIONS,
            steps: crate::sampler::DEFAULT_STEPS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ImageRow {
    pub id: String,
    pub max_iou: f64,
    pub hit: bool,
    pub diversity: f64,
    pub identity: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PlacementReport {
    pub per_image: Vec<ImageRow>,
    pub mean_iou: f64,
    pub iou_over_half_rate: f64,
    pub pairwise_diversity: f64,
    pub identity_proxy: Option<f64>,
    pub n_predictions_per_image: usize,
}

/// Folds per-image rows into the aggregates; evaluation and any external
/// re-aggregation oracle share this exact arithmetic.
pub fn aggregate_rows(rows: Vec<ImageRow>, n_predictions: usize) -> Result<PlacementReport> {
    if rows.is_empty() {
        return Err(Error::Invalid("no rows to aggregate".into()));
    }
    let n = rows.len() as f64;
    let mean_iou = rows.iter().map(|r| r.max_iou).sum::<f64>() / n;
    let hits = rows.iter().filter(|r| r.hit).count();
    let diversity = rows.iter().map(|r| r.diversity).sum::<f64>() / n;
    let ids: Vec<f64> = rows.iter().filter_map(|r| r.identity).collect();
    let identity = if ids.is_empty() {
        None
    } else {
        Some(ids.iter().sum::<f64>() / ids.len() as f64)
    };
    Ok(PlacementReport {
        iou_over_half_rate: hits as f64 / rows.len() as f64,
        mean_iou,
        pairwise_diversity: diversity,
        identity_proxy: identity,
        n_predictions_per_image: n_predictions,
        per_image: rows,
    })
}

/// Samples `n_predictions` composites per scene and scores placement,
/// diversity, and identity. Deterministic per (checkpoint, samples, seed).
pub fn evaluate<F: Scalar>(
    samples: &[(String, SceneSample<F>)],
    ckpt: &StageCheckpoint<F>,
    opts: &EvalOptions,
) -> Result<PlacementReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty evaluation split".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (idx, (id, sample)) in samples.iter().enumerate() {
        let mut req = SampleRequest::new(
            sample.background.clone(),
            sample.object_image.clone(),
            derive_seed(opts.seed, "eval", idx as u64),
        );
        req.steps = opts.steps;
        req.bbox = match opts.mode {
            EvalMode::EmptyMask => None,
            EvalMode::Bbox => Some(sample.bbox),
        };
        let results = sample_diverse(&req, opts.n_predictions, ckpt)?;
        let masks: Vec<Mask> = results.iter().map(|r| r.predicted_mask.clone()).collect();
        let best = max_iou(&sample.masks.object, &masks)?;
        let hit = best > 0.5;
        let images: Vec<Image<F>> = results.iter().map(|r| r.image.clone()).collect();
        let diversity = pairwise_diversity(&images)?;
        let best_idx = masks
            .iter()
            .enumerate()
            .map(|(i, m)| (i, iou(&sample.masks.object, m).unwrap_or(0.0)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let identity = identity_proxy(&results[best_idx], &sample.object_image, ckpt).ok();
        rows.push(ImageRow {
            id: id.clone(),
            max_iou: best,
            hit,
            diversity,
            identity,
        });
    }
    aggregate_rows(rows, opts.n_predictions)
}

pub fn report_to_csv(report: &PlacementReport) -> String {
    let mut out = String::from("id,max_iou,hit,diversity,identity\n");
    for r in &report.per_image {
        out.push_str(&format!(
            "{},{:.12},{},{:.12},{}\n",
            r.id,
            r.max_iou,
            r.hit,
            r.diversity,
            r.identity
                .map(|v| format!("{v:.12}"))
                .unwrap_or_default()
        ));
    }
    out
}

pub fn save_report(report: &PlacementReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Path(dir.to_path_buf(), e))?;
    let json = serde_json::to_vec_pretty(report)?;
    fs::write(dir.join("report.json"), json).map_err(Error::Io)?;
    fs::write(dir.join("report.csv"), report_to_csv(report)).map_err(Error::Io)?;
    Ok(())
}
