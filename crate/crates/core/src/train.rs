//! Losses, bbox perturbation, the six-stage schedule with per-group freezing
//! and checkpoint merging. One tape per sample; gradients accumulate over the
//! batch in name order, so results are independent of any data-loading
//! parallelism.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::augment_object;
use crate::error::{Error, Result};
use crate::geom::{BBox, Canvas};
use crate::mask::Mask;
use crate::model::{
    assemble_input, embedding_tape, make_position_mask, unet_forward, Binding, EmbedMode,
    ParamGroup, StageCheckpoint, StageTag, ALL_GROUPS,
};
use crate::nn::{Tape, Var};
use crate::num::{s, Scalar};
use crate::raster::{resize_bicubic, to_signed, Image};
use crate::rng::{derive_seed, stream_rng};
use crate::scene::SceneSample;

/// Dice weight in the stage-6 loss.
pub const MASK_LOSS_WEIGHT: f64 = 0.01;
pub const GRAD_CLIP_NORM: f64 = 1.0;
pub const LR_ENCODER: f64 = 1e-4;
pub const LR_UNET: f64 = 4e-5;
pub const MAX_TRANSLATE: i64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    Standard,
    PairedViews,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PmaskPolicy {
    AlwaysEmpty,
    FiftyFifty,
}

#[derive(Clone, Debug)]
pub struct StagePlan {
    pub stage_tag: StageTag,
    pub trainable_groups: BTreeSet<ParamGroup>,
    pub data_mode: DataMode,
    pub pmask_policy: PmaskPolicy,
    pub uses_multiscale: bool,
    pub steps: usize,
    pub learning_rates: BTreeMap<ParamGroup, f64>,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        let mask_head = self.trainable_groups.contains(&ParamGroup::MaskHead);
        match self.stage_tag {
            StageTag::S6 => {
                if self.trainable_groups.len() != 1 || !mask_head {
                    return Err(Error::Invalid("final stage trains only the mask head".into()));
                }
            }
            StageTag::Init => {
                return Err(Error::Invalid("no plan exists for the init tag".into()));
            }
            _ => {
                if mask_head {
                    return Err(Error::Invalid(
                        "mask head is trainable only in the final stage".into(),
                    ));
                }
            }
        }
        if self.stage_tag == StageTag::S5 && !self.uses_multiscale {
            return Err(Error::Invalid("stage 5 requires multiscale conditioning".into()));
        }
        if self.steps == 0 {
            return Err(Error::Invalid("a stage needs at least one step".into()));
        }
        for g in &self.trainable_groups {
            if !self.learning_rates.contains_key(g) {
                return Err(Error::Invalid(format!(
                    "missing learning rate for group '{}'",
                    g.prefix()
                )));
            }
        }
        Ok(())
    }

    /// The published schedule for one stage. Learning rates: encoder-side
    /// groups 1e-4, U-Net 4e-5.
    pub fn default_plan(tag: StageTag, steps: usize) -> Result<StagePlan> {
        use ParamGroup::*;
        let (groups, data_mode, pmask_policy, multiscale): (&[ParamGroup], _, _, bool) = match tag
        {
            StageTag::S1 => (
                &[Unet, Adaptor],
                DataMode::Standard,
                PmaskPolicy::AlwaysEmpty,
                false,
            ),
            StageTag::S2 => (
                &[Unet, Adaptor, Encoder],
                DataMode::PairedViews,
                PmaskPolicy::AlwaysEmpty,
                false,
            ),
            StageTag::S3 => (
                &[Unet],
                DataMode::Standard,
                PmaskPolicy::AlwaysEmpty,
                false,
            ),
            StageTag::S4 => (
                &[Unet],
                DataMode::Standard,
                PmaskPolicy::FiftyFifty,
                false,
            ),
            StageTag::S5 => (&[Unet], DataMode::Standard, PmaskPolicy::FiftyFifty, true),
            StageTag::S6 => (
                &[MaskHead],
                DataMode::Standard,
                PmaskPolicy::FiftyFifty,
                false,
            ),
            StageTag::Init => return Err(Error::Invalid("init is not a trainable stage".into())),
        };
        let lr = |g: ParamGroup| match g {
            Unet => LR_UNET,
            _ => LR_ENCODER,
        };
        let plan = StagePlan {
            stage_tag: tag,
            trainable_groups: groups.iter().copied().collect(),
            data_mode,
            pmask_policy,
            uses_multiscale: multiscale,
            steps,
            learning_rates: groups.iter().map(|&g| (g, lr(g))).collect(),
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// Stage order: each stage resumes from its predecessor's checkpoint; the
/// merged checkpoint carries the S3 tag before S3 fine-tuning.
pub fn allowed_predecessors(tag: StageTag) -> &'static [StageTag] {
    match tag {
        StageTag::Init => &[],
        StageTag::S1 => &[StageTag::Init],
        StageTag::S2 => &[StageTag::Init, StageTag::S1],
        StageTag::S3 => &[StageTag::S3],
        StageTag::S4 => &[StageTag::S3],
        StageTag::S5 => &[StageTag::S4],
        StageTag::S6 => &[StageTag::S5],
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

pub fn diffusion_loss<F: Scalar>(eps: &Array3<F>, eps_hat: &Array3<F>) -> Result<F> {
    if eps.dim() != eps_hat.dim() {
        return Err(Error::Shape("diffusion loss operands".into()));
    }
    let n = s::<F>(eps.len() as f64);
    Ok(eps
        .iter()
        .zip(eps_hat.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<F>()
        / n)
}

pub fn dice_loss<F: Scalar>(gt: &Mask, pred: &ndarray::Array2<F>) -> Result<F> {
    if gt.dim() != pred.dim() {
        return Err(Error::Shape("dice loss operands".into()));
    }
    let mut s_gp = F::zero();
    let mut s_g = F::zero();
    let mut s_p = F::zero();
    for (&g, &p) in gt.iter().zip(pred.iter()) {
        if g {
            s_g += F::one();
            s_gp += p;
        }
        s_p += p;
    }
    let denom = s_g + s_p + s::<F>(crate::nn::DICE_EPS);
    Ok(F::one() - s::<F>(2.0) * s_gp / denom)
}

// ---------------------------------------------------------------------------
// BBox perturbation
// ---------------------------------------------------------------------------

/// Deterministic application of a known perturbation; `perturb_bbox` draws
/// the factors and offsets.
pub fn perturb_bbox_with(
    gt: BBox,
    canvas: Canvas,
    wf: f64,
    hf: f64,
    dx: i64,
    dy: i64,
) -> BBox {
    let w = ((gt.width() as f64 * wf).round() as usize).clamp(1, canvas.width);
    let h = ((gt.height() as f64 * hf).round() as usize).clamp(1, canvas.height);
    let cx = (gt.x0 + gt.x1) as f64 / 2.0;
    let cy = (gt.y0 + gt.y1) as f64 / 2.0;
    let x0 = (cx - w as f64 / 2.0).round() as i64 + dx;
    let y0 = (cy - h as f64 / 2.0).round() as i64 + dy;
    let x0 = x0.clamp(0, (canvas.width - w) as i64) as usize;
    let y0 = y0.clamp(0, (canvas.height - h) as i64) as usize;
    BBox::new(x0, y0, x0 + w, y0 + h).expect("clamped box is valid")
}

/// Width and height scaled independently by U[0.9, 1.1]; integer translation
/// U[-10, 10] per axis; clamped to the canvas.
pub fn perturb_bbox(gt: BBox, canvas: Canvas, seed: u64) -> BBox {
    let mut r = stream_rng(seed, "perturb-bbox");
    let wf = r.gen_range(0.9..=1.1);
    let hf = r.gen_range(0.9..=1.1);
    let dx = r.gen_range(-MAX_TRANSLATE..=MAX_TRANSLATE);
    let dy = r.gen_range(-MAX_TRANSLATE..=MAX_TRANSLATE);
    perturb_bbox_with(gt, canvas, wf, hf, dx, dy)
}

// ---------------------------------------------------------------------------
// Per-sample training cases
// ---------------------------------------------------------------------------

/// Everything random about one training example, drawn up front so the loss
/// is a pure function of the parameters.
#[derive(Clone, Debug)]
pub struct SampleCase<F: Scalar> {
    /// Clean target in [-1, 1].
    pub x0: Array3<F>,
    /// Clean background in [-1, 1] (conditioning channels).
    pub background: Array3<F>,
    /// Conditioning sprite (RGBA, [0, 1]).
    pub sprite: Image<F>,
    pub object_mask: Mask,
    pub pmask_bbox: Option<BBox>,
    pub t: usize,
    pub eps: Array3<F>,
}

/// Alpha-composites a sprite over the background inside `bbox`.
pub fn composite_at<F: Scalar>(
    background: &Image<F>,
    sprite: &Image<F>,
    bbox: BBox,
) -> Result<Image<F>> {
    if background.dim().0 != 3 || sprite.dim().0 != 4 {
        return Err(Error::Shape("composite_at expects RGB over RGBA".into()));
    }
    let resized = if sprite.dim().1 == bbox.height() && sprite.dim().2 == bbox.width() {
        sprite.clone()
    } else {
        resize_bicubic(sprite, bbox.height(), bbox.width())
    };
    let mut out = background.clone();
    for y in 0..bbox.height() {
        for x in 0..bbox.width() {
            let a = resized[[3, y, x]].max(F::zero()).min(F::one());
            if a <= F::zero() {
                continue;
            }
            for c in 0..3 {
                let src = resized[[c, y, x]].max(F::zero()).min(F::one());
                let dst = out[[c, bbox.y0 + y, bbox.x0 + x]];
                out[[c, bbox.y0 + y, bbox.x0 + x]] = dst * (F::one() - a) + src * a;
            }
        }
    }
    Ok(out)
}

/// Draws one case from a scene sample: timestep, noise, mask policy coin,
/// and (for paired views) the two augmentations.
pub fn make_case<F: Scalar>(
    sample: &SceneSample<F>,
    plan: &StagePlan,
    canvas: Canvas,
    t_count: usize,
    seed: u64,
    augment_strength: f64,
) -> Result<SampleCase<F>> {
    let mut r = stream_rng(seed, "case");
    let t = r.gen_range(0..t_count);
    let (c, h, w) = sample.composite.dim();
    let mut eps = Array3::<F>::zeros((c, h, w));
    {
        use rand_distr::StandardNormal;
        for v in eps.iter_mut() {
            let z: f64 = r.sample(StandardNormal);
            *v = s::<F>(z);
        }
    }
    let pmask_bbox = match plan.pmask_policy {
        PmaskPolicy::AlwaysEmpty => None,
        PmaskPolicy::FiftyFifty => {
            if r.gen_bool(0.5) {
                None
            } else {
                Some(perturb_bbox(sample.bbox, canvas, derive_seed(seed, "pmask", 0)))
            }
        }
    };
    let (sprite, x0_unit) = match plan.data_mode {
        DataMode::Standard => (sample.object_image.clone(), sample.composite.clone()),
        DataMode::PairedViews => {
            // condition on view A while the target contains view B
            let view_a = augment_object(
                &sample.object_image,
                derive_seed(seed, "view", 0),
                augment_strength,
            );
            let view_b = augment_object(
                &sample.object_image,
                derive_seed(seed, "view", 1),
                augment_strength,
            );
            let target = composite_at(&sample.background, &view_b, sample.bbox)?;
            (view_a, target)
        }
    };
    Ok(SampleCase {
        x0: to_signed(&x0_unit),
        background: to_signed(&sample.background),
        sprite,
        object_mask: sample.masks.object.clone(),
        pmask_bbox,
        t,
        eps,
    })
}

pub struct LossBreakdown<F: Scalar> {
    pub loss: Var,
    pub l_d: F,
    pub l_m: F,
}

/// Builds the stage loss for one case on an existing tape.
pub fn case_loss_tape<F: Scalar>(
    tape: &mut Tape<F>,
    bind: &Binding,
    ckpt: &StageCheckpoint<F>,
    plan: &StagePlan,
    case: &SampleCase<F>,
) -> Result<LossBreakdown<F>> {
    let schedule = &ckpt.schedule;
    let ab = schedule.alpha_bar(case.t);
    let sa = ab.sqrt();
    let sb = (F::one() - ab).sqrt();
    let x_t = case.x0.mapv(|v| v * sa) + &case.eps.mapv(|v| v * sb);
    let pmask = make_position_mask::<F>(case.pmask_bbox, ckpt.config.canvas)?;
    let input = assemble_input(&x_t, &pmask, &case.background)?;
    let mode = if plan.uses_multiscale {
        EmbedMode::Average
    } else {
        EmbedMode::Single(1.0)
    };
    let tokens = embedding_tape(tape, bind, &ckpt.config, &case.sprite, mode)?;
    let input = tape.constant(input);
    let (eps_hat, mask_logits) = unet_forward(tape, bind, &ckpt.config, input, case.t, tokens);
    let l_d_var = tape.mse(eps_hat, case.eps.clone().into_dyn());
    let l_d = tape.scalar_value(l_d_var);
    let gt = ArrayD::from_shape_fn(IxDyn(&[1, case.object_mask.dim().0, case.object_mask.dim().1]), |ix| {
        if case.object_mask[[ix[1], ix[2]]] {
            F::one()
        } else {
            F::zero()
        }
    });
    let probs = tape.sigmoid(mask_logits);
    let l_m_var = tape.dice(probs, gt);
    let l_m = tape.scalar_value(l_m_var);
    let loss = match plan.stage_tag {
        StageTag::S6 => tape.scale(l_m_var, s::<F>(MASK_LOSS_WEIGHT)),
        _ => l_d_var,
    };
    Ok(LossBreakdown { loss, l_d, l_m })
}

/// Mean stage loss over prepared cases; used directly by gradient-check
/// oracles.
pub fn total_loss<F: Scalar>(
    cases: &[SampleCase<F>],
    ckpt: &StageCheckpoint<F>,
    plan: &StagePlan,
) -> Result<F> {
    if cases.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut acc = F::zero();
    for case in cases {
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &ckpt.params, |_| false);
        let b = case_loss_tape(&mut tape, &bind, ckpt, plan, case)?;
        acc += tape.scalar_value(b.loss);
    }
    Ok(acc / s::<F>(cases.len() as f64))
}

/// Mean loss and parameter gradients over a batch, accumulated in parameter
/// name order.
pub fn batch_grads<F: Scalar>(
    cases: &[SampleCase<F>],
    ckpt: &StageCheckpoint<F>,
    plan: &StagePlan,
) -> Result<(F, F, F, BTreeMap<String, ArrayD<F>>)> {
    let trainable = |name: &str| {
        ParamGroup::of_name(name)
            .map(|g| plan.trainable_groups.contains(&g))
            .unwrap_or(false)
    };
    let mut grads: BTreeMap<String, ArrayD<F>> = BTreeMap::new();
    let mut loss_sum = F::zero();
    let mut ld_sum = F::zero();
    let mut lm_sum = F::zero();
    for case in cases {
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &ckpt.params, trainable);
        let b = case_loss_tape(&mut tape, &bind, ckpt, plan, case)?;
        loss_sum += tape.scalar_value(b.loss);
        ld_sum += b.l_d;
        lm_sum += b.l_m;
        let all = tape.backward(b.loss);
        for (name, &var) in bind.names() {
            if !trainable(name) {
                continue;
            }
            if let Some(g) = &all[var] {
                match grads.get_mut(name) {
                    Some(acc) => *acc += g,
                    None => {
                        grads.insert(name.clone(), g.clone());
                    }
                }
            }
        }
    }
    let n = s::<F>(cases.len() as f64);
    for g in grads.values_mut() {
        g.mapv_inplace(|v| v / n);
    }
    Ok((loss_sum / n, ld_sum / n, lm_sum / n, grads))
}

// ---------------------------------------------------------------------------
// Optimizer and stage loop
// ---------------------------------------------------------------------------

struct Adam<F: Scalar> {
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
    step: usize,
}

impl<F: Scalar> Adam<F> {
    fn new() -> Self {
        Adam {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    fn update(
        &mut self,
        params: &mut BTreeMap<String, ArrayD<F>>,
        grads: &BTreeMap<String, ArrayD<F>>,
        lr_of: impl Fn(&str) -> f64,
    ) {
        self.step += 1;
        let b1 = s::<F>(0.9);
        let b2 = s::<F>(0.999);
        let eps = s::<F>(1e-8);
        let c1 = F::one() - b1.powi(self.step as i32);
        let c2 = F::one() - b2.powi(self.step as i32);
        for (name, g) in grads {
            let lr = s::<F>(lr_of(name));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| {
                *mv = b1 * *mv + (F::one() - b1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
            });
            let p = params.get_mut(name).expect("grad for unknown parameter");
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let mhat = mv / c1;
                let vhat = vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

fn clip_global_norm<F: Scalar>(grads: &mut BTreeMap<String, ArrayD<F>>, max_norm: f64) {
    let mut sq = F::zero();
    for g in grads.values() {
        for &v in g.iter() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt().to_f64_s();
    if norm > max_norm {
        let scale = s::<F>(max_norm / norm);
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub augment_strength: f64,
    pub log_every: usize,
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 4,
            augment_strength: 0.5,
            log_every: 50,
            ckpt_every: 0,
        }
    }
}

/// Per-step scalars appended to `metrics.csv`.
pub struct StepLog {
    pub step: usize,
    pub l_d: f64,
    pub l_m: f64,
}

/// Runs one stage over in-memory samples. Frozen groups come back bit
/// identical; the returned checkpoint carries the plan's stage tag.
pub fn train_stage<F: Scalar>(
    plan: &StagePlan,
    init: &StageCheckpoint<F>,
    dataset: &[SceneSample<F>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_step: Option<&mut dyn FnMut(&StepLog)>,
) -> Result<StageCheckpoint<F>> {
    plan.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if !allowed_predecessors(plan.stage_tag).contains(&init.stage_tag) {
        return Err(Error::Invalid(format!(
            "stage {} cannot start from a {} checkpoint",
            plan.stage_tag.name(),
            init.stage_tag.name()
        )));
    }
    let mut ckpt = init.clone();
    ckpt.stage_tag = plan.stage_tag;
    for g in ALL_GROUPS {
        ckpt.trainable
            .insert(g, plan.trainable_groups.contains(&g));
    }
    let canvas = ckpt.config.canvas;
    let t_count = ckpt.schedule.t_count();
    let lr_of = |name: &str| {
        let g = ParamGroup::of_name(name).expect("known group");
        *plan.learning_rates.get(&g).expect("lr present")
    };
    let mut order = stream_rng(cfg.seed, &format!("{}-order", plan.stage_tag.name()));
    let mut adam = Adam::new();
    let mut metrics: Option<fs::File> = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::Path(dir.to_path_buf(), e))?;
            let path = dir.join("metrics.csv");
            let fresh = !path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::Path(path.clone(), e))?;
            if fresh {
                writeln!(f, "step,stage,l_d,l_m,lr").map_err(|e| Error::Path(path, e))?;
            }
            Some(f)
        }
        None => None,
    };

    for step in 0..plan.steps {
        let mut cases = Vec::with_capacity(cfg.batch_size);
        for k in 0..cfg.batch_size {
            let idx = order.gen_range(0..dataset.len());
            let case_seed = derive_seed(
                cfg.seed,
                &format!("{}-case", plan.stage_tag.name()),
                (step * cfg.batch_size + k) as u64,
            );
            cases.push(make_case(
                &dataset[idx],
                plan,
                canvas,
                t_count,
                case_seed,
                cfg.augment_strength,
            )?);
        }
        let (_, l_d, l_m, mut grads) = batch_grads(&cases, &ckpt, plan)?;
        clip_global_norm(&mut grads, GRAD_CLIP_NORM);
        adam.update(&mut ckpt.params.entries, &grads, lr_of);
        let log = StepLog {
            step,
            l_d: l_d.to_f64_s(),
            l_m: l_m.to_f64_s(),
        };
        if let Some(cb) = on_step.as_deref_mut() {
            cb(&log);
        }
        if let Some(f) = metrics.as_mut() {
            if step % cfg.log_every == 0 || step + 1 == plan.steps {
                let lr = plan
                    .learning_rates
                    .values()
                    .copied()
                    .fold(0.0f64, f64::max);
                writeln!(
                    f,
                    "{},{},{:.6},{:.6},{:.6e}",
                    step,
                    plan.stage_tag.name(),
                    log.l_d,
                    log.l_m,
                    lr
                )
                .map_err(Error::Io)?;
            }
        }
        if let (Some(dir), true) = (
            out_dir,
            cfg.ckpt_every > 0 && step > 0 && step % cfg.ckpt_every == 0,
        ) {
            let path = dir.join(format!("ckpt_{}_{}.bin", plan.stage_tag.name(), step));
            crate::ckpt::save_checkpoint(&ckpt, &path)?;
        }
    }
    Ok(ckpt)
}

/// alpha*a + (1-alpha)*b over every parameter; result is tagged as the merged
/// stage.
pub fn merge_checkpoints<F: Scalar>(
    a: &StageCheckpoint<F>,
    b: &StageCheckpoint<F>,
    alpha: f64,
) -> Result<StageCheckpoint<F>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("merge alpha {alpha} outside [0,1]")));
    }
    if !a.params.same_namespace(&b.params) {
        return Err(Error::Invalid("checkpoint namespaces differ".into()));
    }
    if a.schedule != b.schedule {
        return Err(Error::Invalid("noise schedules differ".into()));
    }
    if a.config != b.config {
        return Err(Error::Invalid("model configs differ".into()));
    }
    let al = s::<F>(alpha);
    let be = F::one() - al;
    let mut out = a.clone();
    for (name, pa) in &a.params.entries {
        let pb = b.params.get(name);
        out.params
            .entries
            .insert(name.clone(), pa.mapv(|v| v * al) + &pb.mapv(|v| v * be));
    }
    out.stage_tag = StageTag::S3;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_checkpoint, ModelConfig};
    use crate::scene::{render_scene, sample_spec};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            canvas: Canvas::new(16, 16),
            widths: vec![4, 8],
            temb_dim: 8,
            token_dim: 8,
            encoder_input: 8,
            encoder_widths: vec![4, 4],
            norm_groups: 2,
        }
    }

    fn tiny_sample() -> SceneSample<f64> {
        let canvas = Canvas::new(16, 16);
        let mut spec = sample_spec(canvas, 3);
        spec.canvas = canvas;
        spec.ground_line = 12;
        spec.has_water = false;
        spec.object_size = (6, 6);
        spec.object_anchor = (8, 11);
        render_scene::<f64>(&spec).unwrap()
    }

    #[test]
    fn mse_matches_loop_oracle() {
        let mut r = stream_rng(1, "mse");
        let a = Array3::from_shape_fn((3, 4, 4), |_| r.gen_range(-1.0..1.0));
        let b = Array3::from_shape_fn((3, 4, 4), |_| r.gen_range(-1.0..1.0));
        let got: f64 = diffusion_loss(&a, &b).unwrap();
        let mut acc = 0.0;
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let d = a[[c, y, x]] - b[[c, y, x]];
                    acc += d * d;
                }
            }
        }
        assert!((got - acc / 48.0).abs() < 1e-12);
        assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);
        let ones = Array3::from_elem((3, 4, 4), 1.0);
        let zeros = Array3::from_elem((3, 4, 4), 0.0);
        assert_eq!(diffusion_loss(&ones, &zeros).unwrap(), 1.0);
    }

    #[test]
    fn dice_fixtures() {
        let gt = Mask::from_shape_fn((4, 4), |(y, _)| y < 1);
        let perfect = gt.mapv(|b| if b { 1.0 } else { 0.0 });
        assert!(dice_loss(&gt, &perfect).unwrap() < 1e-5);
        let disjoint: ndarray::Array2<f64> = gt.mapv(|b| if b { 0.0 } else { 1.0 });
        assert!((dice_loss(&gt, &disjoint).unwrap() - 1.0).abs() < 1e-5);
        // |gt| = 4, |pred| = 4, overlap 2 -> 0.5
        let gt2 = Mask::from_shape_fn((4, 4), |(y, x)| y == 0 && x < 4);
        let pred2 = ndarray::Array2::<f64>::from_shape_fn((4, 4), |(y, x)| {
            if (y == 0 && x >= 2) || (y == 1 && x < 2) {
                1.0
            } else {
                0.0
            }
        });
        assert!((dice_loss(&gt2, &pred2).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn perturb_identity_and_bounds() {
        let canvas = Canvas::new(64, 64);
        let gt = BBox::new(20, 20, 40, 44).unwrap();
        assert_eq!(perturb_bbox_with(gt, canvas, 1.0, 1.0, 0, 0), gt);
        for i in 0..10_000u64 {
            let b = perturb_bbox(gt, canvas, i);
            assert!(b.x1 <= canvas.width && b.y1 <= canvas.height);
            assert!(b.width() >= 1 && b.height() >= 1);
            assert!((b.width() as f64) <= (gt.width() as f64 * 1.1).round());
            assert!((b.width() as f64) >= (gt.width() as f64 * 0.9).round());
        }
        // edge-touching box stays in canvas
        let edge = BBox::new(50, 50, 64, 64).unwrap();
        for i in 0..1000u64 {
            let b = perturb_bbox(edge, canvas, i);
            assert!(b.x1 <= 64 && b.y1 <= 64);
        }
    }

    #[test]
    fn fifty_fifty_is_a_fair_coin() {
        let plan = StagePlan::default_plan(StageTag::S4, 1).unwrap();
        let sample = tiny_sample();
        let canvas = Canvas::new(16, 16);
        let mut empty = 0usize;
        let n = 10_000;
        for i in 0..n {
            let case = make_case(&sample, &plan, canvas, 10, i as u64, 0.5).unwrap();
            if case.pmask_bbox.is_none() {
                empty += 1;
            }
        }
        let frac = empty as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "empty fraction {frac}");
    }

    #[test]
    fn merge_is_linear_and_exact() {
        let cfg = tiny_config();
        let a = init_checkpoint::<f64>(&cfg, 1).unwrap();
        let b = init_checkpoint::<f64>(&cfg, 2).unwrap();
        let m1 = merge_checkpoints(&a, &b, 1.0).unwrap();
        for (name, v) in &m1.params.entries {
            assert_eq!(v, a.params.get(name), "{name}");
        }
        let zero = {
            let mut z = a.clone();
            for v in z.params.entries.values_mut() {
                v.fill(0.0);
            }
            z
        };
        let m = merge_checkpoints(&zero, &b, 0.25).unwrap();
        for (name, v) in &m.params.entries {
            let expect = b.params.get(name).mapv(|x| 0.75 * x);
            let diff = (v - &expect).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
            assert!(diff < 1e-15, "{name}");
        }
        // merge(a,b,alpha) + merge(a,b,1-alpha) == a + b
        let x = merge_checkpoints(&a, &b, 0.3).unwrap();
        let y = merge_checkpoints(&a, &b, 0.7).unwrap();
        for name in a.params.entries.keys() {
            let lhs = x.params.get(name) + y.params.get(name);
            let rhs = a.params.get(name) + b.params.get(name);
            let diff = (&lhs - &rhs).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
            assert!(diff < 1e-7, "{name}");
        }
    }

    #[test]
    fn stage_transitions_are_checked() {
        let cfg = tiny_config();
        let init = init_checkpoint::<f64>(&cfg, 1).unwrap();
        let plan = StagePlan::default_plan(StageTag::S4, 1).unwrap();
        let data = vec![tiny_sample()];
        let cfg_t = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        let err = train_stage(&plan, &init, &data, &cfg_t, None, None);
        assert!(matches!(err, Err(Error::Invalid(_))));
    }

    #[test]
    fn frozen_groups_are_bit_identical() {
        let cfg = tiny_config();
        let mut init = init_checkpoint::<f64>(&cfg, 1).unwrap();
        init.schedule = crate::model::NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let data = vec![tiny_sample()];
        let cfg_t = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        let plan = StagePlan::default_plan(StageTag::S1, 2).unwrap();
        let out = train_stage(&plan, &init, &data, &cfg_t, None, None).unwrap();
        let mut unet_changed = false;
        for (name, v) in &out.params.entries {
            let before = init.params.get(name);
            let group = ParamGroup::of_name(name).unwrap();
            match group {
                ParamGroup::Encoder | ParamGroup::MaskHead => {
                    assert_eq!(v, before, "frozen {name} changed");
                }
                ParamGroup::Unet | ParamGroup::Adaptor => {
                    if v != before {
                        unet_changed = true;
                    }
                }
            }
        }
        assert!(unet_changed, "trainable groups never moved");
        assert_eq!(out.stage_tag, StageTag::S1);
    }
}
