//! Conditional denoiser: U-Net over [noisy image | position mask | background]
//! channels, cross-attending to object tokens, with a parallel mask-logit
//! head. Includes the object encoder, content adaptor and multiscale
//! embedding path.

pub mod params;
pub mod schedule;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BBox, Canvas};
use crate::nn::{Tape, Var};
use crate::num::{s, Scalar};
use crate::raster::{resize_bicubic, Image};

pub use params::{ParamGroup, ParamInit, ParamSet, ALL_GROUPS};
pub use schedule::NoiseSchedule;

/// Downsampling factors for multiscale object encoding.
pub const SCALES: [f64; 4] = [1.0, 0.75, 0.5, 0.25];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageTag {
    Init,
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
}

impl StageTag {
    pub fn code(self) -> u8 {
        match self {
            StageTag::Init => 0,
            StageTag::S1 => 1,
            StageTag::S2 => 2,
            StageTag::S3 => 3,
            StageTag::S4 => 4,
            StageTag::S5 => 5,
            StageTag::S6 => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => StageTag::Init,
            1 => StageTag::S1,
            2 => StageTag::S2,
            3 => StageTag::S3,
            4 => StageTag::S4,
            5 => StageTag::S5,
            6 => StageTag::S6,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            StageTag::Init => "init",
            StageTag::S1 => "s1",
            StageTag::S2 => "s2",
            StageTag::S3 => "s3",
            StageTag::S4 => "s4",
            StageTag::S5 => "s5",
            StageTag::S6 => "s6",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub canvas: Canvas,
    /// U-Net channel widths per resolution level (level 0 = full resolution).
    pub widths: Vec<usize>,
    pub temb_dim: usize,
    /// Conditioning token dimension D.
    pub token_dim: usize,
    /// Object encoder input resolution (square).
    pub encoder_input: usize,
    /// Encoder channel widths; one stride-2 conv per entry.
    pub encoder_widths: Vec<usize>,
    pub norm_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            canvas: Canvas::new(64, 64),
            widths: vec![12, 24, 32],
            temb_dim: 48,
            token_dim: 128,
            encoder_input: 32,
            encoder_widths: vec![16, 32, 64],
            norm_groups: 4,
        }
    }
}

impl ModelConfig {
    /// Number of conditioning tokens K produced by the encoder.
    pub fn token_count(&self) -> usize {
        let side = self.encoder_input >> self.encoder_widths.len();
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config("need at least 2 U-Net levels".into()));
        }
        let down = 1usize << (self.widths.len() - 1);
        if self.canvas.width % down != 0 || self.canvas.height % down != 0 {
            return Err(Error::Config(format!(
                "canvas {}x{} not divisible by {down}",
                self.canvas.width, self.canvas.height
            )));
        }
        for w in self.widths.iter().chain(self.encoder_widths.iter()) {
            if w % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "width {w} not divisible by norm groups {}",
                    self.norm_groups
                )));
            }
        }
        if self.temb_dim % 2 != 0 {
            return Err(Error::Config("temb_dim must be even".into()));
        }
        if self.encoder_input >> self.encoder_widths.len() == 0 {
            return Err(Error::Config("encoder input too small for its depth".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageCheckpoint<F: Scalar> {
    pub params: ParamSet<F>,
    pub stage_tag: StageTag,
    pub trainable: BTreeMap<ParamGroup, bool>,
    pub schedule: NoiseSchedule<F>,
    pub config: ModelConfig,
}

/// Declares every learnable tensor of the architecture.
pub fn init_checkpoint<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<StageCheckpoint<F>> {
    cfg.validate()?;
    let mut init = ParamInit::<F>::new(seed);
    let levels = cfg.widths.len();
    let w = &cfg.widths;

    init.conv("unet.stem", w[0], 7, 3, false);
    init.linear("unet.temb.lin1", cfg.temb_dim, cfg.temb_dim, false);
    init.linear("unet.temb.lin2", cfg.temb_dim, cfg.temb_dim, false);
    for l in 0..levels {
        if l > 0 {
            init.conv(&format!("unet.down{l}.pool"), w[l], w[l - 1], 3, false);
        }
        declare_resblock(&mut init, &format!("unet.down{l}.res"), w[l], w[l], cfg);
        declare_attn(&mut init, &format!("unet.down{l}.attn"), w[l], cfg);
    }
    for l in (0..levels - 1).rev() {
        init.conv(&format!("unet.up{l}.proj"), w[l], w[l + 1], 3, false);
        declare_resblock(&mut init, &format!("unet.up{l}.res"), 2 * w[l], w[l], cfg);
        declare_attn(&mut init, &format!("unet.up{l}.attn"), w[l], cfg);
    }
    init.norm("unet.out.norm", w[0]);
    // zero-initialized heads: the untrained model predicts zero noise / logits
    init.conv("unet.out.conv", 3, w[0], 3, true);
    init.conv("mask_head.conv", 1, w[0], 1, true);

    let ew = &cfg.encoder_widths;
    let mut cin = 4;
    for (i, &cout) in ew.iter().enumerate() {
        init.conv(&format!("encoder.conv{i}"), cout, cin, 3, false);
        if i + 1 < ew.len() {
            init.norm(&format!("encoder.norm{i}"), cout);
        }
        cin = cout;
    }
    init.linear("adaptor.lin1", cfg.token_dim, *ew.last().unwrap(), false);
    init.linear("adaptor.lin2", cfg.token_dim, cfg.token_dim, false);

    let trainable = ALL_GROUPS.into_iter().map(|g| (g, true)).collect();
    Ok(StageCheckpoint {
        params: init.params,
        stage_tag: StageTag::Init,
        trainable,
        schedule: NoiseSchedule::default_linear(),
        config: cfg.clone(),
    })
}

fn declare_resblock<F: Scalar>(
    init: &mut ParamInit<F>,
    prefix: &str,
    cin: usize,
    cout: usize,
    cfg: &ModelConfig,
) {
    init.norm(&format!("{prefix}.norm1"), cin);
    init.conv(&format!("{prefix}.conv1"), cout, cin, 3, false);
    init.linear(&format!("{prefix}.temb"), cout, cfg.temb_dim, false);
    init.norm(&format!("{prefix}.norm2"), cout);
    init.conv(&format!("{prefix}.conv2"), cout, cout, 3, false);
    if cin != cout {
        init.conv(&format!("{prefix}.skip"), cout, cin, 1, false);
    }
}

fn declare_attn<F: Scalar>(init: &mut ParamInit<F>, prefix: &str, c: usize, cfg: &ModelConfig) {
    init.norm(&format!("{prefix}.norm"), c);
    init.linear(&format!("{prefix}.q"), c, c, false);
    init.linear(&format!("{prefix}.k"), c, cfg.token_dim, false);
    init.linear(&format!("{prefix}.v"), c, cfg.token_dim, false);
    init.linear(&format!("{prefix}.proj"), c, c, false);
}

// ---------------------------------------------------------------------------
// Tape-side forward passes
// ---------------------------------------------------------------------------

/// Parameter tensors registered as tape leaves for one forward/backward pass.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn bind<F: Scalar>(
        tape: &mut Tape<F>,
        params: &ParamSet<F>,
        requires_grad: impl Fn(&str) -> bool,
    ) -> Self {
        let vars = params
            .entries
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone(), requires_grad(name))))
            .collect();
        Binding { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }

    pub fn names(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn conv<F: Scalar>(
    tape: &mut Tape<F>,
    bind: &Binding,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let w = bind.var(&format!("{name}.weight"));
    let b = bind.var(&format!("{name}.bias"));
    tape.conv2d(x, w, b, stride, pad)
}

/// x [M, din] -> [M, dout] with weight [dout, din].
fn linear<F: Scalar>(tape: &mut Tape<F>, bind: &Binding, name: &str, x: Var) -> Var {
    let w = bind.var(&format!("{name}.weight"));
    let b = bind.var(&format!("{name}.bias"));
    let y = tape.matmul_tb(x, w);
    tape.add_row_bias(y, b)
}

fn group_norm<F: Scalar>(
    tape: &mut Tape<F>,
    bind: &Binding,
    name: &str,
    x: Var,
    groups: usize,
) -> Var {
    let gamma = bind.var(&format!("{name}.gamma"));
    let beta = bind.var(&format!("{name}.beta"));
    tape.group_norm(x, gamma, beta, groups)
}

/// Sinusoidal timestep embedding (constant w.r.t. parameters).
pub fn sinusoidal_embedding<F: Scalar>(t: usize, dim: usize) -> Array1<F> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
        let arg = t as f64 * freq;
        out[i] = s::<F>(arg.sin());
        out[half + i] = s::<F>(arg.cos());
    }
    out
}

fn resblock<F: Scalar>(
    tape: &mut Tape<F>,
    bind: &Binding,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    temb: Var,
    cin: usize,
    cout: usize,
) -> Var {
    let h = group_norm(tape, bind, &format!("{prefix}.norm1"), x, cfg.norm_groups);
    let h = tape.silu(h);
    let h = conv(tape, bind, &format!("{prefix}.conv1"), h, 1, 1);
    // timestep enters as a per-channel bias
    let te = tape.silu(temb);
    let te = linear(tape, bind, &format!("{prefix}.temb"), te);
    let te_vec = tape.reshape(te, &[cout]);
    let h = tape.add_chan_bias(h, te_vec);
    let h = group_norm(tape, bind, &format!("{prefix}.norm2"), h, cfg.norm_groups);
    let h = tape.silu(h);
    let h = conv(tape, bind, &format!("{prefix}.conv2"), h, 1, 1);
    let skip = if cin != cout {
        conv(tape, bind, &format!("{prefix}.skip"), x, 1, 0)
    } else {
        x
    };
    tape.add(h, skip)
}

/// Single-head cross-attention from spatial features to conditioning tokens.
/// No positional encoding over tokens, so the result is invariant to token
/// order.
fn cross_attention<F: Scalar>(
    tape: &mut Tape<F>,
    bind: &Binding,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    tokens: Var,
    c: usize,
) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let n = group_norm(tape, bind, &format!("{prefix}.norm"), x, cfg.norm_groups);
    let flat = tape.reshape(n, &[c, h * w]);
    let seq = tape.transpose2(flat); // [HW, C]
    let q = linear(tape, bind, &format!("{prefix}.q"), seq);
    let k = linear(tape, bind, &format!("{prefix}.k"), tokens);
    let v = linear(tape, bind, &format!("{prefix}.v"), tokens);
    let scores = tape.matmul_tb(q, k);
    let scores = tape.scale(scores, s::<F>(1.0 / (c as f64).sqrt()));
    let attn = tape.softmax_rows(scores);
    let ctx = tape.matmul(attn, v);
    let out = linear(tape, bind, &format!("{prefix}.proj"), ctx);
    let out = tape.transpose2(out);
    let out = tape.reshape(out, &[c, h, w]);
    tape.add(x, out)
}

/// Full U-Net pass over a 7-channel input. Returns (eps_hat, mask_logits).
pub fn unet_forward<F: Scalar>(
    tape: &mut Tape<F>,
    bind: &Binding,
    cfg: &ModelConfig,
    input: Var,
    t: usize,
    tokens: Var,
) -> (Var, Var) {
    let levels = cfg.widths.len();
    let w = &cfg.widths;
    let temb_sin = sinusoidal_embedding::<F>(t, cfg.temb_dim);
    let temb_in = tape.constant(temb_sin.into_dyn().into_shape(IxDyn(&[1, cfg.temb_dim])).unwrap());
    let temb = linear(tape, bind, "unet.temb.lin1", temb_in);
    let temb = tape.silu(temb);
    let temb = linear(tape, bind, "unet.temb.lin2", temb);

    let mut h = conv(tape, bind, "unet.stem", input, 1, 1);
    let mut skips = Vec::with_capacity(levels - 1);
    for l in 0..levels {
        if l > 0 {
            h = conv(tape, bind, &format!("unet.down{l}.pool"), h, 2, 1);
        }
        h = resblock(tape, bind, cfg, &format!("unet.down{l}.res"), h, temb, w[l], w[l]);
        h = cross_attention(tape, bind, cfg, &format!("unet.down{l}.attn"), h, tokens, w[l]);
        if l < levels - 1 {
            skips.push(h);
        }
    }
    for l in (0..levels - 1).rev() {
        let up = tape.upsample2x(h);
        let up = conv(tape, bind, &format!("unet.up{l}.proj"), up, 1, 1);
        let cat = tape.concat_chan(up, skips[l]);
        h = resblock(tape, bind, cfg, &format!("unet.up{l}.res"), cat, temb, 2 * w[l], w[l]);
        h = cross_attention(tape, bind, cfg, &format!("unet.up{l}.attn"), h, tokens, w[l]);
    }
    let out = group_norm(tape, bind, "unet.out.norm", h, cfg.norm_groups);
    let out = tape.silu(out);
    let eps = conv(tape, bind, "unet.out.conv", out, 1, 1);
    let mask_logits = conv(tape, bind, "mask_head.conv", out, 1, 0);
    (eps, mask_logits)
}

/// Object encoder: stride-2 conv stack over a 4-channel sprite at the fixed
/// input resolution, flattened to `[K, C_enc]` tokens.
pub fn encoder_forward<F: Scalar>(
    tape: &mut Tape<F>,
    bind: &Binding,
    cfg: &ModelConfig,
    sprite: Var,
) -> Var {
    let mut h = sprite;
    let n = cfg.encoder_widths.len();
    for i in 0..n {
        h = conv(tape, bind, &format!("encoder.conv{i}"), h, 2, 1);
        if i + 1 < n {
            h = group_norm(tape, bind, &format!("encoder.norm{i}"), h, cfg.norm_groups);
            h = tape.silu(h);
        }
    }
    let c = *cfg.encoder_widths.last().unwrap();
    let k = cfg.token_count();
    let flat = tape.reshape(h, &[c, k]);
    tape.transpose2(flat) // [K, C_enc]
}

/// Content adaptor: per-token 2-layer MLP into the conditioning space.
pub fn adaptor_forward<F: Scalar>(tape: &mut Tape<F>, bind: &Binding, tokens: Var) -> Var {
    let h = linear(tape, bind, "adaptor.lin1", tokens);
    let h = tape.silu(h);
    linear(tape, bind, "adaptor.lin2", h)
}

/// Resamples a sprite through scale `s` and back to the encoder resolution,
/// dropping high-frequency content for small scales.
pub fn rescaled_sprite<F: Scalar>(
    sprite: &Image<F>,
    cfg: &ModelConfig,
    scale: f64,
) -> Result<Image<F>> {
    if !SCALES.iter().any(|&v| (v - scale).abs() < 1e-12) {
        return Err(Error::Invalid(format!("invalid encoder scale {scale}")));
    }
    if sprite.dim().0 != 4 || sprite.dim().1 == 0 || sprite.dim().2 == 0 {
        return Err(Error::Invalid("sprite must be nonempty RGBA".into()));
    }
    let side = cfg.encoder_input;
    let down = ((side as f64 * scale).round() as usize).max(1);
    let lowres = resize_bicubic(sprite, down, down);
    Ok(resize_bicubic(&lowres, side, side))
}

/// Tape-side object encoding at one scale: returns `[K, D]` tokens.
pub fn encode_object_tape<F: Scalar>(
    tape: &mut Tape<F>,
    bind: &Binding,
    cfg: &ModelConfig,
    sprite: &Image<F>,
    scale: f64,
) -> Result<Var> {
    let resampled = rescaled_sprite(sprite, cfg, scale)?;
    let input = tape.constant(resampled.into_dyn());
    let enc = encoder_forward(tape, bind, cfg, input);
    Ok(adaptor_forward(tape, bind, enc))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EmbedMode {
    Average,
    Concatenate,
    Single(f64),
}

impl EmbedMode {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "average" => Ok(EmbedMode::Average),
            "concatenate" => Ok(EmbedMode::Concatenate),
            other => {
                if let Some(rest) = other.strip_prefix("single:") {
                    let v: f64 = rest
                        .parse()
                        .map_err(|_| Error::Config(format!("bad scale '{rest}'")))?;
                    Ok(EmbedMode::Single(v))
                } else {
                    Err(Error::Config(format!("unknown embed mode '{other}'")))
                }
            }
        }
    }
}

/// Tape-side conditioning tokens for the requested combination mode.
pub fn embedding_tape<F: Scalar>(
    tape: &mut Tape<F>,
    bind: &Binding,
    cfg: &ModelConfig,
    sprite: &Image<F>,
    mode: EmbedMode,
) -> Result<Var> {
    match mode {
        EmbedMode::Single(scale) => encode_object_tape(tape, bind, cfg, sprite, scale),
        EmbedMode::Average => {
            let mut acc: Option<Var> = None;
            for &scale in &SCALES {
                let tokens = encode_object_tape(tape, bind, cfg, sprite, scale)?;
                acc = Some(match acc {
                    None => tokens,
                    Some(prev) => tape.add(prev, tokens),
                });
            }
            Ok(tape.scale(acc.unwrap(), s::<F>(1.0 / SCALES.len() as f64)))
        }
        EmbedMode::Concatenate => {
            // token concatenation rides on the channel-concat op by treating
            // each [K, D] block as [K, 1, D]
            let k = cfg.token_count();
            let d = cfg.token_dim;
            let mut acc: Option<Var> = None;
            for &scale in &SCALES {
                let tokens = encode_object_tape(tape, bind, cfg, sprite, scale)?;
                let block = tape.reshape(tokens, &[k, 1, d]);
                acc = Some(match acc {
                    None => block,
                    Some(prev) => tape.concat_chan(prev, block),
                });
            }
            Ok(tape.reshape(acc.unwrap(), &[SCALES.len() * k, d]))
        }
    }
}

/// Inference-side multiscale embedding.
#[derive(Clone, Debug)]
pub struct MultiscaleEmbedding<F: Scalar> {
    pub tokens: Array2<F>,
    pub scales_used: Vec<f64>,
    pub mode: &'static str,
}

pub fn multiscale_embedding<F: Scalar>(
    sprite: &Image<F>,
    ckpt: &StageCheckpoint<F>,
    mode: EmbedMode,
) -> Result<MultiscaleEmbedding<F>> {
    let mut tape = Tape::new();
    let bind = Binding::bind(&mut tape, &ckpt.params, |_| false);
    let tokens = embedding_tape(&mut tape, &bind, &ckpt.config, sprite, mode)?;
    let tokens = tape
        .value(tokens)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();
    let (scales_used, mode_name) = match mode {
        EmbedMode::Average => (SCALES.to_vec(), "average"),
        EmbedMode::Concatenate => (SCALES.to_vec(), "concatenate"),
        EmbedMode::Single(sc) => (vec![sc], "single"),
    };
    Ok(MultiscaleEmbedding {
        tokens,
        scales_used,
        mode: mode_name,
    })
}

/// Inference-side single-scale encoding, `[K, D]`.
pub fn encode_object<F: Scalar>(
    sprite: &Image<F>,
    ckpt: &StageCheckpoint<F>,
    scale: f64,
) -> Result<Array2<F>> {
    Ok(multiscale_embedding(sprite, ckpt, EmbedMode::Single(scale))?.tokens)
}

/// Encoder-only mean-pooled embedding (no adaptor), used by the identity
/// metric.
pub fn pooled_encoder_embedding<F: Scalar>(
    rgba: &Image<F>,
    ckpt: &StageCheckpoint<F>,
) -> Result<Array1<F>> {
    let mut tape = Tape::new();
    let bind = Binding::bind(&mut tape, &ckpt.params, |_| false);
    let resampled = rescaled_sprite(rgba, &ckpt.config, 1.0)?;
    let input = tape.constant(resampled.into_dyn());
    let tokens = encoder_forward(&mut tape, &bind, &ckpt.config, input);
    let toks = tape
        .value(tokens)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();
    Ok(toks.mean_axis(ndarray::Axis(0)).unwrap())
}

// ---------------------------------------------------------------------------
// Position mask and inference denoise
// ---------------------------------------------------------------------------

/// Single-channel hint: all -1 (no hint) or {0, 1} (bbox).
#[derive(Clone, Debug)]
pub struct PositionMask<F: Scalar> {
    pub raster: Array2<F>,
}

pub fn make_position_mask<F: Scalar>(bbox: Option<BBox>, canvas: Canvas) -> Result<PositionMask<F>> {
    let raster = match bbox {
        None => Array2::from_elem((canvas.height, canvas.width), s::<F>(-1.0)),
        Some(b) => {
            if !b.fits(canvas) {
                return Err(Error::Invalid("bbox outside canvas".into()));
            }
            Array2::from_shape_fn((canvas.height, canvas.width), |(y, x)| {
                if b.contains(x, y) {
                    F::one()
                } else {
                    F::zero()
                }
            })
        }
    };
    Ok(PositionMask { raster })
}

#[derive(Clone, Debug)]
pub struct DenoiserOutput<F: Scalar> {
    pub eps_hat: Array3<F>,
    pub mask_logits: Array3<F>,
}

/// Channel concatenation [x_t | pmask | background] fed to the U-Net.
pub fn assemble_input<F: Scalar>(
    x_t: &Array3<F>,
    pmask: &PositionMask<F>,
    background: &Array3<F>,
) -> Result<ArrayD<F>> {
    let (c, h, w) = x_t.dim();
    if c != 3 || background.dim() != (3, h, w) || pmask.raster.dim() != (h, w) {
        return Err(Error::Shape("denoise input dims".into()));
    }
    let mut input = Array3::<F>::zeros((7, h, w));
    input.slice_mut(ndarray::s![..3, .., ..]).assign(x_t);
    input
        .slice_mut(ndarray::s![3, .., ..])
        .assign(&pmask.raster);
    input.slice_mut(ndarray::s![4.., .., ..]).assign(background);
    Ok(input.into_dyn())
}

/// One inference denoising step (no gradients).
pub fn denoise<F: Scalar>(
    x_t: &Array3<F>,
    t: usize,
    pmask: &PositionMask<F>,
    background: &Array3<F>,
    cond: &MultiscaleEmbedding<F>,
    ckpt: &StageCheckpoint<F>,
) -> Result<DenoiserOutput<F>> {
    if t >= ckpt.schedule.t_count() {
        return Err(Error::Invalid(format!("timestep {t} out of range")));
    }
    let input = assemble_input(x_t, pmask, background)?;
    let mut tape = Tape::new();
    let bind = Binding::bind(&mut tape, &ckpt.params, |_| false);
    let input = tape.constant(input);
    let tokens = tape.constant(cond.tokens.clone().into_dyn());
    let (eps, logits) = unet_forward(&mut tape, &bind, &ckpt.config, input, t, tokens);
    let eps_hat = tape
        .value(eps)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned();
    let mask_logits = tape
        .value(logits)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned();
    Ok(DenoiserOutput {
        eps_hat,
        mask_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamGroup;
    use crate::model::schedule::NoiseSchedule;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            canvas: Canvas::new(16, 16),
            widths: vec![4, 8],
            temb_dim: 8,
            token_dim: 16,
            encoder_input: 16,
            encoder_widths: vec![4, 8],
            norm_groups: 2,
        }
    }

    fn tiny_ckpt(seed: u64) -> StageCheckpoint<f64> {
        init_checkpoint(&tiny_config(), seed).unwrap()
    }

    fn textured_sprite(h: usize, w: usize) -> Image<f64> {
        Array3::from_shape_fn((4, h, w), |(c, y, x)| match c {
            3 => 1.0,
            _ => 0.5 + 0.5 * ((c + 3 * y + 7 * x) as f64).sin(),
        })
    }

    #[test]
    fn stage_codes_round_trip() {
        for tag in [
            StageTag::Init,
            StageTag::S1,
            StageTag::S2,
            StageTag::S3,
            StageTag::S4,
            StageTag::S5,
            StageTag::S6,
        ] {
            assert_eq!(StageTag::from_code(tag.code()), Some(tag));
        }
        assert_eq!(StageTag::from_code(99), None);
    }

    #[test]
    fn init_names_belong_to_known_groups_and_heads_start_at_zero() {
        let ckpt = tiny_ckpt(0);
        for (name, arr) in &ckpt.params.entries {
            ParamGroup::of_name(name).unwrap();
            assert!(arr.iter().all(|v| v.is_finite()), "{name}");
        }
        for head in [
            "unet.out.conv.weight",
            "mask_head.conv.weight",
            "mask_head.conv.bias",
        ] {
            assert!(ckpt.params.get(head).iter().all(|&v| v == 0.0), "{head}");
        }
        assert_eq!(ckpt.stage_tag, StageTag::Init);
    }

    #[test]
    fn encoder_tokens_have_declared_shape() {
        let ckpt = tiny_ckpt(1);
        let k = ckpt.config.token_count();
        let sprite = textured_sprite(11, 9);
        let toks = encode_object(&sprite, &ckpt, 1.0).unwrap();
        assert_eq!(toks.dim(), (k, ckpt.config.token_dim));
        assert!(encode_object(&sprite, &ckpt, 0.3).is_err());
        let empty = Array3::<f64>::zeros((3, 4, 4));
        assert!(rescaled_sprite(&empty, &ckpt.config, 1.0).is_err());
    }

    #[test]
    fn downscaling_changes_the_embedding() {
        let ckpt = tiny_ckpt(2);
        let sprite = textured_sprite(14, 14);
        let full = encode_object(&sprite, &ckpt, 1.0).unwrap();
        let quarter = encode_object(&sprite, &ckpt, 0.25).unwrap();
        let diff: f64 = (&full - &quarter).iter().map(|v| v * v).sum();
        assert!(diff > 1e-8, "multiscale views collapsed: {diff}");
    }

    #[test]
    fn average_embedding_is_the_mean_of_single_scales() {
        let ckpt = tiny_ckpt(3);
        let sprite = textured_sprite(10, 12);
        let avg = multiscale_embedding(&sprite, &ckpt, EmbedMode::Average)
            .unwrap()
            .tokens;
        let mut acc = Array2::<f64>::zeros(avg.dim());
        for &sc in &SCALES {
            acc = acc + encode_object(&sprite, &ckpt, sc).unwrap();
        }
        acc.mapv_inplace(|v| v / SCALES.len() as f64);
        let err = (&avg - &acc).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn concatenated_embedding_stacks_single_scales_in_order() {
        let ckpt = tiny_ckpt(4);
        let sprite = textured_sprite(10, 10);
        let cat = multiscale_embedding(&sprite, &ckpt, EmbedMode::Concatenate)
            .unwrap()
            .tokens;
        let k = ckpt.config.token_count();
        assert_eq!(cat.dim(), (SCALES.len() * k, ckpt.config.token_dim));
        for (i, &sc) in SCALES.iter().enumerate() {
            let single = encode_object(&sprite, &ckpt, sc).unwrap();
            let block = cat.slice(ndarray::s![i * k..(i + 1) * k, ..]);
            assert_eq!(block, single.view());
        }
    }

    #[test]
    fn embed_mode_parsing() {
        assert_eq!(EmbedMode::parse("average").unwrap(), EmbedMode::Average);
        assert_eq!(
            EmbedMode::parse("concatenate").unwrap(),
            EmbedMode::Concatenate
        );
        assert_eq!(
            EmbedMode::parse("single:0.5").unwrap(),
            EmbedMode::Single(0.5)
        );
        assert!(EmbedMode::parse("single:x").is_err());
        assert!(EmbedMode::parse("max").is_err());
    }

    #[test]
    fn position_mask_fixtures() {
        let canvas = Canvas::new(8, 6);
        let empty = make_position_mask::<f64>(None, canvas).unwrap();
        assert!(empty.raster.iter().all(|&v| v == -1.0));
        let b = BBox::new(2, 1, 5, 4).unwrap();
        let hint = make_position_mask::<f64>(Some(b), canvas).unwrap();
        for ((y, x), &v) in hint.raster.indexed_iter() {
            let inside = x >= 2 && x < 5 && y >= 1 && y < 4;
            assert_eq!(v, if inside { 1.0 } else { 0.0 }, "({x},{y})");
        }
        let off = BBox::new(0, 0, 9, 2).unwrap();
        assert!(make_position_mask::<f64>(Some(off), canvas).is_err());
    }

    #[test]
    fn fresh_model_predicts_zero_noise_and_zero_logits() {
        // both output heads are zero-initialized, so the first denoise call
        // must return exact zeros regardless of input
        let ckpt = tiny_ckpt(5);
        let canvas = ckpt.config.canvas;
        let x_t = Array3::from_shape_fn((3, canvas.height, canvas.width), |(c, y, x)| {
            ((c + y + x) % 3) as f64 - 1.0
        });
        let bg = x_t.mapv(|v| v * 0.5);
        let pm = make_position_mask(None, canvas).unwrap();
        let cond = multiscale_embedding(&textured_sprite(8, 8), &ckpt, EmbedMode::Average).unwrap();
        let out = denoise(&x_t, 10, &pm, &bg, &cond, &ckpt).unwrap();
        assert!(out.eps_hat.iter().all(|&v| v == 0.0));
        assert!(out.mask_logits.iter().all(|&v| v == 0.0));
        assert!(denoise(&x_t, ckpt.schedule.t_count(), &pm, &bg, &cond, &ckpt).is_err());
    }

    #[test]
    fn denoiser_is_invariant_to_token_order() {
        // cross attention carries no positional signal, so shuffling the
        // conditioning tokens must not change the prediction
        let mut ckpt = tiny_ckpt(6);
        // un-zero the heads so the output actually depends on the tokens
        let mut r = crate::rng::stream_rng(7, "test-head");
        for name in ["unet.out.conv.weight", "mask_head.conv.weight"] {
            let arr = ckpt.params.entries.get_mut(name).unwrap();
            arr.mapv_inplace(|_| r.gen_range(-0.1..0.1));
        }
        let canvas = ckpt.config.canvas;
        let x_t = Array3::from_shape_fn((3, canvas.height, canvas.width), |(c, y, x)| {
            0.1 * ((c * 31 + y * 7 + x) % 11) as f64 - 0.5
        });
        let bg = x_t.mapv(|v| -v);
        let pm = make_position_mask(None, canvas).unwrap();
        let base = multiscale_embedding(&textured_sprite(9, 9), &ckpt, EmbedMode::Average).unwrap();
        let k = base.tokens.nrows();
        let perm: Vec<usize> = (0..k).rev().collect();
        let shuffled = MultiscaleEmbedding {
            tokens: Array2::from_shape_fn(base.tokens.dim(), |(i, j)| base.tokens[[perm[i], j]]),
            scales_used: base.scales_used.clone(),
            mode: base.mode,
        };
        let a = denoise(&x_t, 3, &pm, &bg, &base, &ckpt).unwrap();
        let b = denoise(&x_t, 3, &pm, &bg, &shuffled, &ckpt).unwrap();
        let err = (&a.eps_hat - &b.eps_hat)
            .iter()
            .chain((&a.mask_logits - &b.mask_logits).iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-9, "{err}");
        assert!(a.eps_hat.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn sinusoidal_embedding_shape_and_bounds() {
        let e = sinusoidal_embedding::<f64>(0, 8);
        assert_eq!(e.len(), 8);
        // t = 0: all sines are 0, all cosines are 1
        assert!(e.iter().take(4).all(|&v| v == 0.0));
        assert!(e.iter().skip(4).all(|&v| v == 1.0));
        let e = sinusoidal_embedding::<f64>(999, 8);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        let a = sinusoidal_embedding::<f64>(5, 8);
        let b = sinusoidal_embedding::<f64>(6, 8);
        assert_ne!(a, b);
    }

    #[test]
    fn schedule_matches_brute_force_products() {
        let sched = NoiseSchedule::<f64>::linear(100, 1e-4, 0.02).unwrap();
        let betas = sched.betas();
        assert_eq!(betas.len(), 100);
        assert!((betas[0] - 1e-4).abs() < 1e-15);
        assert!((betas[99] - 0.02).abs() < 1e-15);
        let mut prod = 1.0f64;
        for t in 0..100 {
            prod *= 1.0 - betas[t];
            assert!((sched.alpha_bar(t) - prod).abs() < 1e-12, "t={t}");
        }
        // alpha_bar is strictly decreasing
        let bars = sched.alpha_bars();
        assert!(bars.windows(2).all(|w| w[1] < w[0]));
        let copy = NoiseSchedule::from_betas(betas.to_vec()).unwrap();
        assert_eq!(copy.betas(), betas);
        assert!(NoiseSchedule::<f64>::from_betas(vec![]).is_err());
        assert!(NoiseSchedule::<f64>::linear(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let good = tiny_config();
        good.validate().unwrap();
        let mut bad = good.clone();
        bad.widths = vec![5, 8]; // not divisible by norm groups
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.canvas = Canvas::new(17, 16); // not divisible by 2^depth
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.widths.clear();
        assert!(bad.validate().is_err());
    }
}
