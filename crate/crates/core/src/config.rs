//! Flat `key = value` run configuration with `#` comments and dotted keys.
//! Unknown keys are hard errors; missing keys take the documented defaults.
//! The resolved config can be echoed back out as deterministic text.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Canvas;
use crate::model::{ModelConfig, NoiseSchedule, StageTag};
use crate::num::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub model_widths: Vec<usize>,
    pub model_temb_dim: usize,
    pub model_token_dim: usize,
    pub model_encoder_input: usize,
    pub model_encoder_widths: Vec<usize>,
    pub model_norm_groups: usize,
    pub schedule_t: usize,
    pub schedule_beta_start: f64,
    pub schedule_beta_end: f64,
    pub train_batch_size: usize,
    pub train_steps: [usize; 6],
    pub train_s3_alpha: f64,
    pub train_lr_encoder: f64,
    pub train_lr_unet: f64,
    pub train_augment_strength: f64,
    pub train_log_every: usize,
    pub train_ckpt_every: usize,
    pub sampler_steps: usize,
    pub sampler_n: usize,
    pub eval_steps: usize,
    pub split_val: f64,
    pub split_test: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 1,
            canvas_width: 64,
            canvas_height: 64,
            model_widths: vec![12, 24, 32],
            model_temb_dim: 48,
            model_token_dim: 128,
            model_encoder_input: 32,
            model_encoder_widths: vec![16, 32, 64],
            model_norm_groups: 4,
            schedule_t: 1000,
            schedule_beta_start: 1e-4,
            schedule_beta_end: 0.02,
            train_batch_size: 4,
            train_steps: [2000; 6],
            train_s3_alpha: 0.25,
            train_lr_encoder: crate::train::LR_ENCODER,
            train_lr_unet: crate::train::LR_UNET,
            train_augment_strength: 0.5,
            train_log_every: 50,
            train_ckpt_every: 0,
            sampler_steps: 50,
            sampler_n: 5,
            eval_steps: 50,
            split_val: 0.0,
            split_test: 0.1,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value '{raw}' for '{key}'")))
}

fn parse_list(key: &str, raw: &str, line: usize) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|tok| parse_num::<usize>(key, tok, line))
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw_line.find('#') {
                Some(p) => &raw_line[..p],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected 'key = value'"))
            })?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "seed" => cfg.seed = parse_num(key, value, line_no)?,
                "jobs" => cfg.jobs = parse_num(key, value, line_no)?,
                "canvas.width" => cfg.canvas_width = parse_num(key, value, line_no)?,
                "canvas.height" => cfg.canvas_height = parse_num(key, value, line_no)?,
                "model.widths" => cfg.model_widths = parse_list(key, value, line_no)?,
                "model.temb_dim" => cfg.model_temb_dim = parse_num(key, value, line_no)?,
                "model.token_dim" => cfg.model_token_dim = parse_num(key, value, line_no)?,
                "model.encoder_input" => {
                    cfg.model_encoder_input = parse_num(key, value, line_no)?
                }
                "model.encoder_widths" => {
                    cfg.model_encoder_widths = parse_list(key, value, line_no)?
                }
                "model.norm_groups" => cfg.model_norm_groups = parse_num(key, value, line_no)?,
                "schedule.t" => cfg.schedule_t = parse_num(key, value, line_no)?,
                "schedule.beta_start" => {
                    cfg.schedule_beta_start = parse_num(key, value, line_no)?
                }
                "schedule.beta_end" => cfg.schedule_beta_end = parse_num(key, value, line_no)?,
                "train.batch_size" => cfg.train_batch_size = parse_num(key, value, line_no)?,
                "train.steps.s1" => cfg.train_steps[0] = parse_num(key, value, line_no)?,
                "train.steps.s2" => cfg.train_steps[1] = parse_num(key, value, line_no)?,
                "train.steps.s3" => cfg.train_steps[2] = parse_num(key, value, line_no)?,
                "train.steps.s4" => cfg.train_steps[3] = parse_num(key, value, line_no)?,
                "train.steps.s5" => cfg.train_steps[4] = parse_num(key, value, line_no)?,
                "train.steps.s6" => cfg.train_steps[5] = parse_num(key, value, line_no)?,
                "train.s3.alpha" => cfg.train_s3_alpha = parse_num(key, value, line_no)?,
                "train.lr.encoder" => cfg.train_lr_encoder = parse_num(key, value, line_no)?,
                "train.lr.unet" => cfg.train_lr_unet = parse_num(key, value, line_no)?,
                "train.augment_strength" => {
                    cfg.train_augment_strength = parse_num(key, value, line_no)?
                }
                "train.log_every" => cfg.train_log_every = parse_num(key, value, line_no)?,
                "train.ckpt_every" => cfg.train_ckpt_every = parse_num(key, value, line_no)?,
                "sampler.steps" => cfg.sampler_steps = parse_num(key, value, line_no)?,
                "sampler.n" => cfg.sampler_n = parse_num(key, value, line_no)?,
                "eval.steps" => cfg.eval_steps = parse_num(key, value, line_no)?,
                "split.val" => cfg.split_val = parse_num(key, value, line_no)?,
                "split.test" => cfg.split_test = parse_num(key, value, line_no)?,
                other => {
                    return Err(Error::Config(format!(
                        "line {line_no}: unknown key '{other}'"
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::Path(path.to_path_buf(), e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.train_s3_alpha) {
            return Err(Error::Config("train.s3.alpha must lie in [0,1]".into()));
        }
        if self.sampler_steps < 1 || self.eval_steps < 1 {
            return Err(Error::Config("sampler steps must be >= 1".into()));
        }
        if self.train_batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.split_val + self.split_test >= 1.0 {
            return Err(Error::Config("val + test fractions must leave room for train".into()));
        }
        self.model_config().validate()
    }

    pub fn canvas(&self) -> Canvas {
        Canvas::new(self.canvas_width, self.canvas_height)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            canvas: self.canvas(),
            widths: self.model_widths.clone(),
            temb_dim: self.model_temb_dim,
            token_dim: self.model_token_dim,
            encoder_input: self.model_encoder_input,
            encoder_widths: self.model_encoder_widths.clone(),
            norm_groups: self.model_norm_groups,
        }
    }

    pub fn schedule<F: Scalar>(&self) -> Result<NoiseSchedule<F>> {
        NoiseSchedule::linear(self.schedule_t, self.schedule_beta_start, self.schedule_beta_end)
    }

    pub fn steps_for(&self, tag: StageTag) -> usize {
        match tag {
            StageTag::Init => 0,
            other => self.train_steps[(other.code() - 1) as usize],
        }
    }

    pub fn split_ratios(&self) -> [f64; 3] {
        [
            1.0 - self.split_val - self.split_test,
            self.split_val,
            self.split_test,
        ]
    }

    /// Deterministic echo of every key at its resolved value.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("seed", self.seed.to_string());
        push("jobs", self.jobs.to_string());
        push("canvas.width", self.canvas_width.to_string());
        push("canvas.height", self.canvas_height.to_string());
        push("model.widths", list(&self.model_widths));
        push("model.temb_dim", self.model_temb_dim.to_string());
        push("model.token_dim", self.model_token_dim.to_string());
        push("model.encoder_input", self.model_encoder_input.to_string());
        push("model.encoder_widths", list(&self.model_encoder_widths));
        push("model.norm_groups", self.model_norm_groups.to_string());
        push("schedule.t", self.schedule_t.to_string());
        push("schedule.beta_start", format!("{:e}", self.schedule_beta_start));
        push("schedule.beta_end", format!("{:e}", self.schedule_beta_end));
        push("train.batch_size", self.train_batch_size.to_string());
        for (i, s) in self.train_steps.iter().enumerate() {
            push(&format!("train.steps.s{}", i + 1), s.to_string());
        }
        push("train.s3.alpha", self.train_s3_alpha.to_string());
        push("train.lr.encoder", format!("{:e}", self.train_lr_encoder));
        push("train.lr.unet", format!("{:e}", self.train_lr_unet));
        push(
            "train.augment_strength",
            self.train_augment_strength.to_string(),
        );
        push("train.log_every", self.train_log_every.to_string());
        push("train.ckpt_every", self.train_ckpt_every.to_string());
        push("sampler.steps", self.sampler_steps.to_string());
        push("sampler.n", self.sampler_n.to_string());
        push("eval.steps", self.eval_steps.to_string());
        push("split.val", self.split_val.to_string());
        push("split.test", self.split_test.to_string());
        out
    }
}
