//! `compositor-lab`: dataset generation, pipeline execution, staged
//! training, sampling, and placement evaluation behind one binary.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use compositor_core::ckpt::{load_checkpoint, save_checkpoint};
use compositor_core::config::RunConfig;
use compositor_core::datagen::{
    IdentityInpainter, InpainterBackend, MeanFillInpainter, PipelineConfig, SceneSource,
};
use compositor_core::eval::{evaluate, save_report, EvalMode, EvalOptions};
use compositor_core::model::{init_checkpoint, StageTag};
use compositor_core::sampler::{sample_composite, sample_diverse, DiffusionRefiner, SampleRequest};
use compositor_core::scene::{
    load_sample, make_dataset, manifest_path, render_scene, sample_spec, DatasetManifest,
    SceneSample, Split,
};
use compositor_core::train::{merge_checkpoints, train_stage, StagePlan, TrainConfig};
use compositor_core::mask::Mask;
use compositor_core::{imgio, rng, BBox, Error, Result, TrainScalar};

const CACHE_ENV: &str = "COMPOSITOR_LAB_CACHE";

#[derive(Parser)]
#[command(name = "compositor-lab", version, about = "Generative object compositing lab")]
struct Cli {
    /// Run configuration file (flat `key = value`, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker cap; overrides the config value.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render ground-truth scenes into a dataset directory.
    GenScenes(GenScenesArgs),
    /// Run the detection/removal/augmentation pipeline over rendered scenes.
    RunPipeline(RunPipelineArgs),
    /// Train one stage or the full schedule.
    Train(TrainArgs),
    /// Linear checkpoint merge: alpha*a + (1-alpha)*b.
    Merge(MergeArgs),
    /// Composite one dataset object into its background.
    Sample(SampleArgs),
    /// Score placement, diversity, and identity on a dataset split.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenScenesArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunPipelineArgs {
    /// Number of source scenes to synthesize and push through the pipeline.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint backing the diffusion refiner; identity refiner if absent.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// One of s1..s6, or `all` for the full schedule.
    #[arg(long)]
    stage: String,
    /// Dataset directory produced by gen-scenes or run-pipeline.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Starting checkpoint; a fresh initialization is used if absent.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    /// Weight on the first checkpoint.
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Dataset record to composite; defaults to the first test record.
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Placement hint `x0,y0,x1,y1`; unconstrained placement if absent.
    #[arg(long)]
    bbox: Option<String>,
    /// Number of samples (seeds seed, seed+1, ...).
    #[arg(long)]
    n: Option<usize>,
    /// Also write a mask-trajectory strip per sample.
    #[arg(long)]
    traj: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `empty` (unconstrained) or `bbox` (hinted placement).
    #[arg(long, default_value = "empty")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    /// Dataset split to score.
    #[arg(long, default_value = "test")]
    split: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(jobs) = cli.jobs {
        if jobs < 1 {
            return Err(Error::Config("--jobs must be >= 1".into()));
        }
        cfg.jobs = jobs;
    }
    cfg.validate()?;
    match cli.command {
        Command::GenScenes(args) => cmd_gen_scenes(&cfg, args),
        Command::RunPipeline(args) => cmd_run_pipeline(&cfg, args),
        Command::Train(args) => cmd_train(&cfg, args),
        Command::Merge(args) => cmd_merge(args),
        Command::Sample(args) => cmd_sample(&cfg, args),
        Command::Eval(args) => cmd_eval(&cfg, args),
    }
}

/// Relative paths resolve under `COMPOSITOR_LAB_CACHE` when it is set.
fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(CACHE_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

/// Writes the fully resolved run configuration next to the outputs.
fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Path(dir.to_path_buf(), e))?;
    let path = dir.join("config.resolved.txt");
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::Path(path, e))
}

fn cmd_gen_scenes(cfg: &RunConfig, args: GenScenesArgs) -> Result<()> {
    let out = resolve(&args.out);
    echo_config(cfg, &out)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let started = Instant::now();
    let manifest =
        make_dataset::<TrainScalar>(args.n, seed, cfg.split_ratios(), cfg.canvas(), &out)?;
    println!(
        "wrote {} scenes to {} in {:.1}s",
        manifest.n,
        out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_run_pipeline(cfg: &RunConfig, args: RunPipelineArgs) -> Result<()> {
    let out = resolve(&args.out);
    echo_config(cfg, &out)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let samples: Result<Vec<(String, SceneSample<TrainScalar>)>> = (0..args.n)
        .map(|i| {
            let spec = sample_spec(cfg.canvas(), rng::derive_seed(seed, "scene", i as u64));
            Ok((format!("{i:06}"), render_scene(&spec)?))
        })
        .collect();
    let source = SceneSource::new(samples?);
    let remover = MeanFillInpainter;
    let refiner: Box<dyn InpainterBackend<TrainScalar>> = match &args.ckpt {
        Some(path) => Box::new(DiffusionRefiner {
            ckpt: load_checkpoint(&resolve(path))?,
            steps: cfg.sampler_steps,
            seed,
        }),
        None => Box::new(IdentityInpainter),
    };
    let pipeline_cfg = PipelineConfig {
        seed,
        augment_strength: cfg.train_augment_strength,
    };
    let started = Instant::now();
    let manifest = compositor_core::datagen::run_pipeline(
        source,
        &remover,
        refiner.as_ref(),
        &out,
        &pipeline_cfg,
    )?;
    println!(
        "pipeline emitted {} records to {} in {:.1}s",
        manifest.n,
        out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn parse_stages(text: &str) -> Result<Vec<StageTag>> {
    let all = [
        StageTag::S1,
        StageTag::S2,
        StageTag::S3,
        StageTag::S4,
        StageTag::S5,
        StageTag::S6,
    ];
    if text == "all" {
        return Ok(all.to_vec());
    }
    all.iter()
        .find(|t| t.name() == text)
        .map(|&t| vec![t])
        .ok_or_else(|| Error::Config(format!("unknown stage '{text}' (expected s1..s6 or all)")))
}

fn load_split(
    root: &Path,
    split: Split,
) -> Result<(DatasetManifest, Vec<(String, SceneSample<TrainScalar>)>)> {
    let manifest = DatasetManifest::load(&manifest_path(root))?;
    let samples: Result<Vec<_>> = manifest
        .split_ids(split)
        .into_iter()
        .map(|rec| Ok((rec.id.clone(), load_sample(root, rec)?)))
        .collect();
    Ok((manifest, samples?))
}

fn run_one_stage(
    cfg: &RunConfig,
    tag: StageTag,
    init: &compositor_core::CheckpointF32,
    dataset: &[SceneSample<TrainScalar>],
    out: &Path,
) -> Result<compositor_core::CheckpointF32> {
    let mut plan = StagePlan::default_plan(tag, cfg.steps_for(tag))?;
    for (group, lr) in plan.learning_rates.iter_mut() {
        *lr = match group {
            compositor_core::model::ParamGroup::Unet => cfg.train_lr_unet,
            _ => cfg.train_lr_encoder,
        };
    }
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        batch_size: cfg.train_batch_size,
        augment_strength: cfg.train_augment_strength,
        log_every: cfg.train_log_every,
        ckpt_every: cfg.train_ckpt_every,
    };
    let started = Instant::now();
    let ckpt = train_stage(&plan, init, dataset, &train_cfg, Some(out), None)?;
    let path = out.join(format!("ckpt_{}.bin", tag.name()));
    save_checkpoint(&ckpt, &path)?;
    println!(
        "stage {} done: {} steps in {:.1}s -> {}",
        tag.name(),
        plan.steps,
        started.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(ckpt)
}

fn cmd_train(cfg: &RunConfig, args: TrainArgs) -> Result<()> {
    let stages = parse_stages(&args.stage)?;
    let data = resolve(&args.data);
    let out = resolve(&args.out);
    echo_config(cfg, &out)?;
    let (_, dataset) = load_split(&data, Split::Train)?;
    let samples: Vec<SceneSample<TrainScalar>> = dataset.into_iter().map(|(_, s)| s).collect();
    let init = match &args.init {
        Some(path) => load_checkpoint::<TrainScalar>(&resolve(path))?,
        None => {
            let mut c = init_checkpoint(&cfg.model_config(), cfg.seed)?;
            c.schedule = cfg.schedule()?;
            c
        }
    };
    if stages.len() == 1 {
        run_one_stage(cfg, stages[0], &init, &samples, &out)?;
        return Ok(());
    }
    // full schedule: s1, s2 resumes from s1, merged checkpoint seeds s3
    let s1 = run_one_stage(cfg, StageTag::S1, &init, &samples, &out)?;
    let s2 = run_one_stage(cfg, StageTag::S2, &s1, &samples, &out)?;
    let merged = merge_checkpoints(&s1, &s2, cfg.train_s3_alpha)?;
    save_checkpoint(&merged, &out.join("ckpt_s3_merged.bin"))?;
    let s3 = run_one_stage(cfg, StageTag::S3, &merged, &samples, &out)?;
    let s4 = run_one_stage(cfg, StageTag::S4, &s3, &samples, &out)?;
    let s5 = run_one_stage(cfg, StageTag::S5, &s4, &samples, &out)?;
    let s6 = run_one_stage(cfg, StageTag::S6, &s5, &samples, &out)?;
    save_checkpoint(&s6, &out.join("ckpt_final.bin"))?;
    Ok(())
}

fn cmd_merge(args: MergeArgs) -> Result<()> {
    let a = load_checkpoint::<TrainScalar>(&resolve(&args.a))?;
    let b = load_checkpoint::<TrainScalar>(&resolve(&args.b))?;
    let merged = merge_checkpoints(&a, &b, args.alpha)?;
    let out = resolve(&args.out);
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Path(dir.to_path_buf(), e))?;
    }
    save_checkpoint(&merged, &out)?;
    println!("merged checkpoint -> {}", out.display());
    Ok(())
}

fn parse_bbox(text: &str) -> Result<BBox> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad bbox component '{t}'")))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 4 {
        return Err(Error::Config(format!(
            "expected bbox x0,y0,x1,y1, got '{text}'"
        )));
    }
    BBox::new(parts[0], parts[1], parts[2], parts[3])
}

/// Masks of one trajectory laid side by side.
fn trajectory_strip(traj: &[(usize, Mask)]) -> Option<Mask> {
    let (h, w) = traj.first()?.1.dim();
    let mut strip = Mask::from_elem((h, w * traj.len()), false);
    for (i, (_, m)) in traj.iter().enumerate() {
        strip
            .slice_mut(ndarray::s![.., i * w..(i + 1) * w])
            .assign(m);
    }
    Some(strip)
}

#[derive(serde::Serialize)]
struct SampleSidecar<'a> {
    id: &'a str,
    seed: u64,
    steps: usize,
    bbox: Option<BBox>,
    elapsed_ms: u128,
}

fn cmd_sample(cfg: &RunConfig, args: SampleArgs) -> Result<()> {
    let out = resolve(&args.out);
    echo_config(cfg, &out)?;
    let ckpt = load_checkpoint::<TrainScalar>(&resolve(&args.ckpt))?;
    let data = resolve(&args.data);
    let manifest = DatasetManifest::load(&manifest_path(&data))?;
    let record = match &args.id {
        Some(id) => manifest
            .records
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| Error::Invalid(format!("no record '{id}' in manifest")))?,
        None => manifest
            .split_ids(Split::Test)
            .into_iter()
            .next()
            .or_else(|| manifest.records.first())
            .ok_or_else(|| Error::Invalid("empty dataset".into()))?,
    };
    let sample = load_sample::<TrainScalar>(&data, record)?;
    let mut req = SampleRequest::new(
        sample.background.clone(),
        sample.object_image.clone(),
        args.seed.unwrap_or(cfg.seed),
    );
    req.steps = cfg.sampler_steps;
    req.bbox = args.bbox.as_deref().map(parse_bbox).transpose()?;
    req.record_trajectory = args.traj;
    let n = args.n.unwrap_or(1);
    if n < 1 {
        return Err(Error::Config("--n must be >= 1".into()));
    }
    let started = Instant::now();
    let results = if n == 1 {
        vec![sample_composite(&req, &ckpt)?]
    } else {
        sample_diverse(&req, n, &ckpt)?
    };
    let elapsed_ms = started.elapsed().as_millis();
    for (i, result) in results.iter().enumerate() {
        let id = if n == 1 {
            record.id.clone()
        } else {
            format!("{}_{i}", record.id)
        };
        imgio::save_rgb(&result.image, &out.join(format!("{id}.png")))?;
        imgio::save_mask(&result.predicted_mask, &out.join(format!("{id}.mask.png")))?;
        if let Some(strip) = result.mask_trajectory.as_deref().and_then(trajectory_strip) {
            imgio::save_mask(&strip, &out.join(format!("{id}.traj.png")))?;
        }
        let sidecar = SampleSidecar {
            id: &id,
            seed: result.seed,
            steps: req.steps,
            bbox: req.bbox,
            elapsed_ms,
        };
        std::fs::write(
            out.join(format!("{id}.json")),
            serde_json::to_vec_pretty(&sidecar)?,
        )?;
    }
    println!(
        "wrote {} sample(s) for record {} to {}",
        results.len(),
        record.id,
        out.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, args: EvalArgs) -> Result<()> {
    let out = resolve(&args.out);
    echo_config(cfg, &out)?;
    let mode = match args.mode.as_str() {
        "empty" => EvalMode::EmptyMask,
        "bbox" => EvalMode::Bbox,
        other => return Err(Error::Config(format!("unknown eval mode '{other}'"))),
    };
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(Error::Config(format!("unknown split '{other}'"))),
    };
    let ckpt = load_checkpoint::<TrainScalar>(&resolve(&args.ckpt))?;
    let (_, samples) = load_split(&resolve(&args.data), split)?;
    let opts = EvalOptions {
        mode,
        n_predictions: cfg.sampler_n,
        steps: cfg.eval_steps,
        seed: cfg.seed,
    };
    let started = Instant::now();
    let report = evaluate(&samples, &ckpt, &opts)?;
    save_report(&report, &out)?;
    println!(
        "evaluated {} images in {:.1}s: mean max-IoU {:.4}, IoU>0.5 rate {:.4}, diversity {:.4}",
        report.per_image.len(),
        started.elapsed().as_secs_f64(),
        report.mean_iou,
        report.iou_over_half_rate,
        report.pairwise_diversity
    );
    Ok(())
}
