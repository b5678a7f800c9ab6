//! `vidpred`: dataset synthesis, training, prediction and evaluation.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 training divergence,
//! 4 checkpoint/config mismatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use vidpred_core::backbone::{Backbone, BackboneKind};
use vidpred_core::config::RunConfig;
use vidpred_core::data::synth::{synth_mixed, write_dataset, SynthSpec};
use vidpred_core::data::{
    decode_frame, frame_to_image, ingest, preprocess, ClipSource, DatasetKind, FrameDataset, IngestOptions,
    MemoryClips, TRAIN_WINDOW,
};
use vidpred_core::evaluator::{emit_reports, multi_step_eval, CopyLastFrame, GeneratorPredictor, Predictor};
use vidpred_core::frames::{FrameSequence, INPUT_FRAMES};
use vidpred_core::losses::Variant;
use vidpred_core::nn::RunRng;
use vidpred_core::trainer::{checkpoint_load, comparison_strip, load_generator, RunDir, TrainState, Trainer};
use vidpred_core::{Error, Result};

#[derive(Parser)]
#[command(name = "vidpred", version, about = "Hierarchical residual next-frame video prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; keys not given fall back to the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `desk` or `paper` (ignored when --config names its own preset).
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::preset(&self.preset)?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic panning-texture dataset.
    Synth(SynthArgs),
    /// Runs the phase schedule of a loss variant.
    Train(TrainArgs),
    /// Recursively predicts frames after an 8-frame clip.
    Predict(PredictArgs),
    /// Scores a checkpoint and the Copy-Last-Frame baseline.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Pan velocity in pixels per frame; repeat to cycle several.
    #[arg(long, default_values_t = vec![1.0])]
    pan: Vec<f64>,
    #[arg(long, default_value_t = 16)]
    sequences: usize,
    #[arg(long, default_value_t = 20)]
    length: usize,
    /// Canvas as HxW.
    #[arg(long, default_value = "64x80")]
    size: String,
    #[arg(long, default_value_t = 0)]
    sprites: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    variant: Option<String>,
    /// Frame-directory training set (overrides the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of frames; the first 8 are the input, later ones the ground truth.
    #[arg(long)]
    clip_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    n_steps: usize,
    /// Disables dropout noise.
    #[arg(long)]
    no_noise: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Generator checkpoint; without one only the baseline is scored.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Frame-directory evaluation set (defaults to a synthetic set).
    #[arg(long)]
    data: Option<PathBuf>,
    /// `stub` or `pretrained`.
    #[arg(long, default_value = "stub")]
    backbone: String,
    /// Metric weight container for `--backbone pretrained`.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Prediction horizon.
    #[arg(long, default_value_t = 1)]
    multistep: usize,
    #[arg(long)]
    temporal_factor: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Row name of the checkpoint in the tables.
    #[arg(long, default_value = "model")]
    name: String,
    #[arg(long)]
    no_noise: bool,
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Input(format!("size `{s}` must look like 64x80"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::Io { path: d.into(), source: e })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        canvas: parse_size(&a.size)?,
        n_sprites: a.sprites,
        pan_velocity: a.pan[0],
        sprite_velocity_range: SynthSpec::default().sprite_velocity_range,
        texture_seed: a.seed,
        length: a.length,
        n_sequences: a.sequences,
    };
    spec.validate()?;
    if a.pan.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Config("pan velocities must be >= 0".into()));
    }
    let seqs = synth_mixed(&spec, &a.pan, &mut RunRng::seed_from_u64(a.seed))?;
    write_dataset(&a.out, &seqs)?;
    let echo = serde_json::json!({"spec": spec, "pans": a.pan, "seed": a.seed});
    write_text(&a.out.join("config.echo"), &serde_json::to_string_pretty(&echo)?)?;
    info!("wrote {} sequences to {}", seqs.len(), a.out.display());
    Ok(())
}

/// In-memory synthetic clips for `cfg`, windows of `window` frames.
fn synthetic_clips(cfg: &RunConfig, seed: u64, length: usize, window: usize, kind: DatasetKind, n_targets: usize) -> Result<MemoryClips> {
    let spec = SynthSpec {
        length,
        texture_seed: seed,
        ..cfg.data.synthetic.clone()
    };
    let seqs: Vec<FrameSequence> = synth_mixed(&spec, &cfg.data.synthetic_pans, &mut RunRng::seed_from_u64(seed))?
        .into_iter()
        .map(|s| s.frames)
        .collect();
    MemoryClips::from_sequences(&seqs, window, kind, n_targets)
}

fn backbone_for_training(cfg: &RunConfig) -> Result<Option<Backbone<f32>>> {
    if !cfg.schedule.variant.perceptual() || cfg.weights.lambda3 == 0.0 {
        return Ok(None);
    }
    Ok(Some(match cfg.backbone.kind {
        BackboneKind::Stub => Backbone::stub(cfg.backbone.seed),
        _ => {
            let p = cfg.backbone.weights.as_ref().ok_or_else(|| {
                Error::Input("a pretrained perceptual backbone needs `backbone.weights`".into())
            })?;
            Backbone::load(p)?
        }
    }))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(v) = &a.variant {
        cfg.schedule.variant = v.parse::<Variant>()?;
    }
    if let Some(d) = &a.data {
        cfg.data.train_root = Some(d.clone());
    }
    cfg.validate()?;
    let data: Box<dyn ClipSource> = match &cfg.data.train_root {
        Some(root) => {
            if !root.is_dir() {
                return Err(Error::Input(format!("dataset path {} does not exist", root.display())));
            }
            let opts = IngestOptions {
                temporal_factor: cfg.data.temporal_factor,
                target_hw: cfg.data.target_hw,
                ..IngestOptions::train()
            };
            Box::new(FrameDataset { index: ingest(root, &opts)? })
        }
        None => {
            let len = cfg.data.synthetic.length;
            Box::new(synthetic_clips(&cfg, cfg.data.synthetic.texture_seed, len, TRAIN_WINDOW, DatasetKind::Train, 1)?)
        }
    };
    let run_dir = RunDir::create(&a.common.out, &cfg)?;
    let backbone = backbone_for_training(&cfg)?;
    let mut trainer = Trainer::new(&cfg, data.as_ref(), backbone)?.with_run_dir(run_dir);
    trainer.probe = Some(data.clip(0)?);
    let mut state = match &a.resume {
        Some(p) => checkpoint_load(p, &cfg)?,
        None => TrainState::new(&cfg, data.len())?,
    };
    let phases = cfg.schedule.resolve(data.len(), cfg.optimizer.batch_size);
    info!("training {} on {} clips, phase steps {:?}", cfg.schedule.variant, data.len(), phases);
    trainer.run(&mut state)?;
    info!(
        "done: {} generator and {} discriminator updates",
        state.g_updates, state.d_updates
    );
    Ok(())
}

fn read_clip_dir(dir: &Path, hw: (usize, usize)) -> Result<Vec<vidpred_core::frames::Frame>> {
    if !dir.is_dir() {
        return Err(Error::Input(format!("clip directory {} does not exist", dir.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io { path: dir.into(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    files.iter().map(|f| preprocess(&decode_frame(f)?, hw)).collect()
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    if a.n_steps == 0 {
        return Err(Error::Input("--n-steps must be >= 1".into()));
    }
    let generator = load_generator(&a.checkpoint, Some(&cfg.generator))?;
    let frames = read_clip_dir(&a.clip_dir, cfg.data.target_hw)?;
    if frames.len() < INPUT_FRAMES {
        return Err(Error::Input(format!(
            "clip has {} frames, at least {INPUT_FRAMES} are needed",
            frames.len()
        )));
    }
    let input = FrameSequence::from_frames(&frames[..INPUT_FRAMES], "clip", 0)?;
    let mut rng = RunRng::seed_from_u64(cfg.seed);
    let preds = generator.rollout(&input, a.n_steps, &mut rng, !a.no_noise)?;
    let out = &a.common.out;
    write_text(&out.join("config.echo"), &cfg.to_toml()?)?;
    for (k, f) in preds.frames().iter().enumerate() {
        let p = out.join(format!("pred_{:02}.png", k + 1));
        frame_to_image(f)
            .save(&p)
            .map_err(|e| Error::Input(format!("cannot write {}: {e}", p.display())))?;
    }
    if a.n_steps > 1 || frames.len() > INPUT_FRAMES {
        let truth = if frames.len() > INPUT_FRAMES {
            FrameSequence::from_frames(&frames[INPUT_FRAMES..], "clip", INPUT_FRAMES)?
        } else {
            input.last(1)?
        };
        let p = out.join("strip.png");
        comparison_strip(&truth, &preds)
            .save(&p)
            .map_err(|e| Error::Input(format!("cannot write {}: {e}", p.display())))?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    cfg.eval.n_steps = a.multistep;
    if a.no_noise {
        cfg.eval.noise = false;
    }
    if let Some(t) = a.temporal_factor {
        cfg.data.temporal_factor = t;
    }
    if let Some(s) = a.stride {
        cfg.data.eval_stride = s;
    }
    if let Some(d) = &a.data {
        cfg.data.eval_root = Some(d.clone());
    }
    cfg.validate()?;
    let metric: Backbone<f64> = match a.backbone.as_str() {
        "stub" => Backbone::stub(cfg.backbone.seed),
        "pretrained" => {
            let w = a
                .weights
                .as_ref()
                .ok_or_else(|| Error::Input("--backbone pretrained needs --weights".into()))?;
            Backbone::load(w)?
        }
        other => return Err(Error::Input(format!("unknown backbone `{other}` (stub, pretrained)"))),
    };
    let window = INPUT_FRAMES + cfg.eval.n_steps;
    let data: Box<dyn ClipSource> = match &cfg.data.eval_root {
        Some(root) => {
            let opts = IngestOptions {
                temporal_factor: cfg.data.temporal_factor,
                target_hw: cfg.data.target_hw,
                ..IngestOptions::eval(cfg.eval.n_steps, cfg.data.eval_stride)
            };
            Box::new(FrameDataset { index: ingest(root, &opts)? })
        }
        None => Box::new(synthetic_clips(
            &cfg,
            cfg.data.synthetic.texture_seed.wrapping_add(1_000_003),
            window,
            window,
            DatasetKind::Eval { stride: cfg.data.eval_stride },
            cfg.eval.n_steps,
        )?),
    };
    let generator = a
        .checkpoint
        .as_ref()
        .map(|p| load_generator(p, Some(&cfg.generator)))
        .transpose()?;
    let mut baseline = CopyLastFrame;
    let mut model = generator.as_ref().map(|g| GeneratorPredictor {
        name: a.name.clone(),
        generator: g,
        rng: RunRng::seed_from_u64(cfg.seed),
        noise: cfg.eval.noise,
    });
    let mut methods: Vec<&mut dyn Predictor> = vec![&mut baseline];
    if let Some(m) = model.as_mut() {
        methods.push(m);
    }
    let run = multi_step_eval(&mut methods, data.as_ref(), cfg.eval.n_steps, &metric)?;
    if run.skipped > 0 {
        warn!("skipped {} clips shorter than the horizon", run.skipped);
    }
    let out = &a.common.out;
    write_text(&out.join("config.echo"), &cfg.to_toml()?)?;
    emit_reports(&run.records, out, cfg.eval.bin_width, cfg.eval.min_count, cfg.eval.histogram_step)?;
    info!("scored {} records ({} skipped clips)", run.records.len(), run.skipped);
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
