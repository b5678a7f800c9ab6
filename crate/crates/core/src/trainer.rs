//! Three-phase optimisation: generator warm-up, discriminator warm-up with a
//! frozen generator, then alternating adversarial training.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use vidpred_tensor::{clip_grad_norm, Adam, AdamConfig, Graph, Tensor};

use crate::backbone::Backbone;
use crate::config::{OptimizerSettings, RunConfig};
use crate::container::{Container, Section};
use crate::data::{augment_flip, frame_to_image, ClipSource};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{io_err, Error, Result};
use crate::frames::{batch_clips, unbatch_frames, ClipSample, FrameSequence};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{generator_objective, hinge_loss_d, LossValue, ObjectiveWeights, Variant};
use crate::nn::{Ctx, ParamSet, RunRng};

/// Epoch-shuffled sample order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub order: Vec<usize>,
    pub pos: usize,
    pub epoch: u64,
}

impl Sampler {
    pub fn new(n: usize) -> Self {
        Sampler {
            order: (0..n).collect(),
            pos: n,
            epoch: 0,
        }
    }

    /// Next `k` indices, reshuffling with `rng` at each epoch boundary.
    pub fn next_batch(&mut self, k: usize, rng: &mut RunRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos >= self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateKind {
    G,
    D,
}

/// One logged optimizer update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: u8,
    pub step: u64,
    pub update: UpdateKind,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    pub weights: ObjectiveWeights,
    pub lr: f64,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    /// Completed updates per phase (phase 3 counts generator updates).
    pub phase_steps: [u64; 3],
    pub d_updates: u64,
    pub g_updates: u64,
    /// Discriminator updates since the last generator update in phase 3.
    pub pending_d: usize,
    pub rng: RunRng,
    pub sampler: Sampler,
    pub history: Vec<LogRecord>,
}

fn adam_config(o: &OptimizerSettings, lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
    }
}

impl TrainState {
    pub fn new(cfg: &RunConfig, n_clips: usize) -> Result<Self> {
        let generator = Generator::new(cfg.generator.clone(), cfg.seed)?;
        let discriminator = Discriminator::new(cfg.discriminator.clone(), cfg.seed.wrapping_add(1))?;
        let o = &cfg.optimizer;
        Ok(TrainState {
            opt_g: Adam::new(adam_config(o, o.lr_phase1_g), generator.params().values()),
            opt_d: Adam::new(adam_config(o, o.lr_phase2_d), discriminator.params().values()),
            generator,
            discriminator,
            phase_steps: [0; 3],
            d_updates: 0,
            g_updates: 0,
            pending_d: 0,
            rng: RunRng::seed_from_u64(cfg.seed.wrapping_add(2)),
            sampler: Sampler::new(n_clips),
            history: Vec::new(),
        })
    }

    pub fn global_step(&self) -> u64 {
        self.d_updates + self.g_updates
    }

    /// Update sequence of phase-3 records, e.g. `DDDDDDDDG`.
    pub fn phase3_pattern(&self) -> String {
        self.history
            .iter()
            .filter(|r| r.phase == 3)
            .map(|r| match r.update {
                UpdateKind::D => 'D',
                UpdateKind::G => 'G',
            })
            .collect()
    }
}

fn push_params(c: &mut Container, prefix: &str, p: &ParamSet<f32>) {
    for (n, t) in p.iter() {
        c.push(Section::from_tensor(format!("{prefix}{n}"), t));
    }
}

fn push_adam(c: &mut Container, prefix: &str, a: &Adam<f32>) {
    for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
        c.push(Section::from_tensor(format!("{prefix}m.{i}"), m));
        c.push(Section::from_tensor(format!("{prefix}v.{i}"), v));
    }
}

fn load_adam(c: &Container, prefix: &str, a: &mut Adam<f32>, t: u64) -> Result<()> {
    for i in 0..a.m.len() {
        for (kind, slot) in [("m", &mut a.m[i]), ("v", &mut a.v[i])] {
            let name = format!("{prefix}{kind}.{i}");
            let s: Tensor<f32> = c.require(&name)?.to_tensor()?;
            if s.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry `{name}` has shape {:?}, expected {:?}",
                    s.shape(),
                    slot.shape()
                )));
            }
            *slot = s;
        }
    }
    a.t = t;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    phase_steps: [u64; 3],
    d_updates: u64,
    g_updates: u64,
    pending_d: usize,
    opt_g_t: u64,
    opt_g_lr: f64,
    opt_d_t: u64,
    opt_d_lr: f64,
    rng: RunRng,
    sampler: Sampler,
}

/// Writes generator and discriminator weights and buffers, optimizer
/// moments, counters and the rng/sampler state.
pub fn checkpoint_save(state: &TrainState, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "vidpred-checkpoint".into(),
        generator: state.generator.config().clone(),
        discriminator: state.discriminator.config().clone(),
        phase_steps: state.phase_steps,
        d_updates: state.d_updates,
        g_updates: state.g_updates,
        pending_d: state.pending_d,
        opt_g_t: state.opt_g.t,
        opt_g_lr: state.opt_g.config.lr,
        opt_d_t: state.opt_d.t,
        opt_d_lr: state.opt_d.config.lr,
        rng: state.rng.clone(),
        sampler: state.sampler.clone(),
    };
    let mut c = Container::new(serde_json::to_value(&meta)?);
    push_params(&mut c, "g.param.", state.generator.params());
    push_params(&mut c, "g.buffer.", state.generator.buffers());
    push_params(&mut c, "d.param.", state.discriminator.params());
    push_params(&mut c, "d.buffer.", state.discriminator.buffers());
    push_adam(&mut c, "opt_g.", &state.opt_g);
    push_adam(&mut c, "opt_d.", &state.opt_d);
    c.save(path)
}

/// Restores a state for `cfg`; the model shapes implied by `cfg` must match
/// the stored tensors name by name.
pub fn checkpoint_load(path: &Path, cfg: &RunConfig) -> Result<TrainState> {
    let c = Container::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint header: {e}")))?;
    if meta.kind != "vidpred-checkpoint" {
        return Err(Error::Checkpoint(format!("`{}` is not a training checkpoint", meta.kind)));
    }
    let mut st = TrainState::new(cfg, meta.sampler.order.len())?;
    st.generator.params_mut().load_named(&c.with_prefix("g.param.")?)?;
    st.generator.buffers_mut().load_named(&c.with_prefix("g.buffer.")?)?;
    st.discriminator.params_mut().load_named(&c.with_prefix("d.param.")?)?;
    st.discriminator.buffers_mut().load_named(&c.with_prefix("d.buffer.")?)?;
    load_adam(&c, "opt_g.", &mut st.opt_g, meta.opt_g_t)?;
    load_adam(&c, "opt_d.", &mut st.opt_d, meta.opt_d_t)?;
    st.opt_g.config.lr = meta.opt_g_lr;
    st.opt_d.config.lr = meta.opt_d_lr;
    st.phase_steps = meta.phase_steps;
    st.d_updates = meta.d_updates;
    st.g_updates = meta.g_updates;
    st.pending_d = meta.pending_d;
    st.rng = meta.rng;
    st.sampler = meta.sampler;
    Ok(st)
}

/// Loads only the generator from a checkpoint, checking its config.
pub fn load_generator(path: &Path, expected: Option<&GeneratorConfig>) -> Result<Generator<f32>> {
    let c = Container::load(path)?;
    let config: GeneratorConfig = c
        .meta
        .get("generator")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .ok_or_else(|| Error::Checkpoint("checkpoint has no generator config".into()))?;
    if let Some(e) = expected {
        if e != &config {
            return Err(Error::Checkpoint(format!(
                "checkpoint generator channels {:?} differ from the configured {:?}",
                config.channels, e.channels
            )));
        }
    }
    let mut g = Generator::new(config, 0)?;
    g.params_mut().load_named(&c.with_prefix("g.param.")?)?;
    g.buffers_mut().load_named(&c.with_prefix("g.buffer.")?)?;
    Ok(g)
}

/// Output locations of a training run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, cfg: &RunConfig) -> Result<Self> {
        for d in [root.to_path_buf(), root.join("ckpt"), root.join("samples")] {
            std::fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        let echo = root.join("config.echo");
        std::fs::write(&echo, cfg.to_toml()?).map_err(io_err(&echo))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join("ckpt").join(format!("{step}.bin"))
    }

    fn append_log(&self, recs: &[LogRecord]) -> Result<()> {
        let path = self.log_path();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        for r in recs {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Reads `log.jsonl`.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Drives the phases over a clip source.
pub struct Trainer<'a> {
    pub cfg: &'a RunConfig,
    pub data: &'a dyn ClipSource,
    pub backbone: Option<Backbone<f32>>,
    pub run_dir: Option<RunDir>,
    /// Clip used for sample strips.
    pub probe: Option<ClipSample>,
}

struct Batch {
    clips: Tensor<f32>,
    targets: Tensor<f32>,
    ids: Vec<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, data: &'a dyn ClipSource, backbone: Option<Backbone<f32>>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        if cfg.schedule.variant.perceptual() && cfg.weights.lambda3 > 0.0 && backbone.is_none() {
            return Err(Error::Config(format!(
                "variant {} needs a perceptual backbone",
                cfg.schedule.variant
            )));
        }
        Ok(Trainer {
            cfg,
            data,
            backbone,
            run_dir: None,
            probe: None,
        })
    }

    pub fn with_run_dir(mut self, dir: RunDir) -> Self {
        self.run_dir = Some(dir);
        self
    }

    fn variant(&self) -> Variant {
        self.cfg.schedule.variant
    }

    fn next_batch(&self, st: &mut TrainState) -> Result<Batch> {
        let idx = st.sampler.next_batch(self.cfg.optimizer.batch_size, &mut st.rng);
        let mut samples = Vec::with_capacity(idx.len());
        for i in idx {
            let c = self.data.clip(i)?;
            samples.push(if self.cfg.data.flip { augment_flip(&c, &mut st.rng).0 } else { c });
        }
        let inputs: Vec<&FrameSequence> = samples.iter().map(|s| &s.input).collect();
        let firsts: Vec<FrameSequence> = samples.iter().map(|s| s.target.slice(0, 1)).collect::<Result<_>>()?;
        let targets: Vec<&FrameSequence> = firsts.iter().collect();
        let clips = batch_clips(&inputs)?;
        let t = batch_clips(&targets)?;
        let clips_ok = clips.data().iter().all(|v| (0.0..=1.0).contains(v));
        let targets_ok = t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !clips_ok || !targets_ok {
            return Err(Error::Input("batch frame values outside [0, 1]".into()));
        }
        Ok(Batch {
            clips,
            targets: t,
            ids: samples.iter().map(|s| s.input.source_id.clone()).collect(),
        })
    }

    fn phase_weights(&self, phase: u8) -> ObjectiveWeights {
        let w = self.variant().weights(self.cfg.weights);
        if phase == 1 {
            ObjectiveWeights { lambda1: 0.0, ..w }
        } else {
            w
        }
    }

    fn diverged(&self, st: &TrainState, rec: &LogRecord, batch: &Batch) -> Error {
        if let Some(dir) = &self.run_dir {
            let dump = serde_json::json!({
                "record": rec,
                "batch_sources": batch.ids,
                "phase_steps": st.phase_steps,
                "g_param_checksum": st.generator.params().checksum(),
                "d_param_checksum": st.discriminator.params().checksum(),
            });
            let _ = std::fs::write(dir.root.join("divergence.json"), dump.to_string());
        }
        Error::Divergence(format!(
            "non-finite loss at phase {} step {}: {:?}",
            rec.phase, rec.step, rec.components
        ))
    }

    fn record(&self, st: &mut TrainState, rec: LogRecord) -> Result<()> {
        if let Some(d) = &self.run_dir {
            d.append_log(std::slice::from_ref(&rec))?;
        }
        st.history.push(rec);
        Ok(())
    }

    /// Fake frames from the generator with batch statistics, no commit.
    fn fakes(&self, st: &mut TrainState, clips: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let p = st.generator.bind(&mut g, false);
        let x = g.constant(clips.clone());
        let mut ctx = Ctx::new(true, true, &mut st.rng);
        let y = st.generator.forward(&mut g, &p, x, &mut ctx)?;
        Ok(g.value(y).clone())
    }

    fn g_update(&self, st: &mut TrainState, phase: u8) -> Result<()> {
        let batch = self.next_batch(st)?;
        let weights = self.phase_weights(phase);
        let use_d = phase == 3 && weights.lambda1 > 0.0;
        let mut g = Graph::<f32>::new();
        let p = st.generator.bind(&mut g, true);
        let x = g.constant(batch.clips.clone());
        let target = g.constant(batch.targets.clone());
        let mut ctx = Ctx::new(true, true, &mut st.rng);
        let pred = st.generator.forward(&mut g, &p, x, &mut ctx)?;
        let updates = ctx.take_updates();
        let fake_logits = if use_d {
            let dp = st.discriminator.bind(&mut g, false);
            let mut dctx = Ctx::new(false, false, &mut st.rng);
            Some(st.discriminator.forward(&mut g, &dp, pred, x, &mut dctx)?)
        } else {
            None
        };
        let (total, value) = generator_objective(&mut g, pred, target, fake_logits, &weights, self.backbone.as_ref())?;
        let rec = LogRecord {
            phase,
            step: st.global_step() + 1,
            update: UpdateKind::G,
            loss: value.scalar,
            components: value.components.clone(),
            weights,
            lr: st.opt_g.config.lr,
        };
        if !value.is_finite() || !g.value(total).all_finite() {
            return Err(self.diverged(st, &rec, &batch));
        }
        let mut grads = g.backward(total)?.param_grads(st.generator.params().len());
        drop(g);
        if let Some(c) = self.cfg.optimizer.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        st.opt_g.step(st.generator.params_mut().values_mut(), &grads);
        let momentum = st.generator.config().bn_momentum;
        updates.apply(st.generator.buffers_mut(), momentum);
        st.g_updates += 1;
        self.record(st, rec)
    }

    fn d_update(&self, st: &mut TrainState, phase: u8) -> Result<()> {
        let batch = self.next_batch(st)?;
        let fake = self.fakes(st, &batch.clips)?;
        let mut g = Graph::<f32>::new();
        let p = st.discriminator.bind(&mut g, true);
        let x = g.constant(batch.clips.clone());
        let real = g.constant(batch.targets.clone());
        let fake = g.constant(fake);
        let mut ctx = Ctx::new(true, false, &mut st.rng);
        let lr_ = st.discriminator.forward(&mut g, &p, real, x, &mut ctx)?;
        let lf = st.discriminator.forward(&mut g, &p, fake, x, &mut ctx)?;
        let updates = ctx.take_updates();
        let loss = hinge_loss_d(&mut g, lr_, lf)?;
        let v = g.value(loss).item() as f64;
        let rec = LogRecord {
            phase,
            step: st.global_step() + 1,
            update: UpdateKind::D,
            loss: v,
            components: BTreeMap::from([("hinge_d".to_string(), v)]),
            weights: self.phase_weights(phase),
            lr: st.opt_d.config.lr,
        };
        if !v.is_finite() {
            return Err(self.diverged(st, &rec, &batch));
        }
        let mut grads = g.backward(loss)?.param_grads(st.discriminator.params().len());
        drop(g);
        if let Some(c) = self.cfg.optimizer.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        st.opt_d.step(st.discriminator.params_mut().values_mut(), &grads);
        updates.apply(st.discriminator.buffers_mut(), 0.0);
        st.d_updates += 1;
        self.record(st, rec)
    }

    fn after_update(&self, st: &TrainState) -> Result<()> {
        let Some(dir) = &self.run_dir else { return Ok(()) };
        let step = st.global_step();
        let lc = &self.cfg.logging;
        if lc.checkpoint_every > 0 && step % lc.checkpoint_every == 0 {
            checkpoint_save(st, &dir.checkpoint_path(step))?;
        }
        if lc.sample_every > 0 && step % lc.sample_every == 0 {
            if let Some(probe) = &self.probe {
                write_samples(&st.generator, probe, &dir.root.join("samples").join(step.to_string()), self.cfg.seed)?;
            }
        }
        Ok(())
    }

    /// Generator-only updates until phase 1 has `steps` completed updates.
    pub fn train_phase1(&self, st: &mut TrainState, steps: u64) -> Result<()> {
        st.opt_g.config.lr = self.cfg.optimizer.lr_phase1_g;
        while st.phase_steps[0] < steps {
            self.g_update(st, 1)?;
            st.phase_steps[0] += 1;
            self.after_update(st)?;
        }
        Ok(())
    }

    /// Discriminator-only updates against the frozen generator.
    pub fn train_phase2(&self, st: &mut TrainState, steps: u64) -> Result<()> {
        st.opt_d.config.lr = self.cfg.optimizer.lr_phase2_d;
        while st.phase_steps[1] < steps {
            self.d_update(st, 2)?;
            st.phase_steps[1] += 1;
            self.after_update(st)?;
        }
        Ok(())
    }

    /// `d_updates_per_g` discriminator updates, then one generator update,
    /// until phase 3 has `steps` generator updates.
    pub fn train_phase3(&self, st: &mut TrainState, steps: u64) -> Result<()> {
        st.opt_g.config.lr = self.cfg.optimizer.lr_phase3_g;
        st.opt_d.config.lr = self.cfg.optimizer.lr_phase3_d;
        let ratio = self.cfg.optimizer.d_updates_per_g;
        while st.phase_steps[2] < steps {
            while st.pending_d < ratio {
                self.d_update(st, 3)?;
                st.pending_d += 1;
                self.after_update(st)?;
            }
            self.g_update(st, 3)?;
            st.pending_d = 0;
            st.phase_steps[2] += 1;
            self.after_update(st)?;
        }
        Ok(())
    }

    /// Runs (or resumes) the variant's full schedule.
    pub fn run(&self, st: &mut TrainState) -> Result<()> {
        let [p1, p2, p3] = self.cfg.schedule.resolve(self.data.len(), self.cfg.optimizer.batch_size);
        info!("{}: phase steps {p1}/{p2}/{p3}", self.variant());
        self.train_phase1(st, p1)?;
        if self.variant().adversarial() {
            self.train_phase2(st, p2)?;
            self.train_phase3(st, p3)?;
        }
        if let Some(dir) = &self.run_dir {
            checkpoint_save(st, &dir.checkpoint_path(st.global_step()))?;
            checkpoint_save(st, &dir.root.join("ckpt").join("final.bin"))?;
        }
        Ok(())
    }
}

/// Writes predicted and ground-truth probe frames plus a side-by-side strip
/// (top row ground truth, bottom row prediction).
pub fn write_samples(generator: &Generator<f32>, probe: &ClipSample, dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let n = probe.target.len();
    let mut rng = RunRng::seed_from_u64(seed);
    let preds = generator.rollout(&probe.input, n, &mut rng, true)?;
    for (k, f) in preds.frames().iter().enumerate() {
        let p = dir.join(format!("pred_{:02}.png", k + 1));
        frame_to_image(f).save(&p).map_err(|e| Error::Input(format!("cannot write {}: {e}", p.display())))?;
    }
    let strip = comparison_strip(&probe.target, &preds);
    let p = dir.join("strip.png");
    strip.save(&p).map_err(|e| Error::Input(format!("cannot write {}: {e}", p.display())))
}

/// Two-row image: `top` frames above `bottom` frames.
pub fn comparison_strip(top: &FrameSequence, bottom: &FrameSequence) -> image::RgbImage {
    let (h, w) = (top.height() as u32, top.width() as u32);
    let n = top.len().max(bottom.len()) as u32;
    let mut img = image::RgbImage::new(w * n, 2 * h);
    for (row, seq) in [top, bottom].into_iter().enumerate() {
        for (k, f) in seq.frames().iter().enumerate() {
            let tile = frame_to_image(f);
            image::imageops::replace(&mut img, &tile, (k as u32 * w) as i64, (row as u32 * h) as i64);
        }
    }
    img
}

/// Predicted frames of a batch, as individual frames.
pub fn predict_batch(generator: &Generator<f32>, clips: &[&FrameSequence], rng: &mut RunRng, noise: bool) -> Result<Vec<Tensor<f32>>> {
    let x = batch_clips(clips)?;
    let mut g = Graph::<f32>::new();
    let p = generator.bind(&mut g, false);
    let xv = g.constant(x);
    let mut ctx = Ctx::eval(rng, noise && generator.config().noise.active_at_inference);
    let y = generator.forward(&mut g, &p, xv, &mut ctx)?;
    Ok(unbatch_frames(g.value(y)))
}

/// Loss value of a single record, recomputed from its components.
pub fn recompose(rec: &LogRecord) -> f64 {
    match rec.update {
        UpdateKind::D => rec.components.get("hinge_d").copied().unwrap_or(f64::NAN),
        UpdateKind::G => LossValue::from_components(rec.components.clone(), &rec.weights).scalar,
    }
}
