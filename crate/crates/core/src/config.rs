//! Run configuration, presets and the resolved-config echo.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneKind;
use crate::data::synth::SynthSpec;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{io_err, Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::{ObjectiveWeights, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub lr_phase1_g: f64,
    pub lr_phase2_d: f64,
    pub lr_phase3_g: f64,
    pub lr_phase3_d: f64,
    pub d_updates_per_g: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
            batch_size: 8,
            lr_phase1_g: 1e-4,
            lr_phase2_d: 1e-4,
            lr_phase3_g: 2e-5,
            lr_phase3_d: 1e-4,
            d_updates_per_g: 8,
            grad_clip: None,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_phase1_g, self.lr_phase2_d, self.lr_phase3_g, self.lr_phase3_d];
        if lrs.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.d_updates_per_g < 1 || self.batch_size < 1 {
            return Err(Error::Config("d_updates_per_g and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Phase lengths. Phase 3 counts generator updates; each is preceded by
/// `d_updates_per_g` discriminator updates. Epoch counts, when present,
/// override step counts once the dataset size is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub variant: Variant,
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub phase3_steps: u64,
    pub phase1_epochs: Option<f64>,
    pub phase2_epochs: Option<f64>,
    pub phase3_epochs: Option<f64>,
}

impl PhaseSchedule {
    /// Step counts for a dataset of `n_clips` clips at `batch` clips per
    /// update. Variants without an adversarial term stop after phase 1.
    pub fn resolve(&self, n_clips: usize, batch: usize) -> [u64; 3] {
        let per_epoch = (n_clips as f64 / batch.max(1) as f64).ceil().max(1.0);
        let pick = |steps: u64, epochs: Option<f64>| epochs.map_or(steps, |e| (e * per_epoch).round() as u64);
        let p1 = pick(self.phase1_steps, self.phase1_epochs);
        if !self.variant.adversarial() {
            return [p1, 0, 0];
        }
        [
            p1,
            pick(self.phase2_steps, self.phase2_epochs),
            pick(self.phase3_steps, self.phase3_epochs),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSettings {
    pub kind: BackboneKind,
    /// Weight container for pretrained backbones.
    pub weights: Option<PathBuf>,
    /// Seed of the stub backbone.
    pub seed: u64,
}

impl BackboneSettings {
    pub fn stub() -> Self {
        BackboneSettings {
            kind: BackboneKind::Stub,
            weights: None,
            seed: 1234,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    /// Frame-directory dataset for training; `None` trains on `synthetic`.
    pub train_root: Option<PathBuf>,
    pub eval_root: Option<PathBuf>,
    /// (H, W)
    pub target_hw: (usize, usize),
    pub temporal_factor: usize,
    /// Eval window stride in frames.
    pub eval_stride: usize,
    pub flip: bool,
    /// In-memory dataset used when no `train_root` is given.
    pub synthetic: SynthSpec,
    /// Pan velocities cycled across synthetic sequences.
    pub synthetic_pans: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggingSettings {
    pub checkpoint_every: u64,
    pub sample_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub n_steps: usize,
    pub bin_width: f64,
    pub min_count: usize,
    /// Dropout noise during evaluation rollouts.
    pub noise: bool,
    pub histogram_step: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_steps: 1,
            bin_width: 0.02,
            min_count: 5,
            noise: true,
            histogram_step: 9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub data: DataSettings,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub weights: ObjectiveWeights,
    pub optimizer: OptimizerSettings,
    pub schedule: PhaseSchedule,
    pub backbone: BackboneSettings,
    pub logging: LoggingSettings,
    pub eval: EvalSettings,
}

impl RunConfig {
    /// Full-scale settings: 128×160 frames, generator widths
    /// (64, 128, 256, 512), the five-stage discriminator, VGG-16 perceptual
    /// features and the published optimizer settings.
    pub fn paper() -> Self {
        RunConfig {
            preset: "paper".into(),
            seed: 0,
            data: DataSettings {
                train_root: None,
                eval_root: None,
                target_hw: (128, 160),
                temporal_factor: 1,
                eval_stride: 10,
                flip: true,
                synthetic: SynthSpec {
                    canvas: (128, 160),
                    ..SynthSpec::default()
                },
                synthetic_pans: vec![1.0, 2.0],
            },
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            weights: ObjectiveWeights::default(),
            optimizer: OptimizerSettings::default(),
            schedule: PhaseSchedule {
                variant: Variant::GanVgg,
                phase1_steps: 0,
                phase2_steps: 0,
                phase3_steps: 0,
                phase1_epochs: Some(50.0),
                phase2_epochs: Some(2.0),
                phase3_epochs: Some(20.0),
            },
            backbone: BackboneSettings {
                kind: BackboneKind::Vgg16,
                weights: None,
                seed: 0,
            },
            logging: LoggingSettings {
                checkpoint_every: 5000,
                sample_every: 5000,
            },
            eval: EvalSettings::default(),
        }
    }

    /// CPU-sized settings on the synthetic pan dataset: 64×80 frames, widths
    /// (8, 16, 32, 64), a four-stage discriminator and the stub backbone.
    pub fn desk() -> Self {
        RunConfig {
            preset: "desk".into(),
            seed: 0,
            data: DataSettings {
                train_root: None,
                eval_root: None,
                target_hw: (64, 80),
                temporal_factor: 1,
                eval_stride: 10,
                flip: true,
                synthetic: SynthSpec {
                    canvas: (64, 80),
                    n_sprites: 0,
                    pan_velocity: 1.0,
                    sprite_velocity_range: (0.5, 2.0),
                    texture_seed: 0,
                    length: 30,
                    n_sequences: 32,
                },
                synthetic_pans: vec![1.0, 2.0],
            },
            generator: GeneratorConfig::with_channels(vec![8, 16, 32, 64]),
            discriminator: DiscriminatorConfig {
                stage_blocks: vec![1, 2, 2, 2],
                stage_channels: vec![8, 16, 32, 64],
                spectral_norm: true,
                sn_warmup_iters: 20,
            },
            weights: ObjectiveWeights::default(),
            optimizer: OptimizerSettings {
                batch_size: 4,
                lr_phase1_g: 2e-3,
                ..OptimizerSettings::default()
            },
            schedule: PhaseSchedule {
                variant: Variant::GMae,
                phase1_steps: 6000,
                phase2_steps: 20,
                phase3_steps: 10,
                phase1_epochs: None,
                phase2_epochs: None,
                phase3_epochs: None,
            },
            backbone: BackboneSettings::stub(),
            logging: LoggingSettings {
                checkpoint_every: 100,
                sample_every: 100,
            },
            eval: EvalSettings::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (desk, paper)"))),
        }
    }

    /// Loads a TOML file. Keys not given fall back to the preset named by
    /// the file's `preset` key (default `desk`).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = overlay.get("preset").and_then(|v| v.as_str()).unwrap_or("desk");
        let base = Self::preset(preset)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        let (h, w) = self.data.target_hw;
        self.generator.check_input(h, w)?;
        self.discriminator.logits_hw(h, w)?;
        if self.data.synthetic.canvas != self.data.target_hw {
            return Err(Error::Config(format!(
                "synthetic canvas {:?} differs from target size {:?}",
                self.data.synthetic.canvas, self.data.target_hw
            )));
        }
        self.data.synthetic.validate()?;
        if self.data.temporal_factor < 1 || self.data.eval_stride < 1 {
            return Err(Error::Config("temporal_factor and eval_stride must be >= 1".into()));
        }
        if self.eval.bin_width <= 0.0 || self.eval.n_steps < 1 {
            return Err(Error::Config("eval bin_width must be > 0 and n_steps >= 1".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::desk();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn overlay_changes_only_given_keys() {
        let c = RunConfig::from_toml_str("seed = 5\n[schedule]\nvariant = \"GAN-VGG\"\n").unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.schedule.variant, Variant::GanVgg);
        assert_eq!(c.optimizer, RunConfig::desk().optimizer);
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn schedule_resolution() {
        let s = RunConfig::paper().schedule;
        assert_eq!(s.resolve(4100, 8), [25650, 1026, 10260]);
        let g = PhaseSchedule {
            variant: Variant::GMae,
            ..s
        };
        assert_eq!(g.resolve(4100, 8)[1..], [0, 0]);
    }
}
