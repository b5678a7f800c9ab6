//! Procedural moving-texture sequences with known global pan and sprite
//! motion.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vidpred_tensor::Tensor;

use crate::error::{io_err, Error, Result};
use crate::frames::{Frame, FrameSequence, SPATIAL_MULTIPLE};
use crate::nn::RunRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// (H, W)
    pub canvas: (usize, usize),
    pub n_sprites: usize,
    /// Horizontal background translation in pixels per frame.
    pub pan_velocity: f64,
    /// Sprite speed range (pixels per frame).
    pub sprite_velocity_range: (f64, f64),
    pub texture_seed: u64,
    pub length: usize,
    pub n_sequences: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            canvas: (64, 80),
            n_sprites: 0,
            pan_velocity: 1.0,
            sprite_velocity_range: (0.5, 2.0),
            texture_seed: 0,
            length: 20,
            n_sequences: 16,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        if h == 0 || w == 0 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "canvas {h}x{w} must be a positive multiple of {SPATIAL_MULTIPLE} in both dimensions"
            )));
        }
        if !(self.pan_velocity >= 0.0) || !self.pan_velocity.is_finite() {
            return Err(Error::Config(format!("pan velocity {} must be >= 0", self.pan_velocity)));
        }
        let (lo, hi) = self.sprite_velocity_range;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(Error::Config(format!("sprite velocity range ({lo}, {hi}) is invalid")));
        }
        if self.length == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteTrack {
    pub size: usize,
    pub color: [f32; 3],
    pub start: (f64, f64),
    /// (dy, dx) in pixels per frame.
    pub velocity: (f64, f64),
}

/// A generated sequence with its ground-truth motion.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSequence {
    pub frames: FrameSequence,
    pub pan_velocity: f64,
    pub sprites: Vec<SpriteTrack>,
}

/// Gaussian-smoothed white noise on an `h × w` torus, scaled to unit variance.
fn smooth_noise(h: usize, w: usize, sigma: f64, rng: &mut RunRng) -> Vec<f64> {
    let noise: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * noise[y * w + wrap(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * rows[wrap(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    out.iter().map(|v| (v - mean) / sd).collect()
}

/// Colored multi-scale noise, periodic in both directions so circular shifts
/// are seamless. Its autocorrelation decays with displacement at every scale.
fn texture(h: usize, w: usize, rng: &mut RunRng) -> Vec<f32> {
    const SCALES: [(f64, f64); 3] = [(1.5, 0.45), (4.0, 0.35), (10.0, 0.2)];
    let mut raw = vec![0.0f64; 3 * h * w];
    for &(sigma, weight) in &SCALES {
        let fields: Vec<Vec<f64>> = (0..3).map(|_| smooth_noise(h, w, sigma, rng)).collect();
        for c in 0..3 {
            let mix: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            for i in 0..h * w {
                raw[c * h * w + i] += weight * (0..3).map(|j| mix[j] * fields[j][i]).sum::<f64>();
            }
        }
    }
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-9);
    raw.iter().map(|&v| (0.05 + 0.9 * (v - lo) / span) as f32).collect()
}

fn shifted_column(tex: &[f32], h: usize, w: usize, c: usize, y: usize, x: usize, shift: f64) -> f32 {
    let pos = (x as f64 - shift).rem_euclid(w as f64);
    let x0 = pos.floor() as usize % w;
    let frac = pos - pos.floor();
    let a = tex[(c * h + y) * w + x0];
    if frac == 0.0 {
        return a;
    }
    let b = tex[(c * h + y) * w + (x0 + 1) % w];
    (a as f64 * (1.0 - frac) + b as f64 * frac) as f32
}

fn render(tex: &[f32], spec: &SynthSpec, sprites: &[SpriteTrack], k: usize) -> Frame {
    let (h, w) = spec.canvas;
    let shift = spec.pan_velocity * k as f64;
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data[(c * h + y) * w + x] = shifted_column(tex, h, w, c, y, x, shift);
            }
        }
    }
    for s in sprites {
        let cy = (s.start.0 + s.velocity.0 * k as f64).rem_euclid(h as f64).floor() as usize;
        let cx = (s.start.1 + s.velocity.1 * k as f64).rem_euclid(w as f64).floor() as usize;
        for dy in 0..s.size {
            for dx in 0..s.size {
                let (y, x) = ((cy + dy) % h, (cx + dx) % w);
                for c in 0..3 {
                    data[(c * h + y) * w + x] = s.color[c];
                }
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data).unwrap()
}

/// Generates `spec.n_sequences` sequences; deterministic in `(spec, rng state)`.
pub fn synth_generate(spec: &SynthSpec, rng: &mut RunRng) -> Result<Vec<SynthSequence>> {
    spec.validate()?;
    let (h, w) = spec.canvas;
    let mut out = Vec::with_capacity(spec.n_sequences);
    for i in 0..spec.n_sequences {
        let mut tex_rng = RunRng::seed_from_u64(spec.texture_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
        let tex = texture(h, w, &mut tex_rng);
        let (vlo, vhi) = spec.sprite_velocity_range;
        let sprites: Vec<SpriteTrack> = (0..spec.n_sprites)
            .map(|_| {
                let speed = if vhi > vlo { rng.random_range(vlo..vhi) } else { vlo };
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                SpriteTrack {
                    size: rng.random_range(4..=(h.min(w) / 6).max(4)),
                    color: [rng.random(), rng.random(), rng.random()],
                    start: (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)),
                    velocity: (speed * angle.sin(), speed * angle.cos()),
                }
            })
            .collect();
        let frames: Vec<Frame> = (0..spec.length).map(|k| render(&tex, spec, &sprites, k)).collect();
        out.push(SynthSequence {
            frames: FrameSequence::from_frames(&frames, format!("seq{i:04}"), 0)?,
            pan_velocity: spec.pan_velocity,
            sprites,
        });
    }
    Ok(out)
}

/// One generated sequence per `(spec, sequence)` pair, cycling through the
/// pan velocities so each velocity gets an equal share.
pub fn synth_mixed(base: &SynthSpec, pans: &[f64], rng: &mut RunRng) -> Result<Vec<SynthSequence>> {
    if pans.is_empty() {
        return Err(Error::Config("at least one pan velocity is required".into()));
    }
    let mut out = Vec::with_capacity(base.n_sequences);
    for i in 0..base.n_sequences {
        let spec = SynthSpec {
            pan_velocity: pans[i % pans.len()],
            n_sequences: 1,
            texture_seed: base.texture_seed.wrapping_add(i as u64 * 7919),
            ..base.clone()
        };
        let mut seq = synth_generate(&spec, rng)?.remove(0);
        seq.frames.source_id = format!("seq{i:04}");
        out.push(seq);
    }
    Ok(out)
}

/// Writes `<root>/<sequence_id>/<frame>.png` plus `motion.json`.
pub fn write_dataset(root: &Path, seqs: &[SynthSequence]) -> Result<()> {
    let mut motion = BTreeMap::new();
    for s in seqs {
        let dir = root.join(&s.frames.source_id);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (k, f) in s.frames.frames().iter().enumerate() {
            let path = dir.join(format!("{k:06}.png"));
            crate::data::frame_to_image(f)
                .save(&path)
                .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))?;
        }
        motion.insert(s.frames.source_id.clone(), s.pan_velocity);
    }
    let path = root.join("motion.json");
    std::fs::write(&path, serde_json::to_string_pretty(&motion)?).map_err(io_err(&path))?;
    Ok(())
}

pub fn read_motion(root: &Path) -> Result<BTreeMap<String, f64>> {
    let path = root.join("motion.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}
