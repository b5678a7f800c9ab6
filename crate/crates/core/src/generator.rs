//! Hierarchical residual next-frame generator.
//!
//! Each level `l` has a bottom-up block that halves the spatial size, a chain
//! of three lateral blocks that collapses the remaining time axis into a
//! single next-state step, and two top-down blocks that upsample the state
//! (with the top-down output of level `l+1` concatenated) back to the
//! resolution of level `l-1`. A 3×3 convolution and a sigmoid turn the
//! bottom level's top-down output into the predicted frame.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use vidpred_tensor::{Conv3dSpec, Graph, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::frames::{Frame, FrameSequence, INPUT_FRAMES};
use crate::nn::{dropout, BatchNorm, Conv, Ctx, ParamSet, RunRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    Dropout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    pub rate: f64,
    /// 1-based levels whose top-down blocks receive dropout.
    pub levels_applied: Vec<usize>,
    pub active_at_inference: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            mode: NoiseMode::Dropout,
            rate: 0.5,
            levels_applied: vec![3, 4],
            active_at_inference: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutActivation {
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub input_t: usize,
    /// Temporal stride of each level's bottom-up block.
    pub temporal_strides: Vec<usize>,
    pub noise: NoiseSpec,
    pub out_activation: OutActivation,
    pub bn_momentum: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            levels: 4,
            channels: vec![64, 128, 256, 512],
            input_t: INPUT_FRAMES,
            temporal_strides: vec![1, 2, 2, 2],
            noise: NoiseSpec::default(),
            out_activation: OutActivation::Sigmoid,
            bn_momentum: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn with_channels(channels: Vec<usize>) -> Self {
        GeneratorConfig {
            levels: channels.len(),
            channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("generator: {m}")));
        if self.levels == 0 || self.levels != self.channels.len() {
            return bad(format!(
                "levels ({}) must equal the number of channel widths ({})",
                self.levels,
                self.channels.len()
            ));
        }
        if self.temporal_strides.len() != self.levels {
            return bad("one temporal stride per level is required".into());
        }
        if self.channels.contains(&0) || self.temporal_strides.contains(&0) {
            return bad("channel widths and strides must be positive".into());
        }
        if self.input_t == 0 {
            return bad("input_t must be positive".into());
        }
        if !(0.0..1.0).contains(&self.noise.rate) {
            return bad(format!("noise rate {} outside [0, 1)", self.noise.rate));
        }
        if let Some(l) = self.noise.levels_applied.iter().find(|&&l| l == 0 || l > self.levels) {
            return bad(format!("noise level {l} outside 1..={}", self.levels));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum outside [0, 1]".into());
        }
        Ok(())
    }

    /// Temporal extent of `u_l` for `l = 0..=levels`.
    pub fn temporal_extents(&self) -> Vec<usize> {
        let mut t = vec![self.input_t];
        for &s in &self.temporal_strides {
            let prev = *t.last().unwrap();
            t.push((prev - 1) / s + 1);
        }
        t
    }

    /// Spatial size of level `l` features for an `h×w` input; errors when the
    /// input does not divide by `2^levels`.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.levels;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Input(format!(
                "input {h}x{w} is not divisible by 2^{} = {m}",
                self.levels
            )));
        }
        Ok(())
    }

    /// Output channel width of the top-down output `d_l` (1-based `l`).
    fn td_out_channels(&self, l: usize) -> usize {
        self.channels[l.saturating_sub(2)]
    }
}

/// Temporal kernel of each of the three lateral blocks so that a time axis of
/// extent `t` shrinks to 1 through unpadded temporal convolutions.
pub fn lateral_temporal_kernels(t: usize) -> [usize; 3] {
    let mut remaining = t;
    let mut out = [1; 3];
    for (i, k) in out.iter_mut().enumerate() {
        *k = if i == 2 { remaining } else { remaining.min(3) };
        remaining = remaining + 1 - *k;
    }
    out
}

#[derive(Clone, Debug)]
struct Residual {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    skip: Option<Conv>,
    /// Keep only the last `n` input frames on the skip path.
    skip_last: Option<usize>,
}

#[derive(Clone, Debug)]
struct UpBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    skip: Conv,
}

#[derive(Clone, Debug)]
struct Level {
    bu: Residual,
    lat: Vec<Residual>,
    td1: Residual,
    td2: UpBlock,
    noisy: bool,
}

#[derive(Clone, Debug)]
pub struct Generator<T: Real> {
    config: GeneratorConfig,
    params: ParamSet<T>,
    buffers: ParamSet<T>,
    levels: Vec<Level>,
    head: Conv,
}

const K333: [usize; 3] = [3, 3, 3];
const K133: [usize; 3] = [1, 3, 3];
const K111: [usize; 3] = [1, 1, 1];

impl<T: Real> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RunRng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut params = ParamSet::default();
        let mut buffers = ParamSet::default();
        let p = &mut params;
        let b = &mut buffers;
        let ext = config.temporal_extents();
        let mut levels = Vec::with_capacity(config.levels);
        for li in 0..config.levels {
            let l = li + 1;
            let c = config.channels[li];
            let cin = if li == 0 { 3 } else { config.channels[li - 1] };
            let st = config.temporal_strides[li];
            let down = Conv3dSpec::new([st, 2, 2], [1, 1, 1]);
            let bu = Residual {
                conv1: Conv::new(p, &format!("level{l}.bu.conv1"), cin, c, K333, down, false, rng),
                bn1: BatchNorm::new(p, b, &format!("level{l}.bu.bn1"), c),
                conv2: Conv::new(p, &format!("level{l}.bu.conv2"), c, c, K333, Conv3dSpec::same(K333), false, rng),
                bn2: BatchNorm::new(p, b, &format!("level{l}.bu.bn2"), c),
                skip: Some(Conv::new(
                    p,
                    &format!("level{l}.bu.skip"),
                    cin,
                    c,
                    K111,
                    Conv3dSpec::new([st, 2, 2], [0, 0, 0]),
                    false,
                    rng,
                )),
                skip_last: None,
            };
            let mut t = ext[l];
            let mut lat = Vec::with_capacity(3);
            for (j, &kt) in lateral_temporal_kernels(t).iter().enumerate() {
                let t_out = t + 1 - kt;
                let k2 = if t_out >= 3 { 3 } else { 1 };
                let n = format!("level{l}.lat{}", j + 1);
                lat.push(Residual {
                    conv1: Conv::new(
                        p,
                        &format!("{n}.conv1"),
                        c,
                        c,
                        [kt, 3, 3],
                        Conv3dSpec::new([1, 1, 1], [0, 1, 1]),
                        false,
                        rng,
                    ),
                    bn1: BatchNorm::new(p, b, &format!("{n}.bn1"), c),
                    conv2: Conv::new(p, &format!("{n}.conv2"), c, c, [k2, 3, 3], Conv3dSpec::same([k2, 3, 3]), false, rng),
                    bn2: BatchNorm::new(p, b, &format!("{n}.bn2"), c),
                    skip: None,
                    skip_last: (t_out != t).then_some(t_out),
                });
                t = t_out;
            }
            let cs = if l < config.levels {
                c + config.td_out_channels(l + 1)
            } else {
                c
            };
            let co = config.td_out_channels(l);
            let same2 = Conv3dSpec::same(K133);
            let td1 = Residual {
                conv1: Conv::new(p, &format!("level{l}.td1.conv1"), cs, c, K133, same2, false, rng),
                bn1: BatchNorm::new(p, b, &format!("level{l}.td1.bn1"), c),
                conv2: Conv::new(p, &format!("level{l}.td1.conv2"), c, c, K133, same2, false, rng),
                bn2: BatchNorm::new(p, b, &format!("level{l}.td1.bn2"), c),
                skip: (cs != c).then(|| {
                    Conv::new(p, &format!("level{l}.td1.skip"), cs, c, K111, Conv3dSpec::same(K111), false, rng)
                }),
                skip_last: None,
            };
            let td2 = UpBlock {
                conv1: Conv::new(p, &format!("level{l}.td2.conv1"), c, 4 * co, K133, same2, false, rng),
                bn1: BatchNorm::new(p, b, &format!("level{l}.td2.bn1"), co),
                conv2: Conv::new(p, &format!("level{l}.td2.conv2"), co, co, K133, same2, false, rng),
                bn2: BatchNorm::new(p, b, &format!("level{l}.td2.bn2"), co),
                skip: Conv::new(p, &format!("level{l}.td2.skip"), c, 4 * co, K111, Conv3dSpec::same(K111), false, rng),
            };
            levels.push(Level {
                bu,
                lat,
                td1,
                td2,
                noisy: config.noise.levels_applied.contains(&l),
            });
        }
        let head = Conv::new(p, "head", config.channels[0], 3, K133, Conv3dSpec::same(K133), true, rng);
        Ok(Generator {
            config,
            params,
            buffers,
            levels,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamSet<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.buffers
    }

    /// Parameter slot of the prediction head's kernel and bias.
    pub fn head_slots(&self) -> (usize, usize) {
        (self.head.w, self.head.b.expect("head has bias"))
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    fn residual(&self, blk: &Residual, g: &mut Graph<T>, p: &[Var], x: Var, ctx: &mut Ctx<'_, T>, noise: bool) -> Result<Var> {
        let h = blk.conv1.forward(g, p, x)?;
        let h = blk.bn1.forward(g, p, &self.buffers, h, ctx)?;
        let h = g.relu(h);
        let h = blk.conv2.forward(g, p, h)?;
        let h = blk.bn2.forward(g, p, &self.buffers, h, ctx)?;
        let mut s = x;
        if let Some(n) = blk.skip_last {
            let t = g.shape(s)[2];
            s = g.slice_time(s, t - n, n)?;
        }
        if let Some(proj) = &blk.skip {
            s = proj.forward(g, p, s)?;
        }
        let mut y = g.add(h, s)?;
        if noise {
            y = dropout(g, y, self.config.noise.rate, ctx.rng)?;
        }
        Ok(g.relu(y))
    }

    fn level(&self, l: usize) -> Result<&Level> {
        l.checked_sub(1)
            .and_then(|i| self.levels.get(i))
            .ok_or_else(|| Error::Input(format!("level {l} outside 1..={}", self.config.levels)))
    }

    fn noise_on(&self, lvl: &Level, ctx: &Ctx<'_, T>) -> bool {
        lvl.noisy && ctx.noise && self.config.noise.rate > 0.0
    }

    /// `u_l = BU_l(u_{l-1})`: halves H and W, applies the level's temporal
    /// stride, and widens to `channels[l]`.
    pub fn bottom_up(&self, g: &mut Graph<T>, p: &[Var], l: usize, u_prev: Var, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let lvl = self.level(l)?;
        let [_, c, _, h, w] = g.value(u_prev).dims5()?;
        let expect_c = if l == 1 { 3 } else { self.config.channels[l - 2] };
        if c != expect_c || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Input(format!(
                "bottom-up level {l} got {:?}, expects {expect_c} channels and even H, W",
                g.shape(u_prev)
            )));
        }
        self.residual(&lvl.bu, g, p, u_prev, ctx, false)
    }

    /// `s_l = [LAT_3(LAT_2(LAT_1(u_l))), d_{l+1}]`, with the top-down term
    /// absent at the top level. The result has temporal extent 1.
    pub fn lateral_predict(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        l: usize,
        u: Var,
        d_above: Option<Var>,
        ctx: &mut Ctx<'_, T>,
    ) -> Result<Var> {
        let lvl = self.level(l)?;
        let mut x = u;
        for blk in &lvl.lat {
            x = self.residual(blk, g, p, x, ctx, false)?;
        }
        match (d_above, l == self.config.levels) {
            (None, true) => Ok(x),
            (Some(d), false) => {
                let (xs, ds) = (g.shape(x).to_vec(), g.shape(d).to_vec());
                if xs[0] != ds[0] || xs[2..] != ds[2..] {
                    return Err(Error::Input(format!(
                        "level {l}: lateral output {xs:?} and top-down input {ds:?} differ outside channels"
                    )));
                }
                Ok(g.concat_channels(&[x, d])?)
            }
            (None, false) => Err(Error::Input(format!("level {l} needs the top-down input from level {}", l + 1))),
            (Some(_), true) => Err(Error::Input("the top level has no top-down input".into())),
        }
    }

    /// `d_l = TD_{l,2}(TD_{l,1}(s_l))`: doubles H and W via pixel shuffle.
    pub fn top_down(&self, g: &mut Graph<T>, p: &[Var], l: usize, s: Var, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let lvl = self.level(l)?;
        if g.shape(s)[2] != 1 {
            return Err(Error::Input(format!("top-down input must have temporal extent 1, got {:?}", g.shape(s))));
        }
        let noise = self.noise_on(lvl, ctx);
        let x = self.residual(&lvl.td1, g, p, s, ctx, noise)?;
        let up = &lvl.td2;
        let h = up.conv1.forward(g, p, x)?;
        let h = g.pixel_shuffle(h, 2)?;
        let h = up.bn1.forward(g, p, &self.buffers, h, ctx)?;
        let h = g.relu(h);
        let h = up.conv2.forward(g, p, h)?;
        let h = up.bn2.forward(g, p, &self.buffers, h, ctx)?;
        let sk = up.skip.forward(g, p, x)?;
        let sk = g.pixel_shuffle(sk, 2)?;
        let mut y = g.add(h, sk)?;
        if noise {
            y = dropout(g, y, self.config.noise.rate, ctx.rng)?;
        }
        Ok(g.relu(y))
    }

    /// Full pass on a `(B, 3, input_t, H, W)` batch; returns `(B, 3, 1, H, W)`
    /// frames in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], clips: Var, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let [_, c, t, h, w] = g.value(clips).dims5()?;
        if c != 3 || t != self.config.input_t {
            return Err(Error::Input(format!(
                "generator input must be (B, 3, {}, H, W), got {:?}",
                self.config.input_t,
                g.shape(clips)
            )));
        }
        self.config.check_input(h, w)?;
        let mut us = Vec::with_capacity(self.config.levels);
        let mut u = clips;
        for l in 1..=self.config.levels {
            u = self.bottom_up(g, p, l, u, ctx)?;
            us.push(u);
        }
        let mut d: Option<Var> = None;
        for l in (1..=self.config.levels).rev() {
            let s = self.lateral_predict(g, p, l, us[l - 1], d, ctx)?;
            d = Some(self.top_down(g, p, l, s, ctx)?);
        }
        let out = self.head.forward(g, p, d.unwrap())?;
        Ok(match self.config.out_activation {
            OutActivation::Sigmoid => g.sigmoid(out),
        })
    }

    /// Next frame for one 8-frame clip (batch norm in inference mode), kept
    /// strictly inside (0, 1) after rounding to f32.
    pub fn generate_next_frame(&self, clip: &FrameSequence, rng: &mut RunRng, noise: bool) -> Result<Frame> {
        if clip.len() != self.config.input_t {
            return Err(Error::Input(format!(
                "generator needs {} input frames, got {}",
                self.config.input_t,
                clip.len()
            )));
        }
        let mut g = Graph::<T>::new();
        let p = self.bind(&mut g, false);
        let t = clip.tensor();
        let s = t.shape();
        let x = g.constant(t.cast::<T>().reshape(&[1, s[0], s[1], s[2], s[3]])?);
        let mut ctx = Ctx::eval(rng, noise && self.config.noise.active_at_inference);
        let y = self.forward(&mut g, &p, x, &mut ctx)?;
        let (h, w) = (s[2], s[3]);
        let lo = f32::MIN_POSITIVE;
        let hi = 1.0 - f32::EPSILON / 2.0;
        Ok(g.value(y).cast::<f32>().map(|v| v.clamp(lo, hi)).reshape(&[3, h, w])?)
    }

    /// Recursive prediction: step `k` conditions on the last `input_t` frames
    /// of the clip extended by predictions `1..k-1`.
    pub fn rollout(&self, clip: &FrameSequence, n_steps: usize, rng: &mut RunRng, noise: bool) -> Result<FrameSequence> {
        rollout_with(clip, n_steps, self.config.input_t, |c| self.generate_next_frame(c, rng, noise))
    }
}

/// Recursive rollout for any next-frame predictor.
pub fn rollout_with(
    clip: &FrameSequence,
    n_steps: usize,
    context: usize,
    mut predict: impl FnMut(&FrameSequence) -> Result<Frame>,
) -> Result<FrameSequence> {
    if n_steps == 0 {
        return Err(Error::Input("rollout needs n_steps >= 1".into()));
    }
    if clip.len() < context {
        return Err(Error::Input(format!(
            "rollout needs at least {context} frames, got {}",
            clip.len()
        )));
    }
    let mut window = clip.last(context)?;
    let mut preds = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let next = predict(&window)?;
        window = window.extended(std::slice::from_ref(&next))?.last(context)?;
        preds.push(next);
    }
    FrameSequence::from_frames(&preds, clip.source_id.clone(), clip.start_index + clip.len())
}

impl<T: Real> Generator<T> {
    /// Converts parameters and buffers to another element type.
    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            levels: self.levels.clone(),
            head: self.head.clone(),
        }
    }

    /// Zeroes the prediction head so every output is exactly `sigmoid(0)`.
    pub fn zero_head(&mut self) {
        let (w, b) = self.head_slots();
        *self.params.get_mut(w) = Tensor::zeros(self.params.get(w).shape());
        *self.params.get_mut(b) = Tensor::zeros(self.params.get(b).shape());
    }
}
