//! Conditional patch discriminator over (input clip, candidate frame) pairs.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use vidpred_tensor::{power_iteration, Conv3dSpec, Graph, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamSet, RunRng, SnConv, SN_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub stage_blocks: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub spectral_norm: bool,
    /// Power iterations run on each kernel at construction.
    pub sn_warmup_iters: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            stage_blocks: vec![1, 2, 2, 2, 2],
            stage_channels: vec![64, 128, 512, 1024, 2048],
            spectral_norm: true,
            sn_warmup_iters: 20,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.is_empty() || self.stage_blocks.len() != self.stage_channels.len() {
            return Err(Error::Config(format!(
                "discriminator stage_blocks ({}) and stage_channels ({}) must be non-empty and equally long",
                self.stage_blocks.len(),
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.windows(2).any(|w| w[1] <= w[0]) || self.stage_channels[0] == 0 {
            return Err(Error::Config("discriminator channels must be strictly increasing".into()));
        }
        if self.stage_blocks.contains(&0) {
            return Err(Error::Config("every discriminator stage needs at least one block".into()));
        }
        Ok(())
    }

    /// Patch-grid size for an `h × w` input.
    pub fn logits_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = 1usize << self.stage_channels.len();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "discriminator input {h}x{w} is not divisible by {f}"
            )));
        }
        Ok((h / f, w / f))
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: SnConv,
    conv2: SnConv,
    skip: Option<SnConv>,
    pre_relu: bool,
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Real> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
    buffers: ParamSet<T>,
    stages: Vec<Vec<Block>>,
    head: SnConv,
}

const K333: [usize; 3] = [3, 3, 3];
const K111: [usize; 3] = [1, 1, 1];

impl<T: Real> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RunRng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut params = ParamSet::default();
        let mut buffers = ParamSet::default();
        let (p, b) = (&mut params, &mut buffers);
        let sn = config.spectral_norm;
        let it = config.sn_warmup_iters;
        let mut cin = 3;
        let mut stages = Vec::new();
        for (si, (&nb, &c)) in config.stage_blocks.iter().zip(&config.stage_channels).enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..nb {
                let n = format!("stage{}.block{}", si + 1, bi + 1);
                let same = Conv3dSpec::same(K333);
                blocks.push(Block {
                    conv1: SnConv::new(p, b, &format!("{n}.conv1"), cin, c, K333, same, sn, it, rng),
                    conv2: SnConv::new(p, b, &format!("{n}.conv2"), c, c, K333, same, sn, it, rng),
                    skip: (cin != c).then(|| {
                        SnConv::new(p, b, &format!("{n}.skip"), cin, c, K111, Conv3dSpec::same(K111), sn, it, rng)
                    }),
                    pre_relu: !(si == 0 && bi == 0),
                });
                cin = c;
            }
            stages.push(blocks);
        }
        let head = SnConv::new(p, b, "head", cin, 1, K111, Conv3dSpec::same(K111), sn, it, rng);
        Ok(Discriminator {
            config,
            params,
            buffers,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
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

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    /// Zeroes the final projection so every logit is exactly 0.
    pub fn zero_head(&mut self) {
        let w = self.head.conv.w;
        *self.params.get_mut(w) = Tensor::zeros(self.params.get(w).shape());
        if let Some(b) = self.head.conv.b {
            *self.params.get_mut(b) = Tensor::zeros(self.params.get(b).shape());
        }
    }

    fn block(&self, blk: &Block, g: &mut Graph<T>, p: &[Var], x: Var, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let h = if blk.pre_relu { g.relu(x) } else { x };
        let h = blk.conv1.forward(g, p, &self.buffers, h, ctx)?;
        let h = g.relu(h);
        let h = blk.conv2.forward(g, p, &self.buffers, h, ctx)?;
        let s = match &blk.skip {
            Some(proj) => proj.forward(g, p, &self.buffers, x, ctx)?,
            None => x,
        };
        Ok(g.add(h, s)?)
    }

    /// One residual block of stage `stage` (1-based), block `index` (1-based).
    pub fn residual_block_d(&self, g: &mut Graph<T>, p: &[Var], stage: usize, index: usize, x: Var, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let blk = stage
            .checked_sub(1)
            .and_then(|s| self.stages.get(s))
            .and_then(|b| index.checked_sub(1).and_then(|i| b.get(i)))
            .ok_or_else(|| Error::Input(format!("no discriminator block {stage}.{index}")))?;
        self.block(blk, g, p, x, ctx)
    }

    /// Scores `candidate` `(B, 3, 1, H, W)` given `clip` `(B, 3, t, H, W)`;
    /// returns patch logits `(B, N, M)`.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], candidate: Var, clip: Var, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let [bc, cc, tc, hc, wc] = g.value(candidate).dims5()?;
        let [bx, cx, _, hx, wx] = g.value(clip).dims5()?;
        if (bc, cc, tc) != (bx, 3, 1) || cx != 3 || (hc, wc) != (hx, wx) {
            return Err(Error::Input(format!(
                "candidate {:?} and clip {:?} do not form a (B, 3, 1|t, H, W) pair",
                g.shape(candidate),
                g.shape(clip)
            )));
        }
        let (n, m) = self.config.logits_hw(hx, wx)?;
        let mut h = g.concat_time(&[clip, candidate])?;
        for blocks in &self.stages {
            for blk in blocks {
                h = self.block(blk, g, p, h, ctx)?;
            }
            h = g.avg_pool_spatial(h, 2)?;
        }
        let h = g.relu(h);
        let h = self.head.forward(g, p, &self.buffers, h, ctx)?;
        let h = g.mean_time(h)?;
        Ok(g.reshape(h, &[bc, n, m])?)
    }

    /// Scores one frame against one clip with the stored spectral-norm state.
    pub fn discriminate(&self, candidate: &Tensor<f32>, clip: &Tensor<f32>, rng: &mut RunRng) -> Result<Tensor<f32>> {
        let mut g = Graph::<T>::new();
        let p = self.bind(&mut g, false);
        let lift = |t: &Tensor<f32>| -> Result<Tensor<T>> {
            let s = t.shape().to_vec();
            Ok(t.cast::<T>().reshape(&[1, s[0], s[1], s[2], s[3]])?)
        };
        let c = g.constant(lift(&candidate.clone().reshape(&[3, 1, candidate.shape()[1], candidate.shape()[2]])?)?);
        let x = g.constant(lift(clip)?);
        let mut ctx = Ctx::eval(rng, false);
        let y = self.forward(&mut g, &p, c, x, &mut ctx)?;
        let s = g.shape(y).to_vec();
        Ok(g.value(y).cast::<f32>().reshape(&s[1..])?)
    }

    /// Largest singular value of every normalised kernel, each estimated by
    /// power iteration on `w / σ̂`.
    pub fn normalized_spectral_norms(&self, iters: usize) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        let mut rng = RunRng::seed_from_u64(0);
        for sn in self.sn_convs() {
            let Some(_) = sn.u else { continue };
            let mut g = Graph::<T>::new();
            let p = self.bind(&mut g, false);
            let mut ctx = Ctx::eval(&mut rng, false);
            let w = sn.effective_weight(&mut g, &p, &self.buffers, &mut ctx).unwrap();
            let wv = g.value(w).cast::<f64>();
            let init = vec![1.0; wv.shape()[0]];
            let (_, _, s) = power_iteration(&wv, &init, iters, SN_EPS);
            out.push((self.params.names()[sn.conv.w].clone(), s));
        }
        out
    }

    fn sn_convs(&self) -> Vec<&SnConv> {
        let mut v = Vec::new();
        for blocks in &self.stages {
            for b in blocks {
                v.push(&b.conv1);
                v.push(&b.conv2);
                if let Some(s) = &b.skip {
                    v.push(s);
                }
            }
        }
        v.push(&self.head);
        v
    }

    /// Effective (normalised) kernels by parameter name.
    pub fn effective_weights(&self) -> Result<Vec<(String, Tensor<f64>)>> {
        let mut rng = RunRng::seed_from_u64(0);
        let mut out = Vec::new();
        for sn in self.sn_convs() {
            let mut g = Graph::<T>::new();
            let p = self.bind(&mut g, false);
            let mut ctx = Ctx::eval(&mut rng, false);
            let w = sn.effective_weight(&mut g, &p, &self.buffers, &mut ctx)?;
            out.push((self.params.names()[sn.conv.w].clone(), g.value(w).cast::<f64>()));
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            stages: self.stages.clone(),
            head: self.head.clone(),
        }
    }
}
