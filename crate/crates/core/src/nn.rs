//! Parameter storage and the layer primitives shared by the networks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vidpred_tensor::{power_iteration, BatchStats, Conv3dSpec, Graph, Real, Tensor, Var};

use crate::error::{Error, Result};

pub type RunRng = ChaCha8Rng;

/// Named, ordered tensors: trainable parameters or running buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.values)
    }

    /// Puts every tensor on the graph, as gradient-collecting parameters or
    /// as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if trainable {
                    g.param(i, v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect()
    }

    /// Replaces values from `(name, tensor)` pairs, requiring every name to be
    /// present with an identical shape.
    pub fn load_named(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                entries.len()
            )));
        }
        for (name, t) in entries {
            let i = self
                .index_of(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected entry `{name}`")))?;
            if self.values[i].shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
        }
    }

    /// Order-sensitive digest of every bit of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.values {
            for x in v.data() {
                let bits = x.to_f64().unwrap().to_bits();
                h ^= bits;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Mutable forward-pass context: mode flags, the noise stream, and running
/// statistic updates awaiting commit.
pub struct Ctx<'a, T> {
    /// Batch statistics in batch norm and power-iteration refresh in spectral norm.
    pub training: bool,
    /// Dropout noise in the generator's top-down blocks.
    pub noise: bool,
    pub rng: &'a mut RunRng,
    pub(crate) bn_updates: Vec<(usize, usize, BatchStats<T>)>,
    pub(crate) sn_updates: Vec<(usize, Vec<T>)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(training: bool, noise: bool, rng: &'a mut RunRng) -> Self {
        Ctx {
            training,
            noise,
            rng,
            bn_updates: Vec::new(),
            sn_updates: Vec::new(),
        }
    }

    pub fn eval(rng: &'a mut RunRng, noise: bool) -> Self {
        Self::new(false, noise, rng)
    }

    /// Pending buffer updates produced by the forward pass.
    pub fn take_updates(&mut self) -> BufferUpdates<T> {
        BufferUpdates {
            bn: std::mem::take(&mut self.bn_updates),
            sn: std::mem::take(&mut self.sn_updates),
        }
    }
}

/// Running-statistic updates from one training-mode forward pass.
pub struct BufferUpdates<T> {
    bn: Vec<(usize, usize, BatchStats<T>)>,
    sn: Vec<(usize, Vec<T>)>,
}

impl<T: Real> BufferUpdates<T> {
    pub fn apply(self, buffers: &mut ParamSet<T>, momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        for (mi, vi, stats) in self.bn {
            for (r, &s) in buffers.get_mut(mi).data_mut().iter_mut().zip(&stats.mean) {
                *r = (T::one() - m) * *r + m * s;
            }
            for (r, &s) in buffers.get_mut(vi).data_mut().iter_mut().zip(&stats.var) {
                *r = (T::one() - m) * *r + m * s;
            }
        }
        for (ui, u) in self.sn {
            buffers.get_mut(ui).data_mut().copy_from_slice(&u);
        }
    }
}

pub(crate) fn he_normal<T: Real>(shape: &[usize], rng: &mut RunRng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(z * std)
    })
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: Option<usize>,
    pub spec: Conv3dSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        spec: Conv3dSpec,
        bias: bool,
        rng: &mut RunRng,
    ) -> Self {
        let w = params.add(
            format!("{name}.weight"),
            he_normal(&[cout, cin, kernel[0], kernel[1], kernel[2]], rng),
        );
        let b = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv { w, b, spec }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        Ok(g.conv3d(x, p[self.w], self.b.map(|b| p[b]), self.spec)?)
    }
}

pub(crate) const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(params: &mut ParamSet<T>, buffers: &mut ParamSet<T>, name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            mean: buffers.add(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            var: buffers.add(format!("{name}.running_var"), Tensor::ones(&[c])),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        buffers: &ParamSet<T>,
        x: Var,
        ctx: &mut Ctx<'_, T>,
    ) -> Result<Var> {
        let eps = T::from_f64_lossy(BN_EPS);
        if ctx.training {
            let (y, stats) = g.batch_norm_train(x, p[self.gamma], p[self.beta], eps)?;
            ctx.bn_updates.push((self.mean, self.var, stats));
            Ok(y)
        } else {
            Ok(g.batch_norm_eval(
                x,
                p[self.gamma],
                p[self.beta],
                buffers.get(self.mean).data(),
                buffers.get(self.var).data(),
                eps,
            )?)
        }
    }
}

pub const SN_EPS: f64 = 1e-12;

/// Convolution whose kernel is divided by its estimated spectral norm.
#[derive(Clone, Debug)]
pub(crate) struct SnConv {
    pub conv: Conv,
    /// Left singular vector estimate; `None` when spectral norm is disabled.
    pub u: Option<usize>,
}

impl SnConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        buffers: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        spec: Conv3dSpec,
        spectral: bool,
        warmup_iters: usize,
        rng: &mut RunRng,
    ) -> Self {
        let conv = Conv::new(params, name, cin, cout, kernel, spec, true, rng);
        let u = spectral.then(|| {
            let init: Vec<T> = (0..cout)
                .map(|_| T::from_f64_lossy(rng.random::<f64>() - 0.5))
                .collect();
            let (u, _, _) = power_iteration(params.get(conv.w), &init, warmup_iters, T::from_f64_lossy(SN_EPS));
            buffers.add(format!("{name}.sn_u"), Tensor::from_vec(&[cout], u).unwrap())
        });
        SnConv { conv, u }
    }

    /// The kernel actually applied, `w / σ(w)`.
    pub fn effective_weight<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        buffers: &ParamSet<T>,
        ctx: &mut Ctx<'_, T>,
    ) -> Result<Var> {
        let w = p[self.conv.w];
        let Some(ui) = self.u else { return Ok(w) };
        let eps = T::from_f64_lossy(SN_EPS);
        let iters = usize::from(ctx.training);
        let (u, v) = if iters > 0 {
            let (u, v, _) = power_iteration(g.value(w), buffers.get(ui).data(), 1, eps);
            ctx.sn_updates.push((ui, u.clone()));
            (u, v)
        } else {
            // v consistent with the stored u, without refreshing u.
            let wt = g.value(w);
            let rows = wt.shape()[0];
            let cols = wt.numel() / rows;
            let u = buffers.get(ui).data().to_vec();
            let mut v = vec![T::zero(); cols];
            for r in 0..rows {
                for c in 0..cols {
                    v[c] = v[c] + wt.data()[r * cols + c] * u[r];
                }
            }
            let n = v.iter().map(|&x| x * x).sum::<T>().sqrt() + eps;
            v.iter_mut().for_each(|x| *x = *x / n);
            (u, v)
        };
        Ok(g.spectral_normalize(w, &u, &v, eps)?)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        buffers: &ParamSet<T>,
        x: Var,
        ctx: &mut Ctx<'_, T>,
    ) -> Result<Var> {
        let w = self.effective_weight(g, p, buffers, ctx)?;
        Ok(g.conv3d(x, w, self.conv.b.map(|b| p[b]), self.conv.spec)?)
    }
}

/// Inverted dropout: zeroes each element with probability `rate` and scales
/// survivors by `1/(1-rate)`.
pub(crate) fn dropout<T: Real>(g: &mut Graph<T>, x: Var, rate: f64, rng: &mut RunRng) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mask = Tensor::from_fn(g.shape(x), |_| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    });
    Ok(g.mul_const(x, mask)?)
}
