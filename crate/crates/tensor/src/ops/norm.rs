//! Batch normalization and spectral normalization.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-channel statistics of one training-mode batch-norm evaluation.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (the running estimate uses this).
    pub var: Vec<T>,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::Shape(format!(
            "batch norm needs (B, C, ...) input, got {shape:?}"
        )));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

impl<T: Real> Graph<T> {
    /// Batch norm with statistics over every axis except channels.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (b, c, inner) = channel_layout(self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::Shape(format!("batch norm affine params must be [{c}]")));
        }
        let n = b * inner;
        let nt = T::from_usize(n).unwrap();
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * inner;
                s = s + xd[base..base + inner].iter().copied().sum::<T>();
            }
            let m = s / nt;
            let mut ss = T::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * inner;
                for &v in &xd[base..base + inner] {
                    ss = ss + (v - m) * (v - m);
                }
            }
            mean[ci] = m;
            var[ci] = ss / nt;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * inner;
                for i in base..base + inner {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = gd[ci] * h + bd[ci];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let out = Tensor::from_vec(&shape, out)?;
        let unbiased = if n > 1 {
            let k = nt / T::from_usize(n - 1).unwrap();
            var.iter().map(|&v| v * k).collect()
        } else {
            var.clone()
        };
        let stats = BatchStats {
            mean,
            var: unbiased,
        };
        let v = self.op(
            &[x, gamma, beta],
            out,
            Box::new(move |a| {
                let gy = a.grad.data();
                let gamma = a.inputs[1].data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * inner;
                        for i in base..base + inner {
                            sum_g[ci] = sum_g[ci] + gy[i];
                            sum_gx[ci] = sum_gx[ci] + gy[i] * xhat[i];
                        }
                    }
                }
                let gx = a.needs[0].then(|| {
                    let mut gx = vec![T::zero(); gy.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let k = gamma[ci] * inv_std[ci] / nt;
                            let base = (bi * c + ci) * inner;
                            for i in base..base + inner {
                                gx[i] = k * (nt * gy[i] - sum_g[ci] - xhat[i] * sum_gx[ci]);
                            }
                        }
                    }
                    Tensor::from_vec(a.inputs[0].shape(), gx).unwrap()
                });
                vec![
                    gx,
                    Some(Tensor::from_vec(&[c], sum_gx).unwrap()),
                    Some(Tensor::from_vec(&[c], sum_g).unwrap()),
                ]
            }),
        );
        Ok((v, stats))
    }

    /// Batch norm with fixed (running) statistics; an affine map per channel.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (b, c, inner) = channel_layout(self.shape(x))?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::Shape(format!("running stats must have {c} entries")));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * inner;
                for i in base..base + inner {
                    out[i] = gd[ci] * (xd[i] - mean[ci]) * inv_std[ci] + bd[ci];
                }
            }
        }
        let out = Tensor::from_vec(&self.shape(x).to_vec(), out)?;
        Ok(self.op(
            &[x, gamma, beta],
            out,
            Box::new(move |a| {
                let gy = a.grad.data();
                let xd = a.inputs[0].data();
                let gamma = a.inputs[1].data();
                let mut gx = vec![T::zero(); gy.len()];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * inner;
                        for i in base..base + inner {
                            gx[i] = gy[i] * gamma[ci] * inv_std[ci];
                            gg[ci] = gg[ci] + gy[i] * (xd[i] - mean[ci]) * inv_std[ci];
                            gb[ci] = gb[ci] + gy[i];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(a.inputs[0].shape(), gx).unwrap()),
                    Some(Tensor::from_vec(&[c], gg).unwrap()),
                    Some(Tensor::from_vec(&[c], gb).unwrap()),
                ]
            }),
        ))
    }

    /// `w / σ` with `σ = uᵀ W v` where `W` is `w` flattened to
    /// `(out, rest)`. `u` and `v` are treated as constants.
    pub fn spectral_normalize(&mut self, w: Var, u: &[T], v: &[T], eps: T) -> Result<Var> {
        let shape = self.shape(w).to_vec();
        let rows = shape[0];
        let cols = self.value(w).numel() / rows.max(1);
        if u.len() != rows || v.len() != cols {
            return Err(TensorError::Shape(format!(
                "spectral norm vectors ({}, {}) do not match weight ({rows}, {cols})",
                u.len(),
                v.len()
            )));
        }
        let sigma_raw = bilinear(self.value(w).data(), u, v, cols);
        let clamped = sigma_raw < eps;
        let sigma = if clamped { eps } else { sigma_raw };
        let out = self.value(w).map(|x| x / sigma);
        let u = u.to_vec();
        let v = v.to_vec();
        Ok(self.op(
            &[w],
            out,
            Box::new(move |a| {
                let gy = a.grad.data();
                let wd = a.inputs[0].data();
                // d(w/σ) = dw/σ − (w/σ²) dσ, dσ = ⟨u vᵀ, dw⟩
                let mut gx: Vec<T> = gy.iter().map(|&g| g / sigma).collect();
                if !clamped {
                    let dot: T = gy.iter().zip(wd).map(|(&g, &x)| g * x).sum();
                    let k = dot / (sigma * sigma);
                    for r in 0..rows {
                        for col in 0..cols {
                            let i = r * cols + col;
                            gx[i] = gx[i] - k * u[r] * v[col];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(a.inputs[0].shape(), gx).unwrap())]
            }),
        ))
    }
}

fn bilinear<T: Real>(w: &[T], u: &[T], v: &[T], cols: usize) -> T {
    u.iter()
        .enumerate()
        .map(|(r, &ur)| ur * w[r * cols..(r + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum::<T>())
        .sum()
}

fn normalize<T: Real>(x: &mut [T], eps: T) {
    let n = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    for v in x.iter_mut() {
        *v = *v / (n + eps);
    }
}

/// Power iteration on `w` flattened to `(out, rest)`, warm-started from `u`.
/// Returns the updated `(u, v, σ)`.
pub fn power_iteration<T: Real>(w: &Tensor<T>, u: &[T], iters: usize, eps: T) -> (Vec<T>, Vec<T>, T) {
    let rows = w.shape()[0];
    let cols = w.numel() / rows.max(1);
    let wd = w.data();
    let mut u = u.to_vec();
    let mut v = vec![T::zero(); cols];
    for _ in 0..iters.max(1) {
        v.fill(T::zero());
        for r in 0..rows {
            for c in 0..cols {
                v[c] = v[c] + wd[r * cols + c] * u[r];
            }
        }
        normalize(&mut v, eps);
        for r in 0..rows {
            u[r] = wd[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum();
        }
        normalize(&mut u, eps);
    }
    let sigma = bilinear(wd, &u, &v, cols);
    (u, v, sigma)
}
