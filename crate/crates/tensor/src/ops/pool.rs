use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Graph<T> {
    /// Non-overlapping `f×f` spatial average pooling; H and W must divide by `f`.
    pub fn avg_pool_spatial(&mut self, x: Var, f: usize) -> Result<Var> {
        let [b, c, t, h, w] = self.value(x).dims5()?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(TensorError::Shape(format!(
                "avg pool factor {f} does not divide {h}x{w}"
            )));
        }
        let (ho, wo) = (h / f, w / f);
        let norm = T::one() / T::from_usize(f * f).unwrap();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * c * t * ho * wo];
        for p in 0..b * c * t {
            for y in 0..h {
                for xq in 0..w {
                    let o = p * ho * wo + (y / f) * wo + xq / f;
                    out[o] = out[o] + src[p * h * w + y * w + xq] * norm;
                }
            }
        }
        let out = Tensor::from_vec(&[b, c, t, ho, wo], out)?;
        Ok(self.op(
            &[x],
            out,
            Box::new(move |a| {
                let g = a.grad.data();
                let gx = Tensor::from_fn(a.inputs[0].shape(), |i| {
                    let xq = i % w;
                    let y = (i / w) % h;
                    let p = i / (h * w);
                    g[p * ho * wo + (y / f) * wo + xq / f] * norm
                });
                vec![Some(gx)]
            }),
        ))
    }

    /// Average over the time axis, keeping it as extent 1.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let [b, c, t, h, w] = self.value(x).dims5()?;
        let plane = h * w;
        let norm = T::one() / T::from_usize(t).unwrap();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * c * plane];
        for bc in 0..b * c {
            for ti in 0..t {
                let base = (bc * t + ti) * plane;
                for i in 0..plane {
                    out[bc * plane + i] = out[bc * plane + i] + src[base + i];
                }
            }
        }
        let tt = T::from_usize(t).unwrap();
        for v in &mut out {
            *v = *v / tt;
        }
        let out = Tensor::from_vec(&[b, c, 1, h, w], out)?;
        Ok(self.op(
            &[x],
            out,
            Box::new(move |a| {
                let g = a.grad.data();
                let gx = Tensor::from_fn(a.inputs[0].shape(), |i| {
                    let bc = i / (t * plane);
                    g[bc * plane + i % plane] * norm
                });
                vec![Some(gx)]
            }),
        ))
    }

    /// Spatial max pooling with window `k` and stride `s` (floor mode, no padding).
    pub fn max_pool_spatial(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let [b, c, t, h, w] = self.value(x).dims5()?;
        if k == 0 || s == 0 || h < k || w < k {
            return Err(TensorError::Shape(format!(
                "max pool window {k} stride {s} does not fit {h}x{w}"
            )));
        }
        let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * t * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * t * ho * wo);
        for p in 0..b * c * t {
            for y in 0..ho {
                for xq in 0..wo {
                    let mut best = p * h * w + y * s * w + xq * s;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = p * h * w + (y * s + dy) * w + xq * s + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_vec(&[b, c, t, ho, wo], out)?;
        Ok(self.op(
            &[x],
            out,
            Box::new(move |a| {
                let mut gx = Tensor::zeros(a.inputs[0].shape());
                let d = gx.data_mut();
                for (&i, &g) in argmax.iter().zip(a.grad.data()) {
                    d[i] = d[i] + g;
                }
                vec![Some(gx)]
            }),
        ))
    }
}
