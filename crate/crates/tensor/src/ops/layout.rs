//! Channel concatenation, temporal slicing and sub-pixel rearrangement of
//! `(B, C, T, H, W)` tensors.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Rearranges `(B, C·r², T, H, W)` into `(B, C, T, H·r, W·r)`. Channel
/// `c·r² + i·r + j` lands at sub-pixel offset `(i, j)` of output channel `c`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [b, c_in, t, h, w] = x.dims5()?;
    if r == 0 || c_in % (r * r) != 0 {
        return Err(TensorError::Shape(format!(
            "pixel shuffle: {c_in} channels not divisible by r²={}",
            r * r
        )));
    }
    let c = c_in / (r * r);
    let (ho, wo) = (h * r, w * r);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let cs = ci * r * r + i * r + j;
                    for ti in 0..t {
                        let sbase = (((bi * c_in + cs) * t) + ti) * h * w;
                        let dbase = (((bi * c + ci) * t) + ti) * ho * wo;
                        for y in 0..h {
                            for xq in 0..w {
                                out[dbase + (y * r + i) * wo + xq * r + j] = src[sbase + y * w + xq];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, c, t, ho, wo], out)
}

/// Inverse of [`pixel_shuffle`] (space-to-depth).
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [b, c, t, ho, wo] = x.dims5()?;
    if r == 0 || ho % r != 0 || wo % r != 0 {
        return Err(TensorError::Shape(format!(
            "pixel unshuffle: spatial {ho}x{wo} not divisible by {r}"
        )));
    }
    let (h, w) = (ho / r, wo / r);
    let c_out = c * r * r;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let cd = ci * r * r + i * r + j;
                    for ti in 0..t {
                        let dbase = (((bi * c_out + cd) * t) + ti) * h * w;
                        let sbase = (((bi * c + ci) * t) + ti) * ho * wo;
                        for y in 0..h {
                            for xq in 0..w {
                                out[dbase + y * w + xq] = src[sbase + (y * r + i) * wo + xq * r + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, c_out, t, h, w], out)
}

fn concat_channels_values<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let [b, _, t, h, w] = parts[0].dims5()?;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let [pb, pc, pt, ph, pw] = p.dims5()?;
        if (pb, pt, ph, pw) != (b, t, h, w) {
            return Err(TensorError::Shape(format!(
                "concat: {:?} does not match {:?} outside the channel axis",
                p.shape(),
                parts[0].shape()
            )));
        }
        channels.push(pc);
    }
    let plane = t * h * w;
    let total: usize = channels.iter().sum();
    let mut out = Vec::with_capacity(b * total * plane);
    for bi in 0..b {
        for (p, &pc) in parts.iter().zip(&channels) {
            out.extend_from_slice(&p.data()[bi * pc * plane..(bi + 1) * pc * plane]);
        }
    }
    Tensor::from_vec(&[b, total, t, h, w], out)
}

/// Frames `start..start+len` of each `(B, C, T, H, W)` volume.
pub fn slice_time<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let [b, c, t, h, w] = x.dims5()?;
    if start + len > t || len == 0 {
        return Err(TensorError::Shape(format!(
            "time slice {start}..{} out of range for T={t}",
            start + len
        )));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(b * c * len * plane);
    for bc in 0..b * c {
        let base = (bc * t + start) * plane;
        out.extend_from_slice(&x.data()[base..base + len * plane]);
    }
    Tensor::from_vec(&[b, c, len, h, w], out)
}

/// Concatenates along the time axis.
pub fn concat_time<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let [b, c, _, h, w] = parts[0].dims5()?;
    let mut lens = Vec::new();
    for p in parts {
        let [pb, pc, pt, ph, pw] = p.dims5()?;
        if (pb, pc, ph, pw) != (b, c, h, w) {
            return Err(TensorError::Shape(format!(
                "time concat: {:?} does not match {:?}",
                p.shape(),
                parts[0].shape()
            )));
        }
        lens.push(pt);
    }
    let plane = h * w;
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(b * c * total * plane);
    for bc in 0..b * c {
        for (p, &pt) in parts.iter().zip(&lens) {
            out.extend_from_slice(&p.data()[bc * pt * plane..(bc + 1) * pt * plane]);
        }
    }
    Tensor::from_vec(&[b, c, total, h, w], out)
}

impl<T: Real> Graph<T> {
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = pixel_shuffle(self.value(x), r)?;
        Ok(self.op(
            &[x],
            out,
            Box::new(move |a| vec![Some(pixel_unshuffle(a.grad, r).unwrap())]),
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concat_channels_values(&values)?;
        Ok(self.op(
            parts,
            out,
            Box::new(|a| {
                let [b, total, t, h, w] = a.grad.dims5().unwrap();
                let plane = t * h * w;
                let mut offset = 0;
                a.inputs
                    .iter()
                    .map(|inp| {
                        let pc = inp.shape()[1];
                        let mut d = Vec::with_capacity(inp.numel());
                        for bi in 0..b {
                            let base = (bi * total + offset) * plane;
                            d.extend_from_slice(&a.grad.data()[base..base + pc * plane]);
                        }
                        offset += pc;
                        Some(Tensor::from_vec(inp.shape(), d).unwrap())
                    })
                    .collect()
            }),
        ))
    }

    pub fn concat_time(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concat_time(&values)?;
        Ok(self.op(
            parts,
            out,
            Box::new(|a| {
                let mut start = 0;
                a.inputs
                    .iter()
                    .map(|inp| {
                        let len = inp.shape()[2];
                        let g = slice_time(a.grad, start, len).unwrap();
                        start += len;
                        Some(g)
                    })
                    .collect()
            }),
        ))
    }

    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = slice_time(self.value(x), start, len)?;
        Ok(self.op(
            &[x],
            out,
            Box::new(move |a| {
                let [b, c, t, h, w] = a.inputs[0].dims5().unwrap();
                let plane = h * w;
                let mut g = vec![T::zero(); a.inputs[0].numel()];
                for bc in 0..b * c {
                    let dst = (bc * t + start) * plane;
                    let src = bc * len * plane;
                    g[dst..dst + len * plane]
                        .copy_from_slice(&a.grad.data()[src..src + len * plane]);
                }
                vec![Some(Tensor::from_vec(&[b, c, t, h, w], g).unwrap())]
            }),
        ))
    }
}
