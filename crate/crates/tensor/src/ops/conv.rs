//! 3-D convolution over `(B, C, T, H, W)` volumes by im2col + gemm.
//!
//! 2-D convolutions are the `T = 1`, `kt = 1` special case.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    /// (time, height, width)
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Conv3dSpec { stride, padding }
    }

    /// Stride 1 with "same" padding for odd kernels.
    pub fn same(kernel: [usize; 3]) -> Self {
        Conv3dSpec {
            stride: [1, 1, 1],
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    pub fn output_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for d in 0..3 {
            let padded = input[d] + 2 * self.padding[d];
            if self.stride[d] == 0 || kernel[d] == 0 || padded < kernel[d] {
                return Err(TensorError::Shape(format!(
                    "conv kernel {kernel:?} stride {:?} padding {:?} does not fit input {input:?}",
                    self.stride, self.padding
                )));
            }
            out[d] = (padded - kernel[d]) / self.stride[d] + 1;
        }
        Ok(out)
    }

    fn is_pointwise(&self, kernel: [usize; 3]) -> bool {
        kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

struct Geometry {
    cin: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    spec: Conv3dSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.out.iter().product()
    }

    fn in_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }
}

fn for_each_col_entry(geo: &Geometry, mut f: impl FnMut(usize, Option<usize>)) {
    let [t_in, h_in, w_in] = geo.input;
    let [kt, kh, kw] = geo.kernel;
    let [t_out, h_out, w_out] = geo.out;
    let [st, sh, sw] = geo.spec.stride;
    let [pt, ph, pw] = geo.spec.padding;
    let l = geo.cols();
    let mut row = 0;
    for ci in 0..geo.cin {
        let chan = ci * t_in * h_in * w_in;
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let base = row * l;
                    let mut col = base;
                    for to in 0..t_out {
                        let ti = (to * st + dt) as isize - pt as isize;
                        if ti < 0 || ti >= t_in as isize {
                            for _ in 0..h_out * w_out {
                                f(col, None);
                                col += 1;
                            }
                            continue;
                        }
                        let tplane = chan + ti as usize * h_in * w_in;
                        for ho in 0..h_out {
                            let hi = (ho * sh + dh) as isize - ph as isize;
                            if hi < 0 || hi >= h_in as isize {
                                for _ in 0..w_out {
                                    f(col, None);
                                    col += 1;
                                }
                                continue;
                            }
                            let hrow = tplane + hi as usize * w_in;
                            for wo in 0..w_out {
                                let wi = (wo * sw + dw) as isize - pw as isize;
                                if wi < 0 || wi >= w_in as isize {
                                    f(col, None);
                                } else {
                                    f(col, Some(hrow + wi as usize));
                                }
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col<T: Real>(geo: &Geometry, x: &[T], col: &mut [T]) {
    for_each_col_entry(geo, |c, src| {
        col[c] = match src {
            Some(i) => x[i],
            None => T::zero(),
        }
    });
}

fn col2im<T: Real>(geo: &Geometry, col: &[T], gx: &mut [T]) {
    for_each_col_entry(geo, |c, src| {
        if let Some(i) = src {
            gx[i] = gx[i] + col[c];
        }
    });
}

fn geometry(x: &[usize], w: &[usize], spec: Conv3dSpec) -> Result<(usize, usize, Geometry)> {
    let (&[b, cin, t, h, wd], &[cout, wcin, kt, kh, kw]) = (x, w) else {
        return Err(TensorError::Shape(format!(
            "conv3d expects 5-D input and weight, got {x:?} and {w:?}"
        )));
    };
    if cin != wcin {
        return Err(TensorError::Shape(format!(
            "conv3d input has {cin} channels but weight expects {wcin}"
        )));
    }
    let out = spec.output_dims([t, h, wd], [kt, kh, kw])?;
    Ok((
        b,
        cout,
        Geometry {
            cin,
            input: [t, h, wd],
            kernel: [kt, kh, kw],
            out,
            spec,
        },
    ))
}

/// Forward convolution. `bias`, when present, has shape `(Cout,)`.
pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv3dSpec,
) -> Result<Tensor<T>> {
    let (batch, cout, geo) = geometry(x.shape(), w.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::Shape(format!(
                "conv3d bias shape {:?}, expected [{cout}]",
                b.shape()
            )));
        }
    }
    let (k, l) = (geo.rows(), geo.cols());
    let pointwise = spec.is_pointwise(geo.kernel);
    let mut out = vec![T::zero(); batch * cout * l];
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * l] };
    let xd = x.data();
    for bi in 0..batch {
        let xb = &xd[bi * geo.in_len()..(bi + 1) * geo.in_len()];
        let colref: &[T] = if pointwise {
            xb
        } else {
            im2col(&geo, xb, &mut col);
            &col
        };
        let ob = &mut out[bi * cout * l..(bi + 1) * cout * l];
        if let Some(b) = bias {
            for (c, chunk) in ob.chunks_mut(l).enumerate() {
                chunk.fill(b.data()[c]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            cout,
            k,
            l,
            T::one(),
            w.data(),
            k as isize,
            1,
            colref,
            l as isize,
            1,
            beta,
            ob,
            l as isize,
            1,
        );
    }
    let [to, ho, wo] = geo.out;
    Tensor::from_vec(&[batch, cout, to, ho, wo], out)
}

/// Gradients of a convolution w.r.t. (input, weight, bias), each computed
/// only when requested.
pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    spec: Conv3dSpec,
    needs: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (batch, cout, geo) = geometry(x.shape(), w.shape(), spec).expect("validated in forward");
    let (k, l) = (geo.rows(), geo.cols());
    let pointwise = spec.is_pointwise(geo.kernel);
    let xd = x.data();
    let gd = gout.data();
    let mut gx = needs[0].then(|| vec![T::zero(); x.numel()]);
    let mut gw = needs[1].then(|| vec![T::zero(); w.numel()]);
    let mut gb = needs[2].then(|| vec![T::zero(); cout]);
    let mut col = if pointwise || gw.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); k * l]
    };
    let mut gcol = if gx.is_some() && !pointwise {
        vec![T::zero(); k * l]
    } else {
        Vec::new()
    };
    for bi in 0..batch {
        let gob = &gd[bi * cout * l..(bi + 1) * cout * l];
        if let Some(gb) = gb.as_mut() {
            for (c, chunk) in gob.chunks(l).enumerate() {
                gb[c] = gb[c] + chunk.iter().copied().sum::<T>();
            }
        }
        let xb = &xd[bi * geo.in_len()..(bi + 1) * geo.in_len()];
        if let Some(gw) = gw.as_mut() {
            let colref: &[T] = if pointwise {
                xb
            } else {
                im2col(&geo, xb, &mut col);
                &col
            };
            // gw (Co×K) += gout_b (Co×L) · colᵀ (L×K)
            T::gemm(
                cout, l, k, T::one(), gob, l as isize, 1, colref, 1, l as isize, T::one(), gw,
                k as isize, 1,
            );
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx[bi * geo.in_len()..(bi + 1) * geo.in_len()];
            // gcol (K×L) = wᵀ (K×Co) · gout_b (Co×L)
            if pointwise {
                T::gemm(
                    k, cout, l, T::one(), w.data(), 1, k as isize, gob, l as isize, 1, T::one(),
                    gxb, l as isize, 1,
                );
            } else {
                T::gemm(
                    k, cout, l, T::one(), w.data(), 1, k as isize, gob, l as isize, 1, T::zero(),
                    &mut gcol, l as isize, 1,
                );
                col2im(&geo, &gcol, gxb);
            }
        }
    }
    (
        gx.map(|d| Tensor::from_vec(x.shape(), d).unwrap()),
        gw.map(|d| Tensor::from_vec(w.shape(), d).unwrap()),
        gb.map(|d| Tensor::from_vec(&[cout], d).unwrap()),
    )
}

impl<T: Real> Graph<T> {
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv3dSpec) -> Result<Var> {
        let out = conv3d_forward(self.value(x), self.value(w), bias.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.op(
            &inputs,
            out,
            Box::new(move |a| {
                let needs = [a.needs[0], a.needs[1], a.needs.get(2).copied().unwrap_or(false)];
                let (gx, gw, gb) = conv3d_backward(a.inputs[0], a.inputs[1], a.grad, spec, needs);
                let mut v = vec![gx, gw];
                if a.inputs.len() == 3 {
                    v.push(gb);
                }
                v
            }),
        ))
    }
}
