//! Fixed feature extractors for the perceptual loss and the perceptual
//! distance metric.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use vidpred_tensor::{Conv3dSpec, Graph, Real, Tensor, Var};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{he_normal, ParamSet, RunRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Stub,
    Vgg16,
    Alexnet,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stub" => Ok(BackboneKind::Stub),
            "vgg16" | "vgg" => Ok(BackboneKind::Vgg16),
            "alexnet" | "alex" => Ok(BackboneKind::Alexnet),
            _ => Err(Error::Config(format!("unknown backbone `{s}` (stub, vgg16, alexnet)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    /// Spatial convolution with bias, followed by nothing.
    Conv { w: usize, b: usize, spec: Conv3dSpec },
    Relu,
    MaxPool { k: usize, s: usize },
    AvgPool(usize),
    /// Emits the current activation as a feature block.
    Tap,
}

/// A frozen convolutional feature extractor applied per frame.
#[derive(Clone, Debug)]
pub struct Backbone<T: Real> {
    pub kind: BackboneKind,
    layers: Vec<Layer>,
    params: ParamSet<T>,
    /// Per-channel input affine `(x - shift) / scale`.
    shift: [f64; 3],
    scale: [f64; 3],
    /// Per-tap channel weights for the metric; `None` weights channels equally.
    lin: Option<Vec<Vec<T>>>,
    /// Multiplies every emitted feature map.
    pub output_scale: f64,
}

const STUB_WIDTHS: [usize; 3] = [8, 16, 32];

impl<T: Real> Backbone<T> {
    /// Seeded random three-block extractor for hermetic runs.
    pub fn stub(seed: u64) -> Self {
        let mut rng = RunRng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, &c) in STUB_WIDTHS.iter().enumerate() {
            if i > 0 {
                layers.push(Layer::AvgPool(2));
            }
            let w = params.add(format!("block{}.weight", i + 1), he_normal(&[c, cin, 1, 3, 3], &mut rng));
            let b = params.add(format!("block{}.bias", i + 1), Tensor::zeros(&[c]));
            layers.push(Layer::Conv {
                w,
                b,
                spec: Conv3dSpec::same([1, 3, 3]),
            });
            layers.extend([Layer::Relu, Layer::Tap]);
            cin = c;
        }
        Backbone {
            kind: BackboneKind::Stub,
            layers,
            params,
            shift: [0.5; 3],
            scale: [0.5; 3],
            lin: None,
            output_scale: 1.0,
        }
    }

    /// `φ(x) = x`: a single block that emits the input unchanged.
    pub fn identity() -> Self {
        Backbone {
            kind: BackboneKind::Stub,
            layers: vec![Layer::Tap],
            params: ParamSet::default(),
            shift: [0.0; 3],
            scale: [1.0; 3],
            lin: None,
            output_scale: 1.0,
        }
    }

    /// Loads a pretrained extractor from a weight container. The header
    /// metadata must carry `arch` (`vgg16` or `alexnet`); optional
    /// `input_shift`/`input_scale` arrays override the architecture defaults,
    /// and sections `lin.<k>` supply per-tap channel weights.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Input(format!("backbone weight file {} not found", path.display())));
        }
        let c = Container::load(path)?;
        let arch = c
            .meta
            .get("arch")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Checkpoint("weight file has no `arch` in its manifest".into()))?;
        let kind: BackboneKind = arch.parse()?;
        let mut bb = match kind {
            BackboneKind::Vgg16 => Self::vgg16_layout(),
            BackboneKind::Alexnet => Self::alexnet_layout(),
            BackboneKind::Stub => return Err(Error::Checkpoint("stub backbones are not loaded from files".into())),
        };
        let mut named = Vec::new();
        for name in bb.params.names() {
            let s = c.require(name)?;
            let mut t: Tensor<T> = s.to_tensor()?;
            if t.ndim() == 4 {
                let sh = t.shape().to_vec();
                t = t.reshape(&[sh[0], sh[1], 1, sh[2], sh[3]])?;
            }
            named.push((name.clone(), t));
        }
        bb.params.load_named(&named)?;
        let read3 = |key: &str, default: [f64; 3]| -> Result<[f64; 3]> {
            match c.meta.get(key) {
                None => Ok(default),
                Some(v) => {
                    let a: Vec<f64> = serde_json::from_value(v.clone())?;
                    a.try_into()
                        .map_err(|_| Error::Checkpoint(format!("`{key}` must have 3 entries")))
                }
            }
        };
        bb.shift = read3("input_shift", bb.shift)?;
        bb.scale = read3("input_scale", bb.scale)?;
        let widths = bb.tap_channels();
        let mut lin = Vec::new();
        for (k, &cw) in widths.iter().enumerate() {
            match c.get(&format!("lin.{k}")) {
                Some(s) => {
                    let t: Tensor<T> = s.to_tensor()?;
                    if t.numel() != cw {
                        return Err(Error::Checkpoint(format!(
                            "entry `lin.{k}` has {} weights, block {k} has {cw} channels",
                            t.numel()
                        )));
                    }
                    lin.push(t.into_data());
                }
                None => break,
            }
        }
        if !lin.is_empty() {
            if lin.len() != widths.len() {
                return Err(Error::Checkpoint(format!(
                    "found {} lin entries for {} blocks",
                    lin.len(),
                    widths.len()
                )));
            }
            bb.lin = Some(lin);
        }
        Ok(bb)
    }

    fn conv_layer(params: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Layer {
        let w = params.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, 1, k, k]));
        let b = params.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Layer::Conv {
            w,
            b,
            spec: Conv3dSpec::new([1, stride, stride], [0, pad, pad]),
        }
    }

    /// VGG-16 feature stack with a tap after the last ReLU of each block.
    /// Parameter names follow the `features.<i>` indexing of the common
    /// reference implementation.
    fn vgg16_layout() -> Self {
        let cfg: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
        let mut params = ParamSet::default();
        let mut layers = Vec::new();
        let mut cin = 3;
        let mut idx = 0;
        for (bi, block) in cfg.iter().enumerate() {
            if bi > 0 {
                layers.push(Layer::MaxPool { k: 2, s: 2 });
                idx += 1;
            }
            for &c in block.iter() {
                layers.push(Self::conv_layer(&mut params, &format!("features.{idx}"), cin, c, 3, 1, 1));
                layers.push(Layer::Relu);
                idx += 2;
                cin = c;
            }
            layers.push(Layer::Tap);
        }
        Backbone {
            kind: BackboneKind::Vgg16,
            layers,
            params,
            shift: [0.485, 0.456, 0.406],
            scale: [0.229, 0.224, 0.225],
            lin: None,
            output_scale: 1.0,
        }
    }

    /// AlexNet feature stack with taps after each of the five ReLUs.
    fn alexnet_layout() -> Self {
        let mut params = ParamSet::default();
        let mut p = |name: &str, cin, cout, k, s, pad| Self::conv_layer(&mut params, name, cin, cout, k, s, pad);
        let layers = vec![
            p("features.0", 3, 64, 11, 4, 2),
            Layer::Relu,
            Layer::Tap,
            Layer::MaxPool { k: 3, s: 2 },
            p("features.3", 64, 192, 5, 1, 2),
            Layer::Relu,
            Layer::Tap,
            Layer::MaxPool { k: 3, s: 2 },
            p("features.6", 192, 384, 3, 1, 1),
            Layer::Relu,
            Layer::Tap,
            p("features.8", 384, 256, 3, 1, 1),
            Layer::Relu,
            Layer::Tap,
            p("features.10", 256, 256, 3, 1, 1),
            Layer::Relu,
            Layer::Tap,
        ];
        // Inputs in [0,1] are mapped to [-1,1] and then standardised with the
        // usual perceptual-metric scaling layer.
        let shift = [-0.030, -0.088, -0.188].map(|s: f64| (s + 1.0) / 2.0);
        let scale = [0.458, 0.448, 0.450].map(|s: f64| s / 2.0);
        Backbone {
            kind: BackboneKind::Alexnet,
            layers,
            params,
            shift,
            scale,
            lin: None,
            output_scale: 1.0,
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn lin(&self) -> Option<&[Vec<T>]> {
        self.lin.as_deref()
    }

    pub fn set_lin(&mut self, lin: Option<Vec<Vec<T>>>) -> Result<()> {
        if let Some(l) = &lin {
            let widths = self.tap_channels();
            if l.len() != widths.len() || l.iter().zip(&widths).any(|(a, &c)| a.len() != c) {
                return Err(Error::Config("lin weights do not match the backbone blocks".into()));
            }
        }
        self.lin = lin;
        Ok(())
    }

    /// Channel width of each emitted block.
    pub fn tap_channels(&self) -> Vec<usize> {
        let mut c = 3;
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv { w, .. } => c = self.params.get(*w).shape()[0],
                Layer::Tap => out.push(c),
                _ => {}
            }
        }
        out
    }

    pub fn num_blocks(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Tap)).count()
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            kind: self.kind,
            layers: self.layers.clone(),
            params: self.params.cast(),
            shift: self.shift,
            scale: self.scale,
            lin: self
                .lin
                .as_ref()
                .map(|l| l.iter().map(|v| v.iter().map(|x| U::from_f64_lossy(x.to_f64().unwrap())).collect()).collect()),
            output_scale: self.output_scale,
        }
    }

    /// Feature blocks of a `(B, 3, T, H, W)` batch. Weights enter the graph
    /// as constants, so only the input receives gradients.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let [_, c, _, _, _] = g.value(x).dims5()?;
        if c != 3 {
            return Err(Error::Input(format!("backbone expects 3 channels, got {c}")));
        }
        let mut h = channel_affine(g, x, self.shift, self.scale)?;
        let mut taps = Vec::new();
        let consts: Vec<Option<Var>> = vec![None; self.params.len()];
        let mut consts = consts;
        let mut get = |g: &mut Graph<T>, i: usize| *consts[i].get_or_insert_with(|| g.constant(self.params.get(i).clone()));
        for layer in &self.layers {
            h = match layer {
                Layer::Conv { w, b, spec } => {
                    let (wv, bv) = (get(g, *w), get(g, *b));
                    g.conv3d(h, wv, Some(bv), *spec)?
                }
                Layer::Relu => g.relu(h),
                Layer::MaxPool { k, s } => g.max_pool_spatial(h, *k, *s)?,
                Layer::AvgPool(f) => g.avg_pool_spatial(h, *f)?,
                Layer::Tap => {
                    let t = if self.output_scale != 1.0 {
                        g.scale(h, T::from_f64_lossy(self.output_scale))
                    } else {
                        h
                    };
                    taps.push(t);
                    h
                }
            };
        }
        Ok(taps)
    }
}

/// `(x[:, c] - shift[c]) / scale[c]` on a `(B, 3, T, H, W)` value.
fn channel_affine<T: Real>(g: &mut Graph<T>, x: Var, shift: [f64; 3], scale: [f64; 3]) -> Result<Var> {
    if shift == [0.0; 3] && scale == [1.0; 3] {
        return Ok(x);
    }
    let [_, c, t, h, w] = g.value(x).dims5()?;
    let plane = t * h * w;
    let sh = shift.map(T::from_f64_lossy);
    let inv = scale.map(|s| T::from_f64_lossy(1.0 / s));
    let v = g.value(x);
    let out = Tensor::from_fn(v.shape(), |i| {
        let ch = (i / plane) % c;
        (v.data()[i] - sh[ch]) * inv[ch]
    });
    Ok(g.op(
        &[x],
        out,
        Box::new(move |a| {
            let gd = a.grad.data();
            vec![Some(Tensor::from_fn(a.grad.shape(), |i| gd[i] * inv[(i / plane) % c]))]
        }),
    ))
}
