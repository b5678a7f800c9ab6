//! Objective terms: MAE, perceptual feature distance, hinge adversarial
//! losses and their weighted combination.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vidpred_tensor::{Graph, Real, Tensor, Var};

use crate::backbone::Backbone;
use crate::error::{Error, Result};

/// Guard in the per-site feature normalisation.
pub const FEATURE_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    /// Adversarial.
    pub lambda1: f64,
    /// MAE.
    pub lambda2: f64,
    /// Perceptual.
    pub lambda3: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            lambda1: 1.0,
            lambda2: 1000.0,
            lambda3: 400.0,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{n} = {v} must be a finite value >= 0")));
            }
        }
        Ok(())
    }
}

/// Loss ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "GAN-VGG")]
    GanVgg,
    #[serde(rename = "G-VGG")]
    GVgg,
    #[serde(rename = "GAN-MAE")]
    GanMae,
    #[serde(rename = "G-MAE")]
    GMae,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::GanVgg, Variant::GVgg, Variant::GanMae, Variant::GMae];

    pub fn name(self) -> &'static str {
        match self {
            Variant::GanVgg => "GAN-VGG",
            Variant::GVgg => "G-VGG",
            Variant::GanMae => "GAN-MAE",
            Variant::GMae => "G-MAE",
        }
    }

    pub fn adversarial(self) -> bool {
        matches!(self, Variant::GanVgg | Variant::GanMae)
    }

    pub fn perceptual(self) -> bool {
        matches!(self, Variant::GanVgg | Variant::GVgg)
    }

    /// Base weights with the terms this variant drops set to zero.
    pub fn weights(self, base: ObjectiveWeights) -> ObjectiveWeights {
        ObjectiveWeights {
            lambda1: if self.adversarial() { base.lambda1 } else { 0.0 },
            lambda2: base.lambda2,
            lambda3: if self.perceptual() { base.lambda3 } else { 0.0 },
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (GAN-VGG, G-VGG, GAN-MAE, G-MAE)")))
    }
}

/// A composite loss and its unweighted components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub scalar: f64,
    /// `adv`, `mae`, `perceptual`; absent terms are omitted.
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn from_components(components: BTreeMap<String, f64>, w: &ObjectiveWeights) -> Self {
        let scalar = components
            .iter()
            .map(|(k, v)| weight_of(k, w) * v)
            .sum();
        LossValue { scalar, components }
    }

    pub fn is_finite(&self) -> bool {
        self.scalar.is_finite() && self.components.values().all(|v| v.is_finite())
    }
}

/// Weight applied to a named component.
pub fn weight_of(component: &str, w: &ObjectiveWeights) -> f64 {
    match component {
        "adv" => w.lambda1,
        "mae" => w.lambda2,
        "perceptual" => w.lambda3,
        _ => 0.0,
    }
}

fn n_of<T: Real>(n: usize) -> T {
    T::from_usize(n.max(1)).unwrap()
}

/// Mean absolute elementwise difference.
pub fn mae_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let (p, t) = (g.value(pred), g.value(target));
    p.expect_same_shape(t)?;
    let n: T = n_of(p.numel());
    let value = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b).abs()).sum::<T>() / n;
    Ok(g.op(
        &[pred, target],
        Tensor::scalar(value),
        Box::new(move |a| {
            let k = a.grad.item() / n;
            let sign = a.inputs[0]
                .zip_map(a.inputs[1], |x, y| {
                    if x > y {
                        k
                    } else if x < y {
                        -k
                    } else {
                        T::zero()
                    }
                })
                .unwrap();
            let neg = a.needs[1].then(|| sign.map(|v| -v));
            vec![Some(sign), neg]
        }),
    ))
}

/// `mean(max(0, 1 - real)) + mean(max(0, 1 + fake))` over all patches.
pub fn hinge_loss_d<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let (r, f) = (g.value(real), g.value(fake));
    let (nr, nf): (T, T) = (n_of(r.numel()), n_of(f.numel()));
    let one = T::one();
    let lr = r.data().iter().map(|&x| (one - x).max(T::zero())).sum::<T>() / nr;
    let lf = f.data().iter().map(|&x| (one + x).max(T::zero())).sum::<T>() / nf;
    Ok(g.op(
        &[real, fake],
        Tensor::scalar(lr + lf),
        Box::new(move |a| {
            let gs = a.grad.item();
            let gr = a.inputs[0].map(|x| if one - x > T::zero() { -gs / nr } else { T::zero() });
            let gf = a.inputs[1].map(|x| if one + x > T::zero() { gs / nf } else { T::zero() });
            vec![Some(gr), Some(gf)]
        }),
    ))
}

/// `-mean(fake)`.
pub fn hinge_loss_g<T: Real>(g: &mut Graph<T>, fake: Var) -> Var {
    let m = g.mean(fake);
    g.scale(m, -T::one())
}

/// Per-site unit-normalised squared feature difference on `(B, C, T, H, W)`
/// blocks: `mean over sites of Σ_c w_c (â_c - b̂_c)²` with `â = a/(‖a‖+ε)`
/// taken along channels. `lin = None` weights every channel by 1.
pub fn feature_distance<T: Real>(g: &mut Graph<T>, fa: Var, fb: Var, lin: Option<&[T]>) -> Result<Var> {
    let (a, b) = (g.value(fa), g.value(fb));
    a.expect_same_shape(b)?;
    let [bn, c, t, h, w] = a.dims5()?;
    let lin: Vec<T> = match lin {
        Some(l) if l.len() == c => l.to_vec(),
        Some(l) => {
            return Err(Error::Input(format!("{} lin weights for {c} feature channels", l.len())));
        }
        None => vec![T::one(); c],
    };
    let plane = t * h * w;
    let sites = bn * plane;
    let eps = T::from_f64_lossy(FEATURE_EPS);
    let norms = |x: &Tensor<T>| -> Vec<T> {
        let d = x.data();
        let mut n = vec![T::zero(); sites];
        for bi in 0..bn {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for s in 0..plane {
                    let v = d[base + s];
                    n[bi * plane + s] = n[bi * plane + s] + v * v;
                }
            }
        }
        n.iter().map(|v| v.sqrt()).collect()
    };
    let (na, nb) = (norms(a), norms(b));
    let mut total = T::zero();
    for bi in 0..bn {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            for s in 0..plane {
                let k = bi * plane + s;
                let diff = a.data()[base + s] / (na[k] + eps) - b.data()[base + s] / (nb[k] + eps);
                total = total + lin[ci] * diff * diff;
            }
        }
    }
    let ns: T = n_of(sites);
    Ok(g.op(
        &[fa, fb],
        Tensor::scalar(total / ns),
        Box::new(move |args| {
            let (a, b) = (args.inputs[0].data(), args.inputs[1].data());
            let scale = args.grad.item() / ns;
            // Gradient of the squared difference w.r.t. the normalised vectors.
            let mut da = vec![T::zero(); a.len()];
            for bi in 0..bn {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    for s in 0..plane {
                        let k = bi * plane + s;
                        let diff = a[base + s] / (na[k] + eps) - b[base + s] / (nb[k] + eps);
                        da[base + s] = (T::one() + T::one()) * lin[ci] * diff * scale;
                    }
                }
            }
            let back = |x: &[T], n: &[T], sign: T| -> Tensor<T> {
                // For â = x/s, s = ‖x‖ + ε: ∂L/∂x = g/s − x (x·g) / (s² ‖x‖).
                let mut dot = vec![T::zero(); sites];
                for bi in 0..bn {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        for s in 0..plane {
                            dot[bi * plane + s] = dot[bi * plane + s] + x[base + s] * da[base + s];
                        }
                    }
                }
                let mut out = vec![T::zero(); x.len()];
                for bi in 0..bn {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        for s in 0..plane {
                            let k = bi * plane + s;
                            let sk = n[k] + eps;
                            let mut v = da[base + s] / sk;
                            if n[k] > T::zero() {
                                v = v - x[base + s] * dot[k] / (sk * sk * n[k]);
                            }
                            out[base + s] = sign * v;
                        }
                    }
                }
                Tensor::from_vec(&[bn, c, t, h, w], out).unwrap()
            };
            let ga = args.needs[0].then(|| back(a, &na, T::one()));
            let gb = args.needs[1].then(|| back(b, &nb, -T::one()));
            vec![ga, gb]
        }),
    ))
}

/// Sum over backbone blocks of [`feature_distance`] between the features of
/// `pred` and `target` (both `(B, 3, T, H, W)`), using the backbone's lin
/// weights when it has them.
pub fn perceptual_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, backbone: &Backbone<T>) -> Result<Var> {
    g.value(pred).expect_same_shape(g.value(target))?;
    let fp = backbone.features(g, pred)?;
    let ft = backbone.features(g, target)?;
    let lin = backbone.lin();
    let mut total: Option<Var> = None;
    for (k, (&a, &b)) in fp.iter().zip(&ft).enumerate() {
        let d = feature_distance(g, a, b, lin.map(|l| l[k].as_slice()))?;
        total = Some(match total {
            None => d,
            Some(s) => g.add(s, d)?,
        });
    }
    total.ok_or_else(|| Error::Config("backbone emits no feature blocks".into()))
}

/// Weighted generator objective. Terms with zero weight are left out, as is
/// the adversarial term when no discriminator logits are given.
pub fn generator_objective<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    fake_logits: Option<Var>,
    weights: &ObjectiveWeights,
    backbone: Option<&Backbone<T>>,
) -> Result<(Var, LossValue)> {
    weights.validate()?;
    let mut terms: Vec<(&str, Var)> = Vec::new();
    if weights.lambda1 > 0.0 {
        if let Some(f) = fake_logits {
            terms.push(("adv", hinge_loss_g(g, f)));
        }
    }
    if weights.lambda2 > 0.0 {
        terms.push(("mae", mae_loss(g, pred, target)?));
    }
    if weights.lambda3 > 0.0 {
        let bb = backbone.ok_or_else(|| Error::Config("perceptual weight > 0 needs a backbone".into()))?;
        terms.push(("perceptual", perceptual_loss(g, pred, target, bb)?));
    }
    let mut components = BTreeMap::new();
    let mut total: Option<Var> = None;
    for (name, v) in terms {
        components.insert(name.to_string(), g.value(v).item().to_f64().unwrap());
        let wv = g.scale(v, T::from_f64_lossy(weight_of(name, weights)));
        total = Some(match total {
            None => wv,
            Some(s) => g.add(s, wv)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    Ok((total, LossValue::from_components(components, weights)))
}
