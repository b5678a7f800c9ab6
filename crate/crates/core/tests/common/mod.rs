#![allow(dead_code)]

use rand::SeedableRng;
use vidpred_core::config::RunConfig;
use vidpred_core::data::synth::{synth_mixed, SynthSpec};
use vidpred_core::data::{DatasetKind, MemoryClips};
use vidpred_core::discriminator::DiscriminatorConfig;
use vidpred_core::frames::FrameSequence;
use vidpred_core::generator::GeneratorConfig;
use vidpred_core::losses::Variant;
use vidpred_core::nn::RunRng;

/// A small run that trains in well under a second per update.
pub fn tiny_config(variant: Variant) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.generator = GeneratorConfig::with_channels(vec![4, 8, 8, 8]);
    cfg.discriminator = DiscriminatorConfig {
        stage_blocks: vec![1, 1],
        stage_channels: vec![4, 8],
        spectral_norm: true,
        sn_warmup_iters: 5,
    };
    cfg.data.synthetic = SynthSpec {
        canvas: (32, 32),
        length: 12,
        n_sequences: 4,
        ..cfg.data.synthetic.clone()
    };
    cfg.data.target_hw = (32, 32);
    cfg.optimizer.batch_size = 2;
    cfg.schedule.variant = variant;
    cfg.logging.checkpoint_every = 0;
    cfg.logging.sample_every = 0;
    cfg
}

pub fn sequences(spec: &SynthSpec, pans: &[f64], seed: u64) -> Vec<FrameSequence> {
    synth_mixed(spec, pans, &mut RunRng::seed_from_u64(seed))
        .unwrap()
        .into_iter()
        .map(|s| s.frames)
        .collect()
}

pub fn train_clips(cfg: &RunConfig) -> MemoryClips {
    let seqs = sequences(&cfg.data.synthetic, &cfg.data.synthetic_pans, cfg.seed);
    MemoryClips::from_sequences(&seqs, 10, DatasetKind::Train, 1).unwrap()
}

/// Direct-loop reference implementations used as independent oracles.
pub mod naive {
    use vidpred_core::backbone::Backbone;
    use vidpred_tensor::Tensor;

    pub fn mae(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]).abs();
        }
        s / a.len() as f64
    }

    pub fn hinge_d(real: &[f64], fake: &[f64]) -> f64 {
        let r: f64 = real.iter().map(|&x| if x < 1.0 { 1.0 - x } else { 0.0 }).sum();
        let f: f64 = fake.iter().map(|&x| if x > -1.0 { 1.0 + x } else { 0.0 }).sum();
        r / real.len() as f64 + f / fake.len() as f64
    }

    pub fn hinge_g(fake: &[f64]) -> f64 {
        -fake.iter().sum::<f64>() / fake.len() as f64
    }

    /// Feature maps as `[channel][y][x]`.
    pub type Maps = Vec<Vec<Vec<f64>>>;

    pub fn unit_distance(a: &Maps, b: &Maps) -> f64 {
        let (c, h, w) = (a.len(), a[0].len(), a[0][0].len());
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let na = (0..c).map(|k| a[k][y][x] * a[k][y][x]).sum::<f64>().sqrt() + 1e-10;
                let nb = (0..c).map(|k| b[k][y][x] * b[k][y][x]).sum::<f64>().sqrt() + 1e-10;
                for k in 0..c {
                    let d = a[k][y][x] / na - b[k][y][x] / nb;
                    total += d * d;
                }
            }
        }
        total / (h * w) as f64
    }

    pub fn frame_maps(x: &Tensor<f64>) -> Maps {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        (0..c)
            .map(|k| (0..h).map(|y| (0..w).map(|i| x.data()[(k * h + y) * w + i]).collect()).collect())
            .collect()
    }

    fn conv3x3_relu(x: &Maps, w: &Tensor<f64>, b: &Tensor<f64>) -> Maps {
        let (cout, cin) = (w.shape()[0], w.shape()[1]);
        let (h, wd) = (x[0].len(), x[0][0].len());
        let mut out = vec![vec![vec![0.0; wd]; h]; cout];
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = b.data()[o];
                    for i in 0..cin {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (yy, xs) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                                if yy < 0 || xs < 0 || yy >= h as isize || xs >= wd as isize {
                                    continue;
                                }
                                s += w.data()[((o * cin + i) * 3 + dy) * 3 + dx] * x[i][yy as usize][xs as usize];
                            }
                        }
                    }
                    out[o][y][xx] = s.max(0.0);
                }
            }
        }
        out
    }

    fn avg_pool2(x: &Maps) -> Maps {
        x.iter()
            .map(|m| {
                (0..m.len() / 2)
                    .map(|y| {
                        (0..m[0].len() / 2)
                            .map(|i| (m[2 * y][2 * i] + m[2 * y + 1][2 * i] + m[2 * y][2 * i + 1] + m[2 * y + 1][2 * i + 1]) / 4.0)
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Stub backbone taps of one `(3, H, W)` frame.
    pub fn stub_features(bb: &Backbone<f64>, frame: &Tensor<f64>) -> Vec<Maps> {
        let mut h: Maps = frame_maps(frame)
            .into_iter()
            .map(|m| m.into_iter().map(|r| r.into_iter().map(|v| (v - 0.5) / 0.5).collect()).collect())
            .collect();
        let mut taps = Vec::new();
        for blk in 0..3 {
            if blk > 0 {
                h = avg_pool2(&h);
            }
            let p = bb.params();
            let w = p.get(p.index_of(&format!("block{}.weight", blk + 1)).unwrap());
            let b = p.get(p.index_of(&format!("block{}.bias", blk + 1)).unwrap());
            h = conv3x3_relu(&h, w, b);
            taps.push(h.iter().map(|m| m.iter().map(|r| r.iter().map(|v| v * bb.output_scale).collect()).collect()).collect());
        }
        taps
    }

    pub fn stub_perceptual(bb: &Backbone<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (fa, fb) = (stub_features(bb, a), stub_features(bb, b));
        fa.iter().zip(&fb).map(|(x, y)| unit_distance(x, y)).sum()
    }

    /// SSIM with an explicitly built 2-D Gaussian window and no separable
    /// filtering, channel-averaged, valid region.
    pub fn ssim(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut win = [[0.0f64; 11]; 11];
        let mut z = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                z += *v;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        for k in 0..c {
            let px = |yy: usize, xx: usize| x.data()[(k * h + yy) * w + xx];
            let py = |yy: usize, xx: usize| y.data()[(k * h + yy) * w + xx];
            let mut acc = 0.0;
            let mut n = 0;
            for oy in 0..=h - 11 {
                for ox in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let g = win[i][j] / z;
                            let (a, b) = (px(oy + i, ox + j), py(oy + i, ox + j));
                            mx += g * a;
                            my += g * b;
                            sxx += g * a * a;
                            syy += g * b * b;
                            sxy += g * a * b;
                        }
                    }
                    let (vx, vy, cv) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    acc += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1;
                }
            }
            total += acc / n as f64;
        }
        total / c as f64
    }
}
