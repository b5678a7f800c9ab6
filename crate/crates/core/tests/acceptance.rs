//! One PASS/FAIL/SKIP line per acceptance criterion.
//!
//! Criteria 1-4, 7 and 8 are deterministic and fail the test when they fail.
//! Criteria 5 and 6 train desk-scale models (about 30 minutes per run on one
//! CPU core) and only report. `VIDPRED_ACCEPTANCE_QUICK=1` skips them.
//! Criterion 9 runs when `VIDPRED_CALTECH_ROOT` and `VIDPRED_LPIPS_WEIGHTS`
//! are set.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{naive, sequences, tiny_config, train_clips};
use rand::{Rng, SeedableRng};
use vidpred_core::backbone::Backbone;
use vidpred_core::config::RunConfig;
use vidpred_core::data::synth::SynthSpec;
use vidpred_core::data::{ingest, ClipSource, DatasetKind, FrameDataset, IngestOptions, MemoryClips};
use vidpred_core::discriminator::{Discriminator, DiscriminatorConfig};
use vidpred_core::evaluator::{
    motion_binned_report, multi_step_eval, ssim, step_means, table1_rows, CopyLastFrame, EvalRecord,
    GeneratorPredictor, Metric, Predictor, COPY_LAST_FRAME, SSIM_C1,
};
use vidpred_core::frames::FrameSequence;
use vidpred_core::generator::{Generator, GeneratorConfig};
use vidpred_core::losses::{feature_distance, hinge_loss_d, hinge_loss_g, mae_loss, perceptual_loss, Variant};
use vidpred_core::nn::RunRng;
use vidpred_core::trainer::{checkpoint_load, checkpoint_save, RunDir, TrainState, Trainer, UpdateKind};
use vidpred_tensor::{pixel_shuffle, pixel_unshuffle, Graph, Tensor, Var};

const SEEDS: [u64; 3] = [0, 1, 2];
const DESK_BUDGET: Duration = Duration::from_secs(30 * 60);
const SSIM_MARGIN: f64 = 0.02;

enum Outcome {
    Pass,
    Fail,
    Skip,
}

struct Line {
    id: usize,
    outcome: Outcome,
    detail: String,
}

impl Line {
    fn check(id: usize, ok: bool, detail: String) -> Self {
        Line { id, outcome: if ok { Outcome::Pass } else { Outcome::Fail }, detail }
    }

    fn print(&self) {
        let tag = match self.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::Skip => "SKIP",
        };
        println!("{tag} criterion {}: {}", self.id, self.detail);
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut RunRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn rand_frame(h: usize, w: usize, rng: &mut RunRng) -> Tensor<f32> {
    Tensor::from_fn(&[3, h, w], |_| rng.random::<f32>())
}

fn scalar(shape: &[usize], x: &Tensor<f64>, f: &dyn Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(x.clone().reshape(shape).unwrap());
    let l = f(&mut g, v);
    g.value(l).item()
}

/// Worst relative gap between the analytic directional derivative and a
/// central difference, over five random directions.
fn grad_gap(shape: &[usize], lo: f64, hi: f64, seed: u64, f: &dyn Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let mut rng = RunRng::seed_from_u64(seed);
    let x = rand_tensor(shape, lo, hi, &mut rng);
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let l = f(&mut g, v);
    let grad = g.backward(l).unwrap().get(v).unwrap().clone();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let dir = rand_tensor(shape, -1.0, 1.0, &mut rng);
        let plus = x.zip_map(&dir, |a, d| a + eps * d).unwrap();
        let minus = x.zip_map(&dir, |a, d| a - eps * d).unwrap();
        let numeric = (scalar(shape, &plus, f) - scalar(shape, &minus, f)) / (2.0 * eps);
        let analytic: f64 = grad.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
        worst = worst.max(rel(analytic, numeric));
    }
    worst
}

fn criterion1() -> Line {
    let t0 = Instant::now();
    let mut rng = RunRng::seed_from_u64(101);
    let mut value_gap: f64 = 0.0;
    for _ in 0..10 {
        let a = rand_tensor(&[1, 3, 1, 4, 4], 0.0, 1.0, &mut rng);
        let b = rand_tensor(&[1, 3, 1, 4, 4], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = mae_loss(&mut g, va, vb).unwrap();
        value_gap = value_gap.max(rel(g.value(l).item(), naive::mae(a.data(), b.data())));

        let stub = Backbone::<f64>::stub(rng.random());
        let l = perceptual_loss(&mut g, va, vb, &stub).unwrap();
        let fa = a.clone().reshape(&[3, 4, 4]).unwrap();
        let fb = b.clone().reshape(&[3, 4, 4]).unwrap();
        value_gap = value_gap.max(rel(g.value(l).item(), naive::stub_perceptual(&stub, &fa, &fb)));

        let r = rand_tensor(&[2, 4, 4], -3.0, 3.0, &mut rng);
        let f = rand_tensor(&[2, 4, 4], -3.0, 3.0, &mut rng);
        let (vr, vf) = (g.constant(r.clone()), g.constant(f.clone()));
        let d = hinge_loss_d(&mut g, vr, vf).unwrap();
        let gl = hinge_loss_g(&mut g, vf);
        value_gap = value_gap.max(rel(g.value(d).item(), naive::hinge_d(r.data(), f.data())));
        value_gap = value_gap.max(rel(g.value(gl).item(), naive::hinge_g(f.data())));
    }

    let target = rand_tensor(&[1, 3, 1, 4, 4], 0.0, 1.0, &mut rng);
    let real = rand_tensor(&[2, 4, 4], -0.5, 0.5, &mut rng);
    let other = rand_tensor(&[1, 8, 1, 2, 4], -1.0, 1.0, &mut rng);
    let stub = Backbone::<f64>::stub(6);
    let frame = [1, 3, 1, 4, 4];
    let gaps = [
        grad_gap(&frame, 0.0, 1.0, 1, &|g, p| {
            let t = g.constant(target.clone());
            mae_loss(g, p, t).unwrap()
        }),
        grad_gap(&[2, 4, 4], -0.5, 0.5, 2, &|g, f| {
            let r = g.constant(real.clone());
            hinge_loss_d(g, r, f).unwrap()
        }),
        grad_gap(&[2, 4, 4], -0.5, 0.5, 3, &|g, r| {
            let f = g.constant(real.clone());
            hinge_loss_d(g, r, f).unwrap()
        }),
        grad_gap(&[2, 4, 4], -3.0, 3.0, 4, &|g, f| hinge_loss_g(g, f)),
        grad_gap(&[1, 8, 1, 2, 4], -1.0, 1.0, 5, &|g, a| {
            let b = g.constant(other.clone());
            feature_distance(g, a, b, None).unwrap()
        }),
        grad_gap(&frame, 0.0, 1.0, 6, &|g, p| {
            let t = g.constant(target.clone());
            perceptual_loss(g, p, t, &stub).unwrap()
        }),
    ];
    let grad_worst = gaps.iter().cloned().fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    Line::check(
        1,
        value_gap <= 1e-10 && grad_worst <= 1e-4 && secs < 60.0,
        format!("loss values rel gap {value_gap:.2e} (<= 1e-10), gradients rel gap {grad_worst:.2e} (<= 1e-4), {secs:.1}s"),
    )
}

fn criterion2() -> Line {
    let t0 = Instant::now();
    let mut rng = RunRng::seed_from_u64(202);
    let gen = Generator::<f32>::new(GeneratorConfig::with_channels(vec![8, 16, 32, 64]), 0).unwrap();
    let clip = FrameSequence::new(Tensor::from_fn(&[3, 8, 128, 160], |_| rng.random::<f32>()), "r", 0).unwrap();
    let out = gen.generate_next_frame(&clip, &mut rng, true).unwrap();
    let shape_ok = out.shape() == [3, 128, 160];
    let range_ok = out.data().iter().all(|&v| v > 0.0 && v < 1.0);

    let mut g = Graph::new();
    let p = gen.bind(&mut g, false);
    let mut u = g.constant(clip.tensor().clone().reshape(&[1, 3, 8, 128, 160]).unwrap());
    let mut ctx = vidpred_core::nn::Ctx::eval(&mut rng, false);
    let mut levels_ok = true;
    for l in 1..=4 {
        u = gen.bottom_up(&mut g, &p, l, u, &mut ctx).unwrap();
        levels_ok &= g.shape(u)[3..] == [128 >> l, 160 >> l];
    }

    let d = Discriminator::<f32>::new(
        DiscriminatorConfig {
            stage_blocks: vec![1, 1, 1, 1, 1],
            stage_channels: vec![2, 4, 8, 16, 32],
            spectral_norm: true,
            sn_warmup_iters: 2,
        },
        1,
    )
    .unwrap();
    let logits = d.discriminate(&rand_frame(128, 160, &mut rng), clip.tensor(), &mut rng).unwrap();
    let d_ok = logits.shape() == [4, 5];

    let x = Tensor::<f64>::from_fn(&[2, 12, 3, 5, 7], |_| rng.random());
    let shuffled = pixel_shuffle(&x, 2).unwrap();
    let exact = pixel_unshuffle(&shuffled, 2).unwrap() == x && pixel_shuffle(&pixel_unshuffle(&shuffled, 2).unwrap(), 2).unwrap() == shuffled;

    let secs = t0.elapsed().as_secs_f64();
    Line::check(
        2,
        shape_ok && range_ok && levels_ok && d_ok && exact && secs < 60.0,
        format!(
            "G output {:?} in (0,1): {range_ok}, /2^l law: {levels_ok}, D logits {:?}, shuffle round trip exact: {exact}, {secs:.1}s",
            out.shape(),
            logits.shape()
        ),
    )
}

fn criterion3() -> Line {
    let mut rng = RunRng::seed_from_u64(303);
    let x = rand_frame(32, 40, &mut rng);
    let identity = ssim(&x, &x).unwrap();
    let zeros = Tensor::zeros(&[3, 16, 16]);
    let ones = Tensor::ones(&[3, 16, 16]);
    let constant = ssim(&zeros, &ones).unwrap();
    let want = SSIM_C1 / (1.0 + SSIM_C1);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let a = rand_frame(16, 20, &mut rng);
        let b = if i % 2 == 0 {
            rand_frame(16, 20, &mut rng)
        } else {
            let n = rand_frame(16, 20, &mut rng);
            a.zip_map(&n, |v, e| (0.8 * v + 0.1 * e).clamp(0.0, 1.0)).unwrap()
        };
        worst = worst.max((ssim(&a, &b).unwrap() - naive::ssim(&a.cast(), &b.cast())).abs());
    }
    Line::check(
        3,
        (identity - 1.0).abs() <= 1e-9 && (constant - want).abs() <= 1e-12 && (want - 9.999e-5).abs() < 1e-8 && worst <= 1e-6,
        format!("identity {identity:.12}, constant pair {constant:.6e} (closed form {want:.6e}), reference gap {worst:.2e} (<= 1e-6)"),
    )
}

fn criterion4() -> Line {
    let cfg = tiny_config(Variant::GanMae);
    let data = train_clips(&cfg);
    let tr = Trainer::new(&cfg, &data, None).unwrap();
    let mut st = TrainState::new(&cfg, data.len()).unwrap();
    tr.train_phase1(&mut st, 2).unwrap();
    let g_before = (st.generator.params().checksum(), st.generator.buffers().checksum());
    tr.train_phase2(&mut st, 3).unwrap();
    let frozen = g_before == (st.generator.params().checksum(), st.generator.buffers().checksum());

    tr.train_phase3(&mut st, 3).unwrap();
    let mut ratio_ok = true;
    let mut run = 0;
    let mut g_updates = 0;
    for r in st.history.iter().filter(|r| r.phase == 3) {
        match r.update {
            UpdateKind::D => run += 1,
            UpdateKind::G => {
                ratio_ok &= run == 8;
                run = 0;
                g_updates += 1;
            }
        }
    }
    ratio_ok &= g_updates == 3 && run == 0;

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("state.bin");
    checkpoint_save(&st, &path).unwrap();
    let back = checkpoint_load(&path, &cfg).unwrap();
    let probe = data.clip(0).unwrap().input;
    let predict = |s: &TrainState| {
        let f = s.generator.generate_next_frame(&probe, &mut RunRng::seed_from_u64(7), true).unwrap();
        f.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let round_trip = predict(&st) == predict(&back);

    let mut short = tiny_config(Variant::GMae);
    short.schedule.phase1_steps = 5;
    let data = train_clips(&short);
    let mut logs = Vec::new();
    for k in 0..2 {
        let dir = RunDir::create(&tmp.path().join(format!("run{k}")), &short).unwrap();
        let log = dir.log_path();
        let tr = Trainer::new(&short, &data, None).unwrap().with_run_dir(dir);
        tr.run(&mut TrainState::new(&short, data.len()).unwrap()).unwrap();
        logs.push(std::fs::read(log).unwrap());
    }
    let rerun = !logs[0].is_empty() && logs[0] == logs[1];
    Line::check(
        4,
        frozen && ratio_ok && round_trip && rerun,
        format!(
            "phase-2 G checksum unchanged: {frozen}, phase-3 pattern {}: {ratio_ok}, checkpoint probe bit-identical: {round_trip}, seeded rerun log identical: {rerun}",
            st.phase3_pattern()
        ),
    )
}

/// Held-out synthetic pan clips, rendered from textures the training set
/// never uses.
fn held_out(cfg: &RunConfig) -> MemoryClips {
    let spec = SynthSpec {
        texture_seed: cfg.data.synthetic.texture_seed.wrapping_add(1_000_003),
        length: 19,
        n_sequences: 32,
        ..cfg.data.synthetic.clone()
    };
    let seqs = sequences(&spec, &cfg.data.synthetic_pans, cfg.seed.wrapping_add(1_000_003));
    MemoryClips::from_sequences(&seqs, 9, DatasetKind::Eval { stride: 10 }, 1).unwrap()
}

struct DeskResult {
    seed: u64,
    secs: f64,
    steps: u64,
    model: (f64, f64),
    copy: (f64, f64),
}

fn desk_run(variant: Variant, seed: u64) -> DeskResult {
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg.schedule.variant = variant;
    cfg.logging.checkpoint_every = 0;
    cfg.logging.sample_every = 0;
    let data = train_clips(&cfg);
    let backbone = variant.perceptual().then(|| Backbone::stub(cfg.backbone.seed));
    let tr = Trainer::new(&cfg, &data, backbone).unwrap();
    let mut st = TrainState::new(&cfg, data.len()).unwrap();
    let t0 = Instant::now();
    tr.run(&mut st).unwrap();
    let secs = t0.elapsed().as_secs_f64();

    let eval = held_out(&cfg);
    let metric = Backbone::<f64>::stub(cfg.backbone.seed);
    let mut model = GeneratorPredictor {
        name: variant.name().into(),
        generator: &st.generator,
        rng: RunRng::seed_from_u64(seed),
        noise: cfg.eval.noise,
    };
    let mut methods: [&mut dyn Predictor; 2] = [&mut CopyLastFrame, &mut model];
    let run = multi_step_eval(&mut methods, &eval, 1, &metric).unwrap();
    let rows = table1_rows(&run.records);
    let pick = |name: &str| rows.iter().find(|r| r.0 == name).map(|r| (r.1, r.2)).unwrap();
    DeskResult {
        seed,
        secs,
        steps: st.global_step(),
        model: pick(variant.name()),
        copy: pick(COPY_LAST_FRAME),
    }
}

fn criterion5(runs: &[DeskResult]) -> Line {
    let mut wins = 0;
    let mut parts = Vec::new();
    for r in runs {
        let ok = r.model.0 - r.copy.0 >= SSIM_MARGIN && r.secs <= DESK_BUDGET.as_secs_f64();
        wins += ok as usize;
        parts.push(format!(
            "seed {} ssim {:.4} vs copy {:.4} ({} steps, {:.0}s)",
            r.seed, r.model.0, r.copy.0, r.steps, r.secs
        ));
    }
    Line::check(5, wins == runs.len(), format!("{wins}/{} seeds beat copy by >= {SSIM_MARGIN}; {}", runs.len(), parts.join("; ")))
}

fn criterion6(mae: &[DeskResult], vgg: &[DeskResult]) -> Line {
    let mut wins = 0;
    let mut parts = Vec::new();
    for (m, v) in mae.iter().zip(vgg) {
        wins += (v.model.1 < m.model.1) as usize;
        parts.push(format!("seed {} G-VGG {:.5} vs G-MAE {:.5} ({:.0}s)", m.seed, v.model.1, m.model.1, v.secs));
    }
    Line::check(6, wins >= 2, format!("G-VGG lower stub distance at {wins}/3 seeds (need 2); {}", parts.join("; ")))
}

fn pan_clips(pans: &[f64], n_steps: usize, seed: u64) -> MemoryClips {
    let spec = SynthSpec {
        length: 8 + n_steps,
        n_sequences: 2 * pans.len(),
        texture_seed: seed,
        ..SynthSpec::default()
    };
    let seqs = sequences(&spec, pans, seed);
    MemoryClips::from_sequences(&seqs, 8 + n_steps, DatasetKind::Eval { stride: 100 }, n_steps).unwrap()
}

fn criterion7() -> Line {
    let metric = Backbone::<f64>::stub(0);
    let data = pan_clips(&[1.0, 2.0], 10, 707);
    let run = multi_step_eval(&mut [&mut CopyLastFrame], &data, 10, &metric).unwrap();
    let steps: Vec<f64> = step_means(&run.records).iter().map(|s| s.pdist).collect();
    let monotone = steps.len() == 10 && steps.windows(2).all(|w| w[1] >= w[0]);

    let gen = Generator::<f32>::new(GeneratorConfig::with_channels(vec![4, 8, 8, 8]), 7).unwrap();
    let clip = data.clip(0).unwrap().input;
    let long = gen.rollout(&clip, 10, &mut RunRng::seed_from_u64(1), true).unwrap();
    let mut prefix = true;
    for n in 1..10 {
        let short = gen.rollout(&clip, n, &mut RunRng::seed_from_u64(1), true).unwrap();
        prefix &= long.slice(0, n).unwrap().tensor() == short.tensor();
    }
    Line::check(
        7,
        monotone && prefix,
        format!(
            "copy distance by step [{}] non-decreasing: {monotone}; rollout prefixes exact: {prefix}",
            steps.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn criterion8() -> Line {
    let metric = Backbone::<f64>::stub(0);
    let mut means = Vec::new();
    for pan in [0.0, 1.0, 2.0, 4.0] {
        let data = pan_clips(&[pan], 1, 808);
        let run = multi_step_eval(&mut [&mut CopyLastFrame], &data, 1, &metric).unwrap();
        means.push(run.records.iter().map(|r| r.motion).sum::<f64>() / run.records.len() as f64);
    }
    let increasing = means.windows(2).all(|w| w[1] > w[0]);

    let mut rng = RunRng::seed_from_u64(808);
    let mut records = Vec::new();
    for i in 0..200 {
        let motion = rng.random_range(0.0..0.3);
        let a: f64 = rng.random();
        let gap: f64 = rng.random_range(0.0..0.5);
        for (method, pdist) in [("A", a), ("B", a + gap)] {
            records.push(EvalRecord {
                sample_id: i.to_string(),
                method: method.into(),
                step: 1,
                ssim: 1.0 - pdist,
                pdist,
                motion,
            });
        }
    }
    let mut dominance = true;
    for metric in [Metric::Pdist, Metric::Ssim] {
        let rep = motion_binned_report(&records, metric, 0.03, 5).unwrap();
        let (a, b): (Vec<_>, Vec<_>) = rep.bins.iter().partition(|s| s.method == "A");
        for (x, y) in a.iter().zip(&b) {
            if x.count == 0 {
                continue;
            }
            dominance &= match metric {
                Metric::Pdist => x.mean <= y.mean && x.median <= y.median && x.q1 <= y.q1 && x.q3 <= y.q3,
                Metric::Ssim => x.mean >= y.mean && x.median >= y.median && x.q1 >= y.q1 && x.q3 >= y.q3,
            };
        }
    }
    Line::check(
        8,
        increasing && dominance,
        format!(
            "copy motion by pan 0/1/2/4 [{}] increasing: {increasing}; binned dominance preserved: {dominance}",
            means.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn criterion9() -> Line {
    let (Some(root), Some(weights)) = (std::env::var_os("VIDPRED_CALTECH_ROOT"), std::env::var_os("VIDPRED_LPIPS_WEIGHTS")) else {
        return Line {
            id: 9,
            outcome: Outcome::Skip,
            detail: "set VIDPRED_CALTECH_ROOT and VIDPRED_LPIPS_WEIGHTS to run the Caltech copy-baseline check".into(),
        };
    };
    let cfg = RunConfig::paper();
    let opts = IngestOptions {
        temporal_factor: 3,
        target_hw: cfg.data.target_hw,
        ..IngestOptions::eval(1, cfg.data.eval_stride)
    };
    let data = FrameDataset { index: ingest(&PathBuf::from(root), &opts).unwrap() };
    let metric = Backbone::<f64>::load(&PathBuf::from(weights)).unwrap();
    let run = multi_step_eval(&mut [&mut CopyLastFrame], &data, 1, &metric).unwrap();
    let (_, s, p) = table1_rows(&run.records)[0].clone();
    Line::check(
        9,
        (s - 0.775).abs() <= 0.01 && (100.0 * p - 5.23).abs() <= 0.3,
        format!("copy SSIM {s:.4} (0.775 +- 0.01), LPIPSx100 {:.3} (5.23 +- 0.3) over {} clips", 100.0 * p, data.len()),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance_criteria: test");
        return;
    }
    let mut lines = Vec::new();
    for f in [criterion1, criterion2, criterion3, criterion4] {
        let l = f();
        l.print();
        lines.push(l);
    }
    if std::env::var_os("VIDPRED_ACCEPTANCE_QUICK").is_some() {
        for id in [5, 6] {
            let l = Line { id, outcome: Outcome::Skip, detail: "desk training skipped (VIDPRED_ACCEPTANCE_QUICK)".into() };
            l.print();
            lines.push(l);
        }
    } else {
        let mae: Vec<DeskResult> = SEEDS.iter().map(|&s| desk_run(Variant::GMae, s)).collect();
        let l = criterion5(&mae);
        l.print();
        lines.push(l);
        let vgg: Vec<DeskResult> = SEEDS.iter().map(|&s| desk_run(Variant::GVgg, s)).collect();
        let l = criterion6(&mae, &vgg);
        l.print();
        lines.push(l);
    }
    for f in [criterion7, criterion8, criterion9] {
        let l = f();
        l.print();
        lines.push(l);
    }
    let blocking: Vec<usize> = lines
        .iter()
        .filter(|l| matches!(l.outcome, Outcome::Fail) && ![5, 6, 9].contains(&l.id))
        .map(|l| l.id)
        .collect();
    if !blocking.is_empty() {
        eprintln!("failed criteria {blocking:?}");
        std::process::exit(1);
    }
}
