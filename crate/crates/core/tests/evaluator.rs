mod common;

use common::sequences;
use rand::SeedableRng;
use vidpred_core::backbone::Backbone;
use vidpred_core::data::synth::SynthSpec;
use vidpred_core::data::{ClipSource, DatasetKind, MemoryClips};
use vidpred_core::evaluator::{
    copy_last_frame, emit_reports, motion_binned_report, multi_step_eval, render_table1, ssim, step_means, table1_rows,
    CopyLastFrame, EvalRecord, GeneratorPredictor, Metric, Predictor, COPY_LAST_FRAME,
};
use vidpred_core::frames::FrameSequence;
use vidpred_core::generator::{Generator, GeneratorConfig};
use vidpred_core::nn::RunRng;
use vidpred_core::Result;

fn pan_set(pans: &[f64], n_steps: usize, seed: u64) -> MemoryClips {
    let spec = SynthSpec {
        length: 8 + n_steps,
        n_sequences: pans.len() * 2,
        texture_seed: seed,
        ..SynthSpec::default()
    };
    let seqs = sequences(&spec, pans, seed);
    MemoryClips::from_sequences(&seqs, 8 + n_steps, DatasetKind::Eval { stride: 100 }, n_steps).unwrap()
}

/// Looks ahead into the ground truth it was built from.
struct Oracle<'a> {
    data: &'a MemoryClips,
    next: usize,
}

impl Predictor for Oracle<'_> {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn rollout(&mut self, _clip: &FrameSequence, n_steps: usize) -> Result<FrameSequence> {
        let c = self.data.clip(self.next)?;
        self.next += 1;
        c.target.slice(0, n_steps)
    }
}

#[test]
fn oracle_scores_perfectly_and_copy_matches_static_truth() {
    let data = pan_set(&[1.0, 2.0], 3, 1);
    let metric = Backbone::stub(2);
    let mut oracle = Oracle { data: &data, next: 0 };
    let run = multi_step_eval(&mut [&mut oracle], &data, 3, &metric).unwrap();
    assert_eq!(run.records.len(), data.len() * 3);
    for r in &run.records {
        assert!((r.ssim - 1.0).abs() <= 1e-9);
        assert!(r.pdist.abs() <= 1e-12);
    }

    let stat = pan_set(&[0.0], 1, 4);
    let run = multi_step_eval(&mut [&mut CopyLastFrame], &stat, 1, &metric).unwrap();
    assert!(run.records.iter().all(|r| (r.ssim - 1.0).abs() <= 1e-9 && r.motion == 0.0));
}

#[test]
fn copy_baseline_distance_grows_with_pan_and_horizon() {
    let metric = Backbone::stub(2);
    let mut prev = -1.0;
    for v in [0.0, 1.0, 2.0, 4.0] {
        let data = pan_set(&[v], 1, 5);
        let run = multi_step_eval(&mut [&mut CopyLastFrame], &data, 1, &metric).unwrap();
        let m = table1_rows(&run.records)[0].2;
        assert!(m > prev, "pan {v}: {m} <= {prev}");
        prev = m;
    }

    let data = pan_set(&[1.0, 2.0], 10, 6);
    let run = multi_step_eval(&mut [&mut CopyLastFrame], &data, 10, &metric).unwrap();
    let steps = step_means(&run.records);
    assert_eq!(steps.len(), 10);
    for w in steps.windows(2) {
        assert!(w[1].pdist >= w[0].pdist, "{:?}", w);
    }
    let clip = data.clip(0).unwrap();
    let c = copy_last_frame(&clip.input, 10).unwrap();
    assert!(c.frames().iter().all(|f| *f == clip.input.frame(7)));
}

#[test]
fn single_step_numbers_equal_first_step_of_longer_horizons() {
    let data = pan_set(&[1.0, 2.0], 4, 7);
    let metric = Backbone::stub(2);
    let one = multi_step_eval(&mut [&mut CopyLastFrame], &data, 1, &metric).unwrap();
    let four = multi_step_eval(&mut [&mut CopyLastFrame], &data, 4, &metric).unwrap();
    let first: Vec<&EvalRecord> = four.records.iter().filter(|r| r.step == 1).collect();
    assert_eq!(one.records.iter().collect::<Vec<_>>(), first);

    let rows = table1_rows(&four.records);
    let n = first.len() as f64;
    let mean_ssim = first.iter().map(|r| r.ssim).sum::<f64>() / n;
    let mean_pd = first.iter().map(|r| r.pdist).sum::<f64>() / n;
    assert!((rows[0].1 - mean_ssim).abs() <= 1e-12 * mean_ssim.abs());
    assert!((rows[0].2 - mean_pd).abs() <= 1e-12 * mean_pd.abs());

    let short = multi_step_eval(&mut [&mut CopyLastFrame], &data, 5, &metric).unwrap();
    assert_eq!(short.skipped, data.len());
}

#[test]
fn rollout_prefix_and_single_step_agree() {
    let gen = Generator::<f32>::new(GeneratorConfig::with_channels(vec![4, 8, 8, 8]), 3).unwrap();
    let data = pan_set(&[1.0], 1, 8);
    let clip = data.clip(0).unwrap().input;
    let long = gen.rollout(&clip, 5, &mut RunRng::seed_from_u64(1), false).unwrap();
    let short = gen.rollout(&clip, 3, &mut RunRng::seed_from_u64(1), false).unwrap();
    assert_eq!(long.slice(0, 3).unwrap().tensor(), short.tensor());

    let one = gen.rollout(&clip, 1, &mut RunRng::seed_from_u64(9), true).unwrap();
    let direct = gen.generate_next_frame(&clip, &mut RunRng::seed_from_u64(9), true).unwrap();
    assert_eq!(one.frame(0), direct);

    let noisy_a = gen.generate_next_frame(&clip, &mut RunRng::seed_from_u64(1), true).unwrap();
    let noisy_b = gen.generate_next_frame(&clip, &mut RunRng::seed_from_u64(2), true).unwrap();
    assert_ne!(noisy_a, noisy_b);

    let mut p = GeneratorPredictor {
        name: "g".into(),
        generator: &gen,
        rng: RunRng::seed_from_u64(0),
        noise: false,
    };
    let a = p.rollout(&clip, 2).unwrap();
    let b = p.rollout(&clip, 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn binned_motion_follows_pan_labels() {
    let data = pan_set(&[0.5, 1.0, 2.0, 4.0], 1, 9);
    let metric = Backbone::stub(2);
    let run = multi_step_eval(&mut [&mut CopyLastFrame], &data, 1, &metric).unwrap();
    let mut by_pan: Vec<(f64, f64)> = Vec::new();
    for i in 0..data.len() {
        let c = data.clip(i).unwrap();
        let pan = [0.5, 1.0, 2.0, 4.0][c.input.source_id[3..].parse::<usize>().unwrap() % 4];
        by_pan.push((pan, run.records[i].motion));
    }
    for &(pa, ma) in &by_pan {
        for &(pb, mb) in &by_pan {
            if pa < pb {
                assert!(ma < mb, "pan {pa} motion {ma} vs pan {pb} motion {mb}");
            }
        }
    }
    let width = by_pan.iter().map(|p| p.1).fold(0.0, f64::max) / 8.0;
    let rep = motion_binned_report(&run.records, Metric::Ssim, width, 1).unwrap();
    let single = motion_binned_report(&run.records, Metric::Ssim, 1e3, 1).unwrap();
    assert_eq!(single.bins.len(), 1);
    let global = run.records.iter().map(|r| r.ssim).sum::<f64>() / run.records.len() as f64;
    assert!((single.bins[0].mean - global).abs() <= 1e-12);
    assert!(rep.bins.len() > 1);
}

#[test]
fn table1_renders_paper_rows() {
    let rows: Vec<(String, f64, f64)> = [
        (COPY_LAST_FRAME, 0.775, 0.0523),
        ("GAN-VGG", 0.916, 0.0361),
        ("G-VGG", 0.917, 0.0352),
        ("GAN-MAE", 0.923, 0.0409),
        ("G-MAE", 0.923, 0.0430),
    ]
    .into_iter()
    .map(|(m, s, p)| (m.to_string(), s, p))
    .collect();
    assert_eq!(
        render_table1(&rows),
        "method,ssim,lpips_x100\nCopy-Last-Frame,0.775,5.23\nGAN-VGG,0.916,3.61\nG-VGG,0.917,3.52\nGAN-MAE,0.923,4.09\nG-MAE,0.923,4.30\n"
    );
}

#[test]
fn reports_are_deterministic() {
    let data = pan_set(&[1.0, 2.0], 3, 10);
    let metric = Backbone::stub(2);
    let run = multi_step_eval(&mut [&mut CopyLastFrame], &data, 3, &metric).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    emit_reports(&run.records, &a, 0.02, 5, 3).unwrap();
    emit_reports(&run.records, &b, 0.02, 5, 3).unwrap();
    for f in ["metrics.csv", "table1.csv", "fig4_bins.csv", "fig5_steps.csv", "fig5_hist.csv", "summary.json"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty(), "{f}");
        assert_eq!(x, y, "{f}");
    }
    let x = ssim(&data.clip(0).unwrap().input.frame(0), &data.clip(0).unwrap().input.frame(0)).unwrap();
    assert!((x - 1.0).abs() < 1e-9);
}
