mod common;

use common::{tiny_config, train_clips};
use nalgebra::DMatrix;
use rand::SeedableRng;
use vidpred_core::backbone::Backbone;
use vidpred_core::config::RunConfig;
use vidpred_core::data::ClipSource;
use vidpred_core::losses::Variant;
use vidpred_core::nn::RunRng;
use vidpred_core::trainer::{checkpoint_load, checkpoint_save, read_log, recompose, RunDir, TrainState, Trainer, UpdateKind};
use vidpred_core::Error;

fn fingerprint(st: &TrainState) -> (u64, u64, u64, u64, String, usize) {
    (
        st.generator.params().checksum(),
        st.generator.buffers().checksum(),
        st.discriminator.params().checksum(),
        st.discriminator.buffers().checksum(),
        serde_json::to_string(&st.rng).unwrap(),
        st.history.len(),
    )
}

fn losses(st: &TrainState) -> Vec<u64> {
    st.history.iter().map(|r| r.loss.to_bits()).collect()
}

fn probe_prediction(st: &TrainState, clip: &vidpred_core::frames::FrameSequence) -> Vec<u32> {
    let mut rng = RunRng::seed_from_u64(11);
    let f = st.generator.generate_next_frame(clip, &mut rng, true).unwrap();
    f.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_steps_leave_state_unchanged() {
    let cfg = tiny_config(Variant::GanMae);
    let data = train_clips(&cfg);
    let tr = Trainer::new(&cfg, &data, None).unwrap();
    let mut st = TrainState::new(&cfg, data.len()).unwrap();
    let before = fingerprint(&st);
    tr.train_phase1(&mut st, 0).unwrap();
    tr.train_phase2(&mut st, 0).unwrap();
    tr.train_phase3(&mut st, 0).unwrap();
    assert_eq!(before, fingerprint(&st));
    assert_eq!(st.opt_g.t, 0);
    assert_eq!(st.opt_d.t, 0);
}

#[test]
fn phases_touch_only_their_networks() {
    let cfg = tiny_config(Variant::GanMae);
    let data = train_clips(&cfg);
    let tr = Trainer::new(&cfg, &data, None).unwrap();
    let mut st = TrainState::new(&cfg, data.len()).unwrap();
    let d0 = (st.discriminator.params().checksum(), st.discriminator.buffers().checksum());
    tr.train_phase1(&mut st, 3).unwrap();
    assert_eq!(d0, (st.discriminator.params().checksum(), st.discriminator.buffers().checksum()));
    let g1 = (st.generator.params().checksum(), st.generator.buffers().checksum());
    let dm = st.opt_d.t;
    tr.train_phase2(&mut st, 3).unwrap();
    assert_eq!(g1, (st.generator.params().checksum(), st.generator.buffers().checksum()));
    assert_ne!(d0.0, st.discriminator.params().checksum());
    assert_eq!(st.opt_d.t, dm + 3);
    assert!(st.history.iter().filter(|r| r.phase == 1).all(|r| r.update == UpdateKind::G));
    assert!(st.history.iter().filter(|r| r.phase == 2).all(|r| r.update == UpdateKind::D));
}

#[test]
fn phase3_alternates_eight_d_per_g() {
    let cfg = tiny_config(Variant::GanMae);
    let data = train_clips(&cfg);
    let tr = Trainer::new(&cfg, &data, None).unwrap();
    let mut st = TrainState::new(&cfg, data.len()).unwrap();
    tr.train_phase3(&mut st, 2).unwrap();
    assert_eq!(st.phase3_pattern(), "DDDDDDDDGDDDDDDDDG");
    let mut d = 0;
    for r in &st.history {
        match r.update {
            UpdateKind::D => d += 1,
            UpdateKind::G => {
                assert_eq!(d, 8);
                d = 0;
            }
        }
    }
    assert!(st.history.iter().filter(|r| r.update == UpdateKind::G).all(|r| r.components.contains_key("adv")));
}

#[test]
fn phase3_without_adversarial_weight_reduces_to_phase1_objective() {
    let mut cfg = tiny_config(Variant::GanMae);
    cfg.weights.lambda1 = 0.0;
    let data = train_clips(&cfg);
    let tr = Trainer::new(&cfg, &data, None).unwrap();
    let mut st = TrainState::new(&cfg, data.len()).unwrap();
    tr.train_phase3(&mut st, 1).unwrap();
    let g = st.history.iter().find(|r| r.update == UpdateKind::G).unwrap();
    assert_eq!(g.components.keys().collect::<Vec<_>>(), vec!["mae"]);
}

#[test]
fn logged_loss_recomposes_from_components() {
    let cfg = tiny_config(Variant::GanVgg);
    let data = train_clips(&cfg);
    let tr = Trainer::new(&cfg, &data, Some(Backbone::stub(cfg.backbone.seed))).unwrap();
    let mut st = TrainState::new(&cfg, data.len()).unwrap();
    tr.train_phase1(&mut st, 2).unwrap();
    tr.train_phase3(&mut st, 1).unwrap();
    for r in &st.history {
        let c = recompose(r);
        assert!((c - r.loss).abs() <= 1e-12 * r.loss.abs().max(1e-300), "{r:?}");
    }
}

#[test]
fn checkpoint_round_trip_reproduces_probe_prediction() {
    let cfg = tiny_config(Variant::GanMae);
    let data = train_clips(&cfg);
    let tr = Trainer::new(&cfg, &data, None).unwrap();
    let mut st = TrainState::new(&cfg, data.len()).unwrap();
    tr.train_phase1(&mut st, 2).unwrap();
    tr.train_phase3(&mut st, 1).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("s.bin");
    checkpoint_save(&st, &path).unwrap();
    let back = checkpoint_load(&path, &cfg).unwrap();
    let probe = data.clip(0).unwrap().input;
    assert_eq!(probe_prediction(&st, &probe), probe_prediction(&back, &probe));
    let strip = |s: &TrainState| (fingerprint(s).0, fingerprint(s).1, fingerprint(s).2, fingerprint(s).3, fingerprint(s).4);
    assert_eq!(strip(&st), strip(&back));
    assert_eq!((st.opt_g.t, st.opt_d.t, st.phase_steps), (back.opt_g.t, back.opt_d.t, back.phase_steps));
}

#[test]
fn loading_with_a_different_model_names_the_entry() {
    let cfg = tiny_config(Variant::GMae);
    let data = train_clips(&cfg);
    let st = TrainState::new(&cfg, data.len()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("s.bin");
    checkpoint_save(&st, &path).unwrap();
    let mut other = cfg.clone();
    other.generator.channels = vec![4, 8, 8, 16];
    match checkpoint_load(&path, &other) {
        Err(Error::Checkpoint(m)) => assert!(m.contains("level4"), "{m}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatched checkpoint loaded"),
    }
}

#[test]
fn resume_continues_the_uninterrupted_loss_curve() {
    let cfg = tiny_config(Variant::GanMae);
    let data = train_clips(&cfg);
    let tr = Trainer::new(&cfg, &data, None).unwrap();
    let mut full = TrainState::new(&cfg, data.len()).unwrap();
    tr.train_phase1(&mut full, 15).unwrap();

    let mut part = TrainState::new(&cfg, data.len()).unwrap();
    tr.train_phase1(&mut part, 5).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("mid.bin");
    checkpoint_save(&part, &path).unwrap();
    let mut resumed = checkpoint_load(&path, &cfg).unwrap();
    tr.train_phase1(&mut resumed, 15).unwrap();
    assert_eq!(resumed.history.len(), 10);
    assert_eq!(losses(&resumed), losses(&full)[5..].to_vec());
    assert_eq!(fingerprint(&resumed).0, fingerprint(&full).0);
}

#[test]
fn same_seed_reproduces_the_phase1_log() {
    let cfg = short_run(&tiny_config(Variant::GMae));
    let data = train_clips(&cfg);
    let tmp = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for k in 0..2 {
        let dir = RunDir::create(&tmp.path().join(k.to_string()), &cfg).unwrap();
        let log = dir.log_path();
        let tr = Trainer::new(&cfg, &data, None).unwrap().with_run_dir(dir);
        let mut st = TrainState::new(&cfg, data.len()).unwrap();
        tr.run(&mut st).unwrap();
        assert_eq!(read_log(&log).unwrap().len(), 4);
        logs.push(std::fs::read_to_string(&log).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

fn short_run(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.schedule.phase1_steps = 4;
    c
}

#[test]
fn run_directory_layout() {
    let mut cfg = short_run(&tiny_config(Variant::GMae));
    cfg.logging.checkpoint_every = 2;
    cfg.logging.sample_every = 2;
    let data = train_clips(&cfg);
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::create(tmp.path(), &cfg).unwrap();
    let mut tr = Trainer::new(&cfg, &data, None).unwrap().with_run_dir(dir);
    tr.probe = Some(data.clip(0).unwrap());
    let mut st = TrainState::new(&cfg, data.len()).unwrap();
    tr.run(&mut st).unwrap();
    let echo = std::fs::read_to_string(tmp.path().join("config.echo")).unwrap();
    assert_eq!(RunConfig::from_toml_str(&echo).unwrap(), cfg);
    for f in ["log.jsonl", "ckpt/2.bin", "ckpt/4.bin", "ckpt/final.bin", "samples/2/strip.png", "samples/4/pred_01.png"] {
        assert!(tmp.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn phase1_loss_drops_below_initial() {
    let mut cfg = tiny_config(Variant::GMae);
    cfg.data.synthetic.n_sequences = 8;
    let data = train_clips(&cfg);
    let tr = Trainer::new(&cfg, &data, None).unwrap();
    let mut st = TrainState::new(&cfg, data.len()).unwrap();
    tr.train_phase1(&mut st, 200).unwrap();
    let first = st.history[0].loss;
    let tail: f64 = st.history[190..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(tail < first, "initial {first}, final {tail}");
}

#[test]
fn phase2_hinge_loss_decreases() {
    let mut cfg = tiny_config(Variant::GanMae);
    cfg.data.synthetic.n_sequences = 8;
    let data = train_clips(&cfg);
    let tr = Trainer::new(&cfg, &data, None).unwrap();
    let mut st = TrainState::new(&cfg, data.len()).unwrap();
    tr.train_phase2(&mut st, 200).unwrap();
    let head: f64 = st.history[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    let tail: f64 = st.history[190..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(tail < head, "initial {head}, final {tail}");
}

fn largest_singular_value(w: &vidpred_tensor::Tensor<f64>) -> f64 {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    DMatrix::from_row_slice(rows, cols, w.data()).singular_values().max()
}

#[test]
fn adversarial_training_stays_finite_and_spectrally_bounded() {
    let mut cfg = tiny_config(Variant::GanMae);
    cfg.optimizer.d_updates_per_g = 2;
    cfg.discriminator.sn_warmup_iters = 20;
    let data = train_clips(&cfg);
    let tr = Trainer::new(&cfg, &data, None).unwrap();
    let mut st = TrainState::new(&cfg, data.len()).unwrap();
    for chunk in [5, 10, 25] {
        tr.train_phase3(&mut st, chunk).unwrap();
        for (name, w) in st.discriminator.effective_weights().unwrap() {
            let s = largest_singular_value(&w);
            assert!(s <= 1.0 + 1e-2, "{name}: sigma {s}");
        }
    }
    assert!(st.history.iter().all(|r| r.loss.is_finite()));
    let probe = data.clip(0).unwrap().input;
    let mut rng = RunRng::seed_from_u64(0);
    let f = st.generator.generate_next_frame(&probe, &mut rng, true).unwrap();
    assert!(f.data().iter().all(|&v| v > 0.0 && v < 1.0));
}
