use biost::data::dataset::render_split;
use biost::networks::{Domain, Mode, NetConfig};
use biost::objectives::LossReport;
use biost::trainer::{loss_csv, Checkpoint, Phase, Session, TrainConfig};
use biost::{Error, Tensor};

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        phase1_steps: 6,
        phase2_steps: 6,
        batch_size_b: 4,
        copies_of_x_per_batch: 4,
        net: NetConfig {
            image_channels: 3,
            image_size: 16,
            base_width: 4,
            n_residual_blocks: 1,
        },
        ..TrainConfig::default()
    }
}

fn data() -> (Vec<Tensor<f32>>, Tensor<f32>) {
    let b = render_split(11, "train", 12, Domain::B, 16).unwrap();
    let a = render_split(11, "oneshot", 1, Domain::A, 16).unwrap();
    (b.into_iter().map(|s| s.image).collect(), a[0].image.clone())
}

/// Runs both phases, pausing at global step `split` to round-trip the
/// session through checkpoint bytes.
fn run(cfg: &TrainConfig, split: Option<u64>) -> (Vec<LossReport>, Vec<u8>) {
    let (b, x) = data();
    let end = cfg.phase1_steps + cfg.phase2_steps;
    let mut log = Vec::new();
    let mut s = Session::new(cfg.clone()).unwrap();
    for until in [split.unwrap_or(end), end] {
        if s.phase() == Phase::One {
            s.run_phase1(&b, until, |r| log.push(r.clone())).unwrap();
        }
        if s.step >= cfg.phase1_steps {
            s.run_phase2(&x, &b, until, |r| log.push(r.clone()))
                .unwrap();
        }
        let bytes = s.checkpoint().to_bytes().unwrap();
        s = Session::from_checkpoint(cfg.clone(), &Checkpoint::from_bytes(&bytes).unwrap())
            .unwrap();
    }
    assert!(s.is_finished());
    (log, s.checkpoint().to_bytes().unwrap())
}

#[test]
fn same_seed_gives_identical_losses_and_checkpoints() {
    let (l1, c1) = run(&config(5), None);
    let (l2, c2) = run(&config(5), None);
    assert_eq!(loss_csv(&l1), loss_csv(&l2));
    assert_eq!(c1, c2);
    let (l3, _) = run(&config(6), None);
    assert_ne!(loss_csv(&l1), loss_csv(&l3));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let (full_log, full) = run(&config(5), None);
    for split in [3, 6, 9] {
        let (log, ckpt) = run(&config(5), Some(split));
        assert_eq!(loss_csv(&log), loss_csv(&full_log), "split at {split}");
        assert_eq!(ckpt, full, "split at {split}");
    }
}

#[test]
fn reloaded_checkpoint_resaves_identically() {
    let (_, bytes) = run(&config(2), Some(8));
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let s = Session::from_checkpoint(config(2), &ckpt).unwrap();
    assert_eq!(s.checkpoint().to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    ckpt.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&p).unwrap(), ckpt);
}

#[test]
fn checkpoint_from_another_config_is_rejected() {
    let s = Session::new(config(1)).unwrap();
    let ckpt = s.checkpoint();
    let mut other = config(1);
    other.phase2_steps += 1;
    assert!(matches!(
        Session::from_checkpoint(other, &ckpt),
        Err(Error::Config(_))
    ));
}

#[test]
fn clone_initialization_is_bitwise_identical() {
    let (b, x) = data();
    let mut s = Session::new(config(3)).unwrap();
    s.run_phase1(&b, u64::MAX, |_| {}).unwrap();
    s.start_phase2().unwrap();
    let ae_a = s.ae_a.as_ref().unwrap();
    let held_out: Vec<_> = render_split(11, "test", 5, Domain::B, 16)
        .unwrap()
        .into_iter()
        .map(|s| s.image)
        .collect();
    let batch = Tensor::stack(&held_out).unwrap();
    for mode in [Mode::Eval, Mode::Train] {
        let za = ae_a.encode_tensor(&batch, mode).unwrap();
        let zb = s.ae_b.encode_tensor(&batch, mode).unwrap();
        assert_eq!(za.data(), zb.data());
        let fa = s.ae_b.decode_tensor(&za, mode).unwrap();
        let fb = s.ae_b.decode_tensor(&zb, mode).unwrap();
        assert_eq!(fa.data(), fb.data());
        let ra = ae_a.reconstruct_tensor(&batch, mode).unwrap();
        assert_eq!(ra.data(), fb.data());
    }
    // Separate storage: training A must not move B.
    s.run_phase2(&x, &b, u64::MAX, |_| {}).unwrap();
    let a0 = s.ae_a.as_ref().unwrap().named_params()[0]
        .1
        .read()
        .value
        .clone();
    assert_ne!(a0, s.ae_b.named_params()[0].1.read().value);
}

#[test]
fn injected_nan_is_reported_as_divergence() {
    let (b, _) = data();
    let mut s = Session::new(config(4)).unwrap();
    s.run_phase1(&b, 2, |_| {}).unwrap();
    {
        let (_, p) = &s.ae_b.named_params()[0];
        p.write().value.data_mut()[0] = f32::NAN;
    }
    let before = s.checkpoint();
    let err = s.run_phase1(&b, u64::MAX, |_| {}).unwrap_err();
    match err {
        Error::Divergence { phase, step, .. } => {
            assert_eq!(phase, "phase I");
            assert_eq!(step, 2);
        }
        e => panic!("expected divergence, got {e}"),
    }
    assert_eq!(s.step, 2);
    assert_eq!(s.checkpoint().step, before.step);
}

#[test]
fn phase1_overfits_a_single_image() {
    let (b, _) = data();
    let one = vec![b[0].clone()];
    let mut cfg = config(8);
    cfg.phase1_steps = 800;
    cfg.adam.learning_rate = 3e-3;
    cfg.augment = biost::trainer::AugmentBounds::NONE;
    cfg.batch_size_b = 2;
    let mut s = Session::new(cfg).unwrap();
    let mut log = Vec::new();
    s.run_phase1(&one, u64::MAX, |r| log.push(r.rec_b.unwrap()))
        .unwrap();
    let z = s
        .ae_b
        .reconstruct_tensor(&Tensor::stack(&one).unwrap(), Mode::Eval)
        .unwrap();
    let err = z
        .data()
        .iter()
        .zip(one[0].data())
        .map(|(p, q)| (p - q).abs() as f64)
        .sum::<f64>()
        / z.len() as f64;
    assert!(err < 0.02, "rec_B {} -> {err}", log[0]);
}

#[test]
fn loss_rows_parse_back() {
    let (log, _) = run(&config(9), None);
    let csv = loss_csv(&log);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(LossReport::CSV_HEADER));
    let back: Vec<_> = lines
        .map(|l| LossReport::parse_csv_row(l).unwrap())
        .collect();
    assert_eq!(back.len(), 12);
    assert_eq!(loss_csv(&back), csv);
    assert!(back[..6].iter().all(|r| r.rec_a.is_none()));
    assert!(back[6..]
        .iter()
        .all(|r| r.rec_a.is_some() && r.fcycle.is_some()));
}
