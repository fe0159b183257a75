use samba_core::numerics::Tensor;
use samba_core::training::*;
use samba_core::{ArchitecturePattern, Error, Model, ModelConfig};

fn tiny() -> ModelConfig {
    let mut cfg = ModelConfig::with_d_model(16);
    cfg.n_layers = 4;
    cfg.window = 8;
    cfg.arch = ArchitecturePattern::Samba;
    cfg
}

fn tcfg(total: u64) -> TrainConfig {
    TrainConfig {
        total_steps: total,
        warmup_steps: 2,
        batch_size: 2,
        seq_len: 16,
        ..Default::default()
    }
}

fn corpus() -> Corpus {
    let text = "It was the best of times, it was the worst of times, it was the age of wisdom. ".repeat(40);
    Corpus::new("dickens", text.into_bytes())
}

#[test]
fn schedule_endpoints() {
    let c = TrainConfig {
        peak_lr: 1e-3,
        warmup_steps: 10,
        total_steps: 110,
        ..Default::default()
    };
    assert_eq!(lr_at(0, &c), 0.0);
    assert!((lr_at(10, &c) - 1e-3).abs() < 1e-18);
    assert!((lr_at(110, &c) - 1e-4).abs() < 1e-15);
    assert!((lr_at(5, &c) - 5e-4).abs() < 1e-15);
    assert!(lr_at(60, &c) < 1e-3 && lr_at(60, &c) > 1e-4);
}

#[test]
fn clipping() {
    let mut g = vec![vec![0.3], vec![0.4]];
    assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 1.0);
    let mut g = vec![vec![3.0, 4.0]];
    let s = clip_global_norm(&mut g, 1.0).unwrap();
    assert!((s - 0.2).abs() < 1e-15);
    assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[0][1] - 0.8).abs() < 1e-15);
    let mut g = vec![vec![1e3, -2e3], vec![7e2]];
    clip_global_norm(&mut g, 1.0).unwrap();
    assert!(global_norm(&g) <= 1.0 + 1e-12);
    let mut bad = vec![vec![1.0, f64::NAN]];
    assert!(matches!(clip_global_norm(&mut bad, 1.0), Err(Error::NonFinite { .. })));
}

#[test]
fn adamw_examples() {
    let cfg = TrainConfig {
        adam_eps: 1e-12,
        ..Default::default()
    };
    let lr = 0.01;
    let mut p = Tensor::full(&[3], 2.0);
    let mut st = AdamWState::new([&p]);
    adamw_step(&mut [&mut p], &[vec![0.0; 3]], &[true], &mut st, lr, &cfg).unwrap();
    for &v in p.data() {
        assert!((v - 2.0 * (1.0 - lr * 0.1)).abs() < 1e-15);
    }
    let mut q = Tensor::full(&[2], 1.0);
    let mut st = AdamWState::new([&q]);
    adamw_step(&mut [&mut q], &[vec![1.0; 2]], &[false], &mut st, lr, &cfg).unwrap();
    for &v in q.data() {
        assert!((v - (1.0 - lr)).abs() < 1e-9, "{v}");
    }
    assert_eq!(st.step, 1);
}

#[test]
fn decay_tags_follow_parameter_roles() {
    let m = Model::build(&tiny()).unwrap();
    let exempt: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).filter(|n| !decays(n)).collect();
    assert!(exempt.contains(&"final_norm".to_string()));
    assert!(exempt.contains(&"layers.0.norm".to_string()));
    assert!(exempt.contains(&"layers.0.mamba.b".to_string()));
    assert!(exempt.contains(&"layers.0.mamba.a".to_string()));
    assert!(exempt.contains(&"layers.0.mamba.d".to_string()));
    assert!(decays("layers.0.mamba.w_in") && decays("head") && decays("embed") && decays("layers.1.mlp.w_up"));
}

#[test]
fn batches_are_seeded_and_checked() {
    let c = corpus();
    let mut a = samba_core::rng::stream(3, "batch");
    let mut b = samba_core::rng::stream(3, "batch");
    let x = sample_batch(&c, 4, 32, &mut a).unwrap();
    assert_eq!(x, sample_batch(&c, 4, 32, &mut b).unwrap());
    assert!(x.iter().all(|r| r.len() == 33 && r.iter().all(|&t| t < 256)));
    let short = Corpus::new("short", vec![1, 2, 3]);
    assert!(matches!(sample_batch(&short, 1, 3, &mut a), Err(Error::Config(_))));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(Model::build(&tiny()).unwrap(), tcfg(3)).unwrap();
    t.run(&corpus(), None, &mut |_| {}).unwrap();
    let p1 = dir.path().join("a.smbc");
    t.save(&p1).unwrap();
    let ck = load_checkpoint(&p1).unwrap();
    let p2 = dir.path().join("b.smbc");
    save_checkpoint(&p2, &ck.model, ck.opt.as_ref()).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(ck.opt.unwrap().adam.step, 3);
    assert!(!dir.path().join("a.smbc.tmp").exists());
}

#[test]
fn reload_drift_is_f32_rounding_only() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::build(&tiny()).unwrap();
    let path = dir.path().join("m.smbc");
    save_checkpoint(&path, &m, None).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert!(back.opt.is_none());
    let toks = [5, 9, 77, 200, 3, 3, 1];
    let diff = m.forward(&toks).unwrap().max_abs_diff(&back.model.forward(&toks).unwrap());
    assert!(diff > 0.0 && diff < 1e-6, "{diff}");
}

#[test]
fn load_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::build(&tiny()).unwrap();
    let path = dir.path().join("m.smbc");
    save_checkpoint(&path, &m, None).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut wrong = tiny();
    wrong.d_model = 32;
    wrong.d_inner = 64;
    wrong.d_mlp = 86;
    wrong.n_q_heads = 2;
    wrong.n_kv_heads = 1;
    let mut other = Model::build(&wrong).unwrap();
    match load_into(&path, &mut other) {
        Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "embed"),
        e => panic!("expected a shape error, got {e:?}"),
    }

    let mut win = tiny();
    win.window = 9;
    assert!(matches!(load_into(&path, &mut Model::build(&win).unwrap()), Err(Error::Config(_))));

    let mut bad = good.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic { .. })));

    let mut bad = good.clone();
    bad[4] = 9;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::BadVersion { found: 9, .. })));

    std::fs::write(&path, &good[..good.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Truncated { .. })));

    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn seeded_runs_repeat_exactly() {
    let run = || {
        let (_, recs) = train_loop(Model::build(&tiny()).unwrap(), &corpus(), &tcfg(6), None).unwrap();
        recs.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_matches_straight_through() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tcfg(8);
    cfg.checkpoint_every = 4;
    let c = corpus();

    let straight_dir = dir.path().join("straight");
    let (_, straight) = train_loop(Model::build(&tiny()).unwrap(), &c, &cfg, Some(&straight_dir)).unwrap();

    let first_dir = dir.path().join("first");
    let mut t = Trainer::new(Model::build(&tiny()).unwrap(), cfg.clone()).unwrap();
    let mut first = Vec::new();
    while t.step() < 4 {
        first.push(t.train_step(&c).unwrap());
    }
    std::fs::create_dir_all(&first_dir).unwrap();
    t.save(&first_dir.join("checkpoint.smbc")).unwrap();
    drop(t);

    let ck = load_checkpoint(&first_dir.join("checkpoint.smbc")).unwrap();
    let mut resumed = Trainer::resume(ck.model, ck.opt.unwrap(), cfg).unwrap();
    let rest = resumed.run(&c, None, &mut |_| {}).unwrap();
    let joined: Vec<u64> = first.iter().chain(&rest).map(|r| r.loss.to_bits()).collect();
    let want: Vec<u64> = straight.iter().map(|r| r.loss.to_bits()).collect();
    assert_eq!(joined, want);

    let metrics = std::fs::read_to_string(straight_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,loss,lr,grad_norm,tok_per_s,wall_ms\n"));
    assert_eq!(metrics.lines().count(), 9);
}

#[test]
fn nan_aborts_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tcfg(4);
    cfg.checkpoint_every = 2;
    let c = corpus();
    let mut t = Trainer::new(Model::build(&tiny()).unwrap(), cfg.clone()).unwrap();
    let out = dir.path();
    let mut seen = 0;
    t.cfg.total_steps = 2;
    t.run(&c, Some(out), &mut |_| seen += 1).unwrap();
    assert_eq!(seen, 2);
    let good = std::fs::read(out.join("checkpoint.smbc")).unwrap();
    t.cfg.total_steps = 4;
    t.model.head.data_mut()[0] = f64::NAN;
    assert!(matches!(t.run(&c, Some(out), &mut |_| {}), Err(Error::NonFinite { .. })));
    assert_eq!(std::fs::read(out.join("checkpoint.smbc")).unwrap(), good);
    assert!(load_checkpoint(&out.join("checkpoint.smbc")).is_ok());
}

#[test]
fn warmup_longer_than_run_is_rejected() {
    let cfg = TrainConfig {
        warmup_steps: 10,
        total_steps: 5,
        ..Default::default()
    };
    assert!(matches!(Trainer::new(Model::build(&tiny()).unwrap(), cfg), Err(Error::Config(_))));
}
