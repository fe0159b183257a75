use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use samba_core::training::save_checkpoint;
use samba_core::{ArchitecturePattern, Model, ModelConfig};

fn samba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_samba"))
        .args(args)
        .env("SAMBA_THREADS", "1")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn untrained(dir: &Path, arch: ArchitecturePattern) -> PathBuf {
    let mut cfg = ModelConfig::with_d_model(16);
    cfg.arch = arch;
    cfg.n_layers = 4;
    cfg.window = 16;
    let path = dir.join(format!("{arch}.smbc"));
    save_checkpoint(&path, &Model::build(&cfg).unwrap(), None).unwrap();
    path
}

fn corpus(dir: &Path) -> PathBuf {
    let text = "It was the best of times, it was the worst of times, it was the age of wisdom. ".repeat(300);
    let path = dir.join("corpus.txt");
    std::fs::write(&path, text).unwrap();
    path
}

fn random_data(dir: &Path, n: usize) -> PathBuf {
    let mut x: u64 = 0x9E37_79B9_7F4A_7C15;
    let bytes: Vec<u8> = (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 56) as u8
        })
        .collect();
    let path = dir.join("random.bin");
    std::fs::write(&path, bytes).unwrap();
    path
}

#[test]
fn verify_all_exits_zero() {
    let o = samba(&["verify", "--suite", "all"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() > 20);
    assert!(!out.contains("FAIL"));
}

#[test]
fn untrained_checkpoint_scores_near_vocab_size() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = untrained(dir.path(), ArchitecturePattern::Samba);
    let data = random_data(dir.path(), 4096);
    let o = samba(&["eval-ppl", "--ckpt", p(&ckpt), "--data", p(&data), "--lengths", "256"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("arch,ctx_len,ppl"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..2], &["samba", "256"]);
    let ppl: f64 = row[2].parse().unwrap();
    assert!((ppl / 256.0 - 1.0).abs() < 0.1, "{ppl}");

    let o = samba(&[
        "eval-ppl", "--ckpt", p(&ckpt), "--data", p(&data), "--sliding", "--window", "256", "--stride", "256",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().nth(1).unwrap().split(',').nth(2), Some(row[2]));
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let text = corpus(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny\nd_model=16\nn_layers=4\nwindow=8\nbatch_size=2\nseq_len=32\nwarmup_steps=2\nlog_every=1\ncheckpoint_every=3\n").unwrap();
    let run = |name: &str, steps: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec![
            "train", "--config", p(&cfg), "--corpus", p(&text), "--out-dir", p(&out), "--steps", steps, "--seed", "3",
        ];
        args.extend_from_slice(extra);
        let o = samba(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let losses = |dir: &Path| -> Vec<String> {
        let text = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,loss,lr,grad_norm,tok_per_s,wall_ms"));
        lines.map(|l| l.split(',').take(4).collect::<Vec<_>>().join(",")).collect()
    };
    let a = run("a", "6", &[]);
    let b = run("b", "6", &[]);
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(
        std::fs::read(a.join("checkpoint.smbc")).unwrap(),
        std::fs::read(b.join("checkpoint.smbc")).unwrap()
    );
    let c = run("c", "6", &["--until", "3"]);
    run("c", "6", &["--resume"]);
    assert_eq!(losses(&a), losses(&c));
    assert_eq!(
        std::fs::read(a.join("checkpoint.smbc")).unwrap(),
        std::fs::read(c.join("checkpoint.smbc")).unwrap()
    );
}

#[test]
fn config_errors_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let text = corpus(dir.path());
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "d_model=16\n\nwindwo=8\n").unwrap();
    let out = dir.path().join("out");
    let o = samba(&["train", "--config", p(&cfg), "--corpus", p(&text), "--out-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("line 3") && err.contains("windwo"), "{err}");

    assert_eq!(samba(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(samba(&["verify", "--suite", "nope"]).status.code(), Some(1));
    let o = samba(&["train", "--corpus", p(&text), "--out-dir", p(&out), "--set", "n_layers=3"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn missing_files_are_io_errors() {
    let o = samba(&["eval-ppl", "--ckpt", "/nonexistent/model.smbc", "--data", "/nonexistent/data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/model.smbc"));
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.smbc");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = samba(&["generate", "--ckpt", p(&junk), "--prompt", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generation_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = untrained(dir.path(), ArchitecturePattern::Samba);
    let gen = |mode: &str, seed: &str| {
        let o = samba(&[
            "generate", "--ckpt", p(&ckpt), "--prompt", "Once upon", "--mode", mode, "--temp", "1.0", "--max-new", "24",
            "--seed", seed,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        o.stdout
    };
    let a = gen("nucleus", "1");
    assert_eq!(a.len(), 24);
    assert_eq!(a, gen("nucleus", "1"));
    assert_ne!(a, gen("nucleus", "2"));
    assert_eq!(gen("greedy", "1"), gen("greedy", "2"));
}

#[test]
fn plot_emits_one_polyline_per_series() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ppl.csv");
    std::fs::write(&csv, "arch,ctx_len,ppl\nsamba,256,3.1\nllama-swa,256,3.4\nsamba,512,3.0\n").unwrap();
    let svg = dir.path().join("ppl.svg");
    let o = samba(&["plot", "--csv", p(&csv), "--out", p(&svg), "--x", "ctx_len", "--y", "ppl", "--series", "arch"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&svg).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let lines = doc.descendants().filter(|n| n.has_tag_name("polyline")).count();
    assert_eq!(lines, 2);

    let o = samba(&["plot", "--csv", p(&csv), "--out", p(&svg), "--x", "ctx_len", "--y", "ppl"]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&svg).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 1);

    let o = samba(&["plot", "--csv", p(&csv), "--out", p(&svg), "--x", "ctx_len", "--y", "loss"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diagnostics_print_csv_with_headers() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = untrained(dir.path(), ArchitecturePattern::Samba);
    let data = random_data(dir.path(), 1024);

    let o = samba(&["entropy", "--ckpt", p(&ckpt), "--data", p(&data), "--len", "128", "--last-l", "16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("layer_idx,layer_kind,entropy"));
    let kinds: Vec<&str> = out.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(kinds, ["mamba", "swa"]);

    let o = samba(&["bench", "--ckpt", p(&ckpt), "--kind", "prefill", "--lengths", "16,32", "--repeats", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("kind,length,run,tokens_per_s,wall_ms"));
    assert_eq!(out.lines().count(), 5);

    let o = samba(&["phonebook", "--ckpt", p(&ckpt), "--pairs-range", "2:6:2", "--trials", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "n_pairs,acc,trials\n2,0.0000,1\n4,0.0000,1\n6,0.0000,1\n");

    let o = samba(&["passkey", "--ckpt", p(&ckpt), "--lengths", "96", "--trials", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("length,depth,acc,trials"));
    assert_eq!(out.lines().count(), 12);
}

#[test]
fn passkey_finetune_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = untrained(dir.path(), ArchitecturePattern::Samba);
    let tuned = dir.path().join("tuned.smbc");
    let o = samba(&[
        "passkey", "--ckpt", p(&ckpt), "--mode", "finetune", "--train-len", "96", "--steps", "2", "--batch-size", "1",
        "--lengths", "96", "--trials", "1", "--save", p(&tuned),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("step,loss,lr,grad_norm,tok_per_s,wall_ms\n1,"));
    assert!(tuned.exists());
    let o = samba(&["passkey", "--ckpt", p(&ckpt), "--mode", "finetune"]);
    assert_eq!(o.status.code(), Some(1));
}
