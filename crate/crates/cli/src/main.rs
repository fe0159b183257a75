mod config;
mod plot;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use samba_core::evalsuite::{
    attention_entropy, passkey_eval, passkey_finetune, phonebook_eval, ppl_at_lengths, ppl_sliding,
    selection_entropy,
};
use samba_core::inference::{bench_decode, bench_prefill, generate, DecodeMode, GenerateConfig, Session};
use samba_core::training::{load_checkpoint, save_checkpoint, Corpus, Trainer, METRICS_HEADER};
use samba_core::verify::{gradcheck_suite, scan_suite, streaming_suite, Check};
use samba_core::{ArchitecturePattern, Error, Model};

use config::RunSpec;

#[derive(Parser)]
#[command(name = "samba", version, about = "Train, run and evaluate hybrid Mamba / sliding-window attention byte models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a byte corpus.
    Train(TrainArgs),
    /// Perplexity at several context lengths, or sliding-window.
    EvalPpl(EvalPplArgs),
    /// Generate a continuation of a prompt.
    Generate(GenerateArgs),
    /// Passkey fine-tuning and retrieval grid.
    Passkey(PasskeyArgs),
    /// Phonebook retrieval accuracy against book size.
    Phonebook(PhonebookArgs),
    /// Attention and selection entropy per layer.
    Entropy(EntropyArgs),
    /// Prefill or decode throughput.
    Bench(BenchArgs),
    /// Run the built-in oracle suites.
    Verify(VerifyArgs),
    /// Render a CSV as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// `key=value` file with model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    arch: Option<ArchitecturePattern>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Any further `key=value` override.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Fraction of the corpus tail held out from training.
    #[arg(long, default_value_t = 0.05)]
    holdout: f64,
    /// Continue from `<out-dir>/checkpoint.smbc`.
    #[arg(long)]
    resume: bool,
    /// Stop after this step; the schedule still spans the full run.
    #[arg(long)]
    until: Option<u64>,
}

#[derive(Args)]
struct EvalPplArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
    lengths: Vec<usize>,
    #[arg(long)]
    sliding: bool,
    #[arg(long, default_value_t = 1024)]
    window: usize,
    #[arg(long, default_value_t = 256)]
    stride: usize,
    /// Evaluate only the first N bytes of the data file.
    #[arg(long)]
    max_bytes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    Nucleus,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "prompt")]
    prompt_file: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, value_enum, default_value = "greedy")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.2)]
    temp: f64,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PasskeyMode {
    Finetune,
    Eval,
}

#[derive(Args)]
struct PasskeyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "eval")]
    mode: PasskeyMode,
    #[arg(long, default_value_t = 256)]
    train_len: usize,
    #[arg(long, default_value_t = 500)]
    steps: u64,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "256,512")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where the fine-tuned checkpoint goes.
    #[arg(long)]
    save: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PhonebookArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// `start:end:step` in name-number pairs.
    #[arg(long, default_value = "20:480:20")]
    pairs_range: String,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EntropyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    last_l: usize,
    /// Number of leading bytes of the data used as the sequence.
    #[arg(long, default_value_t = 512)]
    len: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKindArg {
    Prefill,
    Decode,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "decode")]
    kind: BenchKindArg,
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Suite {
    Gradcheck,
    Scan,
    Streaming,
    All,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    x: String,
    #[arg(long)]
    y: String,
    #[arg(long)]
    series: Option<String>,
}

enum Failure {
    Usage(String),
    Io(String),
    Numeric(String),
    Verify(usize),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Io(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Verify(_) => 4,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::BadVersion { .. }
            | Error::Truncated { .. }
            | Error::ShapeMismatch { .. }
            | Error::Malformed(_) => Failure::Io(msg),
            Error::NonFinite { .. } => Failure::Numeric(msg),
            _ => Failure::Usage(msg),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn read_file(path: &Path) -> std::result::Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| io_err(path, e))
}

fn load_model(path: &Path) -> std::result::Result<Model, Failure> {
    Ok(load_checkpoint(path)?.model)
}

/// Writes to `out`, or stdout when absent.
fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| io_err(p, e)),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())
                .and_then(|()| so.flush())
                .map_err(|e| Failure::Io(format!("stdout: {e}")))
        }
    }
}

fn bytes_to_tokens(b: &[u8]) -> Vec<usize> {
    b.iter().map(|&x| usize::from(x)).collect()
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let mut overrides: Vec<(&str, String)> = Vec::new();
    if let Some(v) = a.arch {
        overrides.push(("arch", v.to_string()));
    }
    if let Some(v) = a.steps {
        overrides.push(("total_steps", v.to_string()));
    }
    if let Some(v) = a.seed {
        overrides.push(("seed", v.to_string()));
    }
    if let Some(v) = a.d_model {
        overrides.push(("d_model", v.to_string()));
    }
    if let Some(v) = a.n_layers {
        overrides.push(("n_layers", v.to_string()));
    }
    if let Some(v) = a.window {
        overrides.push(("window", v.to_string()));
    }
    if let Some(v) = a.lr {
        overrides.push(("peak_lr", v.to_string()));
    }
    if let Some(v) = a.batch_size {
        overrides.push(("batch_size", v.to_string()));
    }
    if let Some(v) = a.seq_len {
        overrides.push(("seq_len", v.to_string()));
    }
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        overrides.push((k.trim(), v.trim().to_string()));
    }
    let spec = RunSpec::resolve(a.config.as_deref(), &overrides)?;
    if !(0.0..1.0).contains(&a.holdout) {
        return Err(Failure::Usage(format!("--holdout must lie in [0, 1), got {}", a.holdout)));
    }
    let corpus = Corpus::load(&a.corpus)?;
    let (train, _) = corpus.split_tail(a.holdout);
    let ckpt = a.out_dir.join("checkpoint.smbc");
    let mut trainer = if a.resume {
        let loaded = load_checkpoint(&ckpt)?;
        let opt = loaded
            .opt
            .ok_or_else(|| Failure::Usage(format!("{} has no optimizer state to resume from", ckpt.display())))?;
        if loaded.model.cfg != spec.model {
            return Err(Failure::Usage(format!(
                "{} was trained with a different model configuration",
                ckpt.display()
            )));
        }
        Trainer::resume(loaded.model, opt, spec.train.clone())?
    } else {
        Trainer::new(Model::build(&spec.model)?, spec.train.clone())?
    };
    eprintln!(
        "training {} ({} parameters) for {} steps on {} bytes",
        spec.model.arch,
        trainer.model.param_count(),
        spec.train.total_steps,
        train.len()
    );
    let every = spec.train.log_every;
    let until = a.until.unwrap_or(spec.train.total_steps);
    trainer.run_until(&train, Some(&a.out_dir), until, &mut |r| {
        if every > 0 && (r.step % every == 0 || r.step == 1) {
            eprintln!(
                "step {:>6}  loss {:.4}  lr {:.2e}  |g| {:.3}  {:.0} tok/s",
                r.step, r.loss, r.lr, r.grad_norm, r.tok_per_s
            );
        }
    })?;
    eprintln!("wrote {}", ckpt.display());
    Ok(())
}

fn cmd_eval_ppl(a: EvalPplArgs) -> Outcome {
    let model = load_model(&a.ckpt)?;
    let mut data = read_file(&a.data)?;
    if let Some(n) = a.max_bytes {
        data.truncate(n);
    }
    let arch = model.cfg.arch.to_string();
    if a.sliding {
        let ppl = ppl_sliding(&model, &data, a.window, a.stride)?;
        emit(a.out.as_deref(), &format!("arch,ctx_len,ppl\n{arch},{},{ppl:.6}\n", a.window))
    } else {
        let rep = ppl_at_lengths(&model, &data, &a.lengths)?;
        emit(a.out.as_deref(), &rep.to_csv(&arch))
    }
}

fn cmd_generate(a: GenerateArgs) -> Outcome {
    let model = load_model(&a.ckpt)?;
    let prompt = match (&a.prompt_file, &a.prompt) {
        (Some(p), _) => read_file(p)?,
        (None, Some(s)) => s.clone().into_bytes(),
        (None, None) => return Err(Failure::Usage("one of --prompt or --prompt-file is required".into())),
    };
    let cfg = GenerateConfig {
        mode: match a.mode {
            ModeArg::Greedy => DecodeMode::Greedy,
            ModeArg::Nucleus => DecodeMode::Nucleus,
        },
        temperature: a.temp,
        top_p: a.top_p,
        max_new_tokens: a.max_new,
        seed: a.seed,
    };
    let out = generate(&mut Session::new(&model), &bytes_to_tokens(&prompt), &cfg)?;
    let bytes: Vec<u8> = out.iter().map(|&t| t as u8).collect();
    let mut so = std::io::stdout().lock();
    so.write_all(&bytes)
        .and_then(|()| so.flush())
        .map_err(|e| Failure::Io(format!("stdout: {e}")))
}

fn cmd_passkey(a: PasskeyArgs) -> Outcome {
    let mut model = load_model(&a.ckpt)?;
    if a.mode == PasskeyMode::Finetune {
        let save = a
            .save
            .clone()
            .ok_or_else(|| Failure::Usage("--mode finetune needs --save PATH".into()))?;
        let mut cfg = samba_core::training::TrainConfig {
            peak_lr: a.lr,
            total_steps: a.steps,
            warmup_steps: a.steps / 10,
            batch_size: a.batch_size,
            seq_len: a.train_len,
            seed: a.seed,
            ..Default::default()
        };
        cfg.log_every = cfg.log_every.max(1);
        eprintln!("{METRICS_HEADER}");
        let (tuned, _) = passkey_finetune(model, a.train_len, &cfg, &mut |r| eprintln!("{}", r.csv_row()))?;
        save_checkpoint(&save, &tuned, None)?;
        model = tuned;
    }
    let grid = passkey_eval(&model, &a.lengths, a.trials, a.seed)?;
    emit(a.out.as_deref(), &grid.to_csv())
}

fn parse_range(s: &str) -> std::result::Result<Vec<usize>, Failure> {
    let bad = || Failure::Usage(format!("--pairs-range expects start:end:step, got `{s}`"));
    let parts: Vec<usize> = s.split(':').map(|p| p.trim().parse().map_err(|_| bad())).collect::<std::result::Result<_, _>>()?;
    let [start, end, step] = parts[..] else {
        return Err(bad());
    };
    if step == 0 || start < 2 || end < start {
        return Err(bad());
    }
    Ok((start..=end).step_by(step).collect())
}

fn cmd_phonebook(a: PhonebookArgs) -> Outcome {
    let model = load_model(&a.ckpt)?;
    let counts = parse_range(&a.pairs_range)?;
    let rows = phonebook_eval(&model, &counts, a.trials, a.seed)?;
    let mut s = String::from("n_pairs,acc,trials\n");
    for (n, acc, t) in rows {
        s.push_str(&format!("{n},{acc:.4},{t}\n"));
    }
    emit(a.out.as_deref(), &s)
}

fn cmd_entropy(a: EntropyArgs) -> Outcome {
    let model = load_model(&a.ckpt)?;
    let data = read_file(&a.data)?;
    if data.len() < a.len {
        return Err(Failure::Usage(format!(
            "{} holds {} bytes, fewer than --len {}",
            a.data.display(),
            data.len(),
            a.len
        )));
    }
    let toks = bytes_to_tokens(&data[..a.len]);
    let mut rep = selection_entropy(&model, &toks)?;
    if model.kinds().contains(&samba_core::LayerKind::Swa) {
        rep = attention_entropy(&model, &toks, a.last_l)?.merge(rep);
    }
    emit(a.out.as_deref(), &rep.to_csv())
}

fn cmd_bench(a: BenchArgs) -> Outcome {
    let model = load_model(&a.ckpt)?;
    let rep = match a.kind {
        BenchKindArg::Prefill => bench_prefill(&model, &a.lengths, a.repeats)?,
        BenchKindArg::Decode => bench_decode(&model, &a.lengths, a.repeats)?,
    };
    for (len, mean, sd) in rep.summary() {
        eprintln!("length {len:>6}: {mean:.1} ± {sd:.1} tok/s");
    }
    emit(a.out.as_deref(), &rep.to_csv())
}

fn cmd_verify(a: VerifyArgs) -> Outcome {
    let mut checks: Vec<Check> = Vec::new();
    if matches!(a.suite, Suite::Gradcheck | Suite::All) {
        checks.extend(gradcheck_suite(a.seed)?);
    }
    if matches!(a.suite, Suite::Scan | Suite::All) {
        checks.extend(scan_suite(a.seed)?);
    }
    if matches!(a.suite, Suite::Streaming | Suite::All) {
        checks.extend(streaming_suite(a.seed)?);
    }
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        Err(Failure::Verify(failed))
    } else {
        Ok(())
    }
}

fn cmd_plot(a: PlotArgs) -> Outcome {
    let text = std::fs::read_to_string(&a.csv).map_err(|e| io_err(&a.csv, e))?;
    let series = plot::read_series(&text, &a.x, &a.y, a.series.as_deref())
        .map_err(|e| Failure::Usage(format!("{}: {e}", a.csv.display())))?;
    let svg = plot::render_svg(&series, &a.x, &a.y);
    std::fs::write(&a.out, svg).map_err(|e| io_err(&a.out, e))
}

fn init_threads() -> Outcome {
    let Ok(v) = std::env::var("SAMBA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("SAMBA_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Outcome {
    init_threads()?;
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::EvalPpl(a) => cmd_eval_ppl(a),
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Passkey(a) => cmd_passkey(a),
        Cmd::Phonebook(a) => cmd_phonebook(a),
        Cmd::Entropy(a) => cmd_entropy(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Plot(a) => cmd_plot(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Io(m) => eprintln!("i/o error: {m}"),
                Failure::Numeric(m) => eprintln!("numeric failure: {m}"),
                Failure::Verify(n) => eprintln!("verification failed: {n} check(s)"),
            }
            ExitCode::from(f.code())
        }
    }
}
