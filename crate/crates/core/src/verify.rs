//! Oracle suites: finite differences, sequential-vs-chunked scan, and
//! streaming-vs-batch equivalence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::inference::{argmax, Session};
use crate::layers::attention::{attention_on_tape, KvPrefix};
use crate::layers::rope::rope_on_tape;
use crate::layers::{
    mamba_forward, mamba_on_tape, mamba_step, mlp_on_tape, swa_forward, swa_on_tape, swa_step, AttnGeometry,
    KvCache, MambaDims, MambaParams, MambaState, MambaVars, MlpVars, SwaParams, SwaVars,
};
use crate::model::{ArchitecturePattern, Model, ModelConfig};
use crate::numerics::{finite_diff_grad, grad_error, max_abs_diff, Tape, Tensor, Var};
use crate::scan::{s6_on_tape, s6_parallel, s6_sequential, ScanInputs, ScanMode};

/// One named oracle comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tol: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `value < tol`.
    pub fn below(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Check {
            name: name.into(),
            value,
            tol,
            passed: value < tol,
        }
    }

    pub fn exact(name: impl Into<String>, ok: bool) -> Self {
        Check {
            name: name.into(),
            value: if ok { 0.0 } else { 1.0 },
            tol: 0.0,
            passed: ok,
        }
    }

    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        if self.tol > 0.0 {
            format!("{tag} {}: {:.3e} (tol {:.0e})", self.name, self.value, self.tol)
        } else {
            format!("{tag} {}", self.name)
        }
    }
}

pub const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-8;
/// Denominator floor for the whole-model check: central differences of an
/// O(1) loss at h = 1e-5 carry about 2e-11 of round-off.
pub const MODEL_FLOOR: f64 = 1e-6;

/// `max |a − n| / max(|a|, |n|, floor)`.
pub fn floored_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape and data agree")
}

/// Worst relative disagreement between tape gradients and central
/// differences of `Σ out ⊙ R` (fixed random `R`) over every input.
pub fn tape_gradcheck<F>(inputs: &[Tensor], seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let probe = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = build(tape, vars)?;
        let shape = tape.value(out).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let r = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
        let prod = tape.mul(out, r)?;
        Ok(tape.sum(prod))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = probe(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.take_grad(v).unwrap_or_default()).collect();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut err = None;
        let numeric = finite_diff_grad(
            |theta| {
                let mut t = Tape::no_grad();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.constant(if j == i { theta.clone() } else { x.clone() }))
                    .collect();
                match probe(&mut t, &vs) {
                    Ok(l) => t.value(l).item(),
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &inputs[i],
            FD_STEP,
        )?;
        if let Some(e) = err {
            return Err(e);
        }
        worst = worst.max(grad_error(a, numeric.data(), FD_FLOOR));
    }
    Ok(worst)
}

fn small_mamba(rng: &mut ChaCha8Rng) -> (MambaDims, MambaParams) {
    let dims = MambaDims {
        d_model: 4,
        d_inner: 8,
        d_rank: 2,
        d_state: 3,
        conv_kernel: 3,
    };
    let mut p = MambaParams::init(rng, &dims, 1.0);
    // a non-zero W_q exercises the full Δ path
    p.w_q = random(rng, &[2, 8], -0.5, 0.5);
    (dims, p)
}

fn small_geom(window: usize) -> AttnGeometry {
    AttnGeometry {
        n_q_heads: 2,
        n_kv_heads: 1,
        head_dim: 4,
        window,
        rope_base: 10_000.0,
        rope_enabled: true,
    }
}

/// Every differentiable primitive, each layer species and the micro model.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = 1e-5;
    let mut out = Vec::new();
    let mut r = |s: &[usize]| random(&mut rng, s, -1.0, 1.0);

    let (a, b) = (r(&[3, 4]), r(&[4, 2]));
    out.push(Check::below("grad matmul", tape_gradcheck(&[a, b], seed, |t, v| t.matmul(v[0], v[1]))?, tol));
    let (a, b) = (r(&[3, 5]), r(&[3, 5]));
    out.push(Check::below("grad add", tape_gradcheck(&[a.clone(), b.clone()], seed, |t, v| t.add(v[0], v[1]))?, tol));
    out.push(Check::below("grad mul", tape_gradcheck(&[a.clone(), b], seed, |t, v| t.mul(v[0], v[1]))?, tol));
    let bias = r(&[5]);
    out.push(Check::below(
        "grad add_row",
        tape_gradcheck(&[a.clone(), bias], seed, |t, v| t.add_row(v[0], v[1]))?,
        tol,
    ));
    out.push(Check::below("grad scale", tape_gradcheck(std::slice::from_ref(&a), seed, |t, v| Ok(t.scale(v[0], -1.7)))?, tol));
    out.push(Check::below("grad sum", tape_gradcheck(std::slice::from_ref(&a), seed, |t, v| Ok(t.sum(v[0])))?, tol));
    out.push(Check::below("grad silu", tape_gradcheck(std::slice::from_ref(&a), seed, |t, v| Ok(t.silu(v[0])))?, tol));
    out.push(Check::below("grad softplus", tape_gradcheck(std::slice::from_ref(&a), seed, |t, v| Ok(t.softplus(v[0])))?, tol));
    out.push(Check::below("grad softmax", tape_gradcheck(std::slice::from_ref(&a), seed, |t, v| t.softmax_lastdim(v[0]))?, tol));
    let g = r(&[5]);
    out.push(Check::below(
        "grad rmsnorm",
        tape_gradcheck(&[a.clone(), g], seed, |t, v| t.rmsnorm(v[0], v[1], 1e-5))?,
        tol,
    ));
    let table = r(&[6, 3]);
    out.push(Check::below(
        "grad embedding",
        tape_gradcheck(&[table], seed, |t, v| t.embedding(v[0], &[2, 0, 2, 5]))?,
        tol,
    ));
    let (h, w) = (r(&[8, 3]), r(&[3, 3]));
    out.push(Check::below(
        "grad depthwise conv",
        tape_gradcheck(&[h, w], seed, |t, v| t.conv1d_causal(v[0], v[1], 4, None))?,
        tol,
    ));
    let logits = r(&[4, 5]);
    out.push(Check::below(
        "grad cross entropy",
        tape_gradcheck(&[logits], seed, |t, v| t.cross_entropy(v[0], &[1, 4, 0, 2], Some(&[1.0, 0.5, 0.0, 2.0])))?,
        tol,
    ));

    // scan: positive gate via softplus so perturbations stay admissible
    let (n, de, ds) = (5, 3, 2);
    let scan_in = vec![
        r(&[2 * n, de]),
        r(&[2 * n, de]),
        r(&[de, ds]),
        r(&[2 * n, ds]),
        r(&[2 * n, ds]),
        r(&[de]),
    ];
    for (label, mode) in [("sequential", ScanMode::Sequential), ("chunked", ScanMode::Chunked(2))] {
        let e = tape_gradcheck(&scan_in, seed, |t, v| {
            let dl = t.softplus(v[1]);
            Ok(s6_on_tape(t, [v[0], dl, v[2], v[3], v[4], v[5]], n, mode, None)?.0)
        })?;
        out.push(Check::below(format!("grad s6 scan ({label})"), e, tol));
    }

    let x = r(&[2, 3, 4]).reshape(&[6, 4])?;
    out.push(Check::below(
        "grad rope",
        tape_gradcheck(&[x], seed, |t, v| rope_on_tape(t, v[0], 4, 3, 5, 10_000.0))?,
        tol,
    ));

    let geom = small_geom(3);
    let (q, k, vv) = (r(&[12, 8]), r(&[12, 4]), r(&[12, 4]));
    out.push(Check::below(
        "grad attention core",
        tape_gradcheck(&[q, k, vv], seed, |t, v| {
            attention_on_tape(t, v[0], v[1], v[2], &geom, 6, KvPrefix::default(), None)
        })?,
        tol,
    ));

    let mut prng = ChaCha8Rng::seed_from_u64(seed + 1);
    let (dims, mp) = small_mamba(&mut prng);
    let mut inputs = vec![random(&mut prng, &[12, 4], -1.0, 1.0)];
    inputs.extend(mp.named().iter().map(|(_, t)| (*t).clone()));
    let e = tape_gradcheck(&inputs, seed, |t, v| {
        let vars = MambaVars {
            w_in: v[1],
            w_conv: v[2],
            w_r: v[3],
            w_q: v[4],
            b: v[5],
            w_b: v[6],
            w_c: v[7],
            a: v[8],
            d: v[9],
            w_g: v[10],
            w_out: v[11],
        };
        mamba_on_tape(t, v[0], &vars, &dims, 6, ScanMode::Sequential, None, None)
    })?;
    out.push(Check::below("grad mamba layer", e, tol));

    let sp = SwaParams::init(&mut prng, 8, geom, 1.0);
    let mut inputs = vec![random(&mut prng, &[12, 8], -1.0, 1.0)];
    inputs.extend(sp.named().iter().map(|(_, t)| (*t).clone()));
    let e = tape_gradcheck(&inputs, seed, |t, v| {
        let vars = SwaVars {
            w_q: v[1],
            w_k: v[2],
            w_v: v[3],
            w_o: v[4],
        };
        swa_on_tape(t, v[0], &vars, &geom, 6, 2, None, None)
    })?;
    out.push(Check::below("grad swa layer", e, tol));

    let inputs = vec![
        random(&mut prng, &[5, 4], -1.0, 1.0),
        random(&mut prng, &[4, 6], -1.0, 1.0),
        random(&mut prng, &[4, 6], -1.0, 1.0),
        random(&mut prng, &[6, 4], -1.0, 1.0),
    ];
    let e = tape_gradcheck(&inputs, seed, |t, v| {
        mlp_on_tape(
            t,
            v[0],
            &MlpVars {
                w_gate: v[1],
                w_up: v[2],
                w_down: v[3],
            },
        )
    })?;
    out.push(Check::below("grad mlp layer", e, tol));

    out.push(Check::below("grad micro model", micro_model_gradcheck(seed)?, 1e-4));
    Ok(out)
}

/// The micro configuration: samba, d_m = 8, four layers, V = 11, n = 6.
pub fn micro_config(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::with_d_model(8);
    cfg.n_layers = 4;
    cfg.vocab_size = 11;
    cfg.window = 4;
    cfg.n_q_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.head_dim = 4;
    cfg.d_mlp = 12;
    cfg.seed = seed;
    cfg
}

/// All parameters of the micro model against central differences of the loss.
pub fn micro_model_gradcheck(seed: u64) -> Result<f64> {
    let cfg = micro_config(seed);
    let mut model = Model::build(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    // move off the zero-initialised Δ projection so its gradient path is generic
    for t in model.params_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    let tokens: Vec<usize> = (0..6).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let (_, grads) = model.loss_and_grads(std::slice::from_ref(&tokens), None)?;
    let count = grads.len();
    let mut worst = 0.0f64;
    for (i, analytic) in grads.iter().enumerate().take(count) {
        let theta = model.params_mut()[i].clone();
        let mut probe_model = model.clone();
        let numeric = finite_diff_grad(
            |th| {
                *probe_model.params_mut()[i] = th.clone();
                probe_model.loss(&tokens).unwrap_or(f64::NAN)
            },
            &theta,
            FD_STEP,
        )?;
        worst = worst.max(floored_rel_error(analytic, numeric.data(), MODEL_FLOOR));
    }
    Ok(worst)
}

fn random_scan(rng: &mut ChaCha8Rng, n: usize, de: usize, ds: usize) -> Vec<Vec<f64>> {
    let mut v = |len: usize, lo: f64, hi: f64| -> Vec<f64> { (0..len).map(|_| rng.gen_range(lo..hi)).collect() };
    vec![
        v(n * de, -1.0, 1.0),
        v(n * de, 0.001, 0.5),
        v(de * ds, -0.5, 1.5),
        v(n * ds, -1.0, 1.0),
        v(n * ds, -1.0, 1.0),
        v(de, -1.0, 1.0),
    ]
}

fn scan_view<'a>(x: &'a [Vec<f64>], de: usize, ds: usize, z0: Option<&'a [f64]>) -> ScanInputs<'a> {
    ScanInputs {
        u: &x[0],
        delta: &x[1],
        a: &x[2],
        b: &x[3],
        c: &x[4],
        d: &x[5],
        z0,
        d_inner: de,
        d_state: ds,
    }
}

/// 100 random chunked-vs-sequential comparisons and the streaming split.
pub fn scan_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=128);
        let de = rng.gen_range(1..=16);
        let ds = rng.gen_range(1..=8);
        let x = random_scan(&mut rng, n, de, ds);
        let inp = scan_view(&x, de, ds, None);
        let seqv = s6_sequential(&inp, false)?;
        for chunk in [1, 4, 8, n] {
            let par = s6_parallel(&inp, chunk, false)?;
            worst = worst.max(max_abs_diff(&par.y, &seqv.y)).max(max_abs_diff(&par.zn, &seqv.zn));
        }
    }
    let mut out = vec![Check::below("scan chunked vs sequential (100 instances)", worst, 1e-10)];

    let mut split_ok = true;
    for _ in 0..20 {
        let n = rng.gen_range(2..=64);
        let (de, ds) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let m = rng.gen_range(1..n);
        let x = random_scan(&mut rng, n, de, ds);
        let full = s6_sequential(&scan_view(&x, de, ds, None), false)?;
        let head: Vec<Vec<f64>> = vec![
            x[0][..m * de].to_vec(),
            x[1][..m * de].to_vec(),
            x[2].clone(),
            x[3][..m * ds].to_vec(),
            x[4][..m * ds].to_vec(),
            x[5].clone(),
        ];
        let tail: Vec<Vec<f64>> = vec![
            x[0][m * de..].to_vec(),
            x[1][m * de..].to_vec(),
            x[2].clone(),
            x[3][m * ds..].to_vec(),
            x[4][m * ds..].to_vec(),
            x[5].clone(),
        ];
        let first = s6_sequential(&scan_view(&head, de, ds, None), false)?;
        let second = s6_sequential(&scan_view(&tail, de, ds, Some(&first.zn)), false)?;
        let joined: Vec<f64> = first.y.iter().chain(&second.y).copied().collect();
        split_ok &= joined == full.y && second.zn == full.zn;
    }
    out.push(Check::exact("scan streaming split is exact", split_ok));
    Ok(out)
}

/// Step functions against full-sequence forwards, per layer and per model.
pub fn streaming_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (_, mut mp) = small_mamba(&mut rng);
    mp.w_q = random(&mut rng, &[2, 8], -0.5, 0.5);
    let x = random(&mut rng, &[40, 4], -1.0, 1.0);
    let full = mamba_forward(&x, &mp, ScanMode::Sequential)?;
    let mut st = MambaState::new(&mp.dims());
    let mut worst = 0.0f64;
    for i in 0..40 {
        let y = mamba_step(x.row(i), &mp, &mut st)?;
        worst = worst.max(max_abs_diff(&y, full.row(i)));
    }
    out.push(Check::below("mamba step vs forward", worst, 1e-10));

    let sp = SwaParams::init(&mut rng, 8, small_geom(5), 1.0);
    let x = random(&mut rng, &[40, 8], -1.0, 1.0);
    let full = swa_forward(&x, &sp, 0)?;
    let mut cache = KvCache::new(&sp.geom);
    let mut worst = 0.0f64;
    for i in 0..40 {
        let y = swa_step(x.row(i), &sp, &mut cache)?;
        worst = worst.max(max_abs_diff(&y, full.row(i)));
    }
    out.push(Check::below("swa step vs forward", worst, 1e-10));

    for arch in ArchitecturePattern::ALL {
        let mut cfg = ModelConfig::with_d_model(16);
        cfg.arch = arch;
        cfg.n_layers = arch.period().len() * 2;
        cfg.window = 16;
        cfg.seed = seed;
        let model = Model::build(&cfg)?;
        let prompt: Vec<usize> = (0..rng.gen_range(40..=120)).map(|_| rng.gen_range(0..256)).collect();
        out.push(Check::below(
            format!("prefill+decode vs forward ({arch})"),
            model_streaming_error(&model, &prompt, 16)?,
            1e-8,
        ));
    }
    Ok(out)
}

/// Worst logit disagreement between a streaming session (prefill, then
/// `steps` greedy decodes) and fresh full forwards over the growing sequence.
pub fn model_streaming_error(model: &Model, prompt: &[usize], steps: usize) -> Result<f64> {
    let mut s = Session::new(model);
    let mut logits = s.prefill(prompt)?;
    let mut seq = prompt.to_vec();
    let mut worst = 0.0f64;
    for i in 0..=steps {
        let full = model.forward(&seq)?;
        worst = worst.max(max_abs_diff(full.row(seq.len() - 1), &logits));
        if i == steps {
            break;
        }
        let tok = argmax(&logits);
        seq.push(tok);
        logits = s.decode_step(tok)?;
    }
    Ok(worst)
}
