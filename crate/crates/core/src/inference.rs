//! Streaming sessions, sampling and throughput measurement.

use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{mamba_step, mlp_step, swa_step};
use crate::model::{LayerParams, LayerState, Model};
use crate::numerics::ops::{rmsnorm_rows, vecmat};
use crate::numerics::Tape;
use crate::rng;

/// One stream of tokens against a shared model. State size is fixed at
/// construction and does not grow with `tokens_seen`.
#[derive(Clone, Debug)]
pub struct Session<'m> {
    model: &'m Model,
    states: Vec<LayerState>,
    tokens_seen: usize,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model) -> Self {
        Session {
            model,
            states: model.new_states(),
            tokens_seen: 0,
        }
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    pub fn states(&self) -> &[LayerState] {
        &self.states
    }

    pub fn footprint_bytes(&self) -> usize {
        self.states.iter().map(LayerState::footprint_bytes).sum()
    }

    /// Feeds `tokens` through full-sequence layer forwards in window-sized
    /// chunks; returns the logits at the last position.
    pub fn prefill(&mut self, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::contract("prefill needs a non-empty prompt"));
        }
        let chunk = self.model.cfg.window.max(1);
        let v = self.model.cfg.vocab_size;
        let mut last = Vec::new();
        for part in tokens.chunks(chunk) {
            let mut tape = Tape::no_grad();
            let vars = self.model.bind(&mut tape);
            let logits = self
                .model
                .forward_on_tape(&mut tape, &vars, part, part.len(), Some(&mut self.states), None)?;
            let data = tape.value(logits).data();
            last = data[data.len() - v..].to_vec();
            self.tokens_seen += part.len();
        }
        Ok(last)
    }

    /// One token through every layer's step function.
    pub fn decode_step(&mut self, token: usize) -> Result<Vec<f64>> {
        let m = self.model;
        let cfg = &m.cfg;
        let (dm, v) = (cfg.d_model, cfg.vocab_size);
        if token >= v {
            return Err(Error::Index {
                what: "token",
                index: token,
                bound: v,
            });
        }
        let mut x = m.embed.data()[token * dm..(token + 1) * dm].to_vec();
        let mut h = vec![0.0; dm];
        for (layer, state) in m.layers.iter().zip(&mut self.states) {
            rmsnorm_rows(&x, layer.norm.data(), cfg.rms_eps, &mut h);
            let out = match (&layer.params, state) {
                (LayerParams::Mamba(p), LayerState::Mamba(s)) => mamba_step(&h, p, s)?,
                (LayerParams::Swa(p), LayerState::Swa(c)) => swa_step(&h, p, c)?,
                (LayerParams::Mlp(p), LayerState::Stateless) => mlp_step(&h, p),
                _ => return Err(Error::contract("session state does not match the model")),
            };
            for (a, b) in x.iter_mut().zip(&out) {
                *a += b;
            }
        }
        rmsnorm_rows(&x, m.final_norm.data(), cfg.rms_eps, &mut h);
        let mut logits = vec![0.0; v];
        vecmat(&h, m.head.data(), v, &mut logits);
        self.tokens_seen += 1;
        Ok(logits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Nucleus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            mode: DecodeMode::Greedy,
            temperature: 0.2,
            top_p: 0.95,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if self.mode == DecodeMode::Nucleus && !(self.temperature > 0.0) {
            return Err(Error::config("nucleus sampling needs a positive temperature"));
        }
        Ok(())
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Renormalised nucleus of `softmax(logits / τ)`: the shortest prefix of
/// tokens by descending probability whose mass reaches `top_p`.
pub fn nucleus(logits: &[f64], temperature: f64, top_p: f64) -> Vec<(usize, f64)> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (i, ((l - mx) / temperature).exp()))
        .collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cum = 0.0;
    let mut keep = probs.len();
    for (i, p) in probs.iter().enumerate() {
        cum += p.1;
        if cum >= top_p {
            keep = i + 1;
            break;
        }
    }
    probs.truncate(keep);
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    probs
}

pub fn sample_nucleus(logits: &[f64], temperature: f64, top_p: f64, rng: &mut impl Rng) -> usize {
    let kept = nucleus(logits, temperature, top_p);
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for &(i, p) in &kept {
        cum += p;
        if u < cum {
            return i;
        }
    }
    kept.last().map_or(0, |p| p.0)
}

/// Prefills `prompt` and produces up to `max_new_tokens` continuations.
pub fn generate(session: &mut Session<'_>, prompt: &[usize], cfg: &GenerateConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, "generate");
    let mut logits = session.prefill(prompt)?;
    let mut out = Vec::with_capacity(cfg.max_new_tokens);
    for i in 0..cfg.max_new_tokens {
        let tok = match cfg.mode {
            DecodeMode::Greedy => argmax(&logits),
            DecodeMode::Nucleus => sample_nucleus(&logits, cfg.temperature, cfg.top_p, &mut rng),
        };
        out.push(tok);
        if i + 1 < cfg.max_new_tokens {
            logits = session.decode_step(tok)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKind {
    Prefill,
    Decode,
}

impl BenchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchKind::Prefill => "prefill",
            BenchKind::Decode => "decode",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: BenchKind,
    pub length: usize,
    pub run: usize,
    pub tokens_per_s: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Per-token decode latency in seconds for the longest length, the
    /// median across repeats at each step.
    pub latencies: Vec<f64>,
}

pub const BENCH_HEADER: &str = "kind,length,run,tokens_per_s,wall_ms";

impl BenchReport {
    /// Mean and sample standard deviation of tokens/s per length.
    pub fn summary(&self) -> Vec<(usize, f64, f64)> {
        let mut lengths: Vec<usize> = self.rows.iter().map(|r| r.length).collect();
        lengths.dedup();
        lengths
            .into_iter()
            .map(|l| {
                let v: Vec<f64> = self.rows.iter().filter(|r| r.length == l).map(|r| r.tokens_per_s).collect();
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let var = if v.len() > 1 {
                    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
                } else {
                    0.0
                };
                (l, mean, var.sqrt())
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{BENCH_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.3},{:.3}\n",
                r.kind.as_str(),
                r.length,
                r.run,
                r.tokens_per_s,
                r.wall_ms
            ));
        }
        s
    }
}

fn check_ascending(lengths: &[usize]) -> Result<()> {
    if lengths.is_empty() || lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(Error::config("benchmark lengths must be positive and strictly ascending"));
    }
    Ok(())
}

fn bench_prompt(len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|i| (i * 31 + 7) % vocab).collect()
}

/// Greedy decoding of `steps` tokens after a one-token prompt; returns the
/// per-step latencies.
pub fn decode_latencies(model: &Model, steps: usize) -> Result<Vec<f64>> {
    let mut s = Session::new(model);
    let mut logits = s.prefill(&[0])?;
    let mut lat = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t0 = Instant::now();
        logits = s.decode_step(argmax(&logits))?;
        lat.push(t0.elapsed().as_secs_f64());
    }
    Ok(lat)
}

pub fn bench_decode(model: &Model, lengths: &[usize], repeats: usize) -> Result<BenchReport> {
    check_ascending(lengths)?;
    let mut report = BenchReport::default();
    let longest = *lengths.last().unwrap();
    for &len in lengths {
        let mut series = Vec::new();
        for run in 0..repeats.max(1) {
            let lat = decode_latencies(model, len)?;
            let wall: f64 = lat.iter().sum();
            report.rows.push(BenchRow {
                kind: BenchKind::Decode,
                length: len,
                run,
                tokens_per_s: len as f64 / wall.max(1e-12),
                wall_ms: wall * 1e3,
            });
            if len == longest {
                series.push(lat);
            }
        }
        if len == longest {
            report.latencies = median_series(&series);
        }
    }
    Ok(report)
}

/// Element-wise median across equal-length series.
pub fn median_series(series: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = series.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|i| {
            let mut col: Vec<f64> = series.iter().map(|s| s[i]).collect();
            col.sort_by(f64::total_cmp);
            let m = col.len() / 2;
            if col.len() % 2 == 1 {
                col[m]
            } else {
                0.5 * (col[m - 1] + col[m])
            }
        })
        .collect()
}

pub fn bench_prefill(model: &Model, lengths: &[usize], repeats: usize) -> Result<BenchReport> {
    check_ascending(lengths)?;
    let mut report = BenchReport::default();
    for &len in lengths {
        let prompt = bench_prompt(len, model.cfg.vocab_size);
        for run in 0..repeats.max(1) {
            let mut s = Session::new(model);
            let t0 = Instant::now();
            s.prefill(&prompt)?;
            let wall = t0.elapsed().as_secs_f64();
            report.rows.push(BenchRow {
                kind: BenchKind::Prefill,
                length: len,
                run,
                tokens_per_s: len as f64 / wall.max(1e-12),
                wall_ms: wall * 1e3,
            });
        }
    }
    Ok(report)
}

/// Least-squares line through `(x, y)`; returns `(slope, intercept, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}
