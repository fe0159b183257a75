//! Perplexity against context length, passkey and phonebook retrieval, and
//! attention / selection entropy diagnostics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{generate, GenerateConfig, Session};
use crate::model::{LayerKind, Model};
use crate::numerics::ops::row_nll;
use crate::rng;
use crate::training::{StepRecord, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct PplRow {
    pub context_length: usize,
    pub ppl: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PplReport {
    pub rows: Vec<PplRow>,
}

impl PplReport {
    pub fn ppl_at(&self, len: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.context_length == len).map(|r| r.ppl)
    }

    pub fn to_csv(&self, arch: &str) -> String {
        let mut s = String::from("arch,ctx_len,ppl\n");
        for r in &self.rows {
            s.push_str(&format!("{arch},{},{:.6}\n", r.context_length, r.ppl));
        }
        s
    }
}

/// Sums the NLL of windows `(start, len, first_scored)`; position `i` of a
/// window is scored when `i ≥ first_scored` (always `i ≥ 1`).
fn score_windows(model: &Model, data: &[u8], windows: &[(usize, usize, usize)]) -> Result<(f64, usize)> {
    let v = model.cfg.vocab_size;
    let parts: Vec<Result<(f64, usize)>> = windows
        .par_iter()
        .map(|&(start, len, first)| {
            let toks: Vec<usize> = data[start..start + len].iter().map(|&b| usize::from(b)).collect();
            let logits = model.forward(&toks[..len - 1])?;
            let mut nll = 0.0;
            let mut count = 0;
            for i in first.max(1)..len {
                nll += row_nll(&logits.data()[(i - 1) * v..i * v], toks[i]);
                count += 1;
            }
            Ok((nll, count))
        })
        .collect();
    let mut total = 0.0;
    let mut count = 0;
    for p in parts {
        let (a, c) = p?;
        total += a;
        count += c;
    }
    Ok((total, count))
}

/// Perplexity over non-overlapping `L`-byte chunks for every `L`.
pub fn ppl_at_lengths(model: &Model, data: &[u8], lengths: &[usize]) -> Result<PplReport> {
    let mut rows = Vec::new();
    for &len in lengths {
        if len < 2 || data.len() < len {
            return Err(Error::config(format!(
                "perplexity at length {len} needs at least {len} bytes, have {}",
                data.len()
            )));
        }
        let windows: Vec<(usize, usize, usize)> = (0..data.len() / len).map(|c| (c * len, len, 1)).collect();
        let (nll, count) = score_windows(model, data, &windows)?;
        rows.push(PplRow {
            context_length: len,
            ppl: (nll / count as f64).exp(),
            tokens: count,
        });
    }
    Ok(PplReport { rows })
}

/// Overlapping windows advanced by `stride`; the first window scores every
/// position, later ones only their last `stride`.
pub fn ppl_sliding(model: &Model, data: &[u8], window: usize, stride: usize) -> Result<f64> {
    if stride == 0 || window < stride || window < 2 {
        return Err(Error::config(format!(
            "sliding evaluation needs window ≥ stride ≥ 1 and window ≥ 2 (got {window}, {stride})"
        )));
    }
    if data.len() < window {
        return Err(Error::config(format!(
            "sliding evaluation needs at least {window} bytes, have {}",
            data.len()
        )));
    }
    let mut windows = Vec::new();
    let mut start = 0;
    while start + window <= data.len() {
        let first = if start == 0 { 1 } else { window - stride };
        windows.push((start, window, first));
        start += stride;
    }
    let (nll, count) = score_windows(model, data, &windows)?;
    Ok((nll / count as f64).exp())
}

pub const FILLER: &str =
    "The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again. ";
pub const PASSKEY_QUERY: &str = "\nWhat is the pass key? The pass key is";

pub fn key_line(key: &str) -> String {
    format!("The pass key is {key}. Remember it. {key} is the pass key. ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PasskeyDoc {
    pub prompt: Vec<u8>,
    pub answer: String,
    pub key_offset: usize,
}

/// A `doc_len`-byte document of filler with the key line at the requested
/// depth, followed by the query.
pub fn passkey_make(doc_len: usize, depth: f64, rng: &mut ChaCha8Rng) -> Result<PasskeyDoc> {
    let key: u32 = rng.gen_range(10_000..100_000);
    passkey_with_key(doc_len, depth, &key.to_string())
}

pub fn passkey_with_key(doc_len: usize, depth: f64, answer: &str) -> Result<PasskeyDoc> {
    let line = key_line(answer);
    if doc_len < line.len() {
        return Err(Error::config(format!(
            "passkey document of {doc_len} bytes cannot hold the {}-byte key line",
            line.len()
        )));
    }
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::config(format!("depth {depth} outside [0, 1]")));
    }
    let filler_len = doc_len - line.len();
    let filler: Vec<u8> = FILLER.bytes().cycle().take(filler_len).collect();
    let at = ((depth * doc_len as f64).floor() as usize).min(filler_len);
    let mut prompt = Vec::with_capacity(doc_len + PASSKEY_QUERY.len());
    prompt.extend_from_slice(&filler[..at]);
    prompt.extend_from_slice(line.as_bytes());
    prompt.extend_from_slice(&filler[at..]);
    prompt.extend_from_slice(PASSKEY_QUERY.as_bytes());
    Ok(PasskeyDoc {
        prompt,
        answer: answer.to_string(),
        key_offset: at,
    })
}

/// Exact match of the answer against the decoded text, whitespace removed.
pub fn score_answer(generated: &[usize], answer: &str) -> bool {
    let text: String = generated
        .iter()
        .map(|&t| char::from(t as u8))
        .filter(|c| !c.is_whitespace())
        .collect();
    text.get(..answer.len()) == Some(answer)
}

pub const DEPTHS: usize = 11;

pub fn depth_grid() -> Vec<f64> {
    (0..DEPTHS).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PasskeyGrid {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    /// `acc[length_idx][depth_idx]`
    pub acc: Vec<Vec<f64>>,
    pub trials: usize,
}

impl PasskeyGrid {
    pub fn mean_at(&self, length: usize) -> Option<f64> {
        let i = self.lengths.iter().position(|&l| l == length)?;
        Some(self.acc[i].iter().sum::<f64>() / self.acc[i].len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("length,depth,acc,trials\n");
        for (l, row) in self.lengths.iter().zip(&self.acc) {
            for (d, a) in self.depths.iter().zip(row) {
                s.push_str(&format!("{l},{d:.1},{a:.4},{}\n", self.trials));
            }
        }
        s
    }
}

fn greedy(model: &Model, prompt: &[u8], n: usize) -> Result<Vec<usize>> {
    let toks: Vec<usize> = prompt.iter().map(|&b| usize::from(b)).collect();
    let cfg = GenerateConfig {
        max_new_tokens: n,
        ..Default::default()
    };
    generate(&mut Session::new(model), &toks, &cfg)
}

/// Accuracy per (length, depth) cell over `trials` random passkeys, greedy
/// decoding. Cells draw from their own labelled streams.
pub fn passkey_eval(model: &Model, lengths: &[usize], trials: usize, seed: u64) -> Result<PasskeyGrid> {
    let depths = depth_grid();
    let cells: Vec<(usize, usize)> = (0..lengths.len())
        .flat_map(|l| (0..DEPTHS).map(move |d| (l, d)))
        .collect();
    let accs: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(li, di)| {
            let mut rng = rng::stream(seed, &format!("passkey/{}/{di}", lengths[li]));
            let mut hits = 0;
            for _ in 0..trials {
                let doc = passkey_make(lengths[li], depths[di], &mut rng)?;
                let ctx: Vec<u8> = passkey_context(&doc).iter().map(|&t| t as u8).collect();
                let out = greedy(model, &ctx, doc.answer.len() + 2)?;
                hits += usize::from(score_answer(&out, &doc.answer));
            }
            Ok(hits as f64 / trials.max(1) as f64)
        })
        .collect();
    let mut acc = vec![vec![0.0; DEPTHS]; lengths.len()];
    for (&(li, di), a) in cells.iter().zip(accs) {
        acc[li][di] = a?;
    }
    Ok(PasskeyGrid {
        lengths: lengths.to_vec(),
        depths,
        acc,
        trials,
    })
}

/// `prompt ++ " "`: the context the answer digits follow, in training and
/// at evaluation alike.
pub fn passkey_context(doc: &PasskeyDoc) -> Vec<usize> {
    let mut ctx: Vec<usize> = doc.prompt.iter().map(|&b| usize::from(b)).collect();
    ctx.push(usize::from(b' '));
    ctx
}

/// Training row `prompt ++ " " ++ digits`, with weights selecting the digits.
pub fn passkey_row(doc: &PasskeyDoc) -> (Vec<usize>, Vec<f64>) {
    let mut row = passkey_context(doc);
    row.extend(doc.answer.bytes().map(usize::from));
    let mut w = vec![0.0; row.len() - 1];
    let n = w.len();
    w[n - doc.answer.len()..].fill(1.0);
    (row, w)
}

/// Fine-tunes on freshly sampled passkey documents (uniform depth), loss on
/// the answer digits only. Uses `cfg.batch_size` and the schedule in `cfg`.
pub fn passkey_finetune(
    model: Model,
    train_doc_len: usize,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<(Model, Vec<StepRecord>)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    let mut recs = Vec::new();
    while t.step() < cfg.total_steps {
        let mut rows = Vec::with_capacity(cfg.batch_size);
        let mut weights = Vec::new();
        for _ in 0..cfg.batch_size {
            let depth: f64 = t.rng_mut().gen_range(0.0..=1.0);
            let doc = passkey_make(train_doc_len, depth, t.rng_mut())?;
            let (r, w) = passkey_row(&doc);
            rows.push(r);
            weights.extend(w);
        }
        let rec = t.step_on_batch(&rows, Some(&weights))?;
        on_step(&rec);
        recs.push(rec);
    }
    Ok((t.model, recs))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonebookDoc {
    pub prompt: Vec<u8>,
    pub answer: String,
    pub entries: Vec<(String, String)>,
}

fn synth_name(rng: &mut impl Rng) -> String {
    const C: &[u8] = b"bcdfghjklmnprstvwz";
    const V: &[u8] = b"aeiou";
    let mut s = String::with_capacity(5);
    for i in 0..5 {
        let set = if i % 2 == 0 { C } else { V };
        let ch = char::from(set[rng.gen_range(0..set.len())]);
        s.push(if i == 0 { ch.to_ascii_uppercase() } else { ch });
    }
    s
}

fn synth_number(rng: &mut impl Rng) -> String {
    format!(
        "{:03}-{:03}-{:04}",
        rng.gen_range(0..1000),
        rng.gen_range(0..1000),
        rng.gen_range(0..10_000)
    )
}

/// `n_pairs` lines `Name: NNN-NNN-NNNN` (distinct names and numbers) and a
/// query for one uniformly chosen name.
pub fn phonebook_make(n_pairs: usize, rng: &mut ChaCha8Rng) -> Result<PhonebookDoc> {
    if n_pairs < 2 {
        return Err(Error::config("a phonebook needs at least two entries"));
    }
    let mut names = std::collections::HashSet::new();
    let mut numbers = std::collections::HashSet::new();
    let mut entries = Vec::with_capacity(n_pairs);
    while entries.len() < n_pairs {
        let name = synth_name(rng);
        let num = synth_number(rng);
        if names.contains(&name) || numbers.contains(&num) {
            continue;
        }
        names.insert(name.clone());
        numbers.insert(num.clone());
        entries.push((name, num));
    }
    let pick = rng.gen_range(0..n_pairs);
    let mut prompt = String::new();
    for (n, p) in &entries {
        prompt.push_str(&format!("{n}: {p}\n"));
    }
    let (qn, qa) = &entries[pick];
    prompt.push_str(&format!("\nWhat is the phone number of {qn}?\n{qn}:"));
    Ok(PhonebookDoc {
        prompt: prompt.into_bytes(),
        answer: qa.clone(),
        entries,
    })
}

/// `(n_pairs, accuracy, trials)` per book size.
pub fn phonebook_eval(model: &Model, pair_counts: &[usize], trials: usize, seed: u64) -> Result<Vec<(usize, f64, usize)>> {
    pair_counts
        .par_iter()
        .map(|&n| {
            let mut rng = rng::stream(seed, &format!("phonebook/{n}"));
            let mut hits = 0;
            for _ in 0..trials {
                let doc = phonebook_make(n, &mut rng)?;
                let out = greedy(model, &doc.prompt, doc.answer.len() + 2)?;
                hits += usize::from(score_answer(&out, &doc.answer));
            }
            Ok((n, hits as f64 / trials.max(1) as f64, trials))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyRow {
    pub layer_idx: usize,
    pub kind: LayerKind,
    pub entropy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntropyReport {
    pub rows: Vec<EntropyRow>,
    pub last_l: usize,
    pub heads: usize,
}

impl EntropyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer_idx,layer_kind,entropy\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.12}\n", r.layer_idx, r.kind.as_str(), r.entropy));
        }
        s
    }

    pub fn merge(mut self, other: EntropyReport) -> EntropyReport {
        self.rows.extend(other.rows);
        self.rows.sort_by_key(|r| r.layer_idx);
        self.last_l = self.last_l.max(other.last_l);
        self.heads = self.heads.max(other.heads);
        self
    }
}

/// Mean attention entropy of the last `l` rows over all heads, per
/// attention layer. `row_entropies` is `n × heads`, row-major.
pub fn mean_tail_entropy(row_entropies: &[f64], heads: usize, l: usize) -> f64 {
    let tail = &row_entropies[row_entropies.len() - l * heads..];
    tail.iter().sum::<f64>() / (l * heads) as f64
}

pub fn attention_entropy(model: &Model, tokens: &[usize], l: usize) -> Result<EntropyReport> {
    if l == 0 || l >= tokens.len() {
        return Err(Error::contract(format!(
            "attention entropy needs 0 < l < n (l = {l}, n = {})",
            tokens.len()
        )));
    }
    let (_, probe) = model.forward_probe(tokens)?;
    let heads = model.cfg.n_q_heads;
    let rows = probe
        .attention_entropy
        .iter()
        .enumerate()
        .filter_map(|(i, e)| {
            e.as_ref().map(|e| EntropyRow {
                layer_idx: i,
                kind: LayerKind::Swa,
                entropy: mean_tail_entropy(e, heads, l),
            })
        })
        .collect();
    Ok(EntropyReport { rows, last_l: l, heads })
}

/// Entropy of Δ normalised over time per channel, averaged over channels.
/// `delta` is `n × d_inner`, row-major.
pub fn selection_entropy_of(delta: &[f64], d_inner: usize) -> f64 {
    let n = delta.len() / d_inner;
    let mut total = 0.0;
    for j in 0..d_inner {
        let z: f64 = (0..n).map(|t| delta[t * d_inner + j]).sum();
        let mut h = 0.0;
        for t in 0..n {
            let p = delta[t * d_inner + j] / z;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        total += h;
    }
    total / d_inner as f64
}

pub fn selection_entropy(model: &Model, tokens: &[usize]) -> Result<EntropyReport> {
    if tokens.is_empty() {
        return Err(Error::contract("selection entropy needs at least one token"));
    }
    let (_, probe) = model.forward_probe(tokens)?;
    let de = model.cfg.d_inner;
    let rows = probe
        .delta
        .iter()
        .enumerate()
        .filter_map(|(i, d)| {
            d.as_ref().map(|d| EntropyRow {
                layer_idx: i,
                kind: LayerKind::Mamba,
                entropy: selection_entropy_of(d, de),
            })
        })
        .collect();
    Ok(EntropyReport {
        rows,
        last_l: tokens.len(),
        heads: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passkey_depth_endpoints() {
        let d0 = passkey_with_key(300, 0.0, "12345").unwrap();
        assert!(d0.prompt.starts_with(b"The pass key is 12345."));
        let d1 = passkey_with_key(300, 1.0, "12345").unwrap();
        let text = String::from_utf8(d1.prompt).unwrap();
        assert!(text.ends_with(&format!("{}{PASSKEY_QUERY}", key_line("12345"))));
        assert_eq!(text.len(), 300 + PASSKEY_QUERY.len());
        assert!(passkey_with_key(20, 0.5, "12345").is_err());
    }

    #[test]
    fn scoring_strips_whitespace() {
        let g: Vec<usize> = b" 12345\n".iter().map(|&b| usize::from(b)).collect();
        assert!(score_answer(&g, "12345"));
        let g: Vec<usize> = b" 1234x".iter().map(|&b| usize::from(b)).collect();
        assert!(!score_answer(&g, "12345"));
    }

    #[test]
    fn selection_entropy_bounds() {
        let n = 8;
        let constant = vec![0.05; n * 3];
        assert!((selection_entropy_of(&constant, 3) - (n as f64).ln()).abs() < 1e-12);
        let mut spike = vec![1e-300; n];
        spike[3] = 1.0;
        assert!(selection_entropy_of(&spike, 1) < 1e-12);
    }

    #[test]
    fn passkey_row_masks_digits() {
        let doc = passkey_with_key(120, 0.5, "54321").unwrap();
        let (row, w) = passkey_row(&doc);
        assert_eq!(row.len(), w.len() + 1);
        assert_eq!(w.iter().sum::<f64>(), 5.0);
        assert_eq!(row[row.len() - 6], usize::from(b' '));
        let targets: Vec<u8> = w
            .iter()
            .enumerate()
            .filter(|(_, &x)| x > 0.0)
            .map(|(i, _)| row[i + 1] as u8)
            .collect();
        assert_eq!(targets, b"54321");
    }
}
