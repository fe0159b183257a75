//! Layer stacks per interleaving pattern, with embedding, pre-norm
//! residual wiring, final norm and an untied LM head.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::{self, Entry};
use crate::layers::{
    mamba_on_tape, mlp_on_tape, swa_on_tape, AttnGeometry, KvCache, MambaDims, MambaParams,
    MambaState, MambaVars, MlpParams, MlpVars, SwaParams, SwaVars,
};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng;
use crate::scan::ScanMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchitecturePattern {
    Samba,
    MambaSwaMlp,
    MambaMlp,
    Mamba,
    LlamaSwa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Mamba,
    Swa,
    Mlp,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Mamba => "mamba",
            LayerKind::Swa => "swa",
            LayerKind::Mlp => "mlp",
        }
    }
}

impl ArchitecturePattern {
    pub const ALL: [ArchitecturePattern; 5] = [
        ArchitecturePattern::Samba,
        ArchitecturePattern::MambaSwaMlp,
        ArchitecturePattern::MambaMlp,
        ArchitecturePattern::Mamba,
        ArchitecturePattern::LlamaSwa,
    ];

    pub fn period(self) -> &'static [LayerKind] {
        use LayerKind::*;
        match self {
            ArchitecturePattern::Samba => &[Mamba, Mlp, Swa, Mlp],
            ArchitecturePattern::MambaSwaMlp => &[Mamba, Swa, Mlp],
            ArchitecturePattern::MambaMlp => &[Mamba, Mlp],
            ArchitecturePattern::Mamba => &[Mamba],
            ArchitecturePattern::LlamaSwa => &[Swa, Mlp],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArchitecturePattern::Samba => "samba",
            ArchitecturePattern::MambaSwaMlp => "mamba-swa-mlp",
            ArchitecturePattern::MambaMlp => "mamba-mlp",
            ArchitecturePattern::Mamba => "mamba",
            ArchitecturePattern::LlamaSwa => "llama-swa",
        }
    }
}

impl fmt::Display for ArchitecturePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitecturePattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown architecture `{s}`")))
    }
}

/// Layer kinds for `n_layers` layers of `arch`.
pub fn layer_pattern(arch: ArchitecturePattern, n_layers: usize) -> Result<Vec<LayerKind>> {
    let period = arch.period();
    if n_layers == 0 || !n_layers.is_multiple_of(period.len()) {
        return Err(Error::config(format!(
            "{arch} needs a layer count divisible by {}, got {n_layers}",
            period.len()
        )));
    }
    Ok(period.iter().copied().cycle().take(n_layers).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_rank: usize,
    pub d_state: usize,
    pub conv_kernel: usize,
    pub d_mlp: usize,
    pub window: usize,
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub rope_enabled: bool,
    pub arch: ArchitecturePattern,
    pub rms_eps: f64,
    pub seed: u64,
    /// Chunk length of the associative scan; 0 selects the sequential loop.
    pub scan_chunk: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_d_model(64)
    }
}

impl ModelConfig {
    /// Derived defaults: `d_e = 2·d_m`, `d_r = ⌈d_m/16⌉`, `d_s = 16`, `k = 4`,
    /// `d_p ≈ 8/3·d_m`, head_dim 16.
    pub fn with_d_model(d_model: usize) -> Self {
        let head_dim = 16.min(d_model);
        let n_q_heads = (d_model / head_dim).max(1);
        ModelConfig {
            d_model,
            d_inner: 2 * d_model,
            d_rank: d_model.div_ceil(16).max(1),
            d_state: 16,
            conv_kernel: 4,
            d_mlp: (8 * d_model).div_ceil(3),
            window: 64,
            n_layers: 8,
            n_q_heads,
            n_kv_heads: if n_q_heads.is_multiple_of(2) { n_q_heads / 2 } else { n_q_heads },
            head_dim,
            vocab_size: 256,
            rope_base: 10_000.0,
            rope_enabled: true,
            arch: ArchitecturePattern::Samba,
            rms_eps: 1e-5,
            seed: 0,
            scan_chunk: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let dm = self.d_model;
        if dm == 0 {
            errs.push("d_model must be positive".to_string());
        }
        if self.d_inner < dm || (dm > 0 && !self.d_inner.is_multiple_of(dm)) {
            errs.push(format!("d_inner ({}) must be a multiple ≥ 1 of d_model ({dm})", self.d_inner));
        }
        for (name, v) in [
            ("d_rank", self.d_rank),
            ("d_state", self.d_state),
            ("conv_kernel", self.conv_kernel),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if let Err(Error::Config(e)) = self.attn_geometry().validate() {
            errs.extend(e);
        }
        if let Err(Error::Config(e)) = layer_pattern(self.arch, self.n_layers) {
            errs.extend(e);
        }
        if !(self.rms_eps > 0.0) {
            errs.push("rms_eps must be positive".to_string());
        }
        if !(self.rope_base > 0.0) {
            errs.push("rope_base must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn attn_geometry(&self) -> AttnGeometry {
        AttnGeometry {
            n_q_heads: self.n_q_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            window: self.window,
            rope_base: self.rope_base,
            rope_enabled: self.rope_enabled,
        }
    }

    pub fn mamba_dims(&self) -> MambaDims {
        MambaDims {
            d_model: self.d_model,
            d_inner: self.d_inner,
            d_rank: self.d_rank,
            d_state: self.d_state,
            conv_kernel: self.conv_kernel,
        }
    }

    pub fn scan_mode(&self) -> ScanMode {
        match self.scan_chunk {
            0 => ScanMode::Sequential,
            c => ScanMode::Chunked(c),
        }
    }

    pub const KEYS: [&'static str; 18] = [
        "d_model",
        "d_inner",
        "d_rank",
        "d_state",
        "conv_kernel",
        "d_mlp",
        "window",
        "n_layers",
        "n_q_heads",
        "n_kv_heads",
        "head_dim",
        "vocab_size",
        "rope_base",
        "rope_enabled",
        "arch",
        "rms_eps",
        "seed",
        "scan_chunk",
    ];

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_model", self.d_model.to_string()),
            ("d_inner", self.d_inner.to_string()),
            ("d_rank", self.d_rank.to_string()),
            ("d_state", self.d_state.to_string()),
            ("conv_kernel", self.conv_kernel.to_string()),
            ("d_mlp", self.d_mlp.to_string()),
            ("window", self.window.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_q_heads", self.n_q_heads.to_string()),
            ("n_kv_heads", self.n_kv_heads.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("rope_base", format!("{:?}", self.rope_base)),
            ("rope_enabled", self.rope_enabled.to_string()),
            ("arch", self.arch.to_string()),
            ("rms_eps", format!("{:?}", self.rms_eps)),
            ("seed", self.seed.to_string()),
            ("scan_chunk", self.scan_chunk.to_string()),
        ]
    }

    /// Applies one entry; returns `false` when the key is not a model key.
    pub fn apply(&mut self, e: &Entry) -> Result<bool> {
        match e.key.as_str() {
            "d_model" => self.d_model = kv::parse_value(e)?,
            "d_inner" => self.d_inner = kv::parse_value(e)?,
            "d_rank" => self.d_rank = kv::parse_value(e)?,
            "d_state" => self.d_state = kv::parse_value(e)?,
            "conv_kernel" => self.conv_kernel = kv::parse_value(e)?,
            "d_mlp" => self.d_mlp = kv::parse_value(e)?,
            "window" => self.window = kv::parse_value(e)?,
            "n_layers" => self.n_layers = kv::parse_value(e)?,
            "n_q_heads" => self.n_q_heads = kv::parse_value(e)?,
            "n_kv_heads" => self.n_kv_heads = kv::parse_value(e)?,
            "head_dim" => self.head_dim = kv::parse_value(e)?,
            "vocab_size" => self.vocab_size = kv::parse_value(e)?,
            "rope_base" => self.rope_base = kv::parse_value(e)?,
            "rope_enabled" => self.rope_enabled = kv::parse_value(e)?,
            "arch" => self.arch = e.value.parse()?,
            "rms_eps" => self.rms_eps = kv::parse_value(e)?,
            "seed" => self.seed = kv::parse_value(e)?,
            "scan_chunk" => self.scan_chunk = kv::parse_value(e)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Mamba(MambaParams),
    Swa(SwaParams),
    Mlp(MlpParams),
}

impl LayerParams {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerParams::Mamba(_) => LayerKind::Mamba,
            LayerParams::Swa(_) => LayerKind::Swa,
            LayerParams::Mlp(_) => LayerKind::Mlp,
        }
    }
}

/// One residual layer: `x ← x + layer(RMSNorm(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub norm: Tensor,
    pub params: LayerParams,
}

#[derive(Clone, Copy, Debug)]
enum LayerVars {
    Mamba(MambaVars),
    Swa(SwaVars),
    Mlp(MlpVars),
}

/// Tape handles for every parameter, in [`Model::named_params`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    embed: Var,
    layers: Vec<(Var, LayerVars)>,
    final_norm: Var,
    head: Var,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.embed];
        for (norm, lv) in &self.layers {
            v.push(*norm);
            match lv {
                LayerVars::Mamba(m) => v.extend(m.all()),
                LayerVars::Swa(s) => v.extend(s.all()),
                LayerVars::Mlp(m) => v.extend(m.all()),
            }
        }
        v.push(self.final_norm);
        v.push(self.head);
        v
    }
}

/// Per-layer streaming state.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerState {
    Mamba(MambaState),
    Swa(KvCache),
    Stateless,
}

impl LayerState {
    pub fn footprint_bytes(&self) -> usize {
        match self {
            LayerState::Mamba(s) => s.footprint_bytes(),
            LayerState::Swa(c) => c.footprint_bytes(),
            LayerState::Stateless => 0,
        }
    }
}

/// Optional captures from a forward pass: per-row, per-head attention
/// entropies for attention layers and the selective gate for Mamba layers.
#[derive(Clone, Debug, Default)]
pub struct Probe {
    pub attention_entropy: Vec<Option<Vec<f64>>>,
    pub delta: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<Layer>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl Model {
    /// Deterministic initialisation from `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let kinds = layer_pattern(cfg.arch, cfg.n_layers)?;
        let mut rng = rng::stream(cfg.seed, "init");
        let out_scale = 1.0 / (cfg.n_layers as f64).sqrt();
        let dm = cfg.d_model;
        let embed = crate::layers::init_uniform(&mut rng, &[cfg.vocab_size, dm], 1, 1.0);
        let layers = kinds
            .iter()
            .map(|k| {
                let params = match k {
                    LayerKind::Mamba => {
                        LayerParams::Mamba(MambaParams::init(&mut rng, &cfg.mamba_dims(), out_scale))
                    }
                    LayerKind::Swa => {
                        LayerParams::Swa(SwaParams::init(&mut rng, dm, cfg.attn_geometry(), out_scale))
                    }
                    LayerKind::Mlp => LayerParams::Mlp(MlpParams::init(&mut rng, dm, cfg.d_mlp, out_scale)),
                };
                Layer {
                    norm: Tensor::full(&[dm], 1.0),
                    params,
                }
            })
            .collect();
        let head = crate::layers::init_uniform(&mut rng, &[dm, cfg.vocab_size], dm, out_scale);
        Ok(Model {
            cfg: cfg.clone(),
            embed,
            layers,
            final_norm: Tensor::full(&[dm], 1.0),
            head,
        })
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.params.kind()).collect()
    }

    /// Every parameter with a stable dotted name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.norm"), &l.norm));
            let kind = l.params.kind().as_str();
            let named: Vec<(&str, &Tensor)> = match &l.params {
                LayerParams::Mamba(p) => p.named().to_vec(),
                LayerParams::Swa(p) => p.named().to_vec(),
                LayerParams::Mlp(p) => p.named().to_vec(),
            };
            out.extend(named.into_iter().map(|(n, t)| (format!("layers.{i}.{kind}.{n}"), t)));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.push(&mut l.norm);
            match &mut l.params {
                LayerParams::Mamba(p) => out.extend(p.named_mut().into_iter().map(|(_, t)| t)),
                LayerParams::Swa(p) => out.extend(p.named_mut().into_iter().map(|(_, t)| t)),
                LayerParams::Mlp(p) => out.extend(p.named_mut().into_iter().map(|(_, t)| t)),
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let embed = tape.param(&self.embed);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let norm = tape.param(&l.norm);
                let lv = match &l.params {
                    LayerParams::Mamba(p) => LayerVars::Mamba(p.bind(tape)),
                    LayerParams::Swa(p) => LayerVars::Swa(p.bind(tape)),
                    LayerParams::Mlp(p) => LayerVars::Mlp(p.bind(tape)),
                };
                (norm, lv)
            })
            .collect();
        ModelVars {
            embed,
            layers,
            final_norm: tape.param(&self.final_norm),
            head: tape.param(&self.head),
        }
    }

    /// Fresh streaming state for every layer.
    pub fn new_states(&self) -> Vec<LayerState> {
        self.layers
            .iter()
            .map(|l| match &l.params {
                LayerParams::Mamba(p) => LayerState::Mamba(MambaState::new(&p.dims())),
                LayerParams::Swa(p) => LayerState::Swa(KvCache::new(&p.geom)),
                LayerParams::Mlp(_) => LayerState::Stateless,
            })
            .collect()
    }

    /// Logits for `B = tokens.len() / seq_len` stacked sequences.
    ///
    /// `states` (single sequence) continues every layer from its streaming
    /// state and advances it. `probe` collects diagnostics.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        tokens: &[usize],
        seq_len: usize,
        mut states: Option<&mut [LayerState]>,
        mut probe: Option<&mut Probe>,
    ) -> Result<Var> {
        if tokens.is_empty() || seq_len == 0 || !tokens.len().is_multiple_of(seq_len) {
            return Err(Error::contract(format!(
                "{} tokens do not split into sequences of {seq_len}",
                tokens.len()
            )));
        }
        if let Some(p) = probe.as_deref_mut() {
            p.attention_entropy = vec![None; self.layers.len()];
            p.delta = vec![None; self.layers.len()];
        }
        let mut x = tape.embedding(vars.embed, tokens)?;
        for (i, (layer, (norm, lv))) in self.layers.iter().zip(&vars.layers).enumerate() {
            let h = tape.rmsnorm(x, *norm, self.cfg.rms_eps)?;
            let state = states.as_deref_mut().map(|s| &mut s[i]);
            let out = match (lv, &layer.params) {
                (LayerVars::Mamba(v), LayerParams::Mamba(p)) => {
                    let st = match state {
                        Some(LayerState::Mamba(s)) => Some(s),
                        None => None,
                        Some(_) => return Err(Error::contract("state kind does not match layer")),
                    };
                    let mut sink = probe.as_ref().map(|_| Vec::new());
                    let o = mamba_on_tape(tape, h, v, &p.dims(), seq_len, self.cfg.scan_mode(), st, sink.as_mut())?;
                    if let Some(p) = probe.as_deref_mut() {
                        p.delta[i] = sink;
                    }
                    o
                }
                (LayerVars::Swa(v), LayerParams::Swa(p)) => {
                    let cache = match state {
                        Some(LayerState::Swa(c)) => Some(c),
                        None => None,
                        Some(_) => return Err(Error::contract("state kind does not match layer")),
                    };
                    let mut sink = probe.as_ref().map(|_| Vec::new());
                    let o = swa_on_tape(tape, h, v, &p.geom, seq_len, 0, cache, sink.as_mut())?;
                    if let Some(p) = probe.as_deref_mut() {
                        p.attention_entropy[i] = sink;
                    }
                    o
                }
                (LayerVars::Mlp(v), LayerParams::Mlp(_)) => mlp_on_tape(tape, h, v)?,
                _ => unreachable!("bound vars follow the layer list"),
            };
            x = tape.add(x, out)?;
        }
        let x = tape.rmsnorm(x, vars.final_norm, self.cfg.rms_eps)?;
        tape.matmul(x, vars.head)
    }

    /// Logits `[n×V]` for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let vars = self.bind(&mut tape);
        let logits = self.forward_on_tape(&mut tape, &vars, tokens, tokens.len().max(1), None, None)?;
        Ok(tape.value(logits).clone())
    }

    /// Forward pass with diagnostics captured.
    pub fn forward_probe(&self, tokens: &[usize]) -> Result<(Tensor, Probe)> {
        let mut tape = Tape::no_grad();
        let vars = self.bind(&mut tape);
        let mut probe = Probe::default();
        let logits = self.forward_on_tape(&mut tape, &vars, tokens, tokens.len().max(1), None, Some(&mut probe))?;
        Ok((tape.value(logits).clone(), probe))
    }

    /// Mean next-token cross entropy of one sequence.
    pub fn loss(&self, tokens: &[usize]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::contract("loss needs at least two tokens"));
        }
        let logits = self.forward(&tokens[..tokens.len() - 1])?;
        crate::numerics::cross_entropy(&logits, &tokens[1..])
    }

    /// Loss and per-parameter gradients (in [`Model::named_params`] order) for
    /// a batch of equal-length rows. Each row of `L+1` tokens predicts its
    /// last `L`; `weights` (one per predicted position, row-major) masks the
    /// objective.
    pub fn loss_and_grads(&self, rows: &[Vec<usize>], weights: Option<&[f64]>) -> Result<(f64, Vec<Vec<f64>>)> {
        let Some(first) = rows.first() else {
            return Err(Error::contract("empty batch"));
        };
        let len = first.len();
        if len < 2 || rows.iter().any(|r| r.len() != len) {
            return Err(Error::contract("batch rows must share a length of at least 2"));
        }
        let seq_len = len - 1;
        let inputs: Vec<usize> = rows.iter().flat_map(|r| r[..seq_len].iter().copied()).collect();
        let targets: Vec<usize> = rows.iter().flat_map(|r| r[1..].iter().copied()).collect();
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let logits = self.forward_on_tape(&mut tape, &vars, &inputs, seq_len, None, None)?;
        let loss = tape.cross_entropy(logits, &targets, weights)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        let grads = vars
            .all()
            .into_iter()
            .map(|v| tape.take_grad(v).expect("every parameter is a trainable leaf"))
            .collect();
        Ok((value, grads))
    }
}
