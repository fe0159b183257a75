//! Optimisation, batching, checkpoints and the training loop.

mod checkpoint;
mod data;
mod optim;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    decode_into, encode, load_checkpoint, load_into, save_checkpoint, snap_f32, Checkpoint, OptSection, MAGIC,
    VERSION,
};
pub use data::{sample_batch, Corpus};
pub use optim::{adamw_step, clip_global_norm, decays, global_norm, lr_at, AdamWState};

use crate::error::{Error, Result};
use crate::kv::{self, Entry};
use crate::model::Model;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 2e-3,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 4,
            seq_len: 256,
            weight_decay: 0.1,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.warmup_steps > self.total_steps {
            errs.push(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        for (k, v) in [
            ("peak_lr", self.peak_lr),
            ("clip_norm", self.clip_norm),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0) {
                errs.push(format!("{k} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            errs.push("betas must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) {
            errs.push("weight_decay must be non-negative".into());
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            errs.push("batch_size and seq_len must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn apply(&mut self, e: &Entry) -> Result<bool> {
        match e.key.as_str() {
            "peak_lr" => self.peak_lr = kv::parse_value(e)?,
            "warmup_steps" => self.warmup_steps = kv::parse_value(e)?,
            "total_steps" => self.total_steps = kv::parse_value(e)?,
            "batch_size" => self.batch_size = kv::parse_value(e)?,
            "seq_len" => self.seq_len = kv::parse_value(e)?,
            "weight_decay" => self.weight_decay = kv::parse_value(e)?,
            "clip_norm" => self.clip_norm = kv::parse_value(e)?,
            "beta1" => self.beta1 = kv::parse_value(e)?,
            "beta2" => self.beta2 = kv::parse_value(e)?,
            "adam_eps" => self.adam_eps = kv::parse_value(e)?,
            "seed" => self.seed = kv::parse_value(e)?,
            "checkpoint_every" => self.checkpoint_every = kv::parse_value(e)?,
            "log_every" => self.log_every = kv::parse_value(e)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tok_per_s: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step,loss,lr,grad_norm,tok_per_s,wall_ms";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6e},{:.6},{:.1},{:.3}",
            self.step, self.loss, self.lr, self.grad_norm, self.tok_per_s, self.wall_ms
        )
    }
}

/// Model, optimizer and batching stream, advanced one update at a time.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub adam: AdamWState,
    rng: ChaCha8Rng,
    decay: Vec<bool>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamWState::new(model.named_params().into_iter().map(|(_, t)| t));
        let decay = model.named_params().iter().map(|(n, _)| decays(n)).collect();
        Ok(Trainer {
            rng: rng::stream(cfg.seed, "batch"),
            model,
            cfg,
            adam,
            decay,
        })
    }

    /// Continues from a checkpoint's optimizer section.
    pub fn resume(model: Model, opt: OptSection, cfg: TrainConfig) -> Result<Self> {
        let mut t = Trainer::new(model, cfg)?;
        if opt.rng_seed != t.cfg.seed {
            return Err(Error::config(format!(
                "checkpoint batching seed {} differs from configured seed {}",
                opt.rng_seed, t.cfg.seed
            )));
        }
        t.rng.set_word_pos(opt.rng_word_pos);
        t.adam = opt.adam;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One update on a sampled batch.
    pub fn train_step(&mut self, corpus: &Corpus) -> Result<StepRecord> {
        let rows = sample_batch(corpus, self.cfg.batch_size, self.cfg.seq_len, &mut self.rng)?;
        self.step_on_batch(&rows, None)
    }

    /// One update on caller-provided rows; `weights` masks the objective.
    pub fn step_on_batch(&mut self, rows: &[Vec<usize>], weights: Option<&[f64]>) -> Result<StepRecord> {
        let t0 = Instant::now();
        let (loss, mut grads) = self.model.loss_and_grads(rows, weights)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "training loss".into(),
                detail: format!("{loss} at step {}", self.adam.step + 1),
            });
        }
        let grad_norm = global_norm(&grads);
        clip_global_norm(&mut grads, self.cfg.clip_norm)?;
        let lr = lr_at(self.adam.step + 1, &self.cfg);
        let mut params = self.model.params_mut();
        adamw_step(&mut params, &grads, &self.decay, &mut self.adam, lr, &self.cfg)?;
        let secs = t0.elapsed().as_secs_f64();
        let tokens = rows.iter().map(|r| r.len() - 1).sum::<usize>() as f64;
        Ok(StepRecord {
            step: self.adam.step,
            loss,
            lr,
            grad_norm,
            tok_per_s: tokens / secs.max(1e-12),
            wall_ms: secs * 1e3,
        })
    }

    /// Rounds parameters and moments to the stored precision, then writes.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        for t in self.model.params_mut() {
            snap_f32(t);
        }
        for t in self.adam.m.iter_mut().chain(self.adam.v.iter_mut()) {
            snap_f32(t);
        }
        let opt = OptSection {
            adam: self.adam.clone(),
            rng_seed: self.cfg.seed,
            rng_word_pos: self.rng.get_word_pos(),
        };
        save_checkpoint(path, &self.model, Some(&opt))
    }

    /// Trains until `total_steps`. With `out_dir`, appends `metrics.csv`
    /// and writes `checkpoint.smbc` at the configured cadence and at the end.
    pub fn run(
        &mut self,
        corpus: &Corpus,
        out_dir: Option<&Path>,
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        self.run_until(corpus, out_dir, self.cfg.total_steps, on_step)
    }

    /// Like [`Trainer::run`] but stops after step `until` (the schedule still
    /// spans `total_steps`); a checkpoint is written at the stopping point.
    pub fn run_until(
        &mut self,
        corpus: &Corpus,
        out_dir: Option<&Path>,
        until: u64,
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        let until = until.min(self.cfg.total_steps);
        let mut metrics = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.csv");
                let fresh = !path.exists();
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                if fresh {
                    writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
                }
                Some((f, path))
            }
            None => None,
        };
        let mut out = Vec::new();
        while self.step() < until {
            let rec = self.train_step(corpus)?;
            if let Some((f, path)) = metrics.as_mut() {
                writeln!(f, "{}", rec.csv_row()).map_err(|e| Error::io(&*path, e))?;
            }
            on_step(&rec);
            out.push(rec);
            if let Some(dir) = out_dir {
                let every = self.cfg.checkpoint_every;
                if (every > 0 && rec.step % every == 0) || rec.step == until {
                    self.save(&dir.join("checkpoint.smbc"))?;
                }
            }
        }
        Ok(out)
    }
}

/// Convenience wrapper: fresh optimizer, run to completion.
pub fn train_loop(model: Model, corpus: &Corpus, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<(Model, Vec<StepRecord>)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    let recs = t.run(corpus, out_dir, &mut |_| {})?;
    Ok((t.model, recs))
}
