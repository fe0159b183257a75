//! Binary checkpoint files.
//!
//! ```text
//! "SMBC" | version u32 | config len u64 | config (key=value UTF-8)
//! tensor count u64 | tensors...
//! tag u8: 0 = end, 1 = optimizer section
//! [state len u64 | state (key=value) | tensor count u64 | tensors...]
//! ```
//! Each tensor: name len u16, name, rank u8, dims u64 each, dtype u8
//! (0 = f32), payload as little-endian values. All integers little-endian.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv;
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;

use super::AdamWState;

pub const MAGIC: [u8; 4] = *b"SMBC";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const TAG_END: u8 = 0;
const TAG_OPT: u8 = 1;

/// Optimizer section: AdamW moments plus the state needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct OptSection {
    pub adam: AdamWState,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub opt: Option<OptSection>,
}

/// Rounds every value through f32, the stored precision.
pub fn snap_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = f64::from(*v as f32);
    }
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::contract(format!("tensor name too long: {name}")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.push(DTYPE_F32);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

fn put_blob(buf: &mut Vec<u8>, text: &str) {
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
}

pub fn encode(model: &Model, opt: Option<&OptSection>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_blob(&mut buf, &kv::render(&model.cfg.to_pairs()));
    let named = model.named_params();
    buf.extend_from_slice(&(named.len() as u64).to_le_bytes());
    for (name, t) in &named {
        put_tensor(&mut buf, name, t)?;
    }
    match opt {
        None => buf.push(TAG_END),
        Some(o) => {
            buf.push(TAG_OPT);
            let state = kv::render(&[
                ("step", o.adam.step.to_string()),
                ("rng_seed", o.rng_seed.to_string()),
                ("rng_word_pos", o.rng_word_pos.to_string()),
            ]);
            put_blob(&mut buf, &state);
            buf.extend_from_slice(&((2 * named.len()) as u64).to_le_bytes());
            for ((name, _), m) in named.iter().zip(&o.adam.m) {
                put_tensor(&mut buf, &format!("m.{name}"), m)?;
            }
            for ((name, _), v) in named.iter().zip(&o.adam.v) {
                put_tensor(&mut buf, &format!("v.{name}"), v)?;
            }
        }
    }
    Ok(buf)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(path: &Path, model: &Model, opt: Option<&OptSection>) -> Result<()> {
    let bytes = encode(model, opt)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { section });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, section: &'static str) -> Result<u8> {
        Ok(self.take(1, section)?[0])
    }

    fn u16(&mut self, section: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().unwrap()))
    }

    fn u32(&mut self, section: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    fn len(&mut self, section: &'static str) -> Result<usize> {
        let v = self.u64(section)?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.buf.len())
            .ok_or(Error::Truncated { section })
    }

    fn text(&mut self, section: &'static str) -> Result<&'a str> {
        let n = self.len(section)?;
        std::str::from_utf8(self.take(n, section)?).map_err(|_| Error::Malformed(format!("{section} is not UTF-8")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        const S: &str = "tensor table";
        let nlen = usize::from(self.u16(S)?);
        let name = std::str::from_utf8(self.take(nlen, S)?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = usize::from(self.u8(S)?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len(S)?);
        }
        let dtype = self.u8(S)?;
        if dtype != DTYPE_F32 {
            return Err(Error::Malformed(format!("tensor `{name}` has unknown dtype {dtype}")));
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Malformed(format!("tensor `{name}` is impossibly large")))?;
        let raw = self.take(bytes, S)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for e in kv::parse(text)? {
        if !cfg.apply(&e)? {
            return Err(Error::Malformed(format!("unknown config key `{}`", e.key)));
        }
    }
    Ok(cfg)
}

fn copy_into(dst: &mut Tensor, name: &str, expect_name: &str, src: Tensor) -> Result<()> {
    if name != expect_name {
        return Err(Error::Malformed(format!("expected tensor `{expect_name}`, found `{name}`")));
    }
    if src.shape() != dst.shape() {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            found: src.shape().to_vec(),
            expected: dst.shape().to_vec(),
        });
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

/// Decodes into `model`, whose tensors fix the expected names and shapes.
/// Returns the optimizer section if present.
pub fn decode_into(bytes: &[u8], model: &mut Model) -> Result<Option<OptSection>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::BadVersion {
            found: version,
            expected: VERSION,
        });
    }
    let file_cfg = parse_config(r.text("config")?)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let count = r.len("tensor count")?;
    if count != names.len() {
        return Err(Error::Malformed(format!(
            "file holds {count} tensors, model has {}",
            names.len()
        )));
    }
    {
        let mut params = model.params_mut();
        for (dst, expect) in params.iter_mut().zip(&names) {
            let (name, t) = r.tensor()?;
            copy_into(dst, &name, expect, t)?;
        }
    }
    if file_cfg != model.cfg {
        let diffs: Vec<String> = file_cfg
            .to_pairs()
            .into_iter()
            .zip(model.cfg.to_pairs())
            .filter(|(a, b)| a.1 != b.1)
            .map(|((k, a), (_, b))| format!("{k}: file has {a}, model has {b}"))
            .collect();
        return Err(Error::Config(diffs));
    }
    let opt = match r.u8("section tag")? {
        TAG_END => None,
        TAG_OPT => {
            let mut step = None;
            let mut seed = None;
            let mut word = None;
            for e in kv::parse(r.text("optimizer state")?)? {
                match e.key.as_str() {
                    "step" => step = Some(kv::parse_value(&e)?),
                    "rng_seed" => seed = Some(kv::parse_value(&e)?),
                    "rng_word_pos" => word = Some(kv::parse_value(&e)?),
                    k => return Err(Error::Malformed(format!("unknown optimizer key `{k}`"))),
                }
            }
            let (Some(step), Some(rng_seed), Some(rng_word_pos)) = (step, seed, word) else {
                return Err(Error::Malformed("optimizer state is incomplete".into()));
            };
            let mut adam = AdamWState::new(model.named_params().into_iter().map(|(_, t)| t));
            adam.step = step;
            if r.len("optimizer tensor count")? != 2 * names.len() {
                return Err(Error::Malformed("optimizer table size disagrees with the model".into()));
            }
            for (dst, n) in adam.m.iter_mut().zip(&names) {
                let (name, t) = r.tensor()?;
                copy_into(dst, &name, &format!("m.{n}"), t)?;
            }
            for (dst, n) in adam.v.iter_mut().zip(&names) {
                let (name, t) = r.tensor()?;
                copy_into(dst, &name, &format!("v.{n}"), t)?;
            }
            Some(OptSection {
                adam,
                rng_seed,
                rng_word_pos,
            })
        }
        t => return Err(Error::Malformed(format!("unknown section tag {t}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(opt)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads into an existing model; shapes and config must agree.
pub fn load_into(path: &Path, model: &mut Model) -> Result<Option<OptSection>> {
    decode_into(&read(path)?, model)
}

/// Rebuilds the model from the stored config, then loads its tensors.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::BadVersion {
            found: version,
            expected: VERSION,
        });
    }
    let cfg = parse_config(r.text("config")?)?;
    let mut model = Model::build(&cfg)?;
    let opt = decode_into(&bytes, &mut model)?;
    Ok(Checkpoint { model, opt })
}
