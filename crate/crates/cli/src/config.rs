use std::path::Path;

use samba_core::kv;
use samba_core::training::TrainConfig;
use samba_core::{Error, ModelConfig, Result};

/// Model and training settings assembled from defaults, an optional
/// `key=value` file and command-line overrides, in that order.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn resolve(file: Option<&Path>, overrides: &[(&str, String)]) -> Result<RunSpec> {
        let text = match file {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let entries = kv::parse(&text)?;
        let mut from_flags: Vec<kv::Entry> = overrides
            .iter()
            .map(|(k, v)| kv::Entry {
                line: 0,
                key: (*k).to_string(),
                value: v.clone(),
            })
            .collect();
        let d_model = from_flags
            .iter()
            .chain(entries.iter().rev())
            .find(|e| e.key == "d_model")
            .map(kv::parse_value::<usize>)
            .transpose()
            .map_err(|e| located(e, file))?
            .unwrap_or(64);
        let mut spec = RunSpec {
            model: ModelConfig::with_d_model(d_model),
            train: TrainConfig::default(),
        };
        for e in &entries {
            spec.apply(e).map_err(|err| located(err, file))?;
        }
        for e in from_flags.drain(..) {
            spec.apply(&e)?;
        }
        spec.model.validate()?;
        spec.train.validate()?;
        Ok(spec)
    }

    fn apply(&mut self, e: &kv::Entry) -> Result<()> {
        let m = self.model.apply(e)?;
        let t = self.train.apply(e)?;
        if m || t {
            Ok(())
        } else if e.line == 0 {
            Err(Error::config(format!("unknown setting `{}`", e.key)))
        } else {
            Err(Error::config(format!("line {}: unknown key `{}`", e.line, e.key)))
        }
    }
}

fn located(err: Error, file: Option<&Path>) -> Error {
    match (err, file) {
        (Error::Config(msgs), Some(p)) => Error::Config(msgs.into_iter().map(|m| format!("{}: {m}", p.display())).collect()),
        (err, _) => err,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn flags_override_file() {
        let f = file("d_model=32\nwindow=16\npeak_lr=0.01\n");
        let s = RunSpec::resolve(Some(f.path()), &[("window", "8".into())]).unwrap();
        assert_eq!(s.model.d_model, 32);
        assert_eq!(s.model.d_inner, 64);
        assert_eq!(s.model.window, 8);
        assert_eq!(s.train.peak_lr, 0.01);
    }

    #[test]
    fn seed_reaches_both_sections() {
        let s = RunSpec::resolve(None, &[("seed", "9".into())]).unwrap();
        assert_eq!((s.model.seed, s.train.seed), (9, 9));
    }

    #[test]
    fn unknown_key_names_its_line() {
        let f = file("# comment\nwindow=16\nwarmpu_steps=3\n");
        let err = RunSpec::resolve(Some(f.path()), &[]).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("warmpu_steps"), "{err}");
    }

    #[test]
    fn bad_value_names_its_line() {
        let f = file("window=sixteen\n");
        let err = RunSpec::resolve(Some(f.path()), &[]).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }
}
