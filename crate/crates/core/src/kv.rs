//! Flat `key=value` text used by config files and checkpoint headers.

use crate::error::{Error, Result};

/// One parsed entry with its 1-based source line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!("line {}: expected key=value, got `{line}`", i + 1)));
        };
        out.push(Entry {
            line: i + 1,
            key: k.trim().to_string(),
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn render(pairs: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    s
}

pub fn parse_value<T: std::str::FromStr>(e: &Entry) -> Result<T> {
    e.value
        .parse()
        .map_err(|_| Error::config(format!("line {}: bad value `{}` for `{}`", e.line, e.value, e.key)))
}
