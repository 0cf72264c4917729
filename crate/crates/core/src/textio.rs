//! Plain-text serialization helpers.
//!
//! Model and density artifacts are stored as line-oriented text. Reals are
//! written with `{}` formatting, which emits the shortest decimal string
//! that parses back to the identical f64, so round-trips are bit-exact.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn parse_f64(s: &str, path: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::ParseFile {
        path: path.to_string(),
        message: format!("bad real {s:?}"),
    })
}

/// SHA-256 of a file, as lowercase hex.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// A parsed artifact file: `key = value` scalars up top, then `[section]`
/// blocks holding one real per line.
pub struct SectionFile {
    pub magic: String,
    pub scalars: BTreeMap<String, String>,
    pub sections: BTreeMap<String, Vec<f64>>,
}

impl SectionFile {
    pub fn parse(text: &str, path: &str) -> Result<SectionFile> {
        let mut lines = text.lines();
        let magic = lines
            .next()
            .ok_or_else(|| Error::ParseFile {
                path: path.to_string(),
                message: "empty file".into(),
            })?
            .trim()
            .to_string();
        let mut scalars = BTreeMap::new();
        let mut sections: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for line in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                current = Some(name.to_string());
                sections.entry(name.to_string()).or_default();
            } else if let Some(section) = &current {
                sections
                    .get_mut(section)
                    .unwrap()
                    .push(parse_f64(line, path)?);
            } else if let Some((k, v)) = line.split_once('=') {
                scalars.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                return Err(Error::ParseFile {
                    path: path.to_string(),
                    message: format!("unexpected line {line:?}"),
                });
            }
        }
        Ok(SectionFile {
            magic,
            scalars,
            sections,
        })
    }

    pub fn scalar(&self, key: &str, path: &str) -> Result<&str> {
        self.scalars
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::ParseFile {
                path: path.to_string(),
                message: format!("missing key `{key}`"),
            })
    }

    pub fn scalar_f64(&self, key: &str, path: &str) -> Result<f64> {
        parse_f64(self.scalar(key, path)?, path)
    }

    pub fn scalar_usize(&self, key: &str, path: &str) -> Result<usize> {
        self.scalar(key, path)?
            .parse::<usize>()
            .map_err(|_| Error::ParseFile {
                path: path.to_string(),
                message: format!("bad integer for `{key}`"),
            })
    }

    pub fn section(&self, name: &str, path: &str) -> Result<&[f64]> {
        self.sections
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::ParseFile {
                path: path.to_string(),
                message: format!("missing section `[{name}]`"),
            })
    }
}

pub fn push_section(out: &mut String, name: &str, values: &[f64]) {
    out.push('[');
    out.push_str(name);
    out.push_str("]\n");
    for v in values {
        out.push_str(&fmt_f64(*v));
        out.push('\n');
    }
}
