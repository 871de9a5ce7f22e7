//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, whitespace is not
//! significant. Values are kept as strings; typed accessors parse on
//! demand and report the offending key and line on failure.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("key `{key}` (line {line}): cannot parse `{value}` as {ty}")]
    BadValue {
        key: String,
        line: usize,
        value: String,
        ty: &'static str,
    },
    #[error("unknown key `{key}` (line {line})")]
    Unknown { key: String, line: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| KvError::Malformed {
                line,
                text: stripped.to_string(),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(KvError::Malformed {
                    line,
                    text: stripped.to_string(),
                });
            }
            if entries.contains_key(&key) {
                return Err(KvError::Duplicate { line, key });
            }
            entries.insert(key, (value, line));
        }
        Ok(KvFile { entries })
    }

    pub fn read(path: &Path) -> Result<Self, KvError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn line_of(&self, key: &str) -> Option<usize> {
        self.entries.get(key).map(|(_, l)| *l)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn require_str(&self, key: &str) -> Result<&str, KvError> {
        self.get_str(key).ok_or_else(|| KvError::Missing(key.into()))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, ty: &'static str) -> Result<Option<T>, KvError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|_| KvError::BadValue {
                key: key.into(),
                line: *line,
                value: v.clone(),
                ty,
            }),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, KvError> {
        Ok(self.parse_as::<f64>(key, "a real number")?.unwrap_or(default))
    }

    pub fn require_f64(&self, key: &str) -> Result<f64, KvError> {
        self.parse_as::<f64>(key, "a real number")?
            .ok_or_else(|| KvError::Missing(key.into()))
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64, KvError> {
        Ok(self.parse_as::<u64>(key, "an integer")?.unwrap_or(default))
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize, KvError> {
        Ok(self.parse_as::<usize>(key, "an integer")?.unwrap_or(default))
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, KvError> {
        Ok(self.parse_as::<bool>(key, "true or false")?.unwrap_or(default))
    }

    /// Whitespace- or comma-separated list value.
    pub fn get_list(&self, key: &str) -> Vec<String> {
        self.get_str(key)
            .map(|v| {
                v.split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Rejects keys outside `allowed` so typos fail loudly.
    pub fn check_known(&self, allowed: &[&str]) -> Result<(), KvError> {
        for (key, (_, line)) in &self.entries {
            if !allowed.contains(&key.as_str()) {
                return Err(KvError::Unknown {
                    key: key.clone(),
                    line: *line,
                });
            }
        }
        Ok(())
    }
}
