//! Flat `key=value` configuration files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Later assignments override earlier ones, which is also how command-line
//! `--set key=value` overrides are applied.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key=value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Invalid {
        key: String,
        value: String,
        reason: String,
    },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn invalid(key: &str, value: &str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = FlatConfig::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply_assignment(line).map_err(|_| ConfigError::Malformed {
                line: idx + 1,
                text: raw.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Applies a single `key=value` assignment (as given to `--set`).
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Malformed {
                line: 0,
                text: assignment.to_string(),
            })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Malformed {
                line: 0,
                text: assignment.to_string(),
            });
        }
        self.set(key, value.trim());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn set_default(&mut self, key: &str, value: impl Into<String>) {
        self.entries
            .entry(key.to_string())
            .or_insert_with(|| value.into());
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Rejects the first key not present in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(ConfigError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| ConfigError::invalid(key, v, e.to_string())),
        }
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn required<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.parsed(key)?
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    /// Comma-separated list of floats.
    pub fn float_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|item| {
                item.trim()
                    .parse::<f64>()
                    .map_err(|e| ConfigError::invalid(key, v, e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// Canonical text form: sorted `key=value` lines.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// SHA-256 of the canonical text, hex encoded. Independent of the order
    /// in which keys were written.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_overrides() {
        let cfg = FlatConfig::parse("# header\nn = 1\n\nm=2 # trailing\nn=3\n").unwrap();
        assert_eq!(cfg.get("n"), Some("3"));
        assert_eq!(cfg.get("m"), Some("2"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = FlatConfig::parse("n=1\nbogus\n").unwrap_err();
        assert!(matches!(err, ConfigError::Malformed { line: 2, .. }));
    }

    #[test]
    fn unknown_key_is_named() {
        let cfg = FlatConfig::parse("gama=0.1").unwrap();
        match cfg.check_known(&["gamma"]) {
            Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "gama"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fingerprint_ignores_key_order() {
        let a = FlatConfig::parse("a=1\nb=2").unwrap();
        let b = FlatConfig::parse("b=2\na=1").unwrap();
        let c = FlatConfig::parse("b=2\na=1.0").unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn float_lists() {
        let cfg = FlatConfig::parse("A=1, 2,3.5").unwrap();
        assert_eq!(cfg.float_list("A").unwrap(), Some(vec![1.0, 2.0, 3.5]));
        let bad = FlatConfig::parse("A=1,x").unwrap();
        assert!(bad.float_list("A").is_err());
    }
}
