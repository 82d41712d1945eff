//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique;
//! a repeated key is a config error. Values are trimmed strings parsed on
//! access.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
        }
        Ok(KvConfig { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parsed value, or `default` when the key is absent.
    pub fn get_or<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    pub fn get_opt<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    /// Fail on any key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown key {k}"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let c = KvConfig::parse("# header\n a = 1 \n\nname=x y\n").unwrap();
        assert_eq!(c.get_or("a", 0u32).unwrap(), 1);
        assert_eq!(c.raw("name"), Some("x y"));
        assert_eq!(c.get_or("missing", 2.5f64).unwrap(), 2.5);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(KvConfig::parse("novalue").is_err());
        assert!(KvConfig::parse("a=1\na=2").is_err());
        let c = KvConfig::parse("a=abc").unwrap();
        assert!(c.get_or("a", 1u32).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = KvConfig::new();
        c.set("lr", 0.001);
        c.set("seed", 7);
        assert_eq!(KvConfig::parse(&c.to_text()).unwrap(), c);
    }
}
