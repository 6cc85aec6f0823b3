//! Flat `key = value` configuration files.
//!
//! Keys are the long option names of a subcommand (`steps`, `t-min`, ...).
//! Blank lines and lines starting with `#` are ignored.

use std::path::Path;

use crate::error::{Error, Result};

/// Entries in file order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    pub entries: Vec<(String, String)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(Error::Config(format!("line {}: bad key `{k}`", n + 1)));
            }
            let k = k.replace('_', "-");
            if entries.iter().any(|(e, _)| *e == k) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            entries.push((k, v.to_string()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// The file entries as `--key value` arguments. Placed before the
    /// command-line arguments of a parser where later occurrences win, they
    /// give the precedence command line > file > defaults.
    pub fn as_args(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for (k, v) in &self.entries {
            if k == "config" {
                return Err(Error::Config("`config` cannot be set from a config file".into()));
            }
            out.push(format!("--{k}"));
            out.push(v.clone());
        }
        Ok(out)
    }
}
