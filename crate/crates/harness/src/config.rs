//! Run configuration: each command declares a schema of keys with defaults; values
//! come from the defaults, then an optional `key = value` file, then flags.
//!
//! File format: one `key = value` per line, `#` starts a comment, blank lines are
//! ignored. Keys may be written with `-` or `_`. A key may appear once per file.
//! Keys outside the command's schema are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{io_err, usage, Result};

/// One configurable parameter.
#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    pub short: Option<char>,
}

impl Key {
    pub const fn new(name: &'static str, default: &'static str, help: &'static str) -> Self {
        Self { name, default, help, short: None }
    }

    pub const fn short(self, c: char) -> Self {
        Self { short: Some(c), ..self }
    }

    /// Boolean keys may be given as a bare flag.
    pub fn is_switch(&self) -> bool {
        self.default == "true" || self.default == "false"
    }

    /// Spelling on the command line: `--batch-size` for `batch_size`.
    pub fn flag(&self) -> String {
        self.name.replace('_', "-")
    }
}

/// Keys every command accepts.
pub const COMMON_KEYS: [Key; 2] = [
    Key::new("seed", "0", "seed for every random draw in the run"),
    Key::new("out", "results", "directory receiving the CSV and manifest"),
];

#[derive(Debug, Clone)]
pub struct Schema {
    pub command: &'static str,
    pub about: &'static str,
    pub keys: Vec<Key>,
}

impl Schema {
    pub fn new(command: &'static str, about: &'static str, keys: &[Key]) -> Self {
        let mut all = keys.to_vec();
        all.extend(COMMON_KEYS);
        Self { command, about, keys: all }
    }

    pub fn key(&self, name: &str) -> Option<&Key> {
        self.keys.iter().find(|k| k.name == name)
    }
}

pub fn normalize_key(raw: &str) -> String {
    raw.trim().replace('-', "_")
}

/// Parses a config file body into `(line, key, value)` triples.
pub fn parse_config(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return usage(format!("config line {}: expected key = value, got '{line}'", i + 1));
        };
        let key = normalize_key(k);
        if key.is_empty() {
            return usage(format!("config line {}: empty key", i + 1));
        }
        if !seen.insert(key.clone()) {
            return usage(format!("config line {}: duplicate key '{key}'", i + 1));
        }
        out.push((i + 1, key, v.trim().to_string()));
    }
    Ok(out)
}

/// Fully resolved parameters of one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: &'static str,
    values: BTreeMap<String, String>,
    explicit: BTreeSet<String>,
}

impl RunConfig {
    /// Defaults only.
    pub fn defaults(schema: &Schema) -> Self {
        let values = schema.keys.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect();
        Self { command: schema.command, values, explicit: BTreeSet::new() }
    }

    /// Defaults, then `file`, then `overrides` (in order).
    pub fn resolve(schema: &Schema, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::defaults(schema);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            for (line, key, value) in parse_config(&text)? {
                if schema.key(&key).is_none() {
                    return usage(format!(
                        "{}:{line}: unknown key '{key}' for '{}' (known: {})",
                        path.display(),
                        schema.command,
                        known(schema)
                    ));
                }
                cfg.values.insert(key.clone(), value);
                cfg.explicit.insert(key);
            }
        }
        for (key, value) in overrides {
            cfg.set(schema, key, value)?;
        }
        Ok(cfg)
    }

    /// Sets one key explicitly.
    pub fn set(&mut self, schema: &Schema, key: &str, value: &str) -> Result<()> {
        let key = normalize_key(key);
        if schema.key(&key).is_none() {
            return usage(format!("unknown key '{key}' for '{}' (known: {})", schema.command, known(schema)));
        }
        self.values.insert(key.clone(), value.trim().to_string());
        self.explicit.insert(key);
        Ok(())
    }

    /// Replaces a value only if the user did not set it.
    pub fn set_default(&mut self, key: &str, value: &str) {
        if !self.explicit.contains(key) {
            self.values.insert(key.to_string(), value.to_string());
        }
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key '{key}' is not in the schema"))
    }

    pub fn get<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse().or_else(|e| usage(format!("{key} = '{raw}': {e}")))
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn list<T>(&self, key: &str) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().or_else(|e| usage(format!("{key}: '{s}': {e}"))))
            .collect()
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        self.get(key)
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    /// Every `(key, value)` in key order.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

fn known(schema: &Schema) -> String {
    schema.keys.iter().map(|k| k.name).collect::<Vec<_>>().join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::new("demo", "", &[Key::new("steps", "10", ""), Key::new("batch_size", "4", ""), Key::new("fast", "false", "")])
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nsteps = 20\nbatch-size=8  # trailing\n\n").unwrap();
        let cfg = RunConfig::resolve(&schema(), Some(&path), &[("steps".into(), "30".into())]).unwrap();
        assert_eq!(cfg.get::<usize>("steps").unwrap(), 30);
        assert_eq!(cfg.get::<usize>("batch_size").unwrap(), 8);
        assert!(!cfg.flag("fast").unwrap());
        assert!(cfg.is_explicit("batch_size") && !cfg.is_explicit("fast"));
    }

    #[test]
    fn rejects_bad_files() {
        assert!(parse_config("steps 3").is_err());
        assert!(parse_config("steps = 3\nsteps = 4").is_err());
        assert!(parse_config(" = 3").is_err());
        let mut cfg = RunConfig::defaults(&schema());
        assert!(cfg.set(&schema(), "nope", "1").is_err());
        cfg.set(&schema(), "steps", "x").unwrap();
        assert!(cfg.get::<usize>("steps").is_err());
    }

    #[test]
    fn lists_and_defaults() {
        let s = Schema::new("demo", "", &[Key::new("t", "1, 2,3", ""), Key::new("e", "", "")]);
        let mut cfg = RunConfig::defaults(&s);
        assert_eq!(cfg.list::<usize>("t").unwrap(), [1, 2, 3]);
        assert!(cfg.list::<usize>("e").unwrap().is_empty());
        cfg.set_default("t", "5");
        assert_eq!(cfg.raw("t"), "5");
        cfg.set(&s, "t", "6").unwrap();
        cfg.set_default("t", "7");
        assert_eq!(cfg.raw("t"), "6");
    }
}
