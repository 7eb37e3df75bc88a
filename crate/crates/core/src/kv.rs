//! Flat `key = value` text files, used for sidecars, reports and run configs.
//!
//! Blank lines and lines starting with `#` are ignored. Keys keep their
//! insertion order so that written files are byte-stable.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    path: PathBuf,
    entries: Vec<(String, String, usize)>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut out = KvFile {
            path: path.clone(),
            entries: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: format!("expected `key = value`, found {line:?}"),
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            if out.get(key).is_some() {
                return Err(Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    message: format!("duplicate key {key:?}"),
                });
            }
            out.entries.push((key.to_string(), v.trim().to_string(), i + 1));
        }
        Ok(out)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Sets a key, replacing an existing value in place.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value, 0)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v, _)| (k.as_str(), v.as_str()))
    }

    fn error(&self, key: &str, message: String) -> Error {
        let line = self
            .entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, _, l)| *l)
            .unwrap_or(0);
        Error::Parse {
            path: self.path.clone(),
            line,
            message,
        }
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| self.error(key, format!("missing key {key:?}")))
    }

    /// Parses a required key.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|e| self.error(key, format!("bad value {raw:?} for {key}: {e}")))
    }

    /// Parses an optional key.
    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.get(key) {
            Some(_) => self.parsed(key),
            None => Ok(default),
        }
    }
}

impl std::fmt::Display for KvFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v, _) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
