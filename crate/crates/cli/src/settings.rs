//! Flat `key = value` config files with command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// Comma-separated list flag such as `--seeds 42,123,456`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let items = s
            .split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(|x| x.parse::<T>().map_err(|e| format!("{x:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if items.is_empty() {
            return Err("empty list".into());
        }
        Ok(List(items))
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(T::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// Values from an optional config file; every lookup records the value that
/// was finally used so it can go into the run manifest.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key=value", i + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_config(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => BTreeMap::new(),
        };
        Ok(Settings { file, resolved: BTreeMap::new() })
    }

    /// Flag if given, else config file, else `None`.
    pub fn opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + fmt::Display,
        T::Err: fmt::Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(
                    raw.parse::<T>()
                        .map_err(|e| anyhow!("config key {key}: {raw:?}: {e}"))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + fmt::Display,
        T::Err: fmt::Display,
    {
        let v = self.opt(key, flag)?.unwrap_or(default);
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn flag(&mut self, key: &str, set: bool) -> Result<bool> {
        self.get(key, set.then_some(true), false)
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}
