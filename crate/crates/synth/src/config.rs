//! `key = value` configuration files with `#` comments.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::str::FromStr;

use crate::camera::Range;
use crate::{Error, Result};

/// Parsed key/value pairs. Every lookup marks its key as used so that
/// [`KeyValues::finish`] can reject typos.
#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, Cell<bool>)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries
                .insert(k.to_string(), (v.to_string(), Cell::new(false)))
                .is_some()
            {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, used)| {
            used.set(true);
            v.as_str()
        })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// `lo, hi` or a single value for a zero-width range.
    pub fn range_or(&self, key: &str, default: Range) -> Result<Range> {
        let Some(v) = self.raw(key) else {
            return Ok(default);
        };
        let bad = || Error::Config(format!("{key}: expected `lo, hi`, got {v:?}"));
        let nums = v
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        match nums[..] {
            [x] => Range::new(x, x),
            [lo, hi] => Range::new(lo, hi),
            _ => Err(bad()),
        }
        .map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    /// Fails if any key was never looked up.
    pub fn finish(&self) -> Result<()> {
        let unused: Vec<&str> = self
            .entries
            .iter()
            .filter(|(_, (_, used))| !used.get())
            .map(|(k, _)| k.as_str())
            .collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unused.join(", "))))
        }
    }
}
