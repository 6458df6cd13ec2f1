//! `key = value` run files. Flags given on the command line win over the
//! file; keys the tool does not know are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};

/// Every key a run file may set. Dashes and underscores are interchangeable.
pub const KEYS: &[&str] = &[
    "task",
    "profile",
    "k",
    "lambda",
    "lr",
    "epochs",
    "batch",
    "seed",
    "retrieval",
    "variant",
    "data",
    "out",
    "ckpt",
    "backbone",
    "report",
    "metrics",
    "k_list",
    "queries",
    "prompts",
    "prefit_epochs",
];

/// A configuration mistake: exit code 1 rather than 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Debug, Default)]
pub struct RunFile {
    values: BTreeMap<String, String>,
}

fn canonical(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl RunFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            let key = canonical(k);
            if !KEYS.contains(&key.as_str()) {
                return Err(config_err(format!("line {}: unknown key `{}`", n + 1, k.trim())));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(config_err(format!("line {}: `{key}` set twice", n + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    /// The flag if given, otherwise the file's value, otherwise `None`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        debug_assert!(KEYS.contains(&key), "unregistered key {key}");
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| config_err(format!("`{key} = {v}`: {e}"))),
        }
    }

    /// Like [`RunFile::pick`], with a fallback.
    pub fn get<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    /// Like [`RunFile::pick`], failing when neither source sets the key.
    pub fn require<T>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.pick(flag, key)?
            .ok_or_else(|| config_err(format!("missing `--{}` (or `{key}` in the run file)", key.replace('_', "-"))))
    }
}

/// Comma-separated list of positive integers.
pub fn parse_k_list(s: &str) -> Result<Vec<usize>> {
    let ks = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| config_err(format!("k-list entry `{p}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(config_err("k-list needs positive entries"));
    }
    Ok(ks)
}
