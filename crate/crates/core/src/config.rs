//! `key=value` run configuration for the command-line tool.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io;
use crate::trainer::TrainConfig;

/// Keys besides the [`TrainConfig`] ones.
pub const RUN_KEYS: [&str; 4] = ["data_dir", "out_dir", "n_train", "n_test"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Domain B training images generated by `gen-data`.
    pub n_train: usize,
    /// Held-out images per domain.
    pub n_test: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            n_train: 500,
            n_test: 100,
        }
    }
}

impl RunConfig {
    /// Every accepted key, in file order.
    pub fn keys() -> impl Iterator<Item = &'static str> {
        TrainConfig::KEYS.into_iter().chain(RUN_KEYS)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        match key {
            "data_dir" => Some(self.data_dir.display().to_string()),
            "out_dir" => Some(self.out_dir.display().to_string()),
            "n_train" => Some(self.n_train.to_string()),
            "n_test" => Some(self.n_test.to_string()),
            _ => self.train.get(key),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let count = |v: &str| {
            v.parse::<usize>()
                .map_err(|e| Error::Config(format!("{key}: {e} (got {v:?})")))
        };
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "n_train" => self.n_train = count(v)?,
            "n_test" => self.n_test = count(v)?,
            _ => self.train.set(key, v)?,
        }
        Ok(())
    }

    /// Parses a complete file: every key must appear exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got {line:?}",
                    n + 1
                )));
            };
            let key = key.trim();
            if !Self::keys().any(|k| k == key) {
                return Err(Error::Config(format!(
                    "line {}: unknown key {key:?}",
                    n + 1
                )));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    n + 1
                )));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                e => e,
            })?;
        }
        let missing: Vec<_> = Self::keys().filter(|k| !seen.contains(*k)).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "missing key(s): {}",
                missing.join(", ")
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        Self::keys()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_a_fixpoint() {
        let mut cfg = RunConfig::default();
        cfg.set("seed", "7").unwrap();
        cfg.set("out_dir", "runs/x").unwrap();
        cfg.set("learning_rate", "0.0003").unwrap();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn missing_key_is_named() {
        let text: String = RunConfig::default()
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("learning_rate="))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn errors_name_key_and_line() {
        let mut text = RunConfig::default().to_text();
        text.push_str("bogus=1\n");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("line 33"), "{err}");

        let text = RunConfig::default()
            .to_text()
            .replace("batch_size_b=16", "batch_size_b=lots");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(
            err.contains("batch_size_b") && err.contains("line 4"),
            "{err}"
        );

        let err = RunConfig::parse("# c\nseed 3\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn comments_and_duplicates() {
        let base = RunConfig::default().to_text();
        let commented = format!("# header\n\n{base}");
        assert_eq!(RunConfig::parse(&commented).unwrap(), RunConfig::default());
        let dup = format!("{base}seed=1\n");
        assert!(RunConfig::parse(&dup)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
    }
}
