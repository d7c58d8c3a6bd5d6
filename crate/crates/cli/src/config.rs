//! `key = value` run configuration with `#` comments and dotted keys.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Every key the commands understand; anything else is a schema error.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "task",
    "data.n_classes",
    "data.image_size",
    "data.max_objects",
    "data.min_scale",
    "data.max_scale",
    "data.train",
    "data.test",
    "data.test_filter",
    "net.anchors",
    "train.lr",
    "train.momentum",
    "train.epochs",
    "train.batch_size",
    "train.iterations",
    "base.lr",
    "base.epochs",
    "prime.lr",
    "prime.epochs",
    "prime.mask",
    "prime.layers",
    "prime.mode",
    "prime.variant",
    "prime.placement",
    "prime.init",
    "prime.init_std",
    "eval.conf_threshold",
    "eval.nms_iou",
    "eval.iou_thresh",
    "eval.strategies",
    "ablate.masks",
    "ablate.prefixes",
    "sweep.sigmas",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            check_key(k)?;
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            primekit_core::Error::Io {
                path: path.to_path_buf(),
                source: e,
            }
        })?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let Some((k, v)) = assignment.split_once('=') else {
            return Err(CliError::Config(format!("override {assignment:?} is not key=value")));
        };
        let k = k.trim();
        check_key(k)?;
        self.values.insert(k.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// First present key among `keys`, parsed.
    pub fn first<T: FromStr>(&self, keys: &[&str]) -> Result<Option<T>, CliError> {
        for &k in keys {
            if let Some(v) = self.get(k) {
                return v
                    .parse()
                    .map(Some)
                    .map_err(|_| CliError::Config(format!("{k}: cannot parse {v:?}")));
            }
        }
        Ok(None)
    }

    pub fn value<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.first(&[key])?.unwrap_or(default))
    }
}

fn check_key(k: &str) -> Result<(), CliError> {
    if KNOWN_KEYS.contains(&k) {
        Ok(())
    } else {
        Err(CliError::Config(format!("unknown key {k:?}")))
    }
}

/// Comma-separated values; empty items are skipped.
pub fn parse_list<T: FromStr>(what: &str, text: &str) -> Result<Vec<T>, CliError> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| CliError::Config(format!("{what}: cannot parse {t:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dotted_keys() {
        let c = Config::parse("# run\ntrain.lr = 0.01  # inline\n\nseed=4\n").unwrap();
        assert_eq!(c.get("train.lr"), Some("0.01"));
        assert_eq!(c.value("seed", 0u64).unwrap(), 4);
        assert_eq!(c.value("train.epochs", 7usize).unwrap(), 7);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(Config::parse("nonsense").is_err());
        assert!(Config::parse("train.lrr = 1").is_err());
        assert!(Config::parse("seed = 1\nseed = 2").is_err());
        let c = Config::parse("seed = x").unwrap();
        assert!(c.value("seed", 0u64).is_err());
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut c = Config::parse("train.lr = 0.1").unwrap();
        c.set("train.lr=0.5").unwrap();
        assert_eq!(c.value("train.lr", 0.0).unwrap(), 0.5);
        assert!(c.set("bogus=1").is_err());
        assert_eq!(c.first::<f64>(&["base.lr", "train.lr"]).unwrap(), Some(0.5));
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<f64>("s", "0, 20,40").unwrap(), vec![0.0, 20.0, 40.0]);
        assert!(parse_list::<f64>("s", "0,x").is_err());
    }
}
