//! Settings resolution: command-line flag, then config file, then default.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{usage, HarnessError, Result};

/// Keys accepted in a config file (flag names without the leading dashes).
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "bits",
    "n",
    "m-max",
    "snr-min",
    "snr-max",
    "snr-step",
    "out",
    "count",
    "m",
    "snr",
    "freq-mode",
    "split",
    "data",
    "task",
    "kind",
    "epochs",
    "batch",
    "lr",
    "val-fraction",
    "patience",
    "lr-patience",
    "lr-factor",
    "residual",
    "models",
    "algorithms",
    "joint",
    "trials",
];

/// Parsed `key = value` lines. `#` starts a comment; `_` and `-` are
/// interchangeable in keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return usage(format!("config line {}: expected key = value", i + 1));
            };
            let key = k.trim().replace('_', "-");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return usage(format!("config line {}: unknown key '{}'", i + 1, k.trim()));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// The flag value if given, else the parsed config value, else `None`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| HarnessError::Usage(format!("config value '{v}' is not valid for '{key}'"))),
        }
    }

    pub fn pick_or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }
}

/// Comma-separated list.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let items = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse().map_err(|_| format!("bad list item '{p}'")))
            .collect::<std::result::Result<Vec<T>, _>>()?;
        if items.is_empty() {
            return Err("empty list".into());
        }
        Ok(List(items))
    }
}

/// `min, min + step, ...` up to `max` inclusive.
pub fn snr_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(min.is_finite() && max.is_finite() && step > 0.0) || max < min {
        return usage(format!("SNR grid needs finite min <= max and step > 0 (got {min}, {max}, {step})"));
    }
    let count = ((max - min) / step + 1e-9).floor() as usize + 1;
    if count > 100_000 {
        return usage("SNR grid is too large");
    }
    Ok((0..count).map(|i| min + i as f64 * step).collect())
}

/// Settings shared by every subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct Shared {
    pub seed: u64,
    pub bits: Vec<u32>,
    pub n: usize,
    pub m_max: usize,
    pub snr_min: f64,
    pub snr_max: f64,
    pub snr_grid: Vec<f64>,
}

impl Default for Shared {
    fn default() -> Self {
        Self {
            seed: 0,
            bits: vec![1, 3],
            n: 64,
            m_max: 5,
            snr_min: -10.0,
            snr_max: 10.0,
            snr_grid: (-10..=10).map(f64::from).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_normalizes_keys() {
        let c = ConfigFile::parse("# run\nsnr_min = -4 # low end\n\nbits = 1, 3\n").unwrap();
        assert_eq!(c.get("snr-min"), Some("-4"));
        assert_eq!(c.pick::<f64>(None, "snr-min").unwrap(), Some(-4.0));
        assert_eq!(c.pick(Some(2.0), "snr-min").unwrap(), Some(2.0));
        assert_eq!(c.pick::<List<u32>>(None, "bits").unwrap().unwrap().0, vec![1, 3]);
        assert!(ConfigFile::parse("colour = red").is_err());
        assert!(ConfigFile::parse("seed 3").is_err());
        assert!(c.pick::<u64>(None, "snr-min").is_err());
    }

    #[test]
    fn grid_is_inclusive() {
        assert_eq!(snr_grid(-10.0, 10.0, 1.0).unwrap().len(), 21);
        assert_eq!(snr_grid(0.0, 1.0, 0.4).unwrap(), vec![0.0, 0.4, 0.8]);
        assert_eq!(snr_grid(5.0, 5.0, 1.0).unwrap(), vec![5.0]);
        assert!(snr_grid(1.0, 0.0, 1.0).is_err());
        assert!(snr_grid(0.0, 1.0, 0.0).is_err());
    }
}
