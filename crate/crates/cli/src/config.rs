use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Exit code for an error chain: the library's code when one is present.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<countlab::Error>() {
            return err.exit_code() as u8;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return 3;
        }
    }
    1
}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    countlab::Error::Config(msg.into()).into()
}

/// The run-config file: top-level keys plus an optional section per command.
pub struct RunConfig {
    root: Value,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading run-config {}", p.display()))?;
                let v: Value = serde_json::from_str(&text).map_err(|e| config_err(format!("run-config {}: {e}", p.display())))?;
                if !v.is_object() {
                    return Err(config_err("run-config must be a JSON object"));
                }
                v
            }
            None => Value::Object(Default::default()),
        };
        Ok(Self { root })
    }

    pub fn global<T: DeserializeOwned>(&self, key: &str) -> anyhow::Result<Option<T>> {
        match self.root.get(key) {
            Some(v) => Ok(Some(serde_json::from_value(v.clone()).map_err(|e| config_err(format!("run-config key {key}: {e}")))?)),
            None => Ok(None),
        }
    }

    /// Merge the command section under the command-line values; flags win.
    pub fn resolve<T: Serialize + DeserializeOwned>(&self, section: &str, cli: &T) -> anyhow::Result<(T, Value)> {
        let mut merged = serde_json::Map::new();
        if let Some(Value::Object(sec)) = self.root.get(section) {
            merged.extend(sec.clone());
        }
        if let Value::Object(flags) = serde_json::to_value(cli)? {
            merged.extend(flags);
        }
        let v = Value::Object(merged);
        let t = serde_json::from_value(v.clone()).map_err(|e| config_err(format!("[{section}] {e}")))?;
        Ok((t, v))
    }
}

pub fn output_root(cli: Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    if let Some(p) = cli {
        return Ok(p);
    }
    if let Some(p) = cfg.global::<PathBuf>("out")? {
        return Ok(p);
    }
    Ok(std::env::var_os("COUNTLAB_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("countlab_out")))
}

pub fn required<T: Clone>(v: &Option<T>, flag: &str) -> anyhow::Result<T> {
    v.clone().ok_or_else(|| config_err(format!("--{flag} is required (flag or run-config)")))
}

/// `"a-b"` or `"a"` as an inclusive range.
pub fn parse_range(s: &str) -> anyhow::Result<(usize, usize)> {
    let bad = || config_err(format!("bad range {s:?}; expected e.g. 1-5"));
    let (a, b) = match s.split_once('-') {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => {
            let v = s.trim().parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    if a > b {
        return Err(bad());
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("1-5").unwrap(), (1, 5));
        assert_eq!(parse_range("3").unwrap(), (3, 3));
        assert!(parse_range("5-1").is_err());
        assert!(parse_range("x").is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let cfg = RunConfig { root: serde_json::json!({"gen": {"kind": "synpoly", "per-count": 7}}) };
        let cli = crate::GenArgs { kind: Some("syndot".into()), ..Default::default() };
        let (r, _) = cfg.resolve("gen", &cli).unwrap();
        assert_eq!(r.kind.as_deref(), Some("syndot"));
        assert_eq!(r.per_count, Some(7));
        let bad = RunConfig { root: serde_json::json!({"gen": {"kinds": "x"}}) };
        assert_eq!(exit_code(&bad.resolve("gen", &cli).unwrap_err()), 2);
    }
}
