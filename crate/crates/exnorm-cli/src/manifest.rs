//! Run manifests and layered config resolution.
//!
//! Precedence: command-line flags > key=value config file > built-in
//! defaults (with `EXNORM_SEED` overriding the default seed only). The
//! manifest written next to every artifact holds the fully materialized
//! config, so re-running from it reproduces the outputs.

use exnorm::error::{ExnError, Result};
use exnorm::normalizers::NormalizerKind;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

/// Every train knob, defaults materialized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedTrain {
    pub norm: String,
    pub data: String,
    pub subset: Option<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    pub precision: String,
    pub r: usize,
    pub pi: usize,
    pub variant: String,
    pub pool: String,
    pub sn_tied: bool,
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub noise: f64,
    /// Export per-sample mixture-ratio trajectories after every epoch.
    #[serde(default)]
    pub record_ratios: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: ResolvedTrain,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let js = serde_json::to_string_pretty(self)?;
        std::fs::write(path, js)
            .map_err(|e| ExnError::format(format!("writing {}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExnError::format(format!("reading {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Plain `key = value` lines; `#` starts a comment.
pub fn parse_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ExnError::format(format!("reading {}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            ExnError::invalid(format!(
                "{}:{}: expected key = value, got {raw:?}",
                path.display(),
                ln + 1
            ))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Comma-separated pool spec: `in`, `ln`, `bn`, or `gn<groups>`.
pub fn parse_pool(s: &str) -> Result<Vec<NormalizerKind>> {
    s.split(',')
        .map(|item| {
            let item = item.trim();
            match item {
                "in" => Ok(NormalizerKind::Instance),
                "ln" => Ok(NormalizerKind::Layer),
                "bn" => Ok(NormalizerKind::Batch),
                _ => item
                    .strip_prefix("gn")
                    .and_then(|g| g.parse::<usize>().ok())
                    .map(NormalizerKind::Group)
                    .ok_or_else(|| {
                        ExnError::invalid(format!(
                            "unknown pool member {item:?}, expected in|ln|bn|gn<groups>"
                        ))
                    }),
            }
        })
        .collect()
}

pub fn parse_decay_epochs(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|e| {
            e.trim()
                .parse::<usize>()
                .map_err(|_| ExnError::invalid(format!("bad decay epoch {e:?}")))
        })
        .collect()
}

/// `synthetic` or `cifar10:PATH`.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic,
    Cifar10(std::path::PathBuf),
}

pub fn parse_data(s: &str) -> Result<DataSource> {
    if s == "synthetic" {
        return Ok(DataSource::Synthetic);
    }
    if let Some(path) = s.strip_prefix("cifar10:") {
        if path.is_empty() {
            return Err(ExnError::invalid("cifar10: requires a path"));
        }
        return Ok(DataSource::Cifar10(path.into()));
    }
    Err(ExnError::invalid(format!(
        "unknown data source {s:?}, expected synthetic or cifar10:PATH"
    )))
}

/// Default seed: `EXNORM_SEED` when set, else 0. Flags and config files
/// still take precedence over this.
pub fn default_seed() -> Result<u64> {
    match std::env::var("EXNORM_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map_err(|_| ExnError::invalid(format!("EXNORM_SEED={v:?} is not a u64"))),
        Err(_) => Ok(0),
    }
}

/// Flag > config file > default, with file values parsed on demand.
pub struct Layered<'a> {
    file: &'a HashMap<String, String>,
}

impl<'a> Layered<'a> {
    pub fn new(file: &'a HashMap<String, String>) -> Self {
        Layered { file }
    }

    pub fn pick<T: std::str::FromStr>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.file.get(key) {
            Some(raw) => raw.parse::<T>().map_err(|_| {
                ExnError::invalid(format!("config key {key} has unparsable value {raw:?}"))
            }),
            None => Ok(default),
        }
    }

    pub fn pick_string(&self, flag: Option<String>, key: &str, default: &str) -> String {
        flag.or_else(|| self.file.get(key).cloned())
            .unwrap_or_else(|| default.to_string())
    }

    pub fn pick_opt<T: std::str::FromStr>(
        &self,
        flag: Option<T>,
        key: &str,
    ) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| {
                    ExnError::invalid(format!("config key {key} has unparsable value {raw:?}"))
                }),
            None => Ok(None),
        }
    }
}
