//! `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are rejected; missing keys keep their defaults.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::DEFAULT_CUTOFF;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub train: TrainConfig,
    /// Training sessions.
    pub data: Option<PathBuf>,
    /// Held-out sessions.
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    /// Directory for summaries and other derived outputs.
    pub out: Option<PathBuf>,
    pub min_item_freq: usize,
    pub min_session_len: usize,
    pub test_fraction: f64,
    pub cutoff: usize,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: None,
            test: None,
            checkpoint: None,
            graph: None,
            out: None,
            min_item_freq: 5,
            min_session_len: 2,
            test_fraction: 0.1,
            cutoff: DEFAULT_CUTOFF,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "dim",
    "batch_size",
    "lr",
    "lr_decay",
    "decay_every",
    "l2",
    "window",
    "iterations",
    "layers",
    "anchors",
    "neighbors",
    "epochs",
    "seed",
    "max_session_len",
    "refresh",
    "data",
    "test",
    "checkpoint",
    "graph",
    "out",
    "min_item_freq",
    "min_session_len",
    "test_fraction",
    "cutoff",
];

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", no + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        let t = &mut self.train;
        match key {
            "dim" => t.dim = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "lr_decay" => t.lr_decay = num(key, value)?,
            "decay_every" => t.decay_every = num(key, value)?,
            "l2" => t.l2 = num(key, value)?,
            "window" => t.window = num(key, value)?,
            "iterations" => t.iterations = num(key, value)?,
            "layers" => t.layers = num(key, value)?,
            "anchors" => t.anchors = num(key, value)?,
            "neighbors" => t.neighbors = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "max_session_len" => t.max_session_len = num(key, value)?,
            "refresh" => t.refresh = value.parse()?,
            "data" => self.data = Some(PathBuf::from(value)),
            "test" => self.test = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "graph" => self.graph = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "min_item_freq" => self.min_item_freq = num(key, value)?,
            "min_session_len" => self.min_session_len = num(key, value)?,
            "test_fraction" => self.test_fraction = num(key, value)?,
            "cutoff" => self.cutoff = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }
}
