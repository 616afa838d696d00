//! Runtime configuration: canonical defaults, key=value file parsing, and
//! typed application of overrides. Precedence is resolved by the caller in
//! the order defaults < file < flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cmrm::TrainConfig;
use crate::error::{Error, Result};

/// Negative-candidate scope for hard-negative mining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MiningScope {
    #[default]
    Batch,
    Global,
}

/// Optional artifact locations a config file may pin down.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub table: Option<PathBuf>,
    pub index: Option<PathBuf>,
}

/// All tunables in one place. The retrieval defaults (w, m_tilt, delta,
/// m_cmrm) are contract values; tests pin them.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    /// Topic budget for table construction and lookup.
    pub w: u32,
    /// Retrieval budget for table lookup.
    pub m_tilt: usize,
    /// Retrieval budget for embedding lookup.
    pub m_cmrm: usize,
    /// Similarity threshold for embedding lookup.
    pub delta: f64,
    /// Triplet margin.
    pub gamma: f64,
    /// Fusion hidden width (must be divisible by heads).
    pub d: usize,
    /// Joint embedding width.
    pub d_e: usize,
    /// Nominal image feature width; a loaded feature file overrides it.
    pub d_m: usize,
    /// Attention heads in the fusion encoder.
    pub heads: usize,
    /// Feed-forward hidden width inside the fusion encoder.
    pub d_ff: usize,
    /// Longest token sequence the fusion encoder accepts.
    pub max_len: usize,
    /// SGD learning rate.
    pub lr: f64,
    /// Training epochs.
    pub epochs: u32,
    /// Mini-batch size.
    pub batch: usize,
    /// Master RNG seed.
    pub seed: u64,
    /// Hard-negative candidate scope.
    pub mining: MiningScope,
    /// Hold out every k-th pair for recall evaluation (0: evaluate on all).
    pub holdout_every: u32,
    /// Recall cutoff reported after training.
    pub recall_k: usize,
    pub paths: Paths,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            w: 8,
            m_tilt: 5,
            m_cmrm: 8,
            delta: 0.4,
            gamma: 0.2,
            d: 64,
            d_e: 64,
            d_m: 2048,
            heads: 8,
            d_ff: 256,
            max_len: 128,
            lr: 2.0,
            epochs: 50,
            batch: 8,
            seed: 42,
            mining: MiningScope::Batch,
            holdout_every: 0,
            recall_k: 5,
            paths: Paths::default(),
        }
    }
}

impl Config {
    /// Applies one key=value override; errors name the offending key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::invalid(format!("config key {key}: bad value {value:?}")))
        }
        match key {
            "w" => self.w = num(key, value)?,
            "m_tilt" => self.m_tilt = num(key, value)?,
            "m_cmrm" => self.m_cmrm = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "d_e" => self.d_e = num(key, value)?,
            "d_m" => self.d_m = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "d_ff" => self.d_ff = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "holdout_every" => self.holdout_every = num(key, value)?,
            "recall_k" => self.recall_k = num(key, value)?,
            "mining" => {
                self.mining = match value {
                    "batch" => MiningScope::Batch,
                    "global" => MiningScope::Global,
                    _ => {
                        return Err(Error::invalid(format!(
                            "config key mining: expected batch or global, got {value:?}"
                        )))
                    }
                }
            }
            "corpus" => self.paths.corpus = Some(PathBuf::from(value)),
            "features" => self.paths.features = Some(PathBuf::from(value)),
            "stopwords" => self.paths.stopwords = Some(PathBuf::from(value)),
            "table" => self.paths.table = Some(PathBuf::from(value)),
            "index" => self.paths.index = Some(PathBuf::from(value)),
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Overlays a key=value file onto this config; returns the raw keys that
    /// were present so the caller can resolve seed fallbacks.
    pub fn overlay_file(&mut self, path: &Path) -> Result<BTreeMap<String, String>> {
        let body = fs::read_to_string(path)?;
        let kv = parse_kv(&body, &path.display().to_string())?;
        for (k, v) in &kv {
            self.apply(k, v)?;
        }
        Ok(kv)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            gamma: self.gamma,
            batch: self.batch,
            seed: self.seed,
            d_e: self.d_e,
            global_mining: self.mining == MiningScope::Global,
            holdout_every: self.holdout_every,
            recall_k: self.recall_k,
        }
    }
}

/// Parses key=value lines. Blank lines and lines starting with `#` are
/// ignored; whitespace around keys and values is trimmed.
pub fn parse_kv(body: &str, name: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (idx, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: name.to_string(),
                line: idx + 1,
                message: format!("expected key=value, got {line:?}"),
            });
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
