//! Run configuration: one `key = value` file holding every tunable.
//!
//! Blank lines and `#` comments are skipped; unknown or repeated keys are
//! errors. [`Config::hash`] covers the effective values, defaults included,
//! and is stamped into every artifact.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::clustering::{ClusterConfig, Linkage};
use crate::embeddings::{SkipGramParams, DEFAULT_MIN_COUNT};
use crate::error::{Error, Result};
use crate::metacluster::SuspicionRules;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub inputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Public suffix list; the bundled snapshot when unset.
    pub psl: Option<PathBuf>,

    pub min_count: u64,
    pub embedding: SkipGramParams,
    pub similarity_threshold: f64,
    pub similarity_top_k: usize,

    pub cluster: ClusterConfig,
    pub suspicion: SuspicionRules,

    /// Prior verdict snapshot. When set, no provider is queried.
    pub verdicts: Option<PathBuf>,
    pub manual_blacklist: Option<PathBuf>,
    pub local_list: Option<PathBuf>,
    pub scanner_endpoint: Option<String>,
    /// Directory of canned scanner responses, used instead of the endpoint.
    pub scanner_stub_dir: Option<PathBuf>,
    pub scanner_rate_per_minute: usize,
    pub scanner_timeout_secs: u64,
    pub scanner_threshold: u32,
    pub verdict_ttl_days: i64,

    pub easylist: Option<PathBuf>,
    /// Advertiser cost per thousand clicks, in dollars.
    pub cpm: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            inputs: Vec::new(),
            out_dir: PathBuf::from("out"),
            seed: 0,
            psl: None,
            min_count: DEFAULT_MIN_COUNT,
            embedding: SkipGramParams::default(),
            similarity_threshold: 0.5,
            similarity_top_k: 10,
            cluster: ClusterConfig::default(),
            suspicion: SuspicionRules::default(),
            verdicts: None,
            manual_blacklist: None,
            local_list: None,
            scanner_endpoint: None,
            scanner_stub_dir: None,
            scanner_rate_per_minute: 4,
            scanner_timeout_secs: 30,
            scanner_threshold: 1,
            verdict_ttl_days: 30,
            easylist: None,
            cpm: 2.54,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("`{key}`: cannot parse `{value}`: {e}"))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            config.set(key, value).map_err(err)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "inputs" => {
                self.inputs = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = num(key, value)?,
            "psl" => self.psl = opt_path(value),
            "min_count" => self.min_count = num(key, value)?,
            "embedding_dim" => self.embedding.dim = num(key, value)?,
            "embedding_window" => self.embedding.window = num(key, value)?,
            "embedding_negatives" => self.embedding.negatives = num(key, value)?,
            "embedding_epochs" => self.embedding.epochs = num(key, value)?,
            "embedding_lr" => self.embedding.lr = num(key, value)?,
            "similarity_threshold" => self.similarity_threshold = num(key, value)?,
            "similarity_top_k" => self.similarity_top_k = num(key, value)?,
            "linkage" => self.cluster.linkage = value.parse::<Linkage>().map_err(|e| e.to_string())?,
            "weight_text" => self.cluster.weights.text = num(key, value)?,
            "weight_url" => self.cluster.weights.url = num(key, value)?,
            "k_min" => self.cluster.search.k_min = num(key, value)?,
            "k_max" => {
                self.cluster.search.k_max = match value {
                    "" | "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "full_scan_limit" => self.cluster.search.full_scan_limit = num(key, value)?,
            "coarse_factor" => self.cluster.search.coarse_factor = num(key, value)?,
            "duplicate_ads_min_domains" => self.suspicion.duplicate_ads_min_domains = num(key, value)?,
            "verdicts" => self.verdicts = opt_path(value),
            "manual_blacklist" => self.manual_blacklist = opt_path(value),
            "local_list" => self.local_list = opt_path(value),
            "scanner_endpoint" => self.scanner_endpoint = (!value.is_empty()).then(|| value.to_string()),
            "scanner_stub_dir" => self.scanner_stub_dir = opt_path(value),
            "scanner_rate_per_minute" => self.scanner_rate_per_minute = num(key, value)?,
            "scanner_timeout_secs" => self.scanner_timeout_secs = num(key, value)?,
            "scanner_threshold" => self.scanner_threshold = num(key, value)?,
            "verdict_ttl_days" => self.verdict_ttl_days = num(key, value)?,
            "easylist" => self.easylist = opt_path(value),
            "cpm" => self.cpm = num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.cluster.search;
        vec![
            ("inputs", self.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")),
            ("out_dir", self.out_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("psl", show_path(&self.psl)),
            ("min_count", self.min_count.to_string()),
            ("embedding_dim", self.embedding.dim.to_string()),
            ("embedding_window", self.embedding.window.to_string()),
            ("embedding_negatives", self.embedding.negatives.to_string()),
            ("embedding_epochs", self.embedding.epochs.to_string()),
            ("embedding_lr", self.embedding.lr.to_string()),
            ("similarity_threshold", self.similarity_threshold.to_string()),
            ("similarity_top_k", self.similarity_top_k.to_string()),
            ("linkage", self.cluster.linkage.to_string()),
            ("weight_text", self.cluster.weights.text.to_string()),
            ("weight_url", self.cluster.weights.url.to_string()),
            ("k_min", s.k_min.to_string()),
            ("k_max", s.k_max.map_or("auto".into(), |k| k.to_string())),
            ("full_scan_limit", s.full_scan_limit.to_string()),
            ("coarse_factor", s.coarse_factor.to_string()),
            ("duplicate_ads_min_domains", self.suspicion.duplicate_ads_min_domains.to_string()),
            ("verdicts", show_path(&self.verdicts)),
            ("manual_blacklist", show_path(&self.manual_blacklist)),
            ("local_list", show_path(&self.local_list)),
            ("scanner_endpoint", self.scanner_endpoint.clone().unwrap_or_default()),
            ("scanner_stub_dir", show_path(&self.scanner_stub_dir)),
            ("scanner_rate_per_minute", self.scanner_rate_per_minute.to_string()),
            ("scanner_timeout_secs", self.scanner_timeout_secs.to_string()),
            ("scanner_threshold", self.scanner_threshold.to_string()),
            ("verdict_ttl_days", self.verdict_ttl_days.to_string()),
            ("easylist", show_path(&self.easylist)),
            ("cpm", self.cpm.to_string()),
        ]
    }

    /// Canonical text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex sha256 of [`Config::to_text`] with `out_dir` blanked, so moving
    /// the output does not change the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.to_text().as_bytes()))
    }

    /// Embedding parameters with the run seed applied.
    pub fn skipgram(&self) -> SkipGramParams {
        SkipGramParams {
            seed: self.seed,
            ..self.embedding
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cluster.weights.validate()?;
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(Error::Param(format!(
                "similarity_threshold {} outside [0, 1]",
                self.similarity_threshold
            )));
        }
        if self.similarity_top_k == 0 {
            return Err(Error::Param("similarity_top_k must be positive".into()));
        }
        if !(self.cpm >= 0.0 && self.cpm.is_finite()) {
            return Err(Error::Param(format!("cpm {} must be non-negative", self.cpm)));
        }
        if self.verdict_ttl_days < 0 {
            return Err(Error::Param("verdict_ttl_days must be non-negative".into()));
        }
        if self.scanner_rate_per_minute == 0 {
            return Err(Error::Param("scanner_rate_per_minute must be positive".into()));
        }
        if !(self.cluster.search.coarse_factor > 1.0) {
            return Err(Error::Param("coarse_factor must exceed 1".into()));
        }
        Ok(())
    }
}
