use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::psl::PublicSuffixList;
use crate::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Desktop,
    Mobile,
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Platform::Desktop => "desktop",
            Platform::Mobile => "mobile",
        })
    }
}

/// One collected notification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WpnRecord {
    pub id: String,
    pub source_url: String,
    /// Registrable domain of `source_url`, derived at load time.
    pub source_etld1: String,
    pub sw_script_url: String,
    pub title: String,
    pub body: String,
    pub icon_url: Option<String>,
    pub landing_url: Option<String>,
    pub redirect_chain: Vec<String>,
    pub platform: Platform,
    pub collected_at: DateTime<Utc>,
    pub clicked: bool,
}

impl WpnRecord {
    /// A record takes part in clustering only when its landing URL parses.
    pub fn is_clusterable(&self) -> bool {
        self.landing_url
            .as_deref()
            .is_some_and(|u| tokenize::parse_absolute(u).is_ok())
    }

    pub fn landing_parts(&self, psl: &PublicSuffixList) -> Option<UrlParts> {
        self.landing_url
            .as_deref()
            .and_then(|u| UrlParts::parse(u, psl).ok())
    }

    pub fn landing_etld1(&self, psl: &PublicSuffixList) -> Option<String> {
        self.landing_parts(psl).map(|p| p.etld1)
    }

    pub fn text_bag(&self) -> BagOfWords {
        tokenize::tokenize_text(&self.title, &self.body)
    }
}

/// Decomposed URL. Query parameter values are never kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UrlParts {
    pub scheme: String,
    pub host: String,
    pub etld1: String,
    pub path_segments: Vec<String>,
    pub page_name: String,
    pub query_param_names: BTreeSet<String>,
}

impl UrlParts {
    pub fn parse(url: &str, psl: &PublicSuffixList) -> Result<Self> {
        tokenize::url_parts(url, psl)
    }

    /// Directory segments, page name and parameter names as one token set.
    pub fn path_tokens(&self) -> BTreeSet<String> {
        self.path_segments
            .iter()
            .chain(std::iter::once(&self.page_name))
            .chain(self.query_param_names.iter())
            .filter(|t| !t.is_empty())
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagOfWords {
    counts: BTreeMap<String, u32>,
}

impl BagOfWords {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, token: impl Into<String>) {
        *self.counts.entry(token.into()).or_insert(0) += 1;
    }

    pub fn count(&self, token: &str) -> u32 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32)> {
        self.counts.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<S: Into<String>> FromIterator<S> for BagOfWords {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut bag = BagOfWords::new();
        for t in iter {
            bag.add(t);
        }
        bag
    }
}
