//! Public-suffix lookup and registrable-domain (eTLD+1) extraction.
//!
//! The list format is the one published at publicsuffix.org: one rule per
//! line, `//` comments, `*.` wildcards and `!` exceptions. A snapshot is
//! compiled into the crate; [`PublicSuffixList::from_file`] loads another.

use std::collections::HashSet;
use std::net::{IpAddr, Ipv6Addr};
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};

const BUNDLED: &str = include_str!("../data/public_suffix_list.dat");

#[derive(Debug, Clone, Default)]
pub struct PublicSuffixList {
    rules: HashSet<String>,
    wildcards: HashSet<String>,
    exceptions: HashSet<String>,
}

impl PublicSuffixList {
    pub fn parse(text: &str) -> Self {
        let mut list = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("//") {
                continue;
            }
            let rule = line.split_whitespace().next().unwrap_or_default();
            let (set, body) = if let Some(rest) = rule.strip_prefix('!') {
                (&mut list.exceptions, rest)
            } else if let Some(rest) = rule.strip_prefix("*.") {
                (&mut list.wildcards, rest)
            } else {
                (&mut list.rules, rule)
            };
            // Rules may be written in Unicode; hosts arrive as punycode.
            let body = idna::domain_to_ascii(body).unwrap_or_else(|_| body.to_lowercase());
            set.insert(body);
        }
        list
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    /// The snapshot shipped with the crate, parsed once.
    pub fn bundled() -> &'static Self {
        static LIST: OnceLock<PublicSuffixList> = OnceLock::new();
        LIST.get_or_init(|| Self::parse(BUNDLED))
    }

    pub fn len(&self) -> usize {
        self.rules.len() + self.wildcards.len() + self.exceptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of trailing labels of `labels` that form the public suffix.
    fn suffix_len(&self, labels: &[&str]) -> usize {
        let n = labels.len();
        // Exception rules win over everything; the suffix is the rule minus
        // its leftmost label.
        for i in 0..n {
            if self.exceptions.contains(&labels[i..].join(".")) {
                return n - i - 1;
            }
        }
        for i in 0..n {
            if self.rules.contains(&labels[i..].join(".")) {
                return n - i;
            }
            if i + 1 < n && self.wildcards.contains(&labels[i + 1..].join(".")) {
                return n - i;
            }
        }
        1
    }

    /// Public suffix of a normalized host.
    pub fn public_suffix(&self, host: &str) -> Result<String> {
        let host = normalize_host(host)?;
        if is_ip_literal(&host) {
            return Ok(host);
        }
        let labels: Vec<&str> = host.split('.').collect();
        let k = self.suffix_len(&labels);
        Ok(labels[labels.len() - k..].join("."))
    }

    /// Registrable domain: the public suffix plus one label. Hosts that are
    /// themselves public suffixes and IP literals come back unchanged.
    pub fn etld_plus_one(&self, host: &str) -> Result<String> {
        let host = normalize_host(host)?;
        if is_ip_literal(&host) {
            return Ok(host);
        }
        let labels: Vec<&str> = host.split('.').collect();
        let k = self.suffix_len(&labels);
        if labels.len() <= k {
            return Ok(host);
        }
        Ok(labels[labels.len() - k - 1..].join("."))
    }
}

/// Registrable domain of `host` against the bundled snapshot.
pub fn etld_plus_one(host: &str) -> Result<String> {
    PublicSuffixList::bundled().etld_plus_one(host)
}

fn is_ip_literal(host: &str) -> bool {
    host.parse::<IpAddr>().is_ok()
}

fn normalize_host(host: &str) -> Result<String> {
    let bad = |reason| Error::Host {
        host: host.to_string(),
        reason,
    };
    let trimmed = host.trim();
    if let Some(inner) = trimmed.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
        return inner
            .parse::<Ipv6Addr>()
            .map(|ip| ip.to_string())
            .map_err(|_| bad("bracketed host is not an IPv6 address"));
    }
    if trimmed.parse::<IpAddr>().is_ok() {
        return Ok(trimmed.to_string());
    }
    let h = trimmed.strip_suffix('.').unwrap_or(trimmed).to_ascii_lowercase();
    if h.is_empty() {
        return Err(bad("empty host"));
    }
    if h.len() > 253 {
        return Err(bad("host longer than 253 characters"));
    }
    for label in h.split('.') {
        if label.is_empty() {
            return Err(bad("empty label"));
        }
        if label.len() > 63 {
            return Err(bad("label longer than 63 characters"));
        }
        if !label
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
        {
            return Err(bad("label contains characters outside [a-z0-9-_]"));
        }
    }
    Ok(h)
}
