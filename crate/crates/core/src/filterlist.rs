//! Adblock-style URL filter lists: a supported subset of the syntax, a
//! matcher, and an audit of service-worker URLs against a list.
//!
//! Supported: `||` domain anchors, `|` start and end anchors, plain
//! substrings, `*`, `^`, `@@` exceptions and the `$domain=` option. Every
//! other line is ignored and counted under a reason.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use url::{Position, Url};

use crate::ingest::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    None,
    /// `|`: match at the start of the URL.
    Start,
    /// `||`: match at the start of the host or of one of its labels.
    Domain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Token {
    Literal(String),
    Wildcard,
    Separator,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainOption {
    pub include: Vec<String>,
    pub exclude: Vec<String>,
}

impl DomainOption {
    fn is_empty(&self) -> bool {
        self.include.is_empty() && self.exclude.is_empty()
    }

    fn applies(&self, context: Option<&str>) -> bool {
        if self.is_empty() {
            return true;
        }
        let Some(host) = context else {
            return self.include.is_empty();
        };
        let host = host.to_ascii_lowercase();
        let covers = |d: &String| host == *d || host.ends_with(&format!(".{d}"));
        if self.exclude.iter().any(covers) {
            return false;
        }
        self.include.is_empty() || self.include.iter().any(covers)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRule {
    pub exception: bool,
    pub anchor: Anchor,
    pub end_anchor: bool,
    /// Lowercased; consecutive wildcards collapsed.
    pub pattern: Vec<Token>,
    pub domains: DomainOption,
}

impl fmt::Display for FilterRule {
    /// Canonical text; parsing it yields an equal rule.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.exception {
            f.write_str("@@")?;
        }
        f.write_str(match self.anchor {
            Anchor::None => "",
            Anchor::Start => "|",
            Anchor::Domain => "||",
        })?;
        for t in &self.pattern {
            match t {
                Token::Literal(s) => f.write_str(s)?,
                Token::Wildcard => f.write_str("*")?,
                Token::Separator => f.write_str("^")?,
            }
        }
        if self.end_anchor {
            f.write_str("|")?;
        }
        if !self.domains.is_empty() {
            let parts: Vec<String> = self
                .domains
                .include
                .iter()
                .cloned()
                .chain(self.domains.exclude.iter().map(|d| format!("~{d}")))
                .collect();
            write!(f, "$domain={}", parts.join("|"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgnoreReason {
    Empty,
    Comment,
    ElementHiding,
    Regex,
    UnsupportedOption,
    Malformed,
}

impl IgnoreReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            IgnoreReason::Empty => "empty",
            IgnoreReason::Comment => "comment",
            IgnoreReason::ElementHiding => "element_hiding",
            IgnoreReason::Regex => "regex",
            IgnoreReason::UnsupportedOption => "unsupported_option",
            IgnoreReason::Malformed => "malformed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IgnoredLine {
    /// 1-based.
    pub line: usize,
    pub reason: IgnoreReason,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub lines: usize,
    pub parsed: usize,
    pub ignored_by_reason: BTreeMap<String, usize>,
    /// Unsupported option names and how often they caused a skip.
    pub unsupported_options: BTreeMap<String, usize>,
}

impl ParseReport {
    pub fn ignored(&self) -> usize {
        self.ignored_by_reason.values().sum()
    }

    /// Every input line is either parsed or ignored with a reason.
    pub fn is_complete(&self) -> bool {
        self.parsed + self.ignored() == self.lines
    }
}

/// Parse one line. `Err` carries the reason it is skipped and a detail.
pub fn parse_rule(line: &str) -> Result<FilterRule, (IgnoreReason, String)> {
    let line = line.trim();
    if line.is_empty() {
        return Err((IgnoreReason::Empty, String::new()));
    }
    if line.starts_with('!') || (line.starts_with('[') && line.ends_with(']')) {
        return Err((IgnoreReason::Comment, String::new()));
    }
    for marker in ["##", "#@#", "#?#", "#$#", "#%#", "#@$#", "#@?#"] {
        if line.contains(marker) {
            return Err((IgnoreReason::ElementHiding, marker.to_string()));
        }
    }

    let (exception, body) = match line.strip_prefix("@@") {
        Some(rest) => (true, rest),
        None => (false, line),
    };
    let (body, options) = match body.rfind('$') {
        Some(i) if looks_like_options(&body[i + 1..]) => (&body[..i], Some(&body[i + 1..])),
        _ => (body, None),
    };
    if body.len() >= 2 && body.starts_with('/') && body.ends_with('/') {
        return Err((IgnoreReason::Regex, String::new()));
    }

    let mut domains = DomainOption::default();
    if let Some(opts) = options {
        for opt in opts.split(',') {
            let opt = opt.trim();
            match opt.strip_prefix("domain=") {
                Some(list) => {
                    for d in list.split('|') {
                        let d = d.trim().to_ascii_lowercase();
                        match d.strip_prefix('~') {
                            Some(x) if !x.is_empty() => domains.exclude.push(x.to_string()),
                            None if !d.is_empty() => domains.include.push(d),
                            _ => return Err((IgnoreReason::Malformed, format!("empty domain in `{opt}`"))),
                        }
                    }
                }
                None => {
                    let name = opt.split('=').next().unwrap_or(opt).trim_start_matches('~');
                    return Err((IgnoreReason::UnsupportedOption, name.to_string()));
                }
            }
        }
    }

    let (anchor, rest) = if let Some(r) = body.strip_prefix("||") {
        (Anchor::Domain, r)
    } else if let Some(r) = body.strip_prefix('|') {
        (Anchor::Start, r)
    } else {
        (Anchor::None, body)
    };
    let (end_anchor, rest) = match rest.strip_suffix('|') {
        Some(r) => (true, r),
        None => (false, rest),
    };

    let mut pattern = Vec::new();
    let mut lit = String::new();
    for ch in rest.chars() {
        let tok = match ch {
            '*' => Token::Wildcard,
            '^' => Token::Separator,
            c => {
                lit.extend(c.to_lowercase());
                continue;
            }
        };
        if !lit.is_empty() {
            pattern.push(Token::Literal(std::mem::take(&mut lit)));
        }
        if !(tok == Token::Wildcard && pattern.last() == Some(&Token::Wildcard)) {
            pattern.push(tok);
        }
    }
    if !lit.is_empty() {
        pattern.push(Token::Literal(lit));
    }
    if pattern.is_empty() {
        return Err((IgnoreReason::Malformed, "empty pattern".into()));
    }
    Ok(FilterRule {
        exception,
        anchor,
        end_anchor,
        pattern,
        domains,
    })
}

fn looks_like_options(s: &str) -> bool {
    s.starts_with(|c: char| c.is_ascii_alphabetic() || c == '~')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || "~=,|._-".contains(c))
}

/// ASCII characters `^` does not match.
fn is_separator(b: u8) -> bool {
    !(b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.' | b'%'))
}

/// Match `tokens` starting exactly at `pos`.
fn match_here(tokens: &[Token], s: &[u8], pos: usize, end_anchor: bool) -> bool {
    let Some((first, rest)) = tokens.split_first() else {
        return !end_anchor || pos == s.len();
    };
    match first {
        Token::Literal(lit) => {
            let lit = lit.as_bytes();
            s.len() >= pos + lit.len() && &s[pos..pos + lit.len()] == lit && match_here(rest, s, pos + lit.len(), end_anchor)
        }
        Token::Separator => {
            if pos == s.len() {
                match_here(rest, s, pos, end_anchor)
            } else {
                is_separator(s[pos]) && match_here(rest, s, pos + 1, end_anchor)
            }
        }
        Token::Wildcard => (pos..=s.len()).any(|p| match_here(rest, s, p, end_anchor)),
    }
}

impl FilterRule {
    /// Whether the URL pattern matches. `url` must be lowercase and
    /// `host` the byte range of its host.
    fn matches_text(&self, url: &str, host: (usize, usize)) -> bool {
        let s = url.as_bytes();
        match self.anchor {
            Anchor::Start => match_here(&self.pattern, s, 0, self.end_anchor),
            Anchor::None => (0..=s.len()).any(|p| match_here(&self.pattern, s, p, self.end_anchor)),
            Anchor::Domain => {
                let (lo, hi) = host;
                (lo..hi)
                    .filter(|&p| p == lo || s[p - 1] == b'.')
                    .any(|p| match_here(&self.pattern, s, p, self.end_anchor))
            }
        }
    }

    /// Longest literal, used to index the rule.
    fn key_literal(&self) -> Option<&str> {
        self.pattern
            .iter()
            .filter_map(|t| match t {
                Token::Literal(s) => Some(s.as_str()),
                _ => None,
            })
            .max_by_key(|s| s.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "rule", rename_all = "snake_case")]
pub enum Decision {
    /// Index of the first matching block rule.
    Blocked(usize),
    /// A block rule matched but so did this exception.
    Allowed(usize),
    Unmatched,
}

const GRAM: usize = 4;

/// Parsed rules with a substring index: each rule is filed under one
/// `GRAM`-byte slice of its longest literal, and a URL only checks rules
/// filed under slices it contains.
#[derive(Debug, Clone)]
pub struct FilterList {
    rules: Vec<FilterRule>,
    sources: Vec<String>,
    ignored: Vec<IgnoredLine>,
    lines: usize,
    by_gram: HashMap<Vec<u8>, Vec<usize>>,
    unindexed: Vec<usize>,
}

impl FilterList {
    pub fn parse(text: &str) -> Self {
        let mut rules = Vec::new();
        let mut sources = Vec::new();
        let mut ignored = Vec::new();
        let mut lines = 0;
        for (i, line) in text.lines().enumerate() {
            lines += 1;
            match parse_rule(line) {
                Ok(rule) => {
                    rules.push(rule);
                    sources.push(line.trim().to_string());
                }
                Err((reason, detail)) => ignored.push(IgnoredLine {
                    line: i + 1,
                    reason,
                    detail,
                }),
            }
        }
        let mut list = FilterList {
            rules,
            sources,
            ignored,
            lines,
            by_gram: HashMap::new(),
            unindexed: Vec::new(),
        };
        list.build_index();
        list
    }

    fn build_index(&mut self) {
        for (i, rule) in self.rules.iter().enumerate() {
            let key = rule.key_literal().filter(|l| l.len() >= GRAM);
            let Some(lit) = key else {
                self.unindexed.push(i);
                continue;
            };
            // File under the least crowded slice to keep buckets even.
            let best = (0..=lit.len() - GRAM)
                .map(|o| lit.as_bytes()[o..o + GRAM].to_vec())
                .min_by_key(|g| (self.by_gram.get(g).map_or(0, Vec::len), g.clone()))
                .expect("literal long enough");
            self.by_gram.entry(best).or_default().push(i);
        }
    }

    pub fn rules(&self) -> &[FilterRule] {
        &self.rules
    }

    /// Original text of rule `i`.
    pub fn source(&self, i: usize) -> &str {
        &self.sources[i]
    }

    pub fn ignored(&self) -> &[IgnoredLine] {
        &self.ignored
    }

    pub fn report(&self) -> ParseReport {
        let mut by_reason = BTreeMap::new();
        let mut options = BTreeMap::new();
        for ig in &self.ignored {
            *by_reason.entry(ig.reason.as_str().to_string()).or_insert(0) += 1;
            if ig.reason == IgnoreReason::UnsupportedOption {
                *options.entry(ig.detail.clone()).or_insert(0) += 1;
            }
        }
        ParseReport {
            lines: self.lines,
            parsed: self.rules.len(),
            ignored_by_reason: by_reason,
            unsupported_options: options,
        }
    }

    fn candidates(&self, url: &str) -> BTreeSet<usize> {
        let bytes = url.as_bytes();
        let mut out: BTreeSet<usize> = self.unindexed.iter().copied().collect();
        if bytes.len() >= GRAM {
            for w in bytes.windows(GRAM) {
                if let Some(ids) = self.by_gram.get(w) {
                    out.extend(ids.iter().copied());
                }
            }
        }
        out
    }

    /// Decide for `url` requested in the context of `context_host` (the
    /// page that triggered the request, used by `$domain=`). An exception
    /// only matters when some block rule matched.
    pub fn match_url(&self, url: &str, context_host: Option<&str>) -> Result<Decision, url::ParseError> {
        let parsed = Url::parse(url)?;
        let text = parsed.as_str().to_ascii_lowercase();
        let host = (parsed[..Position::BeforeHost].len(), parsed[..Position::AfterHost].len());
        let mut block = None;
        let mut allow = None;
        for i in self.candidates(&text) {
            let r = &self.rules[i];
            let slot = if r.exception { &mut allow } else { &mut block };
            if slot.is_none() && r.domains.applies(context_host) && r.matches_text(&text, host) {
                *slot = Some(i);
            }
            if block.is_some() && allow.is_some() {
                break;
            }
        }
        Ok(match (block, allow) {
            (Some(_), Some(a)) => Decision::Allowed(a),
            (Some(b), None) => Decision::Blocked(b),
            (None, _) => Decision::Unmatched,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditCounts {
    pub total: usize,
    pub blocked: usize,
    pub allowed_by_exception: usize,
    pub unparseable: usize,
}

/// Blocking of service-worker scripts and of the requests recorded in
/// redirect chains. URLs are counted once each.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub sw_scripts: AuditCounts,
    pub sw_requests: AuditCounts,
    /// Blocked URL → source text of the blocking rule.
    pub blocked_examples: BTreeMap<String, String>,
}

impl AuditReport {
    pub fn to_table(&self) -> String {
        let row = |name: &str, c: &AuditCounts| {
            format!(
                "{name:<24} {:>8} {:>8} {:>10}\n",
                c.total, c.blocked, c.allowed_by_exception
            )
        };
        let mut out = format!("{:<24} {:>8} {:>8} {:>10}\n", "", "total", "blocked", "excepted");
        out.push_str(&row("service worker scripts", &self.sw_scripts));
        out.push_str(&row("service worker requests", &self.sw_requests));
        out
    }
}

fn tally(
    list: &FilterList,
    urls: BTreeMap<&str, Option<String>>,
    counts: &mut AuditCounts,
    examples: &mut BTreeMap<String, String>,
) {
    counts.total = urls.len();
    for (url, ctx) in urls {
        match list.match_url(url, ctx.as_deref()) {
            Ok(Decision::Blocked(i)) => {
                counts.blocked += 1;
                examples.insert(url.to_string(), list.source(i).to_string());
            }
            Ok(Decision::Allowed(_)) => counts.allowed_by_exception += 1,
            Ok(Decision::Unmatched) => {}
            Err(_) => counts.unparseable += 1,
        }
    }
}

fn host_of(url: &str) -> Option<String> {
    Url::parse(url).ok()?.host_str().map(str::to_string)
}

pub fn audit_dataset(dataset: &Dataset, list: &FilterList) -> AuditReport {
    let mut scripts: BTreeMap<&str, Option<String>> = BTreeMap::new();
    let mut requests: BTreeMap<&str, Option<String>> = BTreeMap::new();
    for r in &dataset.records {
        let ctx = host_of(&r.source_url);
        scripts.entry(r.sw_script_url.as_str()).or_insert_with(|| ctx.clone());
        for u in &r.redirect_chain {
            requests.entry(u.as_str()).or_insert_with(|| ctx.clone());
        }
    }
    let mut report = AuditReport::default();
    tally(list, scripts, &mut report.sw_scripts, &mut report.blocked_examples);
    tally(list, requests, &mut report.sw_requests, &mut report.blocked_examples);
    report
}
