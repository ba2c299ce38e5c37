//! URL verdicts: providers, caching, persisted snapshots and rescans.
//!
//! Verdicts are keyed by the full canonical URL. Providers are consulted in
//! priority order (manual, local list, remote scanner) and the first answer
//! that is not `unknown` wins.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{Duration as StdDuration, Instant};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use url::Url;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Malicious,
    Benign,
    Unknown,
}

/// Declared in priority order, highest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    Manual,
    LocalList,
    RemoteScanner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    /// Canonical form, see [`canonicalize_url`].
    pub url: String,
    pub status: VerdictStatus,
    pub source: VerdictSource,
    pub engine_hits: u32,
    pub fetched_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Verdict {
    pub fn is_malicious(&self) -> bool {
        self.status == VerdictStatus::Malicious
    }
}

/// Lowercase scheme and host, drop default ports and the fragment, keep
/// path and query verbatim.
pub fn canonicalize_url(raw: &str) -> Result<String> {
    let url = Url::parse(raw.trim()).map_err(|e| Error::url(raw, e))?;
    let host = url
        .host_str()
        .ok_or_else(|| Error::url(raw, "missing host"))?
        .to_ascii_lowercase();
    let mut out = format!("{}://{}", url.scheme(), host);
    if let Some(port) = url.port() {
        out.push_str(&format!(":{port}"));
    }
    // `Url` already lowercases scheme and host and strips default ports; the
    // path and query are kept as the parser percent-encodes them.
    out.push_str(url.path());
    if let Some(q) = url.query() {
        out.push('?');
        out.push_str(q);
    }
    Ok(out)
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Settable clock for tests and replays.
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(at: DateTime<Utc>) -> Self {
        ManualClock(Mutex::new(at))
    }

    pub fn advance(&self, by: Duration) {
        let mut t = self.0.lock().expect("clock lock");
        *t += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().expect("clock lock")
    }
}

/// What a provider knows about one URL.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Answer {
    pub status: VerdictStatus,
    pub engine_hits: u32,
}

impl Answer {
    pub const UNKNOWN: Answer = Answer {
        status: VerdictStatus::Unknown,
        engine_hits: 0,
    };
}

pub trait VerdictProvider: Send + Sync {
    fn source(&self) -> VerdictSource;

    /// Look up a canonical URL. `Err` means the provider could not answer
    /// (timeout, server error); it is reported, never fatal.
    fn lookup(&self, canonical_url: &str) -> std::result::Result<Answer, String>;
}

/// Malicious URLs from a plain file: one URL per line, `#` comments.
#[derive(Debug, Clone, Default)]
pub struct LocalList {
    urls: HashSet<String>,
}

impl LocalList {
    pub fn parse(text: &str) -> Result<Self> {
        let mut urls = HashSet::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                urls.insert(canonicalize_url(line)?);
            }
        }
        Ok(LocalList { urls })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn len(&self) -> usize {
        self.urls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.urls.is_empty()
    }
}

impl VerdictProvider for LocalList {
    fn source(&self) -> VerdictSource {
        VerdictSource::LocalList
    }

    fn lookup(&self, canonical_url: &str) -> std::result::Result<Answer, String> {
        Ok(if self.urls.contains(canonical_url) {
            Answer {
                status: VerdictStatus::Malicious,
                engine_hits: 1,
            }
        } else {
            Answer::UNKNOWN
        })
    }
}

/// One analyst decision in the manual blacklist log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualEntry {
    pub url: String,
    pub status: VerdictStatus,
    pub analyst: String,
    pub at: DateTime<Utc>,
}

/// Analyst verdicts; the latest entry per URL wins.
#[derive(Debug, Default)]
pub struct ManualBlacklist {
    entries: RwLock<HashMap<String, ManualEntry>>,
}

impl ManualBlacklist {
    pub fn new() -> Self {
        Self::default()
    }

    /// Read an append-only JSONL log. A missing file is an empty list.
    pub fn load(path: &Path) -> Result<Self> {
        let list = Self::new();
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(list),
            Err(e) => return Err(Error::io(path, e)),
        };
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManualEntry = serde_json::from_str(&line).map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            list.record(entry)?;
        }
        Ok(list)
    }

    pub fn record(&self, mut entry: ManualEntry) -> Result<()> {
        entry.url = canonicalize_url(&entry.url)?;
        self.entries
            .write()
            .expect("manual list lock")
            .insert(entry.url.clone(), entry);
        Ok(())
    }

    /// Record and append to the log at `path`.
    pub fn append(&self, path: &Path, entry: ManualEntry) -> Result<()> {
        let mut entry = entry;
        entry.url = canonicalize_url(&entry.url)?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let line = serde_json::to_string(&entry).expect("entry serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        self.record(entry)
    }

    pub fn get(&self, canonical_url: &str) -> Option<ManualEntry> {
        self.entries.read().expect("manual list lock").get(canonical_url).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("manual list lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl VerdictProvider for ManualBlacklist {
    fn source(&self) -> VerdictSource {
        VerdictSource::Manual
    }

    fn lookup(&self, canonical_url: &str) -> std::result::Result<Answer, String> {
        Ok(self.get(canonical_url).map_or(Answer::UNKNOWN, |e| Answer {
            status: e.status,
            engine_hits: u32::from(e.status == VerdictStatus::Malicious),
        }))
    }
}

/// Scanner reply body shared by the HTTP client and the file stub.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanResponse {
    #[serde(default)]
    pub engine_hits: u32,
    /// Canned failure, only meaningful for the stub.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Unflagged URLs stay unknown: a clean scan today may be detected later.
fn scan_answer(resp: &ScanResponse, threshold: u32) -> Answer {
    let status = if resp.engine_hits >= threshold.max(1) {
        VerdictStatus::Malicious
    } else {
        VerdictStatus::Unknown
    };
    Answer {
        status,
        engine_hits: resp.engine_hits,
    }
}

/// Sliding one-minute request budget shared by all threads.
pub struct RateLimiter {
    per_minute: usize,
    sent: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn new(per_minute: usize) -> Self {
        RateLimiter {
            per_minute: per_minute.max(1),
            sent: Mutex::new(VecDeque::new()),
        }
    }

    /// Reserve a slot at `now`, or return how long to wait first.
    pub fn try_acquire(&self, now: Instant) -> std::result::Result<(), StdDuration> {
        let window = StdDuration::from_secs(60);
        let mut sent = self.sent.lock().expect("rate limiter lock");
        while sent.front().is_some_and(|&t| now.duration_since(t) >= window) {
            sent.pop_front();
        }
        if sent.len() < self.per_minute {
            sent.push_back(now);
            Ok(())
        } else {
            Err(window - now.duration_since(sent[0]))
        }
    }

    pub fn acquire(&self) {
        while let Err(wait) = self.try_acquire(Instant::now()) {
            std::thread::sleep(wait);
        }
    }
}

/// HTTP scanner client: `GET {endpoint}?url=<canonical url>` returning a
/// [`ScanResponse`] JSON body.
pub struct RemoteScanner {
    endpoint: String,
    agent: ureq::Agent,
    limiter: RateLimiter,
    threshold: u32,
}

impl RemoteScanner {
    pub fn new(endpoint: &str, requests_per_minute: usize, timeout: StdDuration, threshold: u32) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteScanner {
            endpoint: endpoint.to_string(),
            agent,
            limiter: RateLimiter::new(requests_per_minute),
            threshold,
        }
    }
}

impl VerdictProvider for RemoteScanner {
    fn source(&self) -> VerdictSource {
        VerdictSource::RemoteScanner
    }

    fn lookup(&self, canonical_url: &str) -> std::result::Result<Answer, String> {
        self.limiter.acquire();
        let mut resp = self
            .agent
            .get(&self.endpoint)
            .query("url", canonical_url)
            .call()
            .map_err(|e| format!("scanner request failed: {e}"))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("scanner returned HTTP {}", status.as_u16()));
        }
        let body: ScanResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| format!("bad scanner reply: {e}"))?;
        Ok(scan_answer(&body, self.threshold))
    }
}

/// File name used by [`StubScanner`] for a canonical URL.
pub fn stub_key(canonical_url: &str) -> String {
    format!("{}.json", hex::encode(Sha256::digest(canonical_url.as_bytes())))
}

/// Canned scanner replies from `dir/<sha256(url)>.json`. A missing file
/// means the scanner has never seen the URL.
pub struct StubScanner {
    dir: PathBuf,
    threshold: u32,
    calls: AtomicUsize,
}

impl StubScanner {
    pub fn new(dir: impl Into<PathBuf>, threshold: u32) -> Self {
        StubScanner {
            dir: dir.into(),
            threshold,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Write a canned reply for `url`.
    pub fn put(&self, url: &str, response: &ScanResponse) -> Result<()> {
        let path = self.dir.join(stub_key(&canonicalize_url(url)?));
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let body = serde_json::to_string(response).expect("response serializes");
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }
}

impl VerdictProvider for StubScanner {
    fn source(&self) -> VerdictSource {
        VerdictSource::RemoteScanner
    }

    fn lookup(&self, canonical_url: &str) -> std::result::Result<Answer, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let path = self.dir.join(stub_key(canonical_url));
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Answer::UNKNOWN),
            Err(e) => return Err(format!("{}: {e}", path.display())),
        };
        let resp: ScanResponse = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        match &resp.error {
            Some(err) => Err(err.clone()),
            None => Ok(scan_answer(&resp, self.threshold)),
        }
    }
}

/// Verdicts younger than the TTL are served without asking providers.
pub struct VerdictCache {
    ttl: Duration,
    entries: RwLock<HashMap<String, Verdict>>,
}

impl VerdictCache {
    pub const DEFAULT_TTL_DAYS: i64 = 30;

    pub fn new(ttl: Duration) -> Self {
        VerdictCache {
            ttl,
            entries: RwLock::new(HashMap::new()),
        }
    }

    pub fn get(&self, canonical_url: &str, now: DateTime<Utc>) -> Option<Verdict> {
        let entries = self.entries.read().expect("cache lock");
        entries
            .get(canonical_url)
            .filter(|v| now - v.fetched_at < self.ttl)
            .cloned()
    }

    pub fn put(&self, verdict: Verdict) {
        self.entries
            .write()
            .expect("cache lock")
            .insert(verdict.url.clone(), verdict);
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for VerdictCache {
    fn default() -> Self {
        Self::new(Duration::days(Self::DEFAULT_TTL_DAYS))
    }
}

fn ask(url: &str, providers: &[&dyn VerdictProvider], now: DateTime<Utc>) -> Verdict {
    let mut ordered: Vec<&dyn VerdictProvider> = providers.to_vec();
    ordered.sort_by_key(|p| p.source());
    let mut errors = Vec::new();
    for p in &ordered {
        match p.lookup(url) {
            Ok(a) if a.status != VerdictStatus::Unknown => {
                return Verdict {
                    url: url.to_string(),
                    status: a.status,
                    source: p.source(),
                    engine_hits: a.engine_hits,
                    fetched_at: now,
                    error: None,
                }
            }
            Ok(_) => {}
            Err(e) => errors.push(format!("{:?}: {e}", p.source())),
        }
    }
    Verdict {
        url: url.to_string(),
        status: VerdictStatus::Unknown,
        source: ordered.last().map_or(VerdictSource::RemoteScanner, |p| p.source()),
        engine_hits: 0,
        fetched_at: now,
        error: (!errors.is_empty()).then(|| errors.join("; ")),
    }
}

/// Verdict for one URL. Only an unparseable URL is an error; provider
/// failures give an `unknown` verdict carrying the error, which is not
/// cached.
pub fn query(
    url: &str,
    providers: &[&dyn VerdictProvider],
    cache: &VerdictCache,
    clock: &dyn Clock,
) -> Result<Verdict> {
    let url = canonicalize_url(url)?;
    let now = clock.now();
    if let Some(hit) = cache.get(&url, now) {
        return Ok(hit);
    }
    let verdict = ask(&url, providers, now);
    if verdict.error.is_none() {
        cache.put(verdict.clone());
    }
    Ok(verdict)
}

/// Persisted verdicts for a set of URLs. Labels are a pure function of the
/// dataset and a snapshot.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictSnapshot {
    pub verdicts: BTreeMap<String, Verdict>,
}

impl VerdictSnapshot {
    /// Query every URL (deduplicated by canonical form).
    pub fn collect<'a>(
        urls: impl IntoIterator<Item = &'a str>,
        providers: &[&dyn VerdictProvider],
        cache: &VerdictCache,
        clock: &dyn Clock,
    ) -> Result<Self> {
        let mut verdicts = BTreeMap::new();
        for url in urls {
            let v = query(url, providers, cache, clock)?;
            verdicts.insert(v.url.clone(), v);
        }
        Ok(VerdictSnapshot { verdicts })
    }

    pub fn get(&self, url: &str) -> Option<&Verdict> {
        match canonicalize_url(url) {
            Ok(c) => self.verdicts.get(&c),
            Err(_) => None,
        }
    }

    pub fn status(&self, url: &str) -> VerdictStatus {
        self.get(url).map_or(VerdictStatus::Unknown, |v| v.status)
    }

    pub fn insert(&mut self, verdict: Verdict) {
        self.verdicts.insert(verdict.url.clone(), verdict);
    }

    pub fn malicious_urls(&self) -> impl Iterator<Item = &str> {
        self.verdicts.values().filter(|v| v.is_malicious()).map(|v| v.url.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("snapshot serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::artifact("verdict snapshot", e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictChange {
    pub url: String,
    pub before: VerdictStatus,
    pub after: VerdictStatus,
}

/// Outcome of re-querying URLs against a prior snapshot. `changed` and
/// `unchanged` partition the canonical input set; URLs whose lookup failed
/// keep their prior verdict and are listed in `unchanged` and `failed`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RescanReport {
    pub changed: Vec<VerdictChange>,
    pub unchanged: Vec<String>,
    pub failed: Vec<String>,
}

/// Query each URL afresh, bypassing any cache, and return the delta along
/// with the updated snapshot.
pub fn rescan<'a>(
    urls: impl IntoIterator<Item = &'a str>,
    providers: &[&dyn VerdictProvider],
    prior: &VerdictSnapshot,
    clock: &dyn Clock,
) -> Result<(RescanReport, VerdictSnapshot)> {
    let mut canonical: Vec<String> = urls.into_iter().map(canonicalize_url).collect::<Result<_>>()?;
    canonical.sort();
    canonical.dedup();
    let mut report = RescanReport::default();
    let mut next = prior.clone();
    let now = clock.now();
    for url in canonical {
        let before = prior.verdicts.get(&url).map_or(VerdictStatus::Unknown, |v| v.status);
        let fresh = ask(&url, providers, now);
        if fresh.error.is_some() {
            report.failed.push(url.clone());
            report.unchanged.push(url);
            continue;
        }
        let after = fresh.status;
        next.insert(fresh);
        if before == after {
            report.unchanged.push(url);
        } else {
            report.changed.push(VerdictChange { url, before, after });
        }
    }
    Ok((report, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2020, 3, 1, 0, 0, 0).unwrap()
    }

    fn manual(url: &str, status: VerdictStatus) -> ManualEntry {
        ManualEntry {
            url: url.into(),
            status,
            analyst: "ana".into(),
            at: t0(),
        }
    }

    #[test]
    fn canonical_form() {
        assert_eq!(
            canonicalize_url("HTTPS://Example.COM:443/A/b?X=1#frag").unwrap(),
            "https://example.com/A/b?X=1"
        );
        assert_eq!(canonicalize_url("http://a.com:8080").unwrap(), "http://a.com:8080/");
        assert!(canonicalize_url("not a url").is_err());
    }

    #[test]
    fn manual_benign_beats_local_malicious() {
        let local = LocalList::parse("https://bad.com/x\n").unwrap();
        let m = ManualBlacklist::new();
        m.record(manual("https://bad.com/x", VerdictStatus::Benign)).unwrap();
        let cache = VerdictCache::default();
        let clock = ManualClock::new(t0());
        let v = query("https://bad.com/x", &[&local, &m], &cache, &clock).unwrap();
        assert_eq!((v.status, v.source), (VerdictStatus::Benign, VerdictSource::Manual));
    }

    #[test]
    fn unknown_everywhere() {
        let local = LocalList::parse("# nothing\n").unwrap();
        let v = query("https://a.com/", &[&local], &VerdictCache::default(), &SystemClock).unwrap();
        assert_eq!(v.status, VerdictStatus::Unknown);
    }

    #[test]
    fn cache_serves_within_ttl_only() {
        let dir = tempfile::tempdir().unwrap();
        let stub = StubScanner::new(dir.path(), 1);
        stub.put("https://a.com/x", &ScanResponse { engine_hits: 2, error: None }).unwrap();
        let cache = VerdictCache::default();
        let clock = ManualClock::new(t0());
        let v = query("https://a.com/x", &[&stub], &cache, &clock).unwrap();
        assert_eq!((v.status, v.engine_hits), (VerdictStatus::Malicious, 2));
        clock.advance(Duration::days(29));
        query("https://A.com/x", &[&stub], &cache, &clock).unwrap();
        assert_eq!(stub.calls(), 1);
        clock.advance(Duration::days(1));
        query("https://a.com/x", &[&stub], &cache, &clock).unwrap();
        assert_eq!(stub.calls(), 2);
    }

    #[test]
    fn provider_errors_are_annotated_and_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        let stub = StubScanner::new(dir.path(), 1);
        stub.put("https://a.com/", &ScanResponse { engine_hits: 0, error: Some("timeout".into()) }).unwrap();
        let cache = VerdictCache::default();
        let v = query("https://a.com/", &[&stub], &cache, &SystemClock).unwrap();
        assert_eq!(v.status, VerdictStatus::Unknown);
        assert!(v.error.as_deref().unwrap().contains("timeout"));
        assert!(cache.is_empty());
    }

    #[test]
    fn threshold_controls_malicious() {
        let dir = tempfile::tempdir().unwrap();
        let stub = StubScanner::new(dir.path(), 3);
        stub.put("https://a.com/", &ScanResponse { engine_hits: 2, error: None }).unwrap();
        let v = query("https://a.com/", &[&stub], &VerdictCache::default(), &SystemClock).unwrap();
        assert_eq!(v.status, VerdictStatus::Unknown);
    }

    #[test]
    fn manual_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manual.jsonl");
        let m = ManualBlacklist::load(&path).unwrap();
        m.append(&path, manual("https://x.com/a", VerdictStatus::Malicious)).unwrap();
        m.append(&path, manual("https://x.com/a", VerdictStatus::Benign)).unwrap();
        let again = ManualBlacklist::load(&path).unwrap();
        assert_eq!(again.get("https://x.com/a").unwrap().status, VerdictStatus::Benign);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
    }

    #[test]
    fn rate_limiter_blocks_after_budget() {
        let rl = RateLimiter::new(2);
        let t = Instant::now();
        assert!(rl.try_acquire(t).is_ok());
        assert!(rl.try_acquire(t).is_ok());
        let wait = rl.try_acquire(t + StdDuration::from_secs(10)).unwrap_err();
        assert_eq!(wait, StdDuration::from_secs(50));
        assert!(rl.try_acquire(t + StdDuration::from_secs(60)).is_ok());
    }

    #[test]
    fn rescan_reports_flips() {
        let dir = tempfile::tempdir().unwrap();
        let stub = StubScanner::new(dir.path(), 1);
        let urls = ["https://a.com/1", "https://a.com/2", "https://a.com/2"];
        let clock = ManualClock::new(t0());
        let snap = VerdictSnapshot::collect(urls, &[&stub], &VerdictCache::default(), &clock).unwrap();
        let (none, _) = rescan(urls, &[&stub], &snap, &clock).unwrap();
        assert!(none.changed.is_empty());
        assert_eq!(none.unchanged.len(), 2);

        stub.put("https://a.com/2", &ScanResponse { engine_hits: 4, error: None }).unwrap();
        let (delta, next) = rescan(urls, &[&stub], &snap, &clock).unwrap();
        assert_eq!(
            delta.changed,
            vec![VerdictChange {
                url: "https://a.com/2".into(),
                before: VerdictStatus::Unknown,
                after: VerdictStatus::Malicious
            }]
        );
        assert_eq!(delta.unchanged, vec!["https://a.com/1".to_string()]);
        assert!(next.get("https://a.com/2").unwrap().is_malicious());
    }

    #[test]
    fn snapshot_persists() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = VerdictSnapshot::default();
        s.insert(Verdict {
            url: "https://a.com/".into(),
            status: VerdictStatus::Malicious,
            source: VerdictSource::LocalList,
            engine_hits: 1,
            fetched_at: t0(),
            error: None,
        });
        let p = dir.path().join("v.json");
        s.save(&p).unwrap();
        assert_eq!(VerdictSnapshot::load(&p).unwrap(), s);
    }

    proptest! {
        #[test]
        fn canonicalization_is_idempotent(
            host in "[a-zA-Z]{1,8}\\.(com|ORG|net)",
            path in "(/[a-zA-Z0-9._-]{0,6}){0,3}",
            query in proptest::option::of("[a-z]{1,4}=[A-Z0-9]{0,4}"),
            port in proptest::option::of(prop_oneof![Just(443u16), Just(8443u16)]),
        ) {
            let mut url = format!("HTTPS://{host}");
            if let Some(p) = port { url.push_str(&format!(":{p}")); }
            url.push_str(&path);
            if let Some(q) = query { url.push('?'); url.push_str(&q); }
            let once = canonicalize_url(&url).unwrap();
            prop_assert_eq!(canonicalize_url(&once).unwrap(), once.clone());
        }
    }
}
