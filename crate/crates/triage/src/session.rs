//! Review state: pipeline artifacts, the analyst verdict journal and the
//! labels derived from both.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use wpnmine::clustering::WpnCluster;
use wpnmine::config::Config;
use wpnmine::ingest::Dataset;
use wpnmine::labels::{ClusterLabel, LabelState, MetaLabel, ProvenanceEntry, RecordLabel, Subject};
use wpnmine::metacluster::{BipartiteGraph, GraphExport, SuspicionRules};
use wpnmine::pipeline::{compute_labels, load_run, Labeling, PipelineReport, RunDir};
use wpnmine::psl::PublicSuffixList;
use wpnmine::verdicts::{canonicalize_url, Clock, ManualEntry, Verdict, VerdictSnapshot, VerdictSource, VerdictStatus};

#[derive(Debug, thiserror::Error)]
pub enum TriageError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    /// The caller's view of the journal is stale; refetch and retry.
    #[error("{0}")]
    Conflict(String),
    #[error(transparent)]
    Core(#[from] wpnmine::Error),
}

pub type Result<T, E = TriageError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Cluster,
    Record,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalystStatus {
    Malicious,
    Benign,
}

impl From<AnalystStatus> for VerdictStatus {
    fn from(s: AnalystStatus) -> Self {
        match s {
            AnalystStatus::Malicious => VerdictStatus::Malicious,
            AnalystStatus::Benign => VerdictStatus::Benign,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRequest {
    pub target_kind: TargetKind,
    pub target_id: String,
    pub status: AnalystStatus,
    pub analyst: String,
    /// Journal length the analyst last saw. A mismatch is a conflict.
    #[serde(default)]
    pub expected_head: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: usize,
    pub target_kind: TargetKind,
    pub target_id: String,
    pub status: AnalystStatus,
    pub analyst: String,
    pub at: DateTime<Utc>,
    /// Manual verdicts this entry writes, one per canonical landing URL.
    pub manual: Vec<ManualEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecomputeDelta {
    /// Journal length consumed by this recompute.
    pub journal_head: usize,
    pub newly_malicious: Vec<String>,
    pub newly_suspicious: Vec<String>,
    /// Records that lost every malicious and suspicious label.
    pub cleared: Vec<String>,
    pub newly_malicious_clusters: Vec<usize>,
    pub newly_suspicious_clusters: Vec<usize>,
    pub cleared_clusters: Vec<usize>,
}

impl RecomputeDelta {
    pub fn is_empty(&self) -> bool {
        self.newly_malicious.is_empty()
            && self.newly_suspicious.is_empty()
            && self.cleared.is_empty()
            && self.newly_malicious_clusters.is_empty()
            && self.newly_suspicious_clusters.is_empty()
            && self.cleared_clusters.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterFilter {
    All,
    AdCampaign,
    Malicious,
    Suspicious,
    Unlabeled,
}

impl std::str::FromStr for ClusterFilter {
    type Err = TriageError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "" | "all" => ClusterFilter::All,
            "ad_campaign" => ClusterFilter::AdCampaign,
            "malicious" => ClusterFilter::Malicious,
            "suspicious" => ClusterFilter::Suspicious,
            "unlabeled" => ClusterFilter::Unlabeled,
            other => return Err(TriageError::BadRequest(format!("unknown label filter `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: usize,
    pub size: usize,
    pub labels: Vec<ClusterLabel>,
    pub metacluster: Option<usize>,
    pub source_domains: Vec<String>,
    pub landing_domains: Vec<String>,
    pub representative_messages: Vec<Message>,
    pub provenance: Vec<ProvenanceEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberView {
    pub id: String,
    pub title: String,
    pub body: String,
    pub source_url: String,
    pub landing_url: Option<String>,
    pub labels: Vec<RecordLabel>,
    pub vetoed: bool,
    pub verdict: Option<VerdictStatus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterDetail {
    #[serde(flatten)]
    pub summary: ClusterSummary,
    pub members: Vec<MemberView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaClusterDetail {
    pub id: usize,
    pub clusters: Vec<usize>,
    pub domains: Vec<String>,
    pub labels: Vec<MetaLabel>,
    pub provenance: Vec<ProvenanceEntry>,
    pub subgraph: GraphExport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page<T> {
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub pages: usize,
    pub items: Vec<T>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub malicious: usize,
    pub known_malicious: usize,
    pub suspicious: usize,
    pub ad: usize,
    pub vetoed: usize,
    pub malicious_clusters: usize,
    pub suspicious_clusters: usize,
    pub ad_campaigns: usize,
}

impl LabelCounts {
    pub fn of(state: &LabelState) -> Self {
        LabelCounts {
            malicious: state.count_records(RecordLabel::Malicious),
            known_malicious: state.count_records(RecordLabel::KnownMalicious),
            suspicious: state.count_records(RecordLabel::Suspicious),
            ad: state.count_records(RecordLabel::Ad),
            vetoed: state.vetoed.len(),
            malicious_clusters: state.count_clusters(ClusterLabel::Malicious),
            suspicious_clusters: state.count_clusters(ClusterLabel::Suspicious),
            ad_campaigns: state.count_clusters(ClusterLabel::AdCampaign),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub config_hash: String,
    pub journal_head: usize,
    pub consumed_head: usize,
    pub current: LabelCounts,
    pub pipeline: Option<PipelineReport>,
}

/// Immutable inputs shared between the session and recompute snapshots.
pub struct Artifacts {
    pub config_hash: String,
    pub dataset: Dataset,
    pub clusters: Vec<WpnCluster>,
    pub verdicts: VerdictSnapshot,
    pub report: Option<PipelineReport>,
    pub psl: PublicSuffixList,
    pub rules: SuspicionRules,
}

impl Artifacts {
    /// Load a finished pipeline run directory.
    pub fn load(run_dir: &Path) -> Result<Self> {
        let dir = RunDir::new(run_dir);
        let config = Config::load(&dir.config())?;
        let psl = wpnmine::pipeline::load_psl(&config)?;
        let run = load_run(run_dir, &psl)?;
        Ok(Artifacts {
            config_hash: run.config_hash,
            dataset: run.dataset,
            clusters: run.clustering.clusters,
            verdicts: run.verdicts,
            report: run.report,
            psl,
            rules: config.suspicion,
        })
    }
}

pub struct TriageSession {
    artifacts: Arc<Artifacts>,
    journal: Vec<JournalEntry>,
    journal_path: Option<PathBuf>,
    clock: Arc<dyn Clock>,
    labeling: Labeling,
    consumed_head: usize,
    meta_of: BTreeMap<usize, usize>,
    record_index: BTreeMap<String, usize>,
}

/// Base verdicts overlaid with the first `head` journal entries, later
/// entries winning.
pub fn effective_verdicts(base: &VerdictSnapshot, journal: &[JournalEntry]) -> VerdictSnapshot {
    let mut out = base.clone();
    for e in journal {
        for m in &e.manual {
            out.insert(Verdict {
                url: m.url.clone(),
                status: m.status,
                source: VerdictSource::Manual,
                engine_hits: 0,
                fetched_at: m.at,
                error: None,
            });
        }
    }
    out
}

fn read_journal(path: &Path) -> Result<Vec<JournalEntry>> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(TriageError::Core(wpnmine::Error::Io { path: path.into(), source: e })),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| wpnmine::Error::Io { path: path.into(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: JournalEntry = serde_json::from_str(&line).map_err(|e| wpnmine::Error::Schema {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if entry.seq != out.len() {
            return Err(TriageError::Core(wpnmine::Error::Schema {
                path: path.into(),
                line: i + 1,
                message: format!("journal sequence {} where {} was expected", entry.seq, out.len()),
            }));
        }
        out.push(entry);
    }
    Ok(out)
}

fn label_sets(state: &LabelState) -> (BTreeSet<String>, BTreeSet<String>, BTreeSet<usize>, BTreeSet<usize>) {
    let recs = |l: RecordLabel| {
        state
            .records
            .iter()
            .filter(|(_, s)| s.contains(&l))
            .map(|(id, _)| id.clone())
            .collect::<BTreeSet<_>>()
    };
    let clus = |l: ClusterLabel| {
        state
            .clusters
            .iter()
            .filter(|(_, s)| s.contains(&l))
            .map(|(id, _)| *id)
            .collect::<BTreeSet<_>>()
    };
    (
        recs(RecordLabel::Malicious),
        recs(RecordLabel::Suspicious),
        clus(ClusterLabel::Malicious),
        clus(ClusterLabel::Suspicious),
    )
}

/// Label changes between two states.
pub fn label_delta(before: &LabelState, after: &LabelState, journal_head: usize) -> RecomputeDelta {
    let (bm, bs, bcm, bcs) = label_sets(before);
    let (am, as_, acm, acs) = label_sets(after);
    let flagged_b: BTreeSet<&String> = bm.union(&bs).collect();
    let flagged_a: BTreeSet<&String> = am.union(&as_).collect();
    let cflag_b: BTreeSet<usize> = bcm.union(&bcs).copied().collect();
    let cflag_a: BTreeSet<usize> = acm.union(&acs).copied().collect();
    RecomputeDelta {
        journal_head,
        newly_malicious: am.difference(&bm).cloned().collect(),
        newly_suspicious: as_.difference(&bs).cloned().collect(),
        cleared: flagged_b.difference(&flagged_a).map(|s| (*s).clone()).collect(),
        newly_malicious_clusters: acm.difference(&bcm).copied().collect(),
        newly_suspicious_clusters: acs.difference(&bcs).copied().collect(),
        cleared_clusters: cflag_b.difference(&cflag_a).copied().collect(),
    }
}

impl TriageSession {
    /// Start from artifacts and replay any existing journal at
    /// `journal_path`.
    pub fn new(artifacts: Artifacts, journal_path: Option<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self> {
        let journal = match &journal_path {
            Some(p) => read_journal(p)?,
            None => Vec::new(),
        };
        let record_index = artifacts
            .dataset
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        let artifacts = Arc::new(artifacts);
        let labeling = Self::derive(&artifacts, &journal);
        let mut s = TriageSession {
            artifacts,
            consumed_head: journal.len(),
            journal,
            journal_path,
            clock,
            labeling,
            meta_of: BTreeMap::new(),
            record_index,
        };
        s.index_metas();
        Ok(s)
    }

    fn derive(a: &Artifacts, journal: &[JournalEntry]) -> Labeling {
        let verdicts = effective_verdicts(&a.verdicts, journal);
        compute_labels(&a.dataset, &a.clusters, &verdicts, &a.psl, a.rules)
    }

    fn index_metas(&mut self) {
        self.meta_of = self
            .labeling
            .metas
            .iter()
            .flat_map(|m| m.clusters.iter().map(move |&c| (c, m.id)))
            .collect();
    }

    pub fn artifacts(&self) -> &Artifacts {
        &self.artifacts
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    pub fn labels(&self) -> &LabelState {
        &self.labeling.state
    }

    pub fn labeling(&self) -> &Labeling {
        &self.labeling
    }

    pub fn consumed_head(&self) -> usize {
        self.consumed_head
    }

    fn cluster(&self, id: usize) -> Result<&WpnCluster> {
        self.artifacts
            .clusters
            .get(id)
            .ok_or_else(|| TriageError::NotFound(format!("no cluster {id}")))
    }

    fn summary(&self, c: &WpnCluster) -> ClusterSummary {
        let state = &self.labeling.state;
        let mut seen = BTreeSet::new();
        let mut messages = Vec::new();
        for id in &c.members {
            let r = &self.artifacts.dataset.records[self.record_index[id]];
            if seen.insert((r.title.clone(), r.body.clone())) {
                messages.push(Message {
                    title: r.title.clone(),
                    body: r.body.clone(),
                });
                if messages.len() == 3 {
                    break;
                }
            }
        }
        ClusterSummary {
            id: c.id,
            size: c.len(),
            labels: state.clusters.get(&c.id).map(|s| s.iter().copied().collect()).unwrap_or_default(),
            metacluster: self.meta_of.get(&c.id).copied(),
            source_domains: c.source_etld1s.iter().cloned().collect(),
            landing_domains: c.landing_etld1s.iter().cloned().collect(),
            representative_messages: messages,
            provenance: state
                .provenance
                .iter()
                .filter(|p| p.subject == Subject::Cluster(c.id))
                .cloned()
                .collect(),
        }
    }

    /// Review queue order: suspicious first, then larger clusters, then id.
    pub fn list_clusters(&self, filter: ClusterFilter, page: usize, page_size: usize) -> Result<Page<ClusterSummary>> {
        if page == 0 || page_size == 0 {
            return Err(TriageError::BadRequest("page and page_size start at 1".into()));
        }
        let state = &self.labeling.state;
        let keep = |c: &&WpnCluster| match filter {
            ClusterFilter::All => true,
            ClusterFilter::AdCampaign => state.cluster_has(c.id, ClusterLabel::AdCampaign),
            ClusterFilter::Malicious => state.cluster_has(c.id, ClusterLabel::Malicious),
            ClusterFilter::Suspicious => state.cluster_has(c.id, ClusterLabel::Suspicious),
            ClusterFilter::Unlabeled => state.clusters.get(&c.id).is_none_or(|s| s.is_empty()),
        };
        let mut selected: Vec<&WpnCluster> = self.artifacts.clusters.iter().filter(keep).collect();
        selected.sort_by_key(|c| (!state.cluster_has(c.id, ClusterLabel::Suspicious), std::cmp::Reverse(c.len()), c.id));
        let total = selected.len();
        let items = selected
            .iter()
            .skip((page - 1) * page_size)
            .take(page_size)
            .map(|c| self.summary(c))
            .collect();
        Ok(Page {
            page,
            page_size,
            total,
            pages: total.div_ceil(page_size),
            items,
        })
    }

    pub fn cluster_detail(&self, id: usize) -> Result<ClusterDetail> {
        let c = self.cluster(id)?;
        let state = &self.labeling.state;
        let verdicts = effective_verdicts(&self.artifacts.verdicts, &self.journal[..self.consumed_head]);
        let members = c
            .members
            .iter()
            .map(|rid| {
                let r = &self.artifacts.dataset.records[self.record_index[rid]];
                MemberView {
                    id: r.id.clone(),
                    title: r.title.clone(),
                    body: r.body.clone(),
                    source_url: r.source_url.clone(),
                    landing_url: r.landing_url.clone(),
                    labels: state.record_labels(rid).into_iter().collect(),
                    vetoed: state.is_vetoed(rid),
                    verdict: r.landing_url.as_deref().and_then(|u| verdicts.get(u)).map(|v| v.status),
                }
            })
            .collect();
        Ok(ClusterDetail {
            summary: self.summary(c),
            members,
        })
    }

    pub fn metacluster_detail(&self, id: usize) -> Result<MetaClusterDetail> {
        let m = self
            .labeling
            .metas
            .get(id)
            .ok_or_else(|| TriageError::NotFound(format!("no meta-cluster {id}")))?;
        let members: Vec<WpnCluster> = m.clusters.iter().map(|&c| self.artifacts.clusters[c].clone()).collect();
        let state = &self.labeling.state;
        Ok(MetaClusterDetail {
            id: m.id,
            clusters: m.clusters.clone(),
            domains: m.domains.iter().cloned().collect(),
            labels: state.metas.get(&m.id).map(|s| s.iter().copied().collect()).unwrap_or_default(),
            provenance: state
                .provenance
                .iter()
                .filter(|p| p.subject == Subject::Meta(m.id))
                .cloned()
                .collect(),
            subgraph: BipartiteGraph::build(&members).export(),
        })
    }

    /// Append an analyst verdict to the journal. Labels change only on the
    /// next [`TriageSession::recompute`].
    pub fn submit_verdict(&mut self, req: VerdictRequest) -> Result<JournalEntry> {
        if let Some(expected) = req.expected_head {
            if expected != self.journal.len() {
                return Err(TriageError::Conflict(format!(
                    "journal head is {}, request expected {expected}",
                    self.journal.len()
                )));
            }
        }
        if req.analyst.trim().is_empty() {
            return Err(TriageError::BadRequest("analyst id is required".into()));
        }
        let records: Vec<&str> = match req.target_kind {
            TargetKind::Cluster => {
                let id: usize = req
                    .target_id
                    .parse()
                    .map_err(|_| TriageError::BadRequest(format!("cluster id `{}` is not a number", req.target_id)))?;
                self.cluster(id)?.members.iter().map(String::as_str).collect()
            }
            TargetKind::Record => {
                if !self.record_index.contains_key(&req.target_id) {
                    return Err(TriageError::NotFound(format!("no record `{}`", req.target_id)));
                }
                vec![req.target_id.as_str()]
            }
        };
        let at = self.clock.now();
        let mut urls = BTreeSet::new();
        for id in records {
            let r = &self.artifacts.dataset.records[self.record_index[id]];
            if let Some(u) = &r.landing_url {
                urls.insert(canonicalize_url(u)?);
            }
        }
        if urls.is_empty() {
            return Err(TriageError::BadRequest("target has no landing URL to judge".into()));
        }
        let entry = JournalEntry {
            seq: self.journal.len(),
            target_kind: req.target_kind,
            target_id: req.target_id,
            status: req.status,
            analyst: req.analyst.clone(),
            at,
            manual: urls
                .into_iter()
                .map(|url| ManualEntry {
                    url,
                    status: req.status.into(),
                    analyst: req.analyst.clone(),
                    at,
                })
                .collect(),
        };
        if let Some(p) = &self.journal_path {
            append_line(p, &entry)?;
        }
        self.journal.push(entry.clone());
        Ok(entry)
    }

    /// Inputs for a recompute, taken under a read lock.
    pub fn snapshot(&self) -> (Arc<Artifacts>, Vec<JournalEntry>) {
        (self.artifacts.clone(), self.journal.clone())
    }

    /// Swap in labels computed from a snapshot of the first `head` journal
    /// entries.
    pub fn install(&mut self, head: usize, labeling: Labeling) -> RecomputeDelta {
        let delta = label_delta(&self.labeling.state, &labeling.state, head);
        self.labeling = labeling;
        self.consumed_head = head;
        self.index_metas();
        delta
    }

    /// Rederive labels from the artifacts and the whole journal.
    pub fn recompute(&mut self) -> RecomputeDelta {
        let (artifacts, journal) = self.snapshot();
        let labeling = Self::derive(&artifacts, &journal);
        self.install(journal.len(), labeling)
    }

    pub fn report(&self) -> SessionReport {
        SessionReport {
            config_hash: self.artifacts.config_hash.clone(),
            journal_head: self.journal.len(),
            consumed_head: self.consumed_head,
            current: LabelCounts::of(&self.labeling.state),
            pipeline: self.artifacts.report.clone(),
        }
    }
}

/// Labels for a journal prefix, computed without a session.
pub fn replay(artifacts: &Artifacts, journal: &[JournalEntry]) -> Labeling {
    TriageSession::derive(artifacts, journal)
}

fn append_line(path: &Path, entry: &JournalEntry) -> Result<()> {
    let io = |e| TriageError::Core(wpnmine::Error::Io { path: path.into(), source: e });
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    let line = serde_json::to_string(entry).expect("journal entry serializes");
    writeln!(f, "{line}").map_err(io)?;
    f.sync_data().map_err(io)
}
