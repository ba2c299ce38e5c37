//! Stage orchestration, persisted artifacts and the run report.
//!
//! Every stage writes its output under the run directory. JSON artifacts
//! carry the config hash; `manifest.json` lists every file with its sha256
//! and the same hash. Wall-clock timings go to `timings.json` so that
//! `report.json` is byte-identical across reruns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::time::{Duration as StdDuration, Instant};

use chrono::Duration;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{cluster_matrix, sorted_clusterable, ClusterRun, Dendrogram, WpnCluster};
use crate::config::Config;
use crate::embeddings::{corpus_documents, term_similarity, train_skipgram, Vocabulary};
use crate::error::{Error, Result};
use crate::filterlist::{audit_dataset, AuditReport, FilterList};
use crate::ingest::{dedup, load_dataset, Dataset};
use crate::labels::{
    mark_ad_campaigns, mark_known_malicious, propagate_malicious, ClusterLabel, LabelState, MetaLabel, RecordLabel,
};
use crate::metacluster::{connected_components, flag_suspicious, propagate_ad_label, BipartiteGraph, GraphExport, MetaCluster, SuspicionRules};
use crate::model::Platform;
use crate::psl::PublicSuffixList;
use crate::similarity::distance_matrix_for;
use crate::verdicts::{
    LocalList, ManualBlacklist, RemoteScanner, StubScanner, SystemClock, VerdictCache, VerdictProvider, VerdictSnapshot,
};
use crate::{DistanceMatrix, Embeddings, TermSimilarityMatrix};

pub const API_VERSION: &str = "v1";

pub const STAGES: [&str; 8] = ["ingest", "dedup", "embed", "distance", "cluster", "label", "meta", "report"];

/// Dollar amount in whole cents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cents(pub u64);

impl std::fmt::Display for Cents {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

fn cpm_micros(cpm: f64) -> Result<u64> {
    if !(cpm >= 0.0 && cpm.is_finite()) {
        return Err(Error::Param(format!("cpm {cpm} must be a non-negative amount")));
    }
    Ok((cpm * 1e6).round() as u64)
}

/// Cost of `clicks` at `cpm` dollars per thousand, truncated to cents. The
/// CPM is taken to the nearest micro-dollar and the rest is integer math.
pub fn estimate_click_cost(clicks: i64, cpm: f64) -> Result<Cents> {
    if clicks < 0 {
        return Err(Error::Param(format!("click count {clicks} is negative")));
    }
    let micros = clicks as u128 * cpm_micros(cpm)? as u128 / 1000;
    Ok(Cents((micros / 10_000) as u64))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSummary {
    pub cpm_micros: u64,
    pub landing_domains: usize,
    pub total_clicks: u64,
    pub max_clicks: u64,
    pub max_clicks_domain: Option<String>,
    pub max_cost: Option<Cents>,
    /// Cost of the mean click count per landing domain.
    pub mean_cost: Option<Cents>,
}

/// Clicked notifications grouped by landing eTLD+1.
pub fn click_costs(dataset: &Dataset, cpm: f64, psl: &PublicSuffixList) -> Result<CostSummary> {
    let mut clicks: BTreeMap<String, u64> = BTreeMap::new();
    for r in dataset.records.iter().filter(|r| r.clicked) {
        if let Some(d) = r.landing_etld1(psl) {
            *clicks.entry(d).or_insert(0) += 1;
        }
    }
    let micros = cpm_micros(cpm)?;
    let total: u64 = clicks.values().sum();
    let top = clicks.iter().max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)));
    let domains = clicks.len() as u128;
    Ok(CostSummary {
        cpm_micros: micros,
        landing_domains: clicks.len(),
        total_clicks: total,
        max_clicks: top.map_or(0, |t| *t.1),
        max_clicks_domain: top.map(|t| t.0.clone()),
        max_cost: top.map(|t| estimate_click_cost(*t.1 as i64, cpm)).transpose()?,
        mean_cost: (domains > 0).then(|| Cents((total as u128 * micros as u128 / 1000 / domains / 10_000) as u64)),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatformRow {
    pub platform: String,
    pub total_wpns: usize,
    pub wpns_with_landing: usize,
}

/// The campaign measurement table: per-platform volume plus campaign and
/// malicious totals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementTable {
    pub rows: Vec<PlatformRow>,
    pub total_wpns: usize,
    pub wpns_with_landing: usize,
    pub ad_campaigns: usize,
    /// Records labeled `ad`, which includes records reached through
    /// meta-clusters.
    pub wpn_ads: usize,
    pub malicious_ad_campaigns: usize,
    /// Records labeled both `ad` and `malicious`.
    pub malicious_wpn_ads: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub total_wpns: usize,
    pub duplicates_removed: usize,
    pub clusterable: usize,
    pub vocabulary: usize,
    pub similarity_pairs: usize,
    pub clusters: usize,
    pub singletons: usize,
    pub ad_campaigns: usize,
    /// Records inside ad-campaign clusters.
    pub campaign_messages: usize,
    pub wpn_ads: usize,
    pub known_malicious: usize,
    pub malicious: usize,
    pub malicious_clusters: usize,
    pub suspicious: usize,
    pub suspicious_clusters: usize,
    pub meta_clusters: usize,
    pub ad_related_meta_clusters: usize,
    pub suspicious_meta_clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutSummary {
    pub k: usize,
    pub silhouette: f64,
    pub cuts_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub api_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<String>,
    pub counts: StageCounts,
    pub table: MeasurementTable,
    pub cut: CutSummary,
    pub costs: CostSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_audit: Option<AuditReport>,
}

impl PipelineReport {
    /// Internal consistency of the counts; returns the violated relations.
    pub fn violations(&self) -> Vec<String> {
        let c = &self.counts;
        let mut out = Vec::new();
        let mut need = |ok: bool, what: &str| {
            if !ok {
                out.push(what.to_string());
            }
        };
        need(c.ad_campaigns <= c.clusters, "ad_campaigns <= clusters");
        need(c.singletons <= c.clusters, "singletons <= clusters");
        need(c.known_malicious <= c.malicious, "known_malicious <= malicious");
        need(c.malicious <= c.clusterable, "malicious <= clusterable");
        need(c.clusterable <= c.total_wpns, "clusterable <= total_wpns");
        need(c.suspicious + c.malicious <= c.total_wpns, "suspicious and malicious disjoint");
        need(c.ad_related_meta_clusters <= c.meta_clusters, "ad_related_meta_clusters <= meta_clusters");
        out
    }

    pub fn to_table(&self) -> String {
        let c = &self.counts;
        let t = &self.table;
        let mut out = String::new();
        let _ = writeln!(out, "config {}  seed {}", &self.config_hash[..12.min(self.config_hash.len())], self.seed);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<10} {:>10} {:>14}", "platform", "total", "with landing");
        for r in &t.rows {
            let _ = writeln!(out, "{:<10} {:>10} {:>14}", r.platform, r.total_wpns, r.wpns_with_landing);
        }
        let _ = writeln!(out, "{:<10} {:>10} {:>14}", "total", t.total_wpns, t.wpns_with_landing);
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:>12} {:>10} {:>14} {:>14}",
            "campaigns", "ads", "mal campaigns", "malicious ads"
        );
        let _ = writeln!(
            out,
            "{:>12} {:>10} {:>14} {:>14}",
            t.ad_campaigns, t.wpn_ads, t.malicious_ad_campaigns, t.malicious_wpn_ads
        );
        let _ = writeln!(out);
        let rows: [(&str, usize); 12] = [
            ("duplicates removed", c.duplicates_removed),
            ("vocabulary", c.vocabulary),
            ("similar term pairs", c.similarity_pairs),
            ("clusters", c.clusters),
            ("singletons", c.singletons),
            ("campaign messages", c.campaign_messages),
            ("known malicious", c.known_malicious),
            ("malicious", c.malicious),
            ("suspicious", c.suspicious),
            ("meta-clusters", c.meta_clusters),
            ("ad-related meta", c.ad_related_meta_clusters),
            ("suspicious meta", c.suspicious_meta_clusters),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<20} {v:>8}");
        }
        let _ = writeln!(out, "{:<20} {:>8} (silhouette {:.4})", "selected k", self.cut.k, self.cut.silhouette);
        if let (Some(max), Some(mean)) = (self.costs.max_cost, self.costs.mean_cost) {
            let _ = writeln!(
                out,
                "click cost per landing domain: max ${max} ({} clicks), mean ${mean}",
                self.costs.max_clicks
            );
        }
        if let Some(a) = &self.filter_audit {
            let _ = writeln!(out);
            out.push_str(&a.to_table());
        }
        out
    }
}

/// Envelope for JSON artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub api_version: String,
    pub config_hash: String,
    pub data: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringArtifact {
    pub ids: Vec<String>,
    pub k: usize,
    pub silhouette: f64,
    pub evaluated: Vec<(usize, f64)>,
    pub assignment: Vec<usize>,
    pub dendrogram: Dendrogram<f64>,
    pub clusters: Vec<WpnCluster>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaArtifact {
    pub graph: GraphExport,
    pub metaclusters: Vec<MetaCluster>,
}

/// File names inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.txt")
    }
    pub fn term_similarity(&self) -> PathBuf {
        self.root.join("term_similarity.txt")
    }
    pub fn distances(&self) -> PathBuf {
        self.root.join("distances.bin")
    }
    pub fn clustering(&self) -> PathBuf {
        self.root.join("clusters.json")
    }
    pub fn verdicts(&self) -> PathBuf {
        self.root.join("verdicts.json")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.json")
    }
    pub fn meta(&self) -> PathBuf {
        self.root.join("metaclusters.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_table(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, config_hash: &str, data: &T) -> Result<()> {
    let envelope = Artifact {
        api_version: API_VERSION.to_string(),
        config_hash: config_hash.to_string(),
        data,
    };
    let text = serde_json::to_string_pretty(&envelope).map_err(|e| Error::artifact("json artifact", e))?;
    write_file(path, (text + "\n").as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Artifact<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::artifact("json artifact", format!("{}: {e}", path.display())))
}

pub fn load_psl(config: &Config) -> Result<PublicSuffixList> {
    match &config.psl {
        Some(p) => PublicSuffixList::from_file(p),
        None => Ok(PublicSuffixList::bundled().clone()),
    }
}

/// Read every configured input file.
pub fn load_inputs(config: &Config, psl: &PublicSuffixList) -> Result<Dataset> {
    if config.inputs.is_empty() {
        return Err(Error::Param("no input dataset configured".into()));
    }
    load_dataset(&config.inputs, psl)
}

/// Drop duplicates and sort by id. Returns the number removed.
pub fn dedup_dataset(dataset: Dataset) -> (Dataset, usize) {
    let (mut records, removed) = dedup(dataset.records);
    records.sort_by(|a, b| a.id.cmp(&b.id));
    (
        Dataset {
            records,
            provenance: dataset.provenance,
        },
        removed,
    )
}

pub struct Embedded {
    pub vocab: Vocabulary,
    pub embeddings: Embeddings,
    pub similarity: TermSimilarityMatrix,
}

pub fn embed(dataset: &Dataset, config: &Config) -> Result<Embedded> {
    let docs = corpus_documents(dataset);
    let vocab = Vocabulary::build(&docs, config.min_count)?;
    let embeddings: Embeddings = train_skipgram(&docs, &vocab, config.skipgram())?;
    let similarity = term_similarity(&embeddings, config.similarity_threshold, config.similarity_top_k);
    Ok(Embedded {
        vocab,
        embeddings,
        similarity,
    })
}

/// Providers named in the config, in priority order.
pub fn verdict_providers(config: &Config) -> Result<Vec<Box<dyn VerdictProvider>>> {
    let mut out: Vec<Box<dyn VerdictProvider>> = Vec::new();
    if let Some(p) = &config.manual_blacklist {
        out.push(Box::new(ManualBlacklist::load(p)?));
    }
    if let Some(p) = &config.local_list {
        out.push(Box::new(LocalList::from_file(p)?));
    }
    if let Some(dir) = &config.scanner_stub_dir {
        out.push(Box::new(StubScanner::new(dir, config.scanner_threshold)));
    } else if let Some(endpoint) = &config.scanner_endpoint {
        out.push(Box::new(RemoteScanner::new(
            endpoint,
            config.scanner_rate_per_minute,
            StdDuration::from_secs(config.scanner_timeout_secs),
            config.scanner_threshold,
        )));
    }
    Ok(out)
}

/// Verdicts for every landing URL: the configured snapshot if any,
/// otherwise a fresh query of the configured providers. No providers means
/// every URL stays unknown.
pub fn gather_verdicts(dataset: &Dataset, config: &Config) -> Result<VerdictSnapshot> {
    if let Some(p) = &config.verdicts {
        return VerdictSnapshot::load(p);
    }
    let providers = verdict_providers(config)?;
    if providers.is_empty() {
        return Ok(VerdictSnapshot::default());
    }
    let refs: Vec<&dyn VerdictProvider> = providers.iter().map(|b| b.as_ref()).collect();
    let cache = VerdictCache::new(Duration::days(config.verdict_ttl_days));
    let urls: std::collections::BTreeSet<&str> = dataset.records.iter().filter_map(|r| r.landing_url.as_deref()).collect();
    VerdictSnapshot::collect(urls, &refs, &cache, &SystemClock)
}

/// Everything derived from a clustering and a verdict snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeling {
    pub state: LabelState,
    pub graph: BipartiteGraph,
    pub metas: Vec<MetaCluster>,
}

/// Cluster-level labels: known-malicious seeds, campaigns and
/// guilt by association.
pub fn label_clusters(dataset: &Dataset, clusters: &[WpnCluster], verdicts: &VerdictSnapshot) -> LabelState {
    let mut state = mark_known_malicious(dataset, verdicts);
    mark_ad_campaigns(clusters, &mut state);
    propagate_malicious(clusters, &mut state);
    state
}

/// Meta-cluster labels on top of [`label_clusters`].
pub fn label_metaclusters(
    clusters: &[WpnCluster],
    state: &mut LabelState,
    verdicts: &VerdictSnapshot,
    psl: &PublicSuffixList,
    rules: SuspicionRules,
) -> (BipartiteGraph, Vec<MetaCluster>) {
    let graph = BipartiteGraph::build(clusters);
    let metas = connected_components(&graph);
    propagate_ad_label(&metas, clusters, state);
    flag_suspicious(&metas, clusters, state, verdicts, psl, rules);
    (graph, metas)
}

/// Labels as a pure function of the dataset, clusters and verdicts.
pub fn compute_labels(
    dataset: &Dataset,
    clusters: &[WpnCluster],
    verdicts: &VerdictSnapshot,
    psl: &PublicSuffixList,
    rules: SuspicionRules,
) -> Labeling {
    let mut state = label_clusters(dataset, clusters, verdicts);
    let (graph, metas) = label_metaclusters(clusters, &mut state, verdicts, psl, rules);
    Labeling { state, graph, metas }
}

pub fn measurement_table(dataset: &Dataset, clusters: &[WpnCluster], state: &LabelState) -> MeasurementTable {
    let rows = [Platform::Desktop, Platform::Mobile]
        .into_iter()
        .map(|p| PlatformRow {
            platform: p.to_string(),
            total_wpns: dataset.records.iter().filter(|r| r.platform == p).count(),
            wpns_with_landing: dataset.clusterable().filter(|r| r.platform == p).count(),
        })
        .collect();
    let campaign = |c: &&WpnCluster| state.cluster_has(c.id, ClusterLabel::AdCampaign);
    MeasurementTable {
        rows,
        total_wpns: dataset.len(),
        wpns_with_landing: dataset.clusterable_count(),
        ad_campaigns: clusters.iter().filter(campaign).count(),
        wpn_ads: state.count_records(RecordLabel::Ad),
        malicious_ad_campaigns: clusters
            .iter()
            .filter(campaign)
            .filter(|c| state.cluster_has(c.id, ClusterLabel::Malicious))
            .count(),
        malicious_wpn_ads: state
            .records
            .values()
            .filter(|l| l.contains(&RecordLabel::Ad) && l.contains(&RecordLabel::Malicious))
            .count(),
    }
}

pub struct ReportInputs<'a> {
    pub config: &'a Config,
    pub dataset: &'a Dataset,
    pub duplicates_removed: usize,
    pub vocabulary: usize,
    pub similarity_pairs: usize,
    pub run: &'a ClusterRun<f64>,
    pub labeling: &'a Labeling,
    pub filter_audit: Option<AuditReport>,
    pub psl: &'a PublicSuffixList,
}

pub fn build_report(x: ReportInputs<'_>) -> Result<PipelineReport> {
    let state = &x.labeling.state;
    let clusters = &x.run.clusters;
    let table = measurement_table(x.dataset, clusters, state);
    let count_meta = |l: MetaLabel| state.metas.values().filter(|s| s.contains(&l)).count();
    let counts = StageCounts {
        total_wpns: x.dataset.len(),
        duplicates_removed: x.duplicates_removed,
        clusterable: x.dataset.clusterable_count(),
        vocabulary: x.vocabulary,
        similarity_pairs: x.similarity_pairs,
        clusters: clusters.len(),
        singletons: clusters.iter().filter(|c| c.is_singleton()).count(),
        ad_campaigns: table.ad_campaigns,
        campaign_messages: clusters
            .iter()
            .filter(|c| state.cluster_has(c.id, ClusterLabel::AdCampaign))
            .map(|c| c.len())
            .sum(),
        wpn_ads: table.wpn_ads,
        known_malicious: state.count_records(RecordLabel::KnownMalicious),
        malicious: state.count_records(RecordLabel::Malicious),
        malicious_clusters: state.count_clusters(ClusterLabel::Malicious),
        suspicious: state.count_records(RecordLabel::Suspicious),
        suspicious_clusters: state.count_clusters(ClusterLabel::Suspicious),
        meta_clusters: x.labeling.metas.len(),
        ad_related_meta_clusters: count_meta(MetaLabel::AdRelated),
        suspicious_meta_clusters: count_meta(MetaLabel::Suspicious),
    };
    Ok(PipelineReport {
        api_version: API_VERSION.to_string(),
        config_hash: x.config.hash(),
        seed: x.config.seed,
        stages: STAGES.iter().map(|s| s.to_string()).collect(),
        counts,
        table,
        cut: CutSummary {
            k: x.run.selection.k,
            silhouette: x.run.selection.score,
            cuts_evaluated: x.run.selection.evaluated.len(),
        },
        costs: click_costs(x.dataset, x.config.cpm, x.psl)?,
        filter_audit: x.filter_audit,
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
    pub total_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub api_version: String,
    pub config_hash: String,
    pub artifacts: Vec<ManifestEntry>,
}

/// Everything a full run produced, kept in memory for callers that go on
/// to serve or inspect it.
pub struct PipelineOutput {
    pub report: PipelineReport,
    pub dataset: Dataset,
    pub run: ClusterRun<f64>,
    pub verdicts: VerdictSnapshot,
    pub labeling: Labeling,
    pub timings: Timings,
}

struct Stopwatch {
    start: Instant,
    last: Instant,
    timings: Timings,
}

impl Stopwatch {
    fn new() -> Self {
        let now = Instant::now();
        Stopwatch {
            start: now,
            last: now,
            timings: Timings::default(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.stages.push((stage.to_string(), (now - self.last).as_secs_f64()));
        self.last = now;
    }

    fn finish(mut self) -> Timings {
        self.timings.total_secs = self.start.elapsed().as_secs_f64();
        self.timings
    }
}

/// Run every stage and persist its artifacts under `config.out_dir`. A
/// failing stage aborts the run, and no report is written.
pub fn run_pipeline(config: &Config) -> Result<PipelineOutput> {
    config.validate()?;
    let dir = RunDir::new(&config.out_dir);
    std::fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
    let hash = config.hash();
    let psl = load_psl(config).map_err(|e| e.in_stage("ingest"))?;
    let mut clock = Stopwatch::new();

    let loaded = load_inputs(config, &psl).map_err(|e| e.in_stage("ingest"))?;
    clock.lap("ingest");

    let (dataset, removed) = dedup_dataset(loaded);
    if dataset.clusterable_count() < 2 {
        return Err(Error::Contract(format!(
            "{} records with a landing page; clustering needs at least 2",
            dataset.clusterable_count()
        ))
        .in_stage("dedup"));
    }
    write_file(&dir.config(), config.to_text().as_bytes()).map_err(|e| e.in_stage("dedup"))?;
    dataset.write_jsonl(&dir.dataset()).map_err(|e| e.in_stage("dedup"))?;
    clock.lap("dedup");

    let embedded = embed(&dataset, config).map_err(|e| e.in_stage("embed"))?;
    write_file(&dir.embeddings(), embedded.embeddings.to_text().as_bytes()).map_err(|e| e.in_stage("embed"))?;
    write_file(&dir.term_similarity(), embedded.similarity.to_text().as_bytes()).map_err(|e| e.in_stage("embed"))?;
    clock.lap("embed");

    let records = sorted_clusterable(&dataset);
    let matrix: DistanceMatrix = distance_matrix_for(&records, &embedded.vocab, &embedded.similarity, config.cluster.weights)
        .map_err(|e| e.in_stage("distance"))?;
    matrix.save(&dir.distances()).map_err(|e| e.in_stage("distance"))?;
    clock.lap("distance");

    let run = cluster_matrix(&records, matrix, &config.cluster, &psl).map_err(|e| e.in_stage("cluster"))?;
    write_json(&dir.clustering(), &hash, &clustering_artifact(&run)).map_err(|e| e.in_stage("cluster"))?;
    clock.lap("cluster");

    let verdicts = gather_verdicts(&dataset, config).map_err(|e| e.in_stage("label"))?;
    write_json(&dir.verdicts(), &hash, &verdicts).map_err(|e| e.in_stage("label"))?;
    let mut state = label_clusters(&dataset, &run.clusters, &verdicts);
    clock.lap("label");

    let (graph, metas) = label_metaclusters(&run.clusters, &mut state, &verdicts, &psl, config.suspicion);
    let labeling = Labeling { state, graph, metas };
    write_json(&dir.labels(), &hash, &labeling.state).map_err(|e| e.in_stage("meta"))?;
    write_json(
        &dir.meta(),
        &hash,
        &MetaArtifact {
            graph: labeling.graph.export(),
            metaclusters: labeling.metas.clone(),
        },
    )
    .map_err(|e| e.in_stage("meta"))?;
    clock.lap("meta");

    let filter_audit = match &config.easylist {
        Some(p) => {
            let text = read_filter_list(p).map_err(|e| e.in_stage("report"))?;
            Some(audit_dataset(&dataset, &FilterList::parse(&text)))
        }
        None => None,
    };
    let report = build_report(ReportInputs {
        config,
        dataset: &dataset,
        duplicates_removed: removed,
        vocabulary: embedded.vocab.len(),
        similarity_pairs: embedded.similarity.nnz() / 2,
        run: &run,
        labeling: &labeling,
        filter_audit,
        psl: &psl,
    })
    .map_err(|e| e.in_stage("report"))?;
    let violations = report.violations();
    if !violations.is_empty() || !labeling.state.is_consistent() {
        return Err(Error::Contract(format!("report invariants violated: {violations:?}")).in_stage("report"));
    }
    write_json(&dir.report(), &hash, &report).map_err(|e| e.in_stage("report"))?;
    write_file(&dir.report_table(), report.to_table().as_bytes()).map_err(|e| e.in_stage("report"))?;
    clock.lap("report");

    let timings = clock.finish();
    let text = serde_json::to_string_pretty(&timings).expect("timings serialize");
    write_file(&dir.timings(), (text + "\n").as_bytes())?;
    write_manifest(&dir, &hash)?;

    Ok(PipelineOutput {
        report,
        dataset,
        run,
        verdicts,
        labeling,
        timings,
    })
}

pub fn clustering_artifact(run: &ClusterRun<f64>) -> ClusteringArtifact {
    ClusteringArtifact {
        ids: run.matrix.ids().to_vec(),
        k: run.selection.k,
        silhouette: run.selection.score,
        evaluated: run.selection.evaluated.clone(),
        assignment: run.selection.assignment.clone(),
        dendrogram: run.dendrogram.clone(),
        clusters: run.clusters.clone(),
    }
}

/// Plain or gzip-compressed filter list text.
pub fn read_filter_list(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        out
    } else {
        bytes
    };
    String::from_utf8(bytes).map_err(|e| Error::artifact("filter list", e))
}

fn write_manifest(dir: &RunDir, hash: &str) -> Result<()> {
    let files = [
        dir.config(),
        dir.dataset(),
        dir.embeddings(),
        dir.term_similarity(),
        dir.distances(),
        dir.clustering(),
        dir.verdicts(),
        dir.labels(),
        dir.meta(),
        dir.report(),
        dir.report_table(),
    ];
    let mut artifacts = Vec::new();
    for f in files {
        let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
        artifacts.push(ManifestEntry {
            file: f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = Manifest {
        api_version: API_VERSION.to_string(),
        config_hash: hash.to_string(),
        artifacts,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.manifest(), (text + "\n").as_bytes())
}

/// Artifacts of a finished run, as loaded by the triage service and the
/// stage-wise CLI commands.
pub struct LoadedRun {
    pub config_hash: String,
    pub dataset: Dataset,
    pub clustering: ClusteringArtifact,
    pub verdicts: VerdictSnapshot,
    pub report: Option<PipelineReport>,
}

pub fn load_run(dir: &Path, psl: &PublicSuffixList) -> Result<LoadedRun> {
    let d = RunDir::new(dir);
    let dataset = load_dataset(&[d.dataset()], psl)?;
    let clustering: Artifact<ClusteringArtifact> = read_json(&d.clustering())?;
    let verdicts: Artifact<VerdictSnapshot> = read_json(&d.verdicts())?;
    let report = if d.report().exists() {
        Some(read_json::<PipelineReport>(&d.report())?.data)
    } else {
        None
    };
    Ok(LoadedRun {
        config_hash: clustering.config_hash,
        dataset,
        clustering: clustering.data,
        verdicts: verdicts.data,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, CampaignPlan};

    #[test]
    fn click_cost_truncates_to_cents() {
        assert_eq!(estimate_click_cost(444, 2.54).unwrap(), Cents(112));
        assert_eq!(estimate_click_cost(18, 2.54).unwrap(), Cents(4));
        assert_eq!(estimate_click_cost(0, 2.54).unwrap(), Cents(0));
        assert_eq!(estimate_click_cost(444, 2.54).unwrap().to_string(), "1.12");
        assert_eq!(estimate_click_cost(1000, 2.54).unwrap(), Cents(254));
        assert!(estimate_click_cost(-1, 2.54).is_err());
        assert!(estimate_click_cost(1, -0.5).is_err());
    }

    fn synthetic_config(dir: &Path, seed: u64) -> Config {
        let corpus = generate_synthetic(&CampaignPlan::reference(1, 1, seed)).unwrap();
        std::fs::create_dir_all(dir).unwrap();
        let input = dir.join("input.jsonl");
        corpus.dataset.write_jsonl(&input).unwrap();
        Config {
            inputs: vec![input],
            out_dir: dir.join("run"),
            seed,
            ..Config::default()
        }
    }

    #[test]
    fn pipeline_finds_the_planted_campaigns() {
        let tmp = tempfile::tempdir().unwrap();
        let config = synthetic_config(tmp.path(), 3);
        let out = run_pipeline(&config).unwrap();
        let c = &out.report.counts;
        assert_eq!(c.ad_campaigns, 2, "{}", out.report.to_table());
        assert!(out.report.violations().is_empty());
        let dir = RunDir::new(&config.out_dir);
        for f in [dir.report(), dir.labels(), dir.meta(), dir.clustering(), dir.manifest(), dir.distances()] {
            assert!(f.exists(), "{} missing", f.display());
        }
        let loaded = load_run(&config.out_dir, PublicSuffixList::bundled()).unwrap();
        assert_eq!(loaded.clustering.clusters, out.run.clusters);
        assert_eq!(loaded.report.unwrap(), out.report);
    }

    #[test]
    fn missing_input_is_a_stage_error() {
        let err = run_pipeline(&Config::default()).err().unwrap();
        assert!(matches!(err, Error::Stage { stage: "ingest", .. }), "{err}");
    }

    #[test]
    fn too_few_landing_pages_is_a_stage_error() {
        let tmp = tempfile::tempdir().unwrap();
        let input = tmp.path().join("in.jsonl");
        std::fs::write(&input, "").unwrap();
        let config = Config {
            inputs: vec![input],
            out_dir: tmp.path().join("run"),
            ..Config::default()
        };
        let err = run_pipeline(&config).err().unwrap();
        assert!(matches!(err, Error::Stage { stage: "dedup", .. }), "{err}");
        assert!(!RunDir::new(&config.out_dir).report().exists());
    }
}
