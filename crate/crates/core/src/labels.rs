//! Record and cluster labels with provenance: ad campaigns, known-malicious
//! records from verdicts, and guilt-by-association propagation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::clustering::WpnCluster;
use crate::ingest::Dataset;
use crate::verdicts::{VerdictSnapshot, VerdictSource, VerdictStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordLabel {
    KnownMalicious,
    Malicious,
    Suspicious,
    Ad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterLabel {
    AdCampaign,
    Malicious,
    Suspicious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaLabel {
    AdRelated,
    Suspicious,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum Subject {
    Record(String),
    Cluster(usize),
    Meta(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Landing URL has a malicious verdict.
    Verdict,
    /// Source domain count of the cluster.
    AdCampaign,
    /// Cluster holds a known-malicious member.
    GuiltByAssociation,
    /// Component holds an ad campaign.
    AdRelatedComponent,
    /// Component touches a domain of a malicious URL.
    SuspiciousDomain,
    /// Component holds a campaign landing on several domains.
    DuplicateAds,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    /// Position in the log; orders events without wall-clock time so label
    /// exports stay reproducible.
    pub seq: u64,
    pub subject: Subject,
    pub label: String,
    pub rule: Rule,
    /// What triggered the rule: URLs, seed record ids, domains.
    pub evidence: Vec<String>,
}

/// All labels of one run. Labels are only ever added, and each addition is
/// logged once, so rerunning a rule is a no-op.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelState {
    pub records: BTreeMap<String, BTreeSet<RecordLabel>>,
    pub clusters: BTreeMap<usize, BTreeSet<ClusterLabel>>,
    pub metas: BTreeMap<usize, BTreeSet<MetaLabel>>,
    /// Records whose landing URL an analyst marked benign. They never
    /// receive propagated labels.
    pub vetoed: BTreeSet<String>,
    pub provenance: Vec<ProvenanceEntry>,
}

fn label_name<L: Serialize>(label: L) -> String {
    serde_json::to_value(label)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl LabelState {
    pub fn new() -> Self {
        Self::default()
    }

    fn log(&mut self, subject: Subject, label: String, rule: Rule, evidence: Vec<String>) {
        self.provenance.push(ProvenanceEntry {
            seq: self.provenance.len() as u64,
            subject,
            label,
            rule,
            evidence,
        });
    }

    /// Returns whether the label was new.
    pub fn add_record(&mut self, id: &str, label: RecordLabel, rule: Rule, evidence: Vec<String>) -> bool {
        let added = self.records.entry(id.to_string()).or_default().insert(label);
        if added {
            self.log(Subject::Record(id.to_string()), label_name(label), rule, evidence);
        }
        added
    }

    pub fn add_cluster(&mut self, id: usize, label: ClusterLabel, rule: Rule, evidence: Vec<String>) -> bool {
        let added = self.clusters.entry(id).or_default().insert(label);
        if added {
            self.log(Subject::Cluster(id), label_name(label), rule, evidence);
        }
        added
    }

    pub fn add_meta(&mut self, id: usize, label: MetaLabel, rule: Rule, evidence: Vec<String>) -> bool {
        let added = self.metas.entry(id).or_default().insert(label);
        if added {
            self.log(Subject::Meta(id), label_name(label), rule, evidence);
        }
        added
    }

    pub fn record_has(&self, id: &str, label: RecordLabel) -> bool {
        self.records.get(id).is_some_and(|s| s.contains(&label))
    }

    pub fn cluster_has(&self, id: usize, label: ClusterLabel) -> bool {
        self.clusters.get(&id).is_some_and(|s| s.contains(&label))
    }

    pub fn meta_has(&self, id: usize, label: MetaLabel) -> bool {
        self.metas.get(&id).is_some_and(|s| s.contains(&label))
    }

    pub fn record_labels(&self, id: &str) -> BTreeSet<RecordLabel> {
        self.records.get(id).cloned().unwrap_or_default()
    }

    pub fn count_records(&self, label: RecordLabel) -> usize {
        self.records.values().filter(|s| s.contains(&label)).count()
    }

    pub fn count_clusters(&self, label: ClusterLabel) -> usize {
        self.clusters.values().filter(|s| s.contains(&label)).count()
    }

    pub fn is_vetoed(&self, id: &str) -> bool {
        self.vetoed.contains(id)
    }

    /// Every label must be backed by at least one provenance entry.
    pub fn is_consistent(&self) -> bool {
        let logged: BTreeSet<(Subject, String)> = self
            .provenance
            .iter()
            .map(|p| (p.subject.clone(), p.label.clone()))
            .collect();
        let records = self.records.iter().all(|(id, ls)| {
            ls.iter()
                .all(|&l| logged.contains(&(Subject::Record(id.clone()), label_name(l))))
        });
        let clusters = self.clusters.iter().all(|(&id, ls)| {
            ls.iter()
                .all(|&l| logged.contains(&(Subject::Cluster(id), label_name(l))))
        });
        let known_implies_malicious = self.records.values().all(|ls| {
            !ls.contains(&RecordLabel::KnownMalicious) || ls.contains(&RecordLabel::Malicious)
        });
        records && clusters && known_implies_malicious
    }
}

/// More than one distinct source eTLD+1.
pub fn is_ad_campaign(cluster: &WpnCluster) -> bool {
    cluster.source_etld1s.len() > 1
}

pub fn mark_ad_campaigns(clusters: &[WpnCluster], state: &mut LabelState) {
    for c in clusters.iter().filter(|c| is_ad_campaign(c)) {
        state.add_cluster(
            c.id,
            ClusterLabel::AdCampaign,
            Rule::AdCampaign,
            c.source_etld1s.iter().cloned().collect(),
        );
    }
}

/// Known-malicious records: the exact landing URL has a malicious verdict.
/// Verdicts on other URLs of the same domain are not applied. Records whose
/// landing URL carries a manual benign verdict are vetoed.
pub fn mark_known_malicious(dataset: &Dataset, verdicts: &VerdictSnapshot) -> LabelState {
    let mut state = LabelState::new();
    for r in &dataset.records {
        let Some(url) = r.landing_url.as_deref() else {
            continue;
        };
        let Some(v) = verdicts.get(url) else {
            continue;
        };
        match v.status {
            VerdictStatus::Malicious => {
                let evidence = vec![v.url.clone()];
                state.add_record(&r.id, RecordLabel::KnownMalicious, Rule::Verdict, evidence.clone());
                state.add_record(&r.id, RecordLabel::Malicious, Rule::Verdict, evidence);
            }
            VerdictStatus::Benign if v.source == VerdictSource::Manual => {
                state.vetoed.insert(r.id.clone());
            }
            _ => {}
        }
    }
    state
}

/// A cluster with a known-malicious member is malicious, and so are all of
/// its members that are not vetoed.
pub fn propagate_malicious(clusters: &[WpnCluster], state: &mut LabelState) {
    for c in clusters {
        let seeds: Vec<String> = c
            .members
            .iter()
            .filter(|m| state.record_has(m, RecordLabel::KnownMalicious))
            .cloned()
            .collect();
        if seeds.is_empty() {
            continue;
        }
        state.add_cluster(c.id, ClusterLabel::Malicious, Rule::GuiltByAssociation, seeds.clone());
        for m in &c.members {
            if !state.is_vetoed(m) {
                state.add_record(m, RecordLabel::Malicious, Rule::GuiltByAssociation, seeds.clone());
            }
        }
    }
}
