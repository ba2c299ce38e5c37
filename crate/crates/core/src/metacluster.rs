//! Meta-clusters: connected components of the graph linking WPN clusters
//! to the eTLD+1 of their landing pages.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::clustering::WpnCluster;
use crate::labels::{ClusterLabel, LabelState, MetaLabel, RecordLabel, Rule};
use crate::psl::PublicSuffixList;
use crate::verdicts::VerdictSnapshot;

/// Clusters on one side, landing domains on the other. Clusters without
/// any landing domain are left out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BipartiteGraph {
    /// Cluster ids, ascending.
    pub clusters: Vec<usize>,
    /// Landing eTLD+1s, ascending.
    pub domains: Vec<String>,
    /// `(index into clusters, index into domains)`, sorted.
    pub edges: Vec<(usize, usize)>,
}

impl BipartiteGraph {
    pub fn build(clusters: &[WpnCluster]) -> Self {
        let mut with_domains: Vec<&WpnCluster> = clusters.iter().filter(|c| !c.landing_etld1s.is_empty()).collect();
        with_domains.sort_by_key(|c| c.id);
        let domains: Vec<String> = with_domains
            .iter()
            .flat_map(|c| c.landing_etld1s.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: BTreeMap<&str, usize> = domains.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
        let mut edges = Vec::new();
        for (w, c) in with_domains.iter().enumerate() {
            for d in &c.landing_etld1s {
                edges.push((w, index[d.as_str()]));
            }
        }
        edges.sort_unstable();
        BipartiteGraph {
            clusters: with_domains.iter().map(|c| c.id).collect(),
            domains,
            edges,
        }
    }

    pub fn node_count(&self) -> usize {
        self.clusters.len() + self.domains.len()
    }

    /// Node list and edge list for visualisation.
    pub fn export(&self) -> GraphExport {
        let mut nodes: Vec<GraphNode> = self
            .clusters
            .iter()
            .map(|&c| GraphNode {
                id: format!("w{c}"),
                kind: NodeKind::Cluster,
                label: c.to_string(),
            })
            .collect();
        nodes.extend(self.domains.iter().map(|d| GraphNode {
            id: format!("d:{d}"),
            kind: NodeKind::Domain,
            label: d.clone(),
        }));
        let edges = self
            .edges
            .iter()
            .map(|&(w, d)| (format!("w{}", self.clusters[w]), format!("d:{}", self.domains[d])))
            .collect();
        GraphExport { nodes, edges }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Cluster,
    Domain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub kind: NodeKind,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphExport {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaCluster {
    pub id: usize,
    /// Member cluster ids, ascending.
    pub clusters: Vec<usize>,
    pub domains: BTreeSet<String>,
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        match self.rank[a].cmp(&self.rank[b]) {
            std::cmp::Ordering::Less => self.parent[a] = b,
            std::cmp::Ordering::Greater => self.parent[b] = a,
            std::cmp::Ordering::Equal => {
                self.parent[b] = a;
                self.rank[a] += 1;
            }
        }
    }
}

/// Maximal components, numbered by their smallest member cluster id.
pub fn connected_components(graph: &BipartiteGraph) -> Vec<MetaCluster> {
    let nw = graph.clusters.len();
    let mut uf = UnionFind::new(graph.node_count());
    for &(w, d) in &graph.edges {
        uf.union(w, nw + d);
    }
    let mut groups: BTreeMap<usize, (Vec<usize>, BTreeSet<String>)> = BTreeMap::new();
    for w in 0..nw {
        groups.entry(uf.find(w)).or_default().0.push(graph.clusters[w]);
    }
    for (d, name) in graph.domains.iter().enumerate() {
        groups.entry(uf.find(nw + d)).or_default().1.insert(name.clone());
    }
    let mut metas: Vec<(Vec<usize>, BTreeSet<String>)> = groups.into_values().collect();
    for m in &mut metas {
        m.0.sort_unstable();
    }
    metas.sort_by_key(|m| m.0.first().copied().unwrap_or(usize::MAX));
    metas
        .into_iter()
        .enumerate()
        .map(|(id, (clusters, domains))| MetaCluster { id, clusters, domains })
        .collect()
}

fn cluster_index(clusters: &[WpnCluster]) -> BTreeMap<usize, &WpnCluster> {
    clusters.iter().map(|c| (c.id, c)).collect()
}

/// Every record of a component that holds an ad campaign is an ad.
pub fn propagate_ad_label(metas: &[MetaCluster], clusters: &[WpnCluster], state: &mut LabelState) {
    let by_id = cluster_index(clusters);
    for m in metas {
        let campaigns: Vec<String> = m
            .clusters
            .iter()
            .filter(|&&c| state.cluster_has(c, ClusterLabel::AdCampaign))
            .map(|c| c.to_string())
            .collect();
        if campaigns.is_empty() {
            continue;
        }
        state.add_meta(m.id, MetaLabel::AdRelated, Rule::AdRelatedComponent, campaigns.clone());
        for c in &m.clusters {
            for r in &by_id[c].members {
                state.add_record(r, RecordLabel::Ad, Rule::AdRelatedComponent, campaigns.clone());
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuspicionRules {
    /// Landing eTLD+1 count at which a campaign counts as duplicate ads.
    pub duplicate_ads_min_domains: usize,
}

impl Default for SuspicionRules {
    fn default() -> Self {
        SuspicionRules {
            duplicate_ads_min_domains: 2,
        }
    }
}

/// Campaign clusters that land on at least `min_domains` eTLD+1s.
pub fn duplicate_ad_clusters(clusters: &[WpnCluster], state: &LabelState, min_domains: usize) -> BTreeSet<usize> {
    clusters
        .iter()
        .filter(|c| state.cluster_has(c.id, ClusterLabel::AdCampaign) && c.landing_etld1s.len() >= min_domains)
        .map(|c| c.id)
        .collect()
}

/// A component is suspicious when it contains the eTLD+1 of any URL with a
/// malicious verdict, or a campaign with duplicate ads. Records and clusters
/// in it that are not already malicious (or vetoed) become suspicious.
pub fn flag_suspicious(
    metas: &[MetaCluster],
    clusters: &[WpnCluster],
    state: &mut LabelState,
    verdicts: &VerdictSnapshot,
    psl: &PublicSuffixList,
    rules: SuspicionRules,
) {
    let bad_domains: BTreeSet<String> = verdicts
        .malicious_urls()
        .filter_map(|u| url::Url::parse(u).ok())
        .filter_map(|u| u.host_str().and_then(|h| psl.etld_plus_one(h).ok()))
        .collect();
    let duplicate = duplicate_ad_clusters(clusters, state, rules.duplicate_ads_min_domains);
    let by_id = cluster_index(clusters);

    for m in metas {
        let hits: Vec<String> = m.domains.intersection(&bad_domains).cloned().collect();
        let dups: Vec<String> = m
            .clusters
            .iter()
            .filter(|c| duplicate.contains(c))
            .map(|c| c.to_string())
            .collect();
        let (rule, evidence) = if !hits.is_empty() {
            (Rule::SuspiciousDomain, hits)
        } else if !dups.is_empty() {
            (Rule::DuplicateAds, dups)
        } else {
            continue;
        };
        state.add_meta(m.id, MetaLabel::Suspicious, rule, evidence.clone());
        for &c in &m.clusters {
            if !state.cluster_has(c, ClusterLabel::Malicious) {
                state.add_cluster(c, ClusterLabel::Suspicious, rule, evidence.clone());
            }
            for r in &by_id[&c].members {
                if !state.record_has(r, RecordLabel::Malicious) && !state.is_vetoed(r) {
                    state.add_record(r, RecordLabel::Suspicious, rule, evidence.clone());
                }
            }
        }
    }
}
