//! Agglomerative clustering over a condensed distance matrix and
//! silhouette-driven selection of the flat cut.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::{TermSimilarity, Vocabulary};
use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::matrix::{condensed_index, CondensedMatrix};
use crate::model::WpnRecord;
use crate::psl::PublicSuffixList;
use crate::scalar::{Real, Scalar};
use crate::similarity::{distance_matrix_for, DistanceWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Single,
    Complete,
    #[default]
    Average,
}

impl fmt::Display for Linkage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Linkage::Single => "single",
            Linkage::Complete => "complete",
            Linkage::Average => "average",
        })
    }
}

impl FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Linkage::Single),
            "complete" => Ok(Linkage::Complete),
            "average" => Ok(Linkage::Average),
            other => Err(Error::Param(format!("unknown linkage `{other}`"))),
        }
    }
}

impl Linkage {
    /// Lance-Williams update for the distance from `k` to the union of `i`
    /// and `j`.
    fn update<T: Scalar>(self, dki: T, dkj: T, ni: usize, nj: usize) -> T {
        match self {
            Linkage::Single => dki.min_of(dkj),
            Linkage::Complete => dki.max_of(dkj),
            Linkage::Average => {
                let (wi, wj) = (T::from_count(ni), T::from_count(nj));
                (wi * dki + wj * dkj) / (wi + wj)
            }
        }
    }
}

/// One merge step. Leaves are labelled `0..n`; the cluster created at step
/// `s` gets label `n + s`. `left < right`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge<T> {
    pub left: usize,
    pub right: usize,
    pub height: T,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram<T> {
    pub n: usize,
    pub method: Linkage,
    pub merges: Vec<Merge<T>>,
}

/// Build the merge tree. At every step the closest pair of active clusters
/// is merged; ties go to the pair whose smallest members have the lowest
/// indices.
pub fn linkage<T: Scalar>(matrix: &CondensedMatrix<T>, method: Linkage) -> Result<Dendrogram<T>> {
    let n = matrix.n();
    if n < 2 {
        return Err(Error::Contract(format!("linkage needs at least 2 points, got {n}")));
    }
    if matrix.has_unordered() {
        return Err(Error::Param("distance matrix contains NaN".into()));
    }

    // Slot `i` holds the cluster whose smallest member is `i`.
    let mut d = matrix.values().to_vec();
    let at = |i: usize, j: usize| if i < j { condensed_index(n, i, j) } else { condensed_index(n, j, i) };
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut label: Vec<usize> = (0..n).collect();
    // Nearest neighbour of each slot among active slots above it.
    let mut nn = vec![usize::MAX; n];
    let mut nn_dist = vec![T::zero(); n];

    let rescan = |i: usize, d: &[T], active: &[bool], nn: &mut [usize], nn_dist: &mut [T]| {
        nn[i] = usize::MAX;
        for j in (i + 1)..n {
            if active[j] {
                let v = d[condensed_index(n, i, j)];
                if nn[i] == usize::MAX || v < nn_dist[i] {
                    nn[i] = j;
                    nn_dist[i] = v;
                }
            }
        }
    };
    for i in 0..n {
        rescan(i, &d, &active, &mut nn, &mut nn_dist);
    }

    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..(n - 1) {
        let mut i = usize::MAX;
        for s in 0..n {
            if active[s] && nn[s] != usize::MAX && (i == usize::MAX || nn_dist[s] < nn_dist[i]) {
                i = s;
            }
        }
        let j = nn[i];
        let height = nn_dist[i];
        let (a, b) = (label[i].min(label[j]), label[i].max(label[j]));
        merges.push(Merge {
            left: a,
            right: b,
            height,
            size: size[i] + size[j],
        });

        for k in 0..n {
            if active[k] && k != i && k != j {
                let v = method.update(d[at(k, i)], d[at(k, j)], size[i], size[j]);
                d[at(k, i)] = v;
            }
        }
        active[j] = false;
        size[i] += size[j];
        label[i] = n + step;

        rescan(i, &d, &active, &mut nn, &mut nn_dist);
        for k in 0..j {
            if !active[k] || k == i {
                continue;
            }
            if nn[k] == i || nn[k] == j {
                rescan(k, &d, &active, &mut nn, &mut nn_dist);
            } else if k < i {
                let v = d[condensed_index(n, k, i)];
                if v < nn_dist[k] || (v == nn_dist[k] && i < nn[k]) {
                    nn[k] = i;
                    nn_dist[k] = v;
                }
            }
        }
    }
    Ok(Dendrogram { n, method, merges })
}

impl<T: Scalar> Dendrogram<T> {
    pub fn heights(&self) -> impl Iterator<Item = T> + '_ {
        self.merges.iter().map(|m| m.height)
    }

    /// Flat clustering into `k` clusters by applying the first `n - k`
    /// merges. Cluster ids follow the smallest member index.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        let n = self.n;
        if k == 0 || k > n {
            return Err(Error::Param(format!("cannot cut {n} points into {k} clusters")));
        }
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut rep: Vec<usize> = (0..n).collect();
        for m in &self.merges[..n - k] {
            let (a, b) = (find(&mut parent, rep[m.left]), find(&mut parent, rep[m.right]));
            let (lo, hi) = (a.min(b), a.max(b));
            parent[hi] = lo;
            rep.push(lo);
        }
        let mut ids = BTreeMap::new();
        Ok((0..n)
            .map(|i| {
                let root = find(&mut parent, i);
                let next = ids.len();
                *ids.entry(root).or_insert(next)
            })
            .collect())
    }

    /// A cut at `k` is a horizontal cut when it does not split a run of
    /// merges at equal height.
    pub fn is_valid_cut(&self, k: usize) -> bool {
        let n = self.n;
        if k == 0 || k > n {
            return false;
        }
        if k == n || k == 1 {
            return true;
        }
        self.merges[n - k - 1].height < self.merges[n - k].height
    }

    pub fn is_monotone(&self) -> bool {
        self.merges.windows(2).all(|w| w[0].height <= w[1].height)
    }
}

/// Mean silhouette. Points alone in their cluster score 0.
pub fn silhouette<T: Scalar>(matrix: &CondensedMatrix<T>, assignment: &[usize]) -> Result<T> {
    let n = matrix.n();
    if assignment.len() != n {
        return Err(Error::Contract(format!(
            "assignment covers {} of {n} points",
            assignment.len()
        )));
    }
    let c = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; c];
    for &a in assignment {
        sizes[a] += 1;
    }
    let used = sizes.iter().filter(|&&s| s > 0).count();
    if used < 2 {
        return Err(Error::Contract(format!("silhouette needs at least 2 clusters, got {used}")));
    }
    let mut total = T::zero();
    let mut sums = vec![T::zero(); c];
    for i in 0..n {
        let own = assignment[i];
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = T::zero());
        for j in 0..n {
            if j != i {
                sums[assignment[j]] = sums[assignment[j]] + matrix.get(i, j);
            }
        }
        let a = sums[own] / T::from_count(sizes[own] - 1);
        let mut b: Option<T> = None;
        for (cl, &s) in sums.iter().enumerate() {
            if cl != own && sizes[cl] > 0 {
                let mean = s / T::from_count(sizes[cl]);
                b = Some(b.map_or(mean, |b| b.min_of(mean)));
            }
        }
        let b = b.expect("at least two clusters");
        let denom = a.max_of(b);
        if denom > T::zero() {
            total = total + (b - a) / denom;
        }
    }
    Ok(total / T::from_count(n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutSelection<T> {
    pub k: usize,
    pub score: T,
    pub assignment: Vec<usize>,
    /// Every `(k, score)` evaluated, in increasing `k`.
    pub evaluated: Vec<(usize, T)>,
}

/// Evaluate each `k` in `ks` and keep the best mean silhouette; ties go to
/// the smaller `k`.
pub fn select_cut<T: Scalar>(
    dendrogram: &Dendrogram<T>,
    matrix: &CondensedMatrix<T>,
    ks: &[usize],
) -> Result<CutSelection<T>> {
    let n = dendrogram.n;
    if ks.is_empty() {
        return Err(Error::Param("empty k range".into()));
    }
    if let Some(&bad) = ks.iter().find(|&&k| k < 2 || k + 1 > n) {
        return Err(Error::Param(format!("k={bad} outside [2, {}]", n.saturating_sub(1))));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut evaluated: Vec<(usize, T, Vec<usize>)> = ks
        .par_iter()
        .map(|&k| {
            let assignment = dendrogram.cut(k)?;
            Ok((k, silhouette(matrix, &assignment)?, assignment))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (idx, e) in evaluated.iter().enumerate() {
        if e.1 > evaluated[best].1 {
            best = idx;
        }
    }
    let (k, score, assignment) = evaluated.swap_remove(best);
    let mut scores: Vec<(usize, T)> = evaluated.into_iter().map(|(k, s, _)| (k, s)).collect();
    scores.push((k, score));
    scores.sort_by_key(|e| e.0);
    Ok(CutSelection {
        k,
        score,
        assignment,
        evaluated: scores,
    })
}

/// How candidate values of `k` are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutSearch {
    pub k_min: usize,
    /// Defaults to `min(n - 1, ceil(n / 2))`.
    pub k_max: Option<usize>,
    /// Scan every candidate when there are at most this many.
    pub full_scan_limit: usize,
    /// Ratio between consecutive `k` in the coarse scan.
    pub coarse_factor: f64,
}

impl Default for CutSearch {
    fn default() -> Self {
        CutSearch {
            k_min: 2,
            k_max: None,
            full_scan_limit: 512,
            coarse_factor: 1.25,
        }
    }
}

impl CutSearch {
    pub fn range(&self, n: usize) -> Result<(usize, usize)> {
        let hi = self.k_max.unwrap_or(n.div_ceil(2)).min(n.saturating_sub(1));
        let lo = self.k_min.max(2);
        if lo > hi {
            return Err(Error::Param(format!("empty k range [{lo}, {hi}] for {n} points")));
        }
        if !(self.coarse_factor > 1.0) {
            return Err(Error::Param(format!("coarse_factor {} must exceed 1", self.coarse_factor)));
        }
        Ok((lo, hi))
    }
}

/// Candidate `k`s are restricted to horizontal cuts when the range has any;
/// large ranges are scanned on a geometric grid and then refined between
/// the grid neighbours of the best coarse `k`.
pub fn search_cut<T: Scalar>(
    dendrogram: &Dendrogram<T>,
    matrix: &CondensedMatrix<T>,
    search: &CutSearch,
) -> Result<CutSelection<T>> {
    let (lo, hi) = search.range(dendrogram.n)?;
    let mut candidates: Vec<usize> = (lo..=hi).filter(|&k| dendrogram.is_valid_cut(k)).collect();
    if candidates.is_empty() {
        candidates = (lo..=hi).collect();
    }
    if candidates.len() <= search.full_scan_limit {
        return select_cut(dendrogram, matrix, &candidates);
    }

    let mut grid = Vec::new();
    let mut pos = 0.0f64;
    let mut step = 1.0f64;
    while (pos as usize) < candidates.len() {
        grid.push(pos as usize);
        step *= search.coarse_factor;
        pos += step.floor();
    }
    if *grid.last().expect("non-empty") != candidates.len() - 1 {
        grid.push(candidates.len() - 1);
    }
    let coarse_ks: Vec<usize> = grid.iter().map(|&g| candidates[g]).collect();
    let coarse = select_cut(dendrogram, matrix, &coarse_ks)?;
    let at = grid
        .iter()
        .position(|&g| candidates[g] == coarse.k)
        .expect("best k comes from the grid");
    let from = grid[at.saturating_sub(1)];
    let to = grid[(at + 1).min(grid.len() - 1)];
    let fine = select_cut(dendrogram, matrix, &candidates[from..=to])?;

    let mut evaluated: BTreeMap<usize, T> = coarse.evaluated.into_iter().collect();
    evaluated.extend(fine.evaluated.iter().copied());
    Ok(CutSelection {
        evaluated: evaluated.into_iter().collect(),
        ..fine
    })
}

/// A flat cluster of WPN records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WpnCluster {
    pub id: usize,
    /// Record ids, sorted.
    pub members: Vec<String>,
    pub source_etld1s: BTreeSet<String>,
    pub landing_etld1s: BTreeSet<String>,
}

impl WpnCluster {
    pub fn from_members(id: usize, members: &[&WpnRecord], psl: &PublicSuffixList) -> Self {
        let mut ids: Vec<String> = members.iter().map(|r| r.id.clone()).collect();
        ids.sort();
        WpnCluster {
            id,
            members: ids,
            source_etld1s: members.iter().map(|r| r.source_etld1.clone()).collect(),
            landing_etld1s: members.iter().filter_map(|r| r.landing_etld1(psl)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_singleton(&self) -> bool {
        self.members.len() == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub linkage: Linkage,
    pub weights: DistanceWeights,
    pub search: CutSearch,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            linkage: Linkage::Average,
            weights: DistanceWeights::default(),
            search: CutSearch::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterRun<T> {
    pub matrix: CondensedMatrix<T>,
    pub dendrogram: Dendrogram<T>,
    pub selection: CutSelection<T>,
    /// Ordered by smallest member id; `clusters[i].id == i`.
    pub clusters: Vec<WpnCluster>,
}

/// Distance, linkage and cut over the clusterable records. Records are
/// processed in id order, so the result does not depend on input order.
pub fn cluster_wpns<T: Real>(
    dataset: &Dataset,
    vocab: &Vocabulary,
    sim: &TermSimilarity<T>,
    config: &ClusterConfig,
    psl: &PublicSuffixList,
) -> Result<ClusterRun<T>> {
    let records = sorted_clusterable(dataset);
    let matrix = distance_matrix_for(&records, vocab, sim, config.weights)?;
    cluster_matrix(&records, matrix, config, psl)
}

/// Clusterable records in id order, the row order [`cluster_wpns`] uses.
pub fn sorted_clusterable(dataset: &Dataset) -> Vec<&WpnRecord> {
    let mut records: Vec<&WpnRecord> = dataset.clusterable().collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    records
}

/// Linkage and cut over a precomputed matrix whose rows are `records`.
pub fn cluster_matrix<T: Real>(
    records: &[&WpnRecord],
    matrix: CondensedMatrix<T>,
    config: &ClusterConfig,
    psl: &PublicSuffixList,
) -> Result<ClusterRun<T>> {
    if matrix.n() != records.len() {
        return Err(Error::Contract(format!(
            "matrix has {} rows for {} records",
            matrix.n(),
            records.len()
        )));
    }
    let dendrogram = linkage(&matrix, config.linkage)?;
    let selection = if matrix.n() == 2 {
        // No k strictly between 1 and n: keep the pair only if identical.
        let same = matrix.get(0, 1) == T::zero();
        CutSelection {
            k: if same { 1 } else { 2 },
            score: T::zero(),
            assignment: if same { vec![0, 0] } else { vec![0, 1] },
            evaluated: Vec::new(),
        }
    } else {
        search_cut(&dendrogram, &matrix, &config.search)?
    };
    let clusters = group(records, &selection.assignment, psl);
    Ok(ClusterRun {
        matrix,
        dendrogram,
        selection,
        clusters,
    })
}

fn group(records: &[&WpnRecord], assignment: &[usize], psl: &PublicSuffixList) -> Vec<WpnCluster> {
    let mut by_label: BTreeMap<usize, Vec<&WpnRecord>> = BTreeMap::new();
    for (r, &a) in records.iter().zip(assignment) {
        by_label.entry(a).or_default().push(r);
    }
    let mut groups: Vec<Vec<&WpnRecord>> = by_label.into_values().collect();
    groups.sort_by(|a, b| min_id(a).cmp(min_id(b)));
    groups
        .iter()
        .enumerate()
        .map(|(id, g)| WpnCluster::from_members(id, g, psl))
        .collect()
}

fn min_id<'a>(g: &[&'a WpnRecord]) -> &'a str {
    g.iter().map(|r| r.id.as_str()).min().unwrap_or_default()
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("labelings differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len() as u128;
    let pairs = |x: u128| x * x.saturating_sub(1) / 2;
    let mut table: BTreeMap<(usize, usize), u128> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u128> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u128> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: u128 = table.values().map(|&v| pairs(v)).sum();
    let sum_a: u128 = rows.values().map(|&v| pairs(v)).sum();
    let sum_b: u128 = cols.values().map(|&v| pairs(v)).sum();
    let total = pairs(n);
    if total == 0 {
        return Ok(1.0);
    }
    let expected = sum_a as f64 * sum_b as f64 / total as f64;
    let max = (sum_a + sum_b) as f64 / 2.0;
    if max == expected {
        // Both labelings are all-singletons or a single block.
        return Ok(if sum_a == sum_b { 1.0 } else { 0.0 });
    }
    Ok((index as f64 - expected) / (max - expected))
}
