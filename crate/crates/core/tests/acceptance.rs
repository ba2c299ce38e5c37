//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wpnmine::clustering::{linkage, silhouette, Linkage, WpnCluster};
use wpnmine::config::Config;
use wpnmine::embeddings::{term_similarity, EmbeddingTable, SkipGramParams, TermSimilarity, Vocabulary};
use wpnmine::filterlist::{audit_dataset, Decision, FilterList};
use wpnmine::ingest::Dataset;
use wpnmine::labels::{mark_ad_campaigns, propagate_malicious, ClusterLabel, LabelState, RecordLabel};
use wpnmine::matrix::CondensedMatrix;
use wpnmine::metacluster::{connected_components, duplicate_ad_clusters, flag_suspicious, BipartiteGraph, SuspicionRules};
use wpnmine::pipeline::{compute_labels, estimate_click_cost, read_filter_list, run_pipeline, Cents, RunDir};
use wpnmine::psl::PublicSuffixList;
use wpnmine::similarity::{combined_distance, jaccard_distance, soft_cosine, text_distance, url_path_distance, DistanceWeights};
use wpnmine::synth::{generate_synthetic, CampaignPlan, SyntheticCorpus};
use wpnmine::verdicts::{
    canonicalize_url, rescan, ManualClock, ScanResponse, StubScanner, Verdict, VerdictProvider, VerdictSnapshot,
    VerdictSource, VerdictStatus,
};
use wpnmine::{BagOfWords, Exact};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const RECOVERY_SEEDS: u64 = 20;
const RECOVERY_BUDGET: Duration = Duration::from_secs(60);

/// One finished pipeline run over a synthetic corpus.
struct Run {
    seed: u64,
    dataset: Dataset,
    clusters: Vec<WpnCluster>,
}

fn psl() -> &'static PublicSuffixList {
    PublicSuffixList::bundled()
}

fn t0() -> chrono::DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 3, 1, 0, 0, 0).unwrap()
}

fn synthetic_config(dir: &Path, corpus: &SyntheticCorpus, seed: u64, out: &str) -> Config {
    std::fs::create_dir_all(dir).unwrap();
    let input = dir.join("input.jsonl");
    if !input.exists() {
        corpus.dataset.write_jsonl(&input).unwrap();
    }
    Config {
        inputs: vec![input],
        out_dir: dir.join(out),
        seed,
        ..Config::default()
    }
}

fn scale_for(seed: u64) -> usize {
    2 + (seed as usize % 4)
}

// ---------------------------------------------------------------- cost

fn cost_model() -> Outcome {
    let start = Instant::now();
    let a = estimate_click_cost(444, 2.54).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let b = estimate_click_cost(18, 2.54).map_err(|e| e.to_string())?;
    ensure!(a == Cents(112) && a.to_string() == "1.12", "444 clicks gave {a}");
    ensure!(b == Cents(4) && b.to_string() == "0.04", "18 clicks gave {b}");
    ensure!(elapsed < Duration::from_millis(1), "took {elapsed:?}");
    Ok(format!("444 -> ${a}, 18 -> ${b}, {elapsed:?}"))
}

// ---------------------------------------------------------------- similarity

fn random_bag(rng: &mut ChaCha8Rng, words: &[String]) -> BagOfWords {
    let mut bag = BagOfWords::new();
    for _ in 0..rng.random_range(1..12) {
        bag.add(words[rng.random_range(0..words.len())].clone());
    }
    bag
}

fn classical_cosine(a: &BagOfWords, b: &BagOfWords) -> f64 {
    let x: HashMap<&str, f64> = a.iter().map(|(t, c)| (t, c as f64)).collect();
    let y: HashMap<&str, f64> = b.iter().map(|(t, c)| (t, c as f64)).collect();
    let dot: f64 = x.iter().map(|(t, v)| v * y.get(t).copied().unwrap_or(0.0)).sum();
    let nx: f64 = x.values().map(|v| v * v).sum::<f64>().sqrt();
    let ny: f64 = y.values().map(|v| v * v).sum::<f64>().sqrt();
    dot / (nx * ny)
}

fn soft_cosine_degenerates() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let pairs: Vec<(BagOfWords, BagOfWords)> =
        (0..1000).map(|_| (random_bag(&mut rng, &words), random_bag(&mut rng, &words))).collect();
    let docs: Vec<Vec<String>> = vec![words.clone()];
    let vocab = Vocabulary::build(&docs, 1).map_err(|e| e.to_string())?;
    let identity = TermSimilarity::<f64>::identity(vocab.len());
    let mut worst = 0.0f64;
    for (a, b) in &pairs {
        let soft = soft_cosine(&vocab.vectorize(a), &vocab.vectorize(b), &identity);
        worst = worst.max((soft - classical_cosine(a, b)).abs());
    }
    ensure!(worst < 1e-9, "max deviation {worst:e}");
    Ok(format!("1000 pairs, max |diff| = {worst:.1e}"))
}

fn random_similarity(vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> TermSimilarity<f64> {
    let rows: Vec<Vec<f64>> = (0..vocab.len())
        .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let emb = EmbeddingTable::from_rows(vocab.tokens().to_vec(), rows, SkipGramParams::default()).unwrap();
    term_similarity(&emb, 0.3, 10)
}

fn distance_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let corpus = generate_synthetic(&CampaignPlan::reference(1, 60, 12)).map_err(|e| e.to_string())?;
    let records: Vec<_> = corpus.dataset.clusterable().collect();
    let vocab = Vocabulary::from_dataset(&corpus.dataset, 1).map_err(|e| e.to_string())?;
    let sim = random_similarity(&vocab, &mut rng);
    let w = DistanceWeights::default();
    let in_unit = |d: f64| (0.0..=1.0).contains(&d);
    let mut self_pairs = 0;
    for _ in 0..10_000 {
        let i = rng.random_range(0..records.len());
        let j = if rng.random_bool(0.05) { i } else { rng.random_range(0..records.len()) };
        let (a, b) = (records[i], records[j]);
        let t = [text_distance(a, b, &vocab, &sim), text_distance(b, a, &vocab, &sim)];
        let u: [f64; 2] = [url_path_distance(a, b).unwrap(), url_path_distance(b, a).unwrap()];
        let c = [
            combined_distance(a, b, &vocab, &sim, w).unwrap(),
            combined_distance(b, a, &vocab, &sim, w).unwrap(),
        ];
        for (name, d) in [("text", t), ("url", u), ("combined", c)] {
            ensure!(in_unit(d[0]) && in_unit(d[1]), "{name} distance {d:?} outside [0,1]");
            ensure!((d[0] - d[1]).abs() <= 1e-12, "{name} distance asymmetric: {d:?}");
            if i == j {
                ensure!(d[0] == 0.0, "{name} self-distance {} for {}", d[0], a.id);
            }
        }
        self_pairs += usize::from(i == j);
    }

    let pool: Vec<String> = (0..12).map(|i| format!("t{i}")).collect();
    let set = |rng: &mut ChaCha8Rng| -> BTreeSet<String> {
        let k = rng.random_range(0..8);
        pool.choose_multiple(rng, k).cloned().collect()
    };
    for _ in 0..1000 {
        let (a, b, c) = (set(&mut rng), set(&mut rng), set(&mut rng));
        let ac: Exact = jaccard_distance(&a, &c);
        let ab: Exact = jaccard_distance(&a, &b);
        let bc: Exact = jaccard_distance(&b, &c);
        ensure!(ac <= ab + bc, "triangle violated: d(a,c)={ac} > {ab} + {bc}");
    }
    Ok(format!("10000 pairs ({self_pairs} self), 1000 Jaccard triples checked exactly"))
}

// ---------------------------------------------------------------- clustering

/// Average linkage by brute force over explicit member sets. Ties go to the
/// pair whose smallest members are lowest.
fn naive_average_linkage(m: &CondensedMatrix<Exact>) -> Vec<(Vec<usize>, Exact)> {
    let mut active: Vec<Vec<usize>> = (0..m.n()).map(|i| vec![i]).collect();
    let mut out = Vec::new();
    while active.len() > 1 {
        let mut best: Option<(Exact, usize, usize, usize, usize)> = None;
        for p in 0..active.len() {
            for q in (p + 1)..active.len() {
                let mut sum = Exact::from_integer(0);
                for &i in &active[p] {
                    for &j in &active[q] {
                        sum += m.get(i, j);
                    }
                }
                let h = sum / Exact::from_integer((active[p].len() * active[q].len()) as i128);
                let (lo, hi) = {
                    let (x, y) = (active[p][0], active[q][0]);
                    (x.min(y), x.max(y))
                };
                let better = match &best {
                    None => true,
                    Some((bh, blo, bhi, _, _)) => (h, lo, hi) < (*bh, *blo, *bhi),
                };
                if better {
                    best = Some((h, lo, hi, p, q));
                }
            }
        }
        let (h, _, _, p, q) = best.unwrap();
        let right = active.remove(q);
        let mut merged = active.remove(p);
        merged.extend(right);
        merged.sort_unstable();
        out.push((merged.clone(), h));
        active.push(merged);
        active.sort_by_key(|c| c[0]);
    }
    out
}

fn silhouette_oracle(m: &CondensedMatrix<f64>, assignment: &[usize]) -> f64 {
    let n = m.n();
    let mut total = 0.0;
    for i in 0..n {
        let mut by: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for j in (0..n).filter(|&j| j != i) {
            let e = by.entry(assignment[j]).or_default();
            e.0 += m.get(i, j);
            e.1 += 1;
        }
        let Some(&(own_sum, own_n)) = by.get(&assignment[i]) else {
            continue; // singleton
        };
        let a = own_sum / own_n as f64;
        let b = by
            .iter()
            .filter(|(c, _)| **c != assignment[i])
            .map(|(_, (s, k))| s / *k as f64)
            .fold(f64::INFINITY, f64::min);
        let d = a.max(b);
        if d > 0.0 {
            total += (b - a) / d;
        }
    }
    total / n as f64
}

fn clustering_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut merges = 0;
    for trial in 0..100 {
        let n = rng.random_range(2..=20);
        let values: Vec<Exact> = (0..n * (n - 1) / 2)
            .map(|_| Exact::new(rng.random_range(0..=12), 12))
            .collect();
        let m = CondensedMatrix::from_values(n, values).unwrap();
        let dendro = linkage(&m, Linkage::Average).map_err(|e| e.to_string())?;
        let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for mg in &dendro.merges {
            let mut set = members[mg.left].clone();
            set.extend(&members[mg.right]);
            set.sort_unstable();
            members.push(set);
        }
        let expected = naive_average_linkage(&m);
        for (s, (set, h)) in expected.iter().enumerate() {
            let got = (&members[n + s], dendro.merges[s].height);
            ensure!(
                got == (set, *h),
                "matrix {trial} (n={n}) step {s}: got {:?} at {}, oracle {set:?} at {h}",
                got.0,
                got.1
            );
        }
        merges += expected.len();
    }

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(3..=30);
        let values: Vec<f64> = (0..n * (n - 1) / 2).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = CondensedMatrix::from_values(n, values).unwrap();
        let k = rng.random_range(2..n);
        let mut assignment: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        assignment.shuffle(&mut rng);
        let got = silhouette(&m, &assignment).map_err(|e| e.to_string())?;
        worst = worst.max((got - silhouette_oracle(&m, &assignment)).abs());
    }
    ensure!(worst < 1e-9, "silhouette deviates by {worst:e}");
    Ok(format!("{merges} merge heights exact on 100 matrices; silhouette max |diff| = {worst:.1e}"))
}

// ---------------------------------------------------------------- recovery

fn ari_oracle(a: &[usize], b: &[usize]) -> f64 {
    let c2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ra: HashMap<usize, f64> = HashMap::new();
    let mut rb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let index: f64 = joint.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(a.len() as f64);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

fn campaign_recovery(root: &Path, runs: &mut Vec<Run>) -> Outcome {
    let mut slowest = Duration::ZERO;
    let mut sizes = Vec::new();
    for seed in 0..RECOVERY_SEEDS {
        let plan = CampaignPlan::reference(scale_for(seed), 1, seed);
        let corpus = generate_synthetic(&plan).map_err(|e| e.to_string())?;
        let config = synthetic_config(&root.join(format!("seed{seed}")), &corpus, seed, "run");
        let start = Instant::now();
        let out = run_pipeline(&config).map_err(|e| format!("seed {seed}: {e}"))?;
        let elapsed = start.elapsed();
        slowest = slowest.max(elapsed);
        ensure!(elapsed < RECOVERY_BUDGET, "seed {seed} took {elapsed:?}");

        let mut got = Vec::new();
        let mut truth = Vec::new();
        for c in &out.run.clusters {
            for m in &c.members {
                got.push(c.id);
                truth.push(corpus.truth.group_of(m).ok_or(format!("{m} has no planted group"))?);
            }
        }
        let ari = ari_oracle(&got, &truth);
        ensure!(ari == 1.0, "seed {seed}: ARI {ari}\n{}", out.report.to_table());

        let multi_source: BTreeSet<BTreeSet<String>> = plan
            .campaigns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.source_domains > 1)
            .map(|(g, _)| {
                corpus.truth.membership.iter().filter(|(_, &x)| x == g).map(|(id, _)| id.clone()).collect()
            })
            .collect();
        let flagged: BTreeSet<BTreeSet<String>> = out
            .run
            .clusters
            .iter()
            .filter(|c| out.labeling.state.cluster_has(c.id, ClusterLabel::AdCampaign))
            .map(|c| c.members.iter().cloned().collect())
            .collect();
        ensure!(flagged == multi_source, "seed {seed}: campaigns {flagged:?}, expected {multi_source:?}");

        sizes.push(out.dataset.len());
        runs.push(Run {
            seed,
            dataset: out.dataset,
            clusters: out.run.clusters,
        });
    }
    Ok(format!(
        "{} corpora (n = {}..{}), ARI 1.0, slowest run {:.2?}",
        runs.len(),
        sizes.iter().min().unwrap(),
        sizes.iter().max().unwrap(),
        slowest
    ))
}

// ---------------------------------------------------------------- labels

fn malicious_verdict(url: &str) -> Verdict {
    Verdict {
        url: canonicalize_url(url).unwrap(),
        status: VerdictStatus::Malicious,
        source: VerdictSource::RemoteScanner,
        engine_hits: 3,
        fetched_at: t0(),
        error: None,
    }
}

fn random_verdicts(dataset: &Dataset, rng: &mut ChaCha8Rng, p: f64) -> VerdictSnapshot {
    let mut snap = VerdictSnapshot::default();
    for r in &dataset.records {
        if let Some(u) = r.landing_url.as_deref() {
            if rng.random_bool(p) {
                snap.insert(malicious_verdict(u));
            }
        }
    }
    snap
}

fn propagation(runs: &[Run]) -> Outcome {
    ensure!(!runs.is_empty(), "no pipeline runs to check");
    let mut seeded = 0;
    for run in runs {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + run.seed);
        for _ in 0..5 {
            let verdicts = random_verdicts(&run.dataset, &mut rng, 0.03);
            let labeling = compute_labels(&run.dataset, &run.clusters, &verdicts, psl(), SuspicionRules::default());
            let state = &labeling.state;
            for c in &run.clusters {
                if c.members.iter().any(|m| state.record_has(m, RecordLabel::KnownMalicious)) {
                    seeded += 1;
                    ensure!(state.cluster_has(c.id, ClusterLabel::Malicious), "seed {}: cluster {} unlabeled", run.seed, c.id);
                    for m in &c.members {
                        ensure!(state.record_has(m, RecordLabel::Malicious), "seed {}: {m} not malicious", run.seed);
                    }
                }
            }
            let mut again = state.clone();
            propagate_malicious(&run.clusters, &mut again);
            ensure!(&again == state, "seed {}: propagation not idempotent", run.seed);
            ensure!(state.is_consistent(), "seed {}: inconsistent label state", run.seed);
        }
    }
    Ok(format!("{} corpora x 5 verdict draws, {seeded} seeded clusters fully malicious, idempotent", runs.len()))
}

// ---------------------------------------------------------------- meta-clustering

fn random_clusters(rng: &mut ChaCha8Rng) -> Vec<WpnCluster> {
    let nc = rng.random_range(1..=120);
    let nd = rng.random_range(1..=(200 - nc).min(80));
    let domains: Vec<String> = (0..nd).map(|d| format!("d{d}.com")).collect();
    let sources: Vec<String> = (0..6).map(|s| format!("s{s}.net")).collect();
    let mut clusters: Vec<WpnCluster> = (0..nc)
        .map(|id| {
            let kl = rng.random_range(0..=3.min(nd));
            let ks = rng.random_range(1..=3);
            WpnCluster {
                id,
                members: vec![format!("r{id}")],
                source_etld1s: sources.choose_multiple(rng, ks).cloned().collect(),
                landing_etld1s: domains.choose_multiple(rng, kl).cloned().collect(),
            }
        })
        .collect();
    clusters.shuffle(rng);
    clusters
}

/// Components by BFS over the cluster–domain adjacency.
fn reachability(clusters: &[WpnCluster]) -> BTreeSet<(BTreeSet<usize>, BTreeSet<String>)> {
    let mut adj: HashMap<String, Vec<String>> = HashMap::new();
    for c in clusters {
        for d in &c.landing_etld1s {
            let w = format!("w:{}", c.id);
            let d = format!("d:{d}");
            adj.entry(w.clone()).or_default().push(d.clone());
            adj.entry(d).or_default().push(w);
        }
    }
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut out = BTreeSet::new();
    let mut starts: Vec<&String> = adj.keys().collect();
    starts.sort();
    for s in starts {
        if seen.contains(s) {
            continue;
        }
        let mut comp = (BTreeSet::new(), BTreeSet::new());
        let mut queue = VecDeque::from([s.clone()]);
        seen.insert(s.clone());
        while let Some(v) = queue.pop_front() {
            match v.split_once(':').unwrap() {
                ("w", id) => comp.0.insert(id.parse().unwrap()),
                (_, d) => comp.1.insert(d.to_string()),
            };
            for u in &adj[&v] {
                if seen.insert(u.clone()) {
                    queue.push_back(u.clone());
                }
            }
        }
        out.insert(comp);
    }
    out
}

fn meta_clustering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut components = 0;
    let mut duplicates = 0;
    for g in 0..100 {
        let clusters = random_clusters(&mut rng);
        let graph = BipartiteGraph::build(&clusters);
        ensure!(graph.node_count() <= 200, "graph {g} has {} nodes", graph.node_count());
        let metas = connected_components(&graph);
        let got: BTreeSet<(BTreeSet<usize>, BTreeSet<String>)> = metas
            .iter()
            .map(|m| (m.clusters.iter().copied().collect(), m.domains.clone()))
            .collect();
        let want = reachability(&clusters);
        ensure!(got == want, "graph {g}: components differ from reachability");
        components += want.len();

        let mut state = LabelState::new();
        mark_ad_campaigns(&clusters, &mut state);
        let dup = duplicate_ad_clusters(&clusters, &state, 2);
        let want_dup: BTreeSet<usize> = clusters
            .iter()
            .filter(|c| c.source_etld1s.len() >= 2 && c.landing_etld1s.len() >= 2)
            .map(|c| c.id)
            .collect();
        ensure!(dup == want_dup, "graph {g}: duplicate-ads {dup:?}, expected {want_dup:?}");
        duplicates += dup.len();

        flag_suspicious(&metas, &clusters, &mut state, &VerdictSnapshot::default(), psl(), SuspicionRules::default());
        let want_sus: BTreeSet<usize> = want
            .iter()
            .filter(|(cs, _)| !cs.is_disjoint(&want_dup))
            .flat_map(|(cs, _)| cs.iter().copied())
            .collect();
        let got_sus: BTreeSet<usize> =
            clusters.iter().filter(|c| state.cluster_has(c.id, ClusterLabel::Suspicious)).map(|c| c.id).collect();
        ensure!(got_sus == want_sus, "graph {g}: suspicious clusters differ");
    }
    Ok(format!("100 graphs, {components} components, {duplicates} duplicate-ads campaigns"))
}

// ---------------------------------------------------------------- determinism

fn determinism(root: &Path) -> Outcome {
    let corpus = generate_synthetic(&CampaignPlan::reference(3, 1, 77)).map_err(|e| e.to_string())?;
    let dir = root.join("determinism");
    let a = synthetic_config(&dir, &corpus, 77, "a");
    let b = synthetic_config(&dir, &corpus, 77, "b");
    run_pipeline(&a).map_err(|e| e.to_string())?;
    run_pipeline(&b).map_err(|e| e.to_string())?;
    let (ra, rb) = (RunDir::new(&a.out_dir), RunDir::new(&b.out_dir));
    let mut checked = Vec::new();
    for (x, y) in [(ra.report(), rb.report()), (ra.labels(), rb.labels()), (ra.report_table(), rb.report_table())] {
        let (bx, by) = (std::fs::read(&x).unwrap(), std::fs::read(&y).unwrap());
        ensure!(bx == by, "{} differs between runs", x.file_name().unwrap().to_string_lossy());
        checked.push(x.file_name().unwrap().to_string_lossy().into_owned());
    }
    Ok(format!("{} byte-identical", checked.join(", ")))
}

// ---------------------------------------------------------------- filter lists

struct Case {
    rules: &'static str,
    url: &'static str,
    context: Option<&'static str>,
    expect: Decision,
}

const fn case(rules: &'static str, url: &'static str, context: Option<&'static str>, expect: Decision) -> Case {
    Case { rules, url, context, expect }
}

use Decision::{Allowed, Blocked, Unmatched};

const CASES: [Case; 30] = [
    case("||ads.example.com^", "https://ads.example.com/sw.js", None, Blocked(0)),
    case("||ads.example.com^", "https://push.ads.example.com/sw.js", None, Blocked(0)),
    case("||ads.example.com^", "https://badads.example.com/sw.js", None, Unmatched),
    case("||ads.example.com^", "https://ads.example.com.evil.net/", None, Unmatched),
    case("||ads.example.com^", "https://ads.example.com:8080/x", None, Blocked(0)),
    case("||example.org/banner/*.js", "https://cdn.example.org/banner/top.js", None, Blocked(0)),
    case("||example.org/banner/*.js", "https://example.org/banner/top.css", None, Unmatched),
    case("/pushad/sw", "https://x.com/pushad/sw.js", None, Blocked(0)),
    case("/pushad/sw", "https://x.com/pushads/sw.js", None, Unmatched),
    case("|https://tracker.", "https://tracker.net/a", None, Blocked(0)),
    case("|https://tracker.", "http://tracker.net/a", None, Unmatched),
    case("swfile.js|", "https://a.com/swfile.js", None, Blocked(0)),
    case("swfile.js|", "https://a.com/swfile.js?v=1", None, Unmatched),
    case("adtype=push^", "https://a.com/s?adtype=push&x=1", None, Blocked(0)),
    case("adtype=push^", "https://a.com/s?adtype=push", None, Blocked(0)),
    case("adtype=push^", "https://a.com/s?adtype=pushy", None, Unmatched),
    case("/ad^", "https://a.com/ad_banner", None, Unmatched),
    case("/ad^", "https://a.com/ad/banner", None, Blocked(0)),
    case("||push.example^\n@@||push.example/allowed/", "https://push.example/allowed/sw.js", None, Allowed(1)),
    case("||push.example^\n@@||push.example/allowed/", "https://push.example/other/sw.js", None, Blocked(0)),
    case("@@||safe.example^", "https://safe.example/sw.js", None, Unmatched),
    case("||cdn.example^$domain=news.com", "https://cdn.example/sw.js", Some("news.com"), Blocked(0)),
    case("||cdn.example^$domain=news.com", "https://cdn.example/sw.js", Some("www.news.com"), Blocked(0)),
    case("||cdn.example^$domain=news.com", "https://cdn.example/sw.js", Some("other.com"), Unmatched),
    case("||cdn.example^$domain=news.com", "https://cdn.example/sw.js", None, Unmatched),
    case("||cdn.example^$domain=~news.com", "https://cdn.example/sw.js", Some("news.com"), Unmatched),
    case("||cdn.example^$domain=~news.com", "https://cdn.example/sw.js", None, Blocked(0)),
    case("PushAd/", "https://x.com/pushad/sw.js", None, Blocked(0)),
    case("||x.com^$script\n/notify", "https://x.com/notify.js", None, Blocked(0)),
    case("/ads/\n||a.com^", "https://a.com/ads/sw.js", None, Blocked(0)),
];

fn easylist_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/easylist.txt.gz")
}

fn filter_matching() -> Outcome {
    for (i, c) in CASES.iter().enumerate() {
        let got = FilterList::parse(c.rules).match_url(c.url, c.context).map_err(|e| e.to_string())?;
        ensure!(got == c.expect, "case {}: `{}` on {} ({:?}) gave {got:?}", i + 1, c.rules, c.url, c.context);
    }

    let text = read_filter_list(&easylist_path()).map_err(|e| e.to_string())?;
    let list = FilterList::parse(&text);
    let report = list.report();
    ensure!(report.lines == text.lines().count(), "report covers {} of {} lines", report.lines, text.lines().count());
    ensure!(report.is_complete(), "{} parsed + {} ignored != {} lines", report.parsed, report.ignored(), report.lines);
    ensure!(list.ignored().len() == report.ignored(), "ignored list and report disagree");

    let corpus = generate_synthetic(&CampaignPlan::reference(3, 20, 15)).map_err(|e| e.to_string())?;
    let audit = audit_dataset(&corpus.dataset, &list);
    ensure!(audit.sw_scripts.total > 0 && audit.sw_requests.total > 0, "nothing audited");
    ensure!(
        audit.sw_scripts.blocked == 0 && audit.sw_requests.blocked == 0,
        "blocked {} scripts, {} requests",
        audit.sw_scripts.blocked,
        audit.sw_requests.blocked
    );
    Ok(format!(
        "30/30 cases; easylist {} lines = {} rules + {} ignored; audit 0/{} scripts, 0/{} requests",
        report.lines,
        report.parsed,
        report.ignored(),
        audit.sw_scripts.total,
        audit.sw_requests.total
    ))
}

// ---------------------------------------------------------------- verdicts

fn verdict_replay(root: &Path, runs: &[Run]) -> Outcome {
    ensure!(!runs.is_empty(), "no pipeline runs to check");
    let dir = root.join("replay");
    std::fs::create_dir_all(&dir).unwrap();
    let mut flips = 0;
    for run in runs.iter().take(5) {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + run.seed);
        let verdicts = random_verdicts(&run.dataset, &mut rng, 0.05);
        let path = dir.join(format!("verdicts{}.json", run.seed));
        verdicts.save(&path).map_err(|e| e.to_string())?;
        let loaded = VerdictSnapshot::load(&path).map_err(|e| e.to_string())?;
        ensure!(loaded == verdicts, "seed {}: snapshot changed on reload", run.seed);
        let rules = SuspicionRules::default();
        let a = compute_labels(&run.dataset, &run.clusters, &verdicts, psl(), rules);
        let b = compute_labels(&run.dataset, &run.clusters, &loaded, psl(), rules);
        ensure!(a == b, "seed {}: replayed labels differ", run.seed);
        ensure!(
            serde_json::to_vec(&a.state).unwrap() == serde_json::to_vec(&b.state).unwrap(),
            "seed {}: label exports differ",
            run.seed
        );

        // Rescan against a stub that flips some verdicts and fails on others.
        let stubs = dir.join(format!("stubs{}", run.seed));
        let scanner = StubScanner::new(&stubs, 1);
        let urls: Vec<&str> = run.dataset.records.iter().filter_map(|r| r.landing_url.as_deref()).collect();
        for u in &urls {
            let resp = match rng.random_range(0..10) {
                0 => ScanResponse { engine_hits: 0, error: Some("quota exceeded".into()) },
                1 | 2 => ScanResponse { engine_hits: 5, error: None },
                _ => ScanResponse { engine_hits: 0, error: None },
            };
            scanner.put(u, &resp).map_err(|e| e.to_string())?;
        }
        let providers: [&dyn VerdictProvider; 1] = [&scanner];
        let clock = ManualClock::new(t0());
        let (report, next) = rescan(urls.iter().copied(), &providers, &loaded, &clock).map_err(|e| e.to_string())?;

        let input: BTreeSet<String> = urls.iter().map(|u| canonicalize_url(u).unwrap()).collect();
        let changed: BTreeSet<String> = report.changed.iter().map(|c| c.url.clone()).collect();
        let unchanged: BTreeSet<String> = report.unchanged.iter().cloned().collect();
        ensure!(changed.len() == report.changed.len() && unchanged.len() == report.unchanged.len(), "duplicate URLs");
        ensure!(changed.is_disjoint(&unchanged), "seed {}: changed and unchanged overlap", run.seed);
        ensure!(
            changed.union(&unchanged).cloned().collect::<BTreeSet<_>>() == input,
            "seed {}: changed and unchanged do not cover the input",
            run.seed
        );
        for f in &report.failed {
            ensure!(unchanged.contains(f), "failed {f} not listed as unchanged");
            ensure!(next.status(f) == loaded.status(f), "failed {f} lost its prior verdict");
        }
        for c in &report.changed {
            ensure!(c.before != c.after && next.status(&c.url) == c.after, "bad change record {c:?}");
        }
        flips += report.changed.len();
    }
    Ok(format!("5 snapshots replayed identically; rescans partitioned, {flips} flips"))
}

// ---------------------------------------------------------------- driver

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut runs = Vec::new();
    let mut failures = 0;

    let mut check = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<28} {detail} [{secs:.1}s]"),
            Err(why) => {
                failures += 1;
                println!("FAIL  {name:<28} {why} [{secs:.1}s]");
            }
        }
    };

    check("cost-model", &mut cost_model);
    check("soft-cosine-degeneration", &mut soft_cosine_degenerates);
    check("distance-properties", &mut distance_properties);
    check("clustering-oracle", &mut clustering_oracle);
    check("campaign-recovery", &mut || campaign_recovery(root, &mut runs));
    check("propagation-semantics", &mut || propagation(&runs));
    check("meta-clustering", &mut meta_clustering);
    check("determinism", &mut || determinism(root));
    check("filter-matching", &mut filter_matching);
    check("verdict-replay", &mut || verdict_replay(root, &runs));

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
