//! Word embeddings trained on the notification corpus, and the sparse
//! term-similarity matrix derived from them.
//!
//! Training is skip-gram with negative sampling, single-threaded and fully
//! determined by the seed and the document order.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{Display, Write as _};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::model::BagOfWords;
use crate::scalar::Real;
use crate::tokenize::text_tokens;

pub const DEFAULT_MIN_COUNT: u64 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    doc_freq: Vec<u64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keep tokens seen at least `min_count` times, ordered by frequency
    /// (descending) then lexicographically.
    pub fn build<S: AsRef<str>>(docs: &[Vec<S>], min_count: u64) -> Result<Self> {
        let mut counts: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
        for doc in docs {
            let mut seen = std::collections::HashSet::new();
            for t in doc {
                let e = counts.entry(t.as_ref()).or_default();
                e.0 += 1;
                if seen.insert(t.as_ref()) {
                    e.1 += 1;
                }
            }
        }
        let mut kept: Vec<(&str, u64, u64)> = counts
            .into_iter()
            .filter(|(_, (c, _))| *c >= min_count)
            .map(|(t, (c, df))| (t, c, df))
            .collect();
        if kept.is_empty() {
            return Err(Error::Param(format!(
                "no token reaches min_count={min_count}; vocabulary would be empty"
            )));
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_parts(
            kept.iter().map(|k| k.0.to_string()).collect(),
            kept.iter().map(|k| k.1).collect(),
            kept.iter().map(|k| k.2).collect(),
        ))
    }

    pub fn from_dataset(dataset: &Dataset, min_count: u64) -> Result<Self> {
        Self::build(&corpus_documents(dataset), min_count)
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>, doc_freq: Vec<u64>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            counts,
            doc_freq,
            index,
        }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn count(&self, i: usize) -> u64 {
        self.counts[i]
    }

    pub fn doc_freq(&self, i: usize) -> u64 {
        self.doc_freq[i]
    }

    /// Map a bag onto vocabulary indices; out-of-vocabulary tokens are dropped.
    pub fn vectorize<T: Real>(&self, bag: &BagOfWords) -> SparseVector<T> {
        let mut entries: Vec<(usize, T)> = bag
            .iter()
            .filter_map(|(t, c)| self.get(t).map(|i| (i, T::from_u32(c).unwrap_or_else(T::one))))
            .collect();
        entries.sort_by_key(|e| e.0);
        SparseVector { entries }
    }
}

/// Sparse count vector over vocabulary indices, sorted by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector<T> {
    entries: Vec<(usize, T)>,
}

impl<T: Real> SparseVector<T> {
    pub fn from_entries(mut entries: Vec<(usize, T)>) -> Self {
        entries.sort_by_key(|e| e.0);
        entries.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 = a.1 + b.1;
                true
            } else {
                false
            }
        });
        entries.retain(|e| e.1 != T::zero());
        SparseVector { entries }
    }

    pub fn entries(&self) -> &[(usize, T)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<T> {
        self.entries
            .binary_search_by_key(&i, |e| e.0)
            .ok()
            .map(|p| self.entries[p].1)
    }
}

/// Token sequences (title then body) for every record, in dataset order.
pub fn corpus_documents(dataset: &Dataset) -> Vec<Vec<String>> {
    dataset
        .records
        .iter()
        .map(|r| text_tokens(&r.title, &r.body))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipGramParams {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SkipGramParams {
    fn default() -> Self {
        SkipGramParams {
            dim: 64,
            window: 5,
            negatives: 5,
            epochs: 15,
            lr: 0.025,
            seed: 0,
        }
    }
}

impl SkipGramParams {
    fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Param(format!("embedding dimension {} < 2", self.dim)));
        }
        if self.epochs < 1 {
            return Err(Error::Param("epochs must be at least 1".into()));
        }
        if self.window < 1 {
            return Err(Error::Param("window must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Param(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// `V × d` table of unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    tokens: Vec<String>,
    dim: usize,
    vectors: Vec<T>,
    pub params: SkipGramParams,
}

impl<T: Real> EmbeddingTable<T> {
    /// Wrap raw rows, normalizing each to unit length.
    pub fn from_rows(tokens: Vec<String>, rows: Vec<Vec<T>>, params: SkipGramParams) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != tokens.len() || rows.iter().any(|r| r.len() != dim) || dim == 0 {
            return Err(Error::Param("embedding rows must be non-empty and rectangular".into()));
        }
        let mut vectors: Vec<T> = rows.into_iter().flatten().collect();
        normalize_rows(&mut vectors, dim);
        Ok(EmbeddingTable {
            tokens,
            dim,
            vectors,
            params,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cosine(&self, i: usize, j: usize) -> T {
        dot(self.row(i), self.row(j))
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

fn normalize_rows<T: Real>(vectors: &mut [T], dim: usize) {
    for row in vectors.chunks_mut(dim) {
        let norm = dot(row, row).sqrt();
        if norm > T::zero() {
            row.iter_mut().for_each(|x| *x = *x / norm);
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    let six = T::from_f64(6.0).expect("constant");
    let x = x.max(-six * six).min(six * six);
    T::one() / (T::one() + (-x).exp())
}

pub fn train_skipgram<T: Real, S: AsRef<str>>(
    docs: &[Vec<S>],
    vocab: &Vocabulary,
    params: SkipGramParams,
) -> Result<EmbeddingTable<T>> {
    params.validate()?;
    if vocab.is_empty() {
        return Err(Error::Param("empty vocabulary".into()));
    }
    let v = vocab.len();
    let d = params.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let scale = 0.5 / d as f64;
    let mut input: Vec<T> = (0..v * d)
        .map(|_| T::from_f64(rng.random_range(-scale..scale)).expect("f64 to real"))
        .collect();

    if v > 1 {
        let mut output: Vec<T> = vec![T::zero(); v * d];
        let sentences: Vec<Vec<usize>> = docs
            .iter()
            .map(|doc| doc.iter().filter_map(|t| vocab.get(t.as_ref())).collect())
            .collect();
        let noise = WeightedIndex::new((0..v).map(|i| (vocab.count(i) as f64).powf(0.75)))
            .map_err(|e| Error::Param(format!("negative sampling table: {e}")))?;
        let words_per_epoch: usize = sentences.iter().map(Vec::len).sum();
        let total = (params.epochs * words_per_epoch) as f64 + 1.0;
        let mut processed = 0usize;
        let mut grad = vec![T::zero(); d];

        for _ in 0..params.epochs {
            for sentence in &sentences {
                for (pos, &center) in sentence.iter().enumerate() {
                    let alpha = params.lr * (1.0 - processed as f64 / total).max(1e-4);
                    let alpha = T::from_f64(alpha).expect("f64 to real");
                    processed += 1;
                    let reduced = rng.random_range(0..params.window);
                    let span = params.window - reduced;
                    let lo = pos.saturating_sub(span);
                    let hi = (pos + span).min(sentence.len() - 1);
                    for (c, &context) in sentence.iter().enumerate().take(hi + 1).skip(lo) {
                        if c == pos {
                            continue;
                        }
                        grad.iter_mut().for_each(|g| *g = T::zero());
                        let l1 = context * d;
                        for k in 0..=params.negatives {
                            let (target, label) = if k == 0 {
                                (center, T::one())
                            } else {
                                let t = noise.sample(&mut rng);
                                if t == center {
                                    continue;
                                }
                                (t, T::zero())
                            };
                            let l2 = target * d;
                            let f = dot(&input[l1..l1 + d], &output[l2..l2 + d]);
                            let g = (label - sigmoid(f)) * alpha;
                            for j in 0..d {
                                grad[j] = grad[j] + g * output[l2 + j];
                                output[l2 + j] = output[l2 + j] + g * input[l1 + j];
                            }
                        }
                        for j in 0..d {
                            input[l1 + j] = input[l1 + j] + grad[j];
                        }
                    }
                }
            }
        }
    }

    normalize_rows(&mut input, d);
    Ok(EmbeddingTable {
        tokens: vocab.tokens().to_vec(),
        dim: d,
        vectors: input,
        params,
    })
}

/// Sparse symmetric term-similarity matrix with unit diagonal. Rows hold
/// off-diagonal entries sorted by column.
#[derive(Debug, Clone, PartialEq)]
pub struct TermSimilarity<T> {
    rows: Vec<Vec<(usize, T)>>,
    pub threshold: T,
    pub top_k: usize,
}

impl<T: Real> TermSimilarity<T> {
    pub fn identity(size: usize) -> Self {
        TermSimilarity {
            rows: vec![Vec::new(); size],
            threshold: T::one(),
            top_k: 0,
        }
    }

    /// Build from off-diagonal `(i, j, s)` triples; each is stored both ways,
    /// keeping the larger value on conflict.
    pub fn from_entries(size: usize, entries: impl IntoIterator<Item = (usize, usize, T)>) -> Result<Self> {
        let mut map: BTreeMap<(usize, usize), T> = BTreeMap::new();
        for (i, j, s) in entries {
            if i >= size || j >= size {
                return Err(Error::Param(format!("entry ({i},{j}) outside {size}x{size}")));
            }
            if i == j {
                continue;
            }
            if !(s >= T::zero() && s <= T::one()) {
                return Err(Error::Param(format!("similarity {s:?} outside [0,1]")));
            }
            let key = (i.min(j), i.max(j));
            let e = map.entry(key).or_insert(s);
            *e = e.max(s);
        }
        let mut rows = vec![Vec::new(); size];
        for ((i, j), s) in map {
            rows[i].push((j, s));
            rows[j].push((i, s));
        }
        rows.iter_mut().for_each(|r| r.sort_by_key(|e| e.0));
        Ok(TermSimilarity {
            rows,
            threshold: T::zero(),
            top_k: usize::MAX,
        })
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    /// Off-diagonal entries of row `i`.
    pub fn row(&self, i: usize) -> &[(usize, T)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        if i == j {
            return T::one();
        }
        self.rows[i]
            .binary_search_by_key(&j, |e| e.0)
            .map_or(T::zero(), |p| self.rows[i][p].1)
    }

    /// Number of stored off-diagonal entries (counting both triangles).
    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// `xᵀ S y`.
    pub fn quadratic_form(&self, x: &SparseVector<T>, y: &SparseVector<T>) -> T {
        let mut acc = T::zero();
        for &(i, xi) in x.entries() {
            if let Some(yi) = y.get(i) {
                acc = acc + xi * yi;
            }
            for &(j, s) in &self.rows[i] {
                if let Some(yj) = y.get(j) {
                    acc = acc + xi * s * yj;
                }
            }
        }
        acc
    }
}

/// `S[i][j] = max(0, cos(vᵢ, vⱼ))`, kept when at least `threshold` and `j` is
/// among the `top_k` nearest neighbours of `i` (or vice versa).
pub fn term_similarity<T: Real>(emb: &EmbeddingTable<T>, threshold: T, top_k: usize) -> TermSimilarity<T> {
    let v = emb.len();
    let neighbours: Vec<Vec<(usize, usize, T)>> = (0..v)
        .into_par_iter()
        .map(|i| {
            let mut cands: Vec<(usize, T)> = (0..v)
                .filter(|&j| j != i)
                .map(|j| (j, emb.cosine(i, j).max(T::zero()).min(T::one())))
                .filter(|&(_, c)| c > T::zero() && c >= threshold)
                .collect();
            cands.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite cosine").then(a.0.cmp(&b.0)));
            cands.truncate(top_k);
            cands.into_iter().map(|(j, c)| (i, j, c)).collect()
        })
        .collect();
    let mut sim = TermSimilarity::from_entries(v, neighbours.into_iter().flatten())
        .expect("cosines are clamped into [0,1]");
    sim.threshold = threshold;
    sim.top_k = top_k;
    sim
}

const EMBEDDINGS_MAGIC: &str = "# wpnmine embeddings v1";
const TERMSIM_MAGIC: &str = "# wpnmine term-similarity v1";

fn header_fields(line: &str, what: &'static str) -> Result<HashMap<String, String>> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if !parts.len().is_multiple_of(2) {
        return Err(Error::artifact(what, "header must be key/value pairs"));
    }
    Ok(parts.chunks(2).map(|kv| (kv[0].to_string(), kv[1].to_string())).collect())
}

fn field<V: FromStr>(h: &HashMap<String, String>, key: &str, what: &'static str) -> Result<V> {
    h.get(key)
        .ok_or_else(|| Error::artifact(what, format!("missing header field `{key}`")))?
        .parse()
        .map_err(|_| Error::artifact(what, format!("bad header field `{key}`")))
}

impl<T: Real + Display + FromStr> EmbeddingTable<T> {
    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mut out = format!(
            "{EMBEDDINGS_MAGIC}\nvocab {} dim {} seed {} epochs {} window {} negatives {} lr {}\n",
            self.len(),
            self.dim,
            p.seed,
            p.epochs,
            p.window,
            p.negatives,
            p.lr
        );
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            for x in self.row(i) {
                write!(out, " {x}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        const WHAT: &str = "embedding file";
        let mut lines = text.lines();
        if lines.next() != Some(EMBEDDINGS_MAGIC) {
            return Err(Error::artifact(WHAT, "bad magic line"));
        }
        let h = header_fields(lines.next().unwrap_or_default(), WHAT)?;
        let v: usize = field(&h, "vocab", WHAT)?;
        let dim: usize = field(&h, "dim", WHAT)?;
        let params = SkipGramParams {
            dim,
            window: field(&h, "window", WHAT)?,
            negatives: field(&h, "negatives", WHAT)?,
            epochs: field(&h, "epochs", WHAT)?,
            lr: field(&h, "lr", WHAT)?,
            seed: field(&h, "seed", WHAT)?,
        };
        let mut tokens = Vec::with_capacity(v);
        let mut vectors = Vec::with_capacity(v * dim);
        for line in lines.filter(|l| !l.is_empty()) {
            let mut parts = line.split(' ');
            tokens.push(parts.next().unwrap_or_default().to_string());
            let before = vectors.len();
            for x in parts {
                vectors.push(x.parse::<T>().map_err(|_| Error::artifact(WHAT, format!("bad value `{x}`")))?);
            }
            if vectors.len() - before != dim {
                return Err(Error::artifact(WHAT, format!("row `{}` has wrong width", tokens.last().unwrap())));
            }
        }
        if tokens.len() != v {
            return Err(Error::artifact(WHAT, format!("expected {v} rows, found {}", tokens.len())));
        }
        Ok(EmbeddingTable {
            tokens,
            dim,
            vectors,
            params,
        })
    }
}

impl<T: Real + Display + FromStr> TermSimilarity<T> {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{TERMSIM_MAGIC}\nsize {} threshold {} top_k {}\n",
            self.size(),
            self.threshold,
            self.top_k
        );
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, s) in row.iter().filter(|e| e.0 > i) {
                writeln!(out, "{i} {j} {s}").expect("write to string");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        const WHAT: &str = "term-similarity file";
        let mut lines = text.lines();
        if lines.next() != Some(TERMSIM_MAGIC) {
            return Err(Error::artifact(WHAT, "bad magic line"));
        }
        let h = header_fields(lines.next().unwrap_or_default(), WHAT)?;
        let size: usize = field(&h, "size", WHAT)?;
        let threshold: T = field(&h, "threshold", WHAT)?;
        let top_k: usize = field(&h, "top_k", WHAT)?;
        let mut entries = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let p: Vec<&str> = line.split(' ').collect();
            let bad = || Error::artifact(WHAT, format!("bad entry line `{line}`"));
            if p.len() != 3 {
                return Err(bad());
            }
            entries.push((
                p[0].parse().map_err(|_| bad())?,
                p[1].parse().map_err(|_| bad())?,
                p[2].parse::<T>().map_err(|_| bad())?,
            ));
        }
        let mut sim = Self::from_entries(size, entries)?;
        sim.threshold = threshold;
        sim.top_k = top_k;
        Ok(sim)
    }
}
