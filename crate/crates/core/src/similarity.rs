//! Pairwise WPN distance: soft cosine over message text, Jaccard over
//! landing-URL path tokens, and their weighted mean.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embeddings::{SparseVector, TermSimilarity, Vocabulary};
use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::matrix::CondensedMatrix;
use crate::model::WpnRecord;
use crate::scalar::{Real, Scalar};
use crate::tokenize::tokenize_url_path;

/// Weights of the text and URL-path components. They must sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceWeights {
    pub text: f64,
    pub url: f64,
}

impl Default for DistanceWeights {
    fn default() -> Self {
        DistanceWeights { text: 0.5, url: 0.5 }
    }
}

impl DistanceWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.text >= 0.0 && self.url >= 0.0 && ((self.text + self.url) - 1.0).abs() < 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::Param(format!(
                "distance weights {}/{} must be non-negative and sum to 1",
                self.text, self.url
            )))
        }
    }
}

/// Soft cosine `xᵀSy / (√(xᵀSx) √(yᵀSy))`. An empty side gives 1 when both
/// are empty and 0 otherwise.
pub fn soft_cosine<T: Real>(x: &SparseVector<T>, y: &SparseVector<T>, sim: &TermSimilarity<T>) -> T {
    soft_cosine_with_norms(x, y, sim, sim.quadratic_form(x, x), sim.quadratic_form(y, y))
}

fn soft_cosine_with_norms<T: Real>(
    x: &SparseVector<T>,
    y: &SparseVector<T>,
    sim: &TermSimilarity<T>,
    xx: T,
    yy: T,
) -> T {
    let zero = T::zero();
    match (xx > zero, yy > zero) {
        (false, false) => T::one(),
        (true, true) => (sim.quadratic_form(x, y) / (xx * yy).sqrt()).unit_clamp(),
        _ => zero,
    }
}

pub fn text_distance<T: Real>(a: &WpnRecord, b: &WpnRecord, vocab: &Vocabulary, sim: &TermSimilarity<T>) -> T {
    let x = vocab.vectorize(&a.text_bag());
    let y = vocab.vectorize(&b.text_bag());
    T::one() - soft_cosine(&x, &y, sim)
}

/// `1 − |A∩B| / |A∪B|`; two empty sets are at distance 0.
pub fn jaccard_distance<T: Scalar>(a: &BTreeSet<String>, b: &BTreeSet<String>) -> T {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return T::zero();
    }
    T::one() - T::from_count(inter) / T::from_count(union)
}

fn path_tokens(r: &WpnRecord) -> Result<BTreeSet<String>> {
    let url = r
        .landing_url
        .as_deref()
        .ok_or_else(|| Error::Contract(format!("record `{}` has no landing_url", r.id)))?;
    tokenize_url_path(url)
}

pub fn url_path_distance<T: Scalar>(a: &WpnRecord, b: &WpnRecord) -> Result<T> {
    Ok(jaccard_distance(&path_tokens(a)?, &path_tokens(b)?))
}

/// Per-record features reused across all pairs.
struct Prepared<T> {
    text: SparseVector<T>,
    self_form: T,
    path: BTreeSet<String>,
}

impl<T: Real> Prepared<T> {
    fn new(r: &WpnRecord, vocab: &Vocabulary, sim: &TermSimilarity<T>) -> Result<Self> {
        let text = vocab.vectorize(&r.text_bag());
        let self_form = sim.quadratic_form(&text, &text);
        Ok(Prepared {
            text,
            self_form,
            path: path_tokens(r)?,
        })
    }
}

fn combine<T: Real>(a: &Prepared<T>, b: &Prepared<T>, sim: &TermSimilarity<T>, w: (T, T)) -> T {
    let text = T::one() - soft_cosine_with_norms(&a.text, &b.text, sim, a.self_form, b.self_form);
    let url: T = jaccard_distance(&a.path, &b.path);
    (w.0 * text + w.1 * url).unit_clamp()
}

fn weights<T: Real>(w: DistanceWeights) -> Result<(T, T)> {
    w.validate()?;
    Ok((
        T::from_f64(w.text).expect("weight representable"),
        T::from_f64(w.url).expect("weight representable"),
    ))
}

pub fn combined_distance<T: Real>(
    a: &WpnRecord,
    b: &WpnRecord,
    vocab: &Vocabulary,
    sim: &TermSimilarity<T>,
    w: DistanceWeights,
) -> Result<T> {
    let pa = Prepared::new(a, vocab, sim)?;
    let pb = Prepared::new(b, vocab, sim)?;
    Ok(combine(&pa, &pb, sim, weights(w)?))
}

/// Distance matrix over the given records, in order.
pub fn distance_matrix_for<T: Real>(
    records: &[&WpnRecord],
    vocab: &Vocabulary,
    sim: &TermSimilarity<T>,
    w: DistanceWeights,
) -> Result<CondensedMatrix<T>> {
    if records.len() < 2 {
        return Err(Error::Contract(format!(
            "distance matrix needs at least 2 records, got {}",
            records.len()
        )));
    }
    let w = weights(w)?;
    let prepared = records
        .iter()
        .map(|r| Prepared::new(r, vocab, sim))
        .collect::<Result<Vec<_>>>()?;
    let ids = records.iter().map(|r| r.id.clone()).collect();
    CondensedMatrix::from_fn(ids, |i, j| Ok(combine(&prepared[i], &prepared[j], sim, w)))
}

/// Distance matrix over the clusterable subset of `dataset`.
pub fn distance_matrix<T: Real>(
    dataset: &Dataset,
    vocab: &Vocabulary,
    sim: &TermSimilarity<T>,
    w: DistanceWeights,
) -> Result<CondensedMatrix<T>> {
    let records: Vec<&WpnRecord> = dataset.clusterable().collect();
    distance_matrix_for(&records, vocab, sim, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Utc;
    use proptest::prelude::*;

    use crate::model::Platform;

    fn sv(entries: &[(usize, f64)]) -> SparseVector<f64> {
        SparseVector::from_entries(entries.to_vec())
    }

    fn record(id: &str, title: &str, body: &str, landing: Option<&str>) -> WpnRecord {
        WpnRecord {
            id: id.into(),
            source_url: "https://s.com/".into(),
            source_etld1: "s.com".into(),
            sw_script_url: "https://s.com/sw.js".into(),
            title: title.into(),
            body: body.into(),
            icon_url: None,
            landing_url: landing.map(str::to_string),
            redirect_chain: vec![],
            platform: Platform::Desktop,
            collected_at: Utc::now(),
            clicked: false,
        }
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn identical_bags_have_similarity_one() {
        let s = TermSimilarity::<f64>::identity(3);
        let x = sv(&[(0, 2.0), (2, 1.0)]);
        assert!((soft_cosine(&x, &x, &s) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_under_identity() {
        let s = TermSimilarity::<f64>::identity(2);
        assert_eq!(soft_cosine(&sv(&[(0, 1.0)]), &sv(&[(1, 1.0)]), &s), 0.0);
    }

    #[test]
    fn related_terms_contribute() {
        let s = TermSimilarity::from_entries(2, [(0, 1, 0.5)]).unwrap();
        assert!((soft_cosine(&sv(&[(0, 1.0)]), &sv(&[(1, 1.0)]), &s) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_side_rules() {
        let s = TermSimilarity::<f64>::identity(2);
        let empty = sv(&[]);
        assert_eq!(soft_cosine(&empty, &empty, &s), 1.0);
        assert_eq!(soft_cosine(&empty, &sv(&[(0, 1.0)]), &s), 0.0);
    }

    #[test]
    fn text_distance_cases() {
        let docs = vec![crate::tokenize::text_tokens("win prize", "now"), crate::tokenize::text_tokens("bank loan", "")];
        let vocab = Vocabulary::build(&docs, 1).unwrap();
        let s = TermSimilarity::<f64>::identity(vocab.len());
        let a = record("a", "Win prize", "now", None);
        let b = record("b", "win PRIZE!", "now", None);
        let c = record("c", "bank loan", "", None);
        let e1 = record("e1", "", "", None);
        let e2 = record("e2", "", "", None);
        assert_eq!(text_distance(&a, &b, &vocab, &s), 0.0);
        assert_eq!(text_distance(&a, &c, &vocab, &s), 1.0);
        assert_eq!(text_distance(&e1, &e2, &vocab, &s), 0.0);
        assert_eq!(text_distance(&e1, &a, &vocab, &s), 1.0);
    }

    #[test]
    fn jaccard_cases() {
        assert_eq!(jaccard_distance::<f64>(&set(&["a", "b"]), &set(&["a", "b"])), 0.0);
        assert_eq!(jaccard_distance::<f64>(&set(&["a", "b"]), &set(&["c", "d"])), 1.0);
        assert_eq!(jaccard_distance::<f64>(&set(&["a", "b", "c"]), &set(&["b", "c", "d"])), 0.5);
        assert_eq!(jaccard_distance::<f64>(&set(&[]), &set(&[])), 0.0);
    }

    #[test]
    fn missing_landing_is_a_contract_error() {
        let a = record("a", "x", "y", Some("https://l.com/p"));
        let b = record("b", "x", "y", None);
        assert!(matches!(url_path_distance::<f64>(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn combined_is_the_mean() {
        let docs = vec![crate::tokenize::text_tokens("aa bb", ""), crate::tokenize::text_tokens("cc dd", "")];
        let vocab = Vocabulary::build(&docs, 1).unwrap();
        let s = TermSimilarity::<f64>::identity(vocab.len());
        let a = record("a", "aa bb", "", Some("https://x.com/p/q.php?k=1"));
        let b = record("b", "cc dd", "", Some("https://y.com/p/q.php?k=2"));
        let c = record("c", "aa bb", "", Some("https://z.com/p/q.php?k=3"));
        assert_eq!(combined_distance(&a, &b, &vocab, &s, DistanceWeights::default()).unwrap(), 0.5);
        assert_eq!(combined_distance(&a, &c, &vocab, &s, DistanceWeights::default()).unwrap(), 0.0);
    }

    #[test]
    fn bad_weights_are_rejected() {
        let w = DistanceWeights { text: 0.7, url: 0.7 };
        assert!(w.validate().is_err());
    }

    #[test]
    fn matrix_needs_two_records() {
        let vocab = Vocabulary::build(&[vec!["aa".to_string()]], 1).unwrap();
        let s = TermSimilarity::<f64>::identity(1);
        let a = record("a", "aa", "", Some("https://x.com/"));
        assert!(distance_matrix_for(&[&a], &vocab, &s, DistanceWeights::default()).is_err());
        let m = distance_matrix_for(&[&a, &a], &vocab, &s, DistanceWeights::default()).unwrap();
        assert_eq!(m.values(), &[0.0]);
    }

    proptest! {
        #[test]
        fn jaccard_triangle_inequality(
            a in prop::collection::btree_set("[a-e]", 0..5),
            b in prop::collection::btree_set("[a-e]", 0..5),
            c in prop::collection::btree_set("[a-e]", 0..5),
        ) {
            let ab: f64 = jaccard_distance(&a, &b);
            let bc: f64 = jaccard_distance(&b, &c);
            let ac: f64 = jaccard_distance(&a, &c);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(ab, jaccard_distance::<f64>(&b, &a));
        }
    }
}
