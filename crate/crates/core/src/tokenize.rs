//! Text and URL tokenization.
//!
//! Text: NFC, lowercase, split on anything that is not alphanumeric, keep
//! tokens of at least two characters. No stemming, no stop words.
//!
//! URL paths: directory segments, the page name and query parameter names.
//! The host and query values never contribute.

use std::collections::BTreeSet;

use unicode_normalization::UnicodeNormalization;
use url::Url;

use crate::error::{Error, Result};
use crate::model::{BagOfWords, UrlParts};
use crate::psl::PublicSuffixList;

const MIN_TOKEN_CHARS: usize = 2;

fn push_tokens(text: &str, out: &mut Vec<String>) {
    let normalized: String = text.nfc().collect::<String>().to_lowercase().nfc().collect();
    out.extend(
        normalized
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| t.chars().count() >= MIN_TOKEN_CHARS)
            .map(str::to_string),
    );
}

/// Token sequence of title followed by body. Order is kept for embedding
/// training; [`tokenize_text`] is the bag view.
pub fn text_tokens(title: &str, body: &str) -> Vec<String> {
    let mut out = Vec::new();
    push_tokens(title, &mut out);
    push_tokens(body, &mut out);
    out
}

pub fn tokenize_text(title: &str, body: &str) -> BagOfWords {
    text_tokens(title, body).into_iter().collect()
}

pub(crate) fn parse_absolute(url: &str) -> Result<Url> {
    let parsed = Url::parse(url.trim()).map_err(|e| Error::url(url, e))?;
    if parsed.cannot_be_a_base() || parsed.host_str().is_none_or(str::is_empty) {
        return Err(Error::url(url, "not an absolute hierarchical url"));
    }
    Ok(parsed)
}

pub fn url_parts(url: &str, psl: &PublicSuffixList) -> Result<UrlParts> {
    let parsed = parse_absolute(url)?;
    let host = parsed.host_str().unwrap_or_default().to_string();
    let etld1 = psl.etld_plus_one(&host)?;
    let mut segments: Vec<String> = parsed
        .path_segments()
        .map(|s| s.map(str::to_string).collect())
        .unwrap_or_default();
    let page_name = segments.pop().unwrap_or_default();
    segments.retain(|s| !s.is_empty());
    let query_param_names = parsed
        .query_pairs()
        .map(|(k, _)| k.into_owned())
        .filter(|k| !k.is_empty())
        .collect();
    Ok(UrlParts {
        scheme: parsed.scheme().to_string(),
        host,
        etld1,
        path_segments: segments,
        page_name,
        query_param_names,
    })
}

/// Path token set of an absolute URL.
pub fn tokenize_url_path(url: &str) -> Result<BTreeSet<String>> {
    Ok(url_parts(url, PublicSuffixList::bundled())?.path_tokens())
}
