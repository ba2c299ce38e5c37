//! Loading and deduplication of line-delimited WPN logs.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Platform, WpnRecord};
use crate::psl::PublicSuffixList;
use crate::tokenize::parse_absolute;

/// On-disk shape of one record. Field names are part of the file format.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRecord {
    id: String,
    source_url: String,
    sw_script_url: String,
    title: String,
    body: String,
    #[serde(default)]
    icon_url: Option<String>,
    #[serde(default)]
    landing_url: Option<String>,
    redirect_chain: Vec<String>,
    platform: Platform,
    collected_at: DateTime<Utc>,
    clicked: bool,
}

impl From<&WpnRecord> for WireRecord {
    fn from(r: &WpnRecord) -> Self {
        WireRecord {
            id: r.id.clone(),
            source_url: r.source_url.clone(),
            sw_script_url: r.sw_script_url.clone(),
            title: r.title.clone(),
            body: r.body.clone(),
            icon_url: r.icon_url.clone(),
            landing_url: r.landing_url.clone(),
            redirect_chain: r.redirect_chain.clone(),
            platform: r.platform,
            collected_at: r.collected_at,
            clicked: r.clicked,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sources: Vec<PathBuf>,
    pub loaded_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub records: Vec<WpnRecord>,
    pub provenance: Provenance,
}

impl Dataset {
    /// Build from already-validated records. Fails on duplicate ids.
    pub fn from_records(records: Vec<WpnRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Contract(format!("duplicate record id `{}`", r.id)));
            }
        }
        Ok(Dataset {
            records,
            provenance: Provenance {
                sources: Vec::new(),
                loaded_at: Utc::now(),
            },
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn clusterable(&self) -> impl Iterator<Item = &WpnRecord> {
        self.records.iter().filter(|r| r.is_clusterable())
    }

    pub fn clusterable_count(&self) -> usize {
        self.clusterable().count()
    }

    pub fn get(&self, id: &str) -> Option<&WpnRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Write records in the input line format.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        write_records(&self.records, &mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        write_records(&self.records, &mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }
}

fn write_records(records: &[WpnRecord], out: &mut impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, &WireRecord::from(r))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn check_url(field: &str, value: &str) -> std::result::Result<(), String> {
    parse_absolute(value)
        .map(|_| ())
        .map_err(|e| format!("field `{field}`: {e}"))
}

fn parse_line(line: &str, psl: &PublicSuffixList) -> std::result::Result<WpnRecord, String> {
    let wire: WireRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if wire.id.is_empty() {
        return Err("field `id`: empty".into());
    }
    check_url("source_url", &wire.source_url)?;
    check_url("sw_script_url", &wire.sw_script_url)?;
    let host = parse_absolute(&wire.source_url)
        .map_err(|e| e.to_string())?
        .host_str()
        .unwrap_or_default()
        .to_string();
    let source_etld1 = psl
        .etld_plus_one(&host)
        .map_err(|e| format!("field `source_url`: {e}"))?;
    Ok(WpnRecord {
        id: wire.id,
        source_url: wire.source_url,
        source_etld1,
        sw_script_url: wire.sw_script_url,
        title: wire.title,
        body: wire.body,
        icon_url: wire.icon_url,
        landing_url: wire.landing_url,
        redirect_chain: wire.redirect_chain,
        platform: wire.platform,
        collected_at: wire.collected_at,
        clicked: wire.clicked,
    })
}

/// Parse records from a reader, paired with their 1-based line numbers.
/// `origin` is used in diagnostics only.
pub fn read_records(
    reader: impl BufRead,
    origin: &Path,
    psl: &PublicSuffixList,
) -> Result<Vec<(usize, WpnRecord)>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_line(&line, psl).map_err(|message| Error::Schema {
            path: origin.to_path_buf(),
            line: idx + 1,
            message,
        })?;
        out.push((idx + 1, record));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LoadSummary {
    pub total: usize,
    pub clusterable: usize,
}

pub fn load_dataset(paths: &[PathBuf], psl: &PublicSuffixList) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for path in paths {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        for (line, r) in read_records(BufReader::new(file), path, psl)? {
            if !seen.insert(r.id.clone()) {
                return Err(Error::Schema {
                    path: path.clone(),
                    line,
                    message: format!("duplicate id `{}`", r.id),
                });
            }
            records.push(r);
        }
    }
    Ok(Dataset {
        records,
        provenance: Provenance {
            sources: paths.to_vec(),
            loaded_at: Utc::now(),
        },
    })
}

impl Dataset {
    pub fn summary(&self) -> LoadSummary {
        LoadSummary {
            total: self.len(),
            clusterable: self.clusterable_count(),
        }
    }
}

/// Drop exact duplicates on (source eTLD+1, title, body, landing URL,
/// platform), keeping the first occurrence. Returns survivors and the number
/// removed.
pub fn dedup(records: Vec<WpnRecord>) -> (Vec<WpnRecord>, usize) {
    let before = records.len();
    let mut seen = HashSet::new();
    let kept: Vec<WpnRecord> = records
        .into_iter()
        .filter(|r| {
            seen.insert((
                r.source_etld1.clone(),
                r.title.clone(),
                r.body.clone(),
                r.landing_url.clone(),
                r.platform,
            ))
        })
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}
