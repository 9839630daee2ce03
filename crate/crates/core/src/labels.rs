//! Address labels, their propagation onto clusters, and mining-pool tags
//! found in coinbase messages.
//!
//! An address labels every script it can unlock; a labeled script labels its
//! cluster. A cluster that collects two or more distinct categories stays
//! unlabeled. Distinct entity names under one category are not a conflict.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{address_to_script_ids, script_to_address, AddressError, Block, RawTransaction, ScriptId};
use crate::cluster::ClusterAlias;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Individual,
    Mining,
    Exchange,
    Marketplace,
    Gambling,
    Bet,
    Faucet,
    Mixer,
    Ponzi,
    Ransomware,
    Bridge,
}

impl Category {
    pub const ALL: [Category; 11] = [
        Category::Individual,
        Category::Mining,
        Category::Exchange,
        Category::Marketplace,
        Category::Gambling,
        Category::Bet,
        Category::Faucet,
        Category::Mixer,
        Category::Ponzi,
        Category::Ransomware,
        Category::Bridge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Individual => "individual",
            Category::Mining => "mining",
            Category::Exchange => "exchange",
            Category::Marketplace => "marketplace",
            Category::Gambling => "gambling",
            Category::Bet => "bet",
            Category::Faucet => "faucet",
            Category::Mixer => "mixer",
            Category::Ponzi => "ponzi",
            Category::Ransomware => "ransomware",
            Category::Bridge => "bridge",
        }
    }

    /// 1-based code; 0 is reserved for "no label" in binary stores.
    pub fn code(self) -> u8 {
        Category::ALL.iter().position(|&c| c == self).unwrap() as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<Option<Category>> {
        match code {
            0 => Some(None),
            c => Category::ALL.get(c as usize - 1).map(|&c| Some(c)),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelRecord {
    pub address: String,
    pub category: Category,
    pub source: String,
    pub entity_name: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabelError {
    #[error("label file header must be address,label,source[,entity]; found {0:?}")]
    BadHeader(String),
    #[error("reading labels: {0}")]
    Io(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RowError {
    #[error("line {line}: unknown category {category:?}")]
    UnknownCategory { line: usize, category: String },
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct LabelLoad {
    pub records: Vec<LabelRecord>,
    pub errors: Vec<RowError>,
}

/// Parse a label CSV. Row-level problems are collected, not fatal.
pub fn load_labels(reader: impl Read) -> Result<LabelLoad, LabelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = rdr.records();
    let mut out = LabelLoad::default();
    let Some(header) = rows.next() else {
        return Ok(out);
    };
    let header = header.map_err(|e| LabelError::Io(e.to_string()))?;
    let cols: Vec<&str> = header.iter().collect();
    let with_entity = match cols.as_slice() {
        ["address", "label", "source"] => false,
        ["address", "label", "source", "entity"] => true,
        _ => return Err(LabelError::BadHeader(cols.join(","))),
    };
    for (i, row) in rows.enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.errors.push(RowError::MalformedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let expected = if with_entity { 3..=4 } else { 3..=3 };
        if !expected.contains(&row.len()) || row[0].is_empty() {
            out.errors.push(RowError::MalformedRow {
                line,
                reason: format!("{} fields", row.len()),
            });
            continue;
        }
        let category = match row[1].parse::<Category>() {
            Ok(c) => c,
            Err(category) => {
                out.errors.push(RowError::UnknownCategory { line, category });
                continue;
            }
        };
        let entity_name = row.get(3).filter(|s| !s.is_empty()).map(str::to_string);
        out.records.push(LabelRecord {
            address: row[0].to_string(),
            category,
            source: row[2].to_string(),
            entity_name,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClusterLabel {
    pub alias: ClusterAlias,
    pub category: Category,
    pub contributing_addresses: u64,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Propagation {
    /// Sorted by alias.
    pub labels: Vec<ClusterLabel>,
    /// Clusters left unlabeled because their evidence disagrees.
    pub conflicted: Vec<ClusterAlias>,
    /// Valid addresses none of whose scripts appear on chain.
    pub unmatched: Vec<String>,
    pub invalid: Vec<AddressError>,
}

/// Propagate with the standard address decoder.
pub fn propagate(labels: &[LabelRecord], cluster_of: impl Fn(&ScriptId) -> Option<ClusterAlias>) -> Propagation {
    propagate_with(labels, address_to_script_ids, cluster_of)
}

pub fn propagate_with(
    labels: &[LabelRecord],
    script_index: impl Fn(&str) -> Result<BTreeSet<ScriptId>, AddressError>,
    cluster_of: impl Fn(&ScriptId) -> Option<ClusterAlias>,
) -> Propagation {
    let mut evidence: BTreeMap<ClusterAlias, (BTreeSet<Category>, BTreeSet<&str>)> = BTreeMap::new();
    let mut out = Propagation::default();
    let mut seen_unmatched = HashSet::new();
    for rec in labels {
        let scripts = match script_index(&rec.address) {
            Ok(s) => s,
            Err(e) => {
                out.invalid.push(e);
                continue;
            }
        };
        let mut matched = false;
        for id in &scripts {
            if let Some(alias) = cluster_of(id) {
                matched = true;
                let entry = evidence.entry(alias).or_default();
                entry.0.insert(rec.category);
                entry.1.insert(rec.address.as_str());
            }
        }
        if !matched && seen_unmatched.insert(rec.address.as_str()) {
            out.unmatched.push(rec.address.clone());
        }
    }
    for (alias, (cats, addrs)) in evidence {
        if cats.len() == 1 {
            out.labels.push(ClusterLabel {
                alias,
                category: *cats.iter().next().unwrap(),
                contributing_addresses: addrs.len() as u64,
            });
        } else {
            out.conflicted.push(alias);
        }
    }
    out
}

pub fn write_cluster_labels_csv(w: &mut impl Write, labels: &[ClusterLabel]) -> std::io::Result<()> {
    writeln!(w, "alias,label")?;
    for l in labels {
        writeln!(w, "{},{}", l.alias, l.category)?;
    }
    Ok(())
}

pub fn read_cluster_labels_csv(reader: impl Read) -> Result<Vec<(ClusterAlias, Category)>, LabelError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(|e| LabelError::Io(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["alias", "label"] {
        return Err(LabelError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| LabelError::Io(e.to_string()))?;
        let alias = row[0]
            .parse()
            .map_err(|_| LabelError::Io(format!("bad alias {:?}", &row[0])))?;
        let cat = row[1]
            .parse()
            .map_err(|c| LabelError::Io(format!("bad category {c:?}")))?;
        out.push((ClusterAlias(alias), cat));
    }
    Ok(out)
}

/// A coinbase-message pattern: bytes to search for and the entity it names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoinbasePattern {
    pub needle: Vec<u8>,
    pub entity: String,
}

impl CoinbasePattern {
    pub fn new(needle: impl AsRef<[u8]>, entity: impl Into<String>) -> Self {
        CoinbasePattern {
            needle: needle.as_ref().to_vec(),
            entity: entity.into(),
        }
    }
}

/// Pattern file: one `substring,entity` per line; `#` starts a comment.
pub fn load_patterns(reader: impl BufRead) -> Result<Vec<CoinbasePattern>, LabelError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LabelError::Io(e.to_string()))?;
        let trimmed = line.trim_end();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (needle, entity) = trimmed
            .rsplit_once(',')
            .ok_or_else(|| LabelError::Io(format!("pattern line {}: expected substring,entity", i + 1)))?;
        if needle.is_empty() {
            return Err(LabelError::Io(format!("pattern line {}: empty substring", i + 1)));
        }
        out.push(CoinbasePattern::new(needle, entity.trim()));
    }
    Ok(out)
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Label the outputs of coinbases whose message carries a known pool tag.
/// When several patterns match, the first in `patterns` wins.
pub fn extract_coinbase_tags<'a>(
    blocks: impl IntoIterator<Item = &'a Block>,
    patterns: &[CoinbasePattern],
) -> Vec<LabelRecord> {
    extract_coinbase_tags_from_txs(blocks.into_iter().filter_map(|b| b.txs.first()), patterns)
}

/// As [`extract_coinbase_tags`], over coinbase transactions directly;
/// non-coinbase transactions are ignored.
pub fn extract_coinbase_tags_from_txs<'a>(
    coinbases: impl IntoIterator<Item = &'a RawTransaction>,
    patterns: &[CoinbasePattern],
) -> Vec<LabelRecord> {
    let mut out = Vec::new();
    for cb in coinbases {
        if !cb.is_coinbase() {
            continue;
        }
        let message = &cb.inputs[0].unlock_script;
        let Some(pattern) = patterns.iter().find(|p| contains(message, &p.needle)) else {
            continue;
        };
        let mut seen = HashSet::new();
        for output in &cb.outputs {
            if output.value == 0 {
                continue;
            }
            if let Some(address) = script_to_address(&output.lock_script) {
                if seen.insert(address.clone()) {
                    out.push(LabelRecord {
                        address,
                        category: Category::Mining,
                        source: "coinbase_tag".into(),
                        entity_name: Some(pattern.entity.clone()),
                    });
                }
            }
        }
    }
    out
}
