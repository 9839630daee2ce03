//! Derived node features and the log-quantile normalizer.
//!
//! Missing values are `f64::NAN` throughout. The feature list is frozen in
//! [`FeatureManifest::standard`]; its hash travels with every output.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use chrono::{DateTime, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::ClusterAlias;
use crate::store::StoredNode;

pub const FEATURE_MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("node {0} has no transfers")]
    NoActivity(ClusterAlias),
    #[error("no BTC/USD rate for {0}")]
    MissingRates(NaiveDate),
    #[error("no block date for height {0}")]
    MissingBlockDate(u64),
    #[error("invalid rates file: {0}")]
    InvalidRates(String),
    #[error("training split is empty")]
    EmptyTrainingSplit,
    #[error("feature manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("malformed feature file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Counts, block indices, ratios: lower anchor is the minimum.
    Plain,
    /// USD amounts: lower anchor is the 5th percentile.
    Value,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Plain => "plain",
            FeatureKind::Value => "value",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "plain" => Some(FeatureKind::Plain),
            "value" => Some(FeatureKind::Value),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub version: u32,
    pub features: Vec<FeatureSpec>,
}

const PLAIN_BASE: [&str; 13] = [
    "degree",
    "degree_in",
    "degree_out",
    "total_transaction_in",
    "total_transaction_out",
    "first_transaction_in",
    "last_transaction_in",
    "first_transaction_out",
    "last_transaction_out",
    "cluster_size",
    "cluster_num_edges",
    "cluster_num_cc",
    "cluster_num_nodes_in_cc",
];

const VALUE_FIELDS: [&str; 8] = [
    "min_sent_usd",
    "max_sent_usd",
    "total_sent_usd",
    "min_received_usd",
    "max_received_usd",
    "total_received_usd",
    "avg_received_usd",
    "avg_sent_usd",
];

const DERIVED: [&str; 4] = [
    "non_isolated_proportion",
    "degree_out_in_ratio",
    "time_before_first_out",
    "age",
];

const RATE_FIELDS: [&str; 9] = [
    "total_transaction_in_rate",
    "total_transaction_out_rate",
    "degree_rate",
    "degree_in_rate",
    "degree_out_rate",
    "cluster_size_rate",
    "cluster_num_edges_rate",
    "cluster_num_cc_rate",
    "cluster_num_nodes_in_cc_rate",
];

impl FeatureManifest {
    pub fn standard() -> Self {
        let plain = |n: &str| FeatureSpec {
            name: n.into(),
            kind: FeatureKind::Plain,
        };
        let mut features: Vec<FeatureSpec> = PLAIN_BASE.iter().map(|n| plain(n)).collect();
        features.extend(VALUE_FIELDS.iter().map(|n| FeatureSpec {
            name: (*n).into(),
            kind: FeatureKind::Value,
        }));
        features.extend(DERIVED.iter().map(|n| plain(n)));
        features.extend(RATE_FIELDS.iter().map(|n| plain(n)));
        FeatureManifest {
            version: FEATURE_MANIFEST_VERSION,
            features,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn value_mask(&self) -> Vec<bool> {
        self.features.iter().map(|f| f.kind == FeatureKind::Value).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    /// Hex SHA-256 over version, names and kinds.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.version.to_le_bytes());
        for f in &self.features {
            h.update(f.name.as_bytes());
            h.update([0]);
            h.update(f.kind.as_str().as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

/// Daily BTC/USD closing prices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatesTable {
    prices: BTreeMap<NaiveDate, f64>,
}

impl RatesTable {
    pub fn new(prices: BTreeMap<NaiveDate, f64>) -> Result<Self, FeatureError> {
        if let Some((d, p)) = prices.iter().find(|(_, p)| !(p.is_finite() && **p > 0.0)) {
            return Err(FeatureError::InvalidRates(format!("price {p} on {d}")));
        }
        Ok(RatesTable { prices })
    }

    /// Reads `date,usd_per_btc` rows with ISO dates.
    pub fn from_csv(reader: impl std::io::Read) -> Result<Self, FeatureError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| FeatureError::InvalidRates(e.to_string()))?;
        if header.iter().collect::<Vec<_>>() != ["date", "usd_per_btc"] {
            return Err(FeatureError::InvalidRates(format!("header {header:?}")));
        }
        let mut prices = BTreeMap::new();
        for row in rdr.records() {
            let row = row.map_err(|e| FeatureError::InvalidRates(e.to_string()))?;
            let date = NaiveDate::parse_from_str(&row[0], "%Y-%m-%d")
                .map_err(|e| FeatureError::InvalidRates(format!("{:?}: {e}", &row[0])))?;
            let price: f64 = row[1]
                .parse()
                .map_err(|_| FeatureError::InvalidRates(format!("price {:?}", &row[1])))?;
            if prices.insert(date, price).is_some() {
                return Err(FeatureError::InvalidRates(format!("duplicate date {date}")));
            }
        }
        RatesTable::new(prices)
    }

    pub fn get(&self, date: NaiveDate) -> Option<f64> {
        self.prices.get(&date).copied()
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    /// Median USD price of one satoshi over the days `first..=last`.
    ///
    /// Both ends must lie inside the covered range; days missing inside it
    /// are skipped.
    pub fn median_satoshi_price(&self, first: NaiveDate, last: NaiveDate) -> Result<f64, FeatureError> {
        let (lo, hi) = (first.min(last), first.max(last));
        let (&start, _) = self.prices.first_key_value().ok_or(FeatureError::MissingRates(lo))?;
        let (&end, _) = self.prices.last_key_value().ok_or(FeatureError::MissingRates(lo))?;
        if lo < start {
            return Err(FeatureError::MissingRates(lo));
        }
        if hi > end {
            return Err(FeatureError::MissingRates(hi));
        }
        let mut window: Vec<f64> = self.prices.range(lo..=hi).map(|(_, &p)| p).collect();
        if window.is_empty() {
            return Err(FeatureError::MissingRates(lo));
        }
        window.sort_by(f64::total_cmp);
        let n = window.len();
        let median = if n % 2 == 1 {
            window[n / 2]
        } else {
            (window[n / 2 - 1] + window[n / 2]) / 2.0
        };
        Ok(median / 1e8)
    }
}

/// UTC day of each block, indexed by height.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BlockDates(Vec<NaiveDate>);

impl BlockDates {
    pub fn from_timestamps(timestamps: impl IntoIterator<Item = u32>) -> Self {
        BlockDates(
            timestamps
                .into_iter()
                .map(|t| DateTime::from_timestamp(i64::from(t), 0).unwrap().date_naive())
                .collect(),
        )
    }

    pub fn get(&self, height: u64) -> Result<NaiveDate, FeatureError> {
        self.0
            .get(height as usize)
            .copied()
            .ok_or(FeatureError::MissingBlockDate(height))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn activity_span(node: &StoredNode) -> Option<(u64, u64)> {
    let first = [node.first_transaction_in, node.first_transaction_out]
        .into_iter()
        .flatten()
        .min()?;
    let last = [node.last_transaction_in, node.last_transaction_out]
        .into_iter()
        .flatten()
        .max()?;
    Some((first, last))
}

/// Blocks between a node's first and last activity.
pub fn compute_age(node: &StoredNode) -> Result<u64, FeatureError> {
    activity_span(node)
        .map(|(first, last)| last - first)
        .ok_or(FeatureError::NoActivity(node.alias))
}

fn div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::NAN
    } else {
        num / den
    }
}

fn opt(v: Option<u64>) -> f64 {
    v.map_or(f64::NAN, |x| x as f64)
}

/// Feature row in [`FeatureManifest::standard`] order.
pub fn derive_features(
    node: &StoredNode,
    rates: &RatesTable,
    block_dates: &BlockDates,
) -> Result<Vec<f64>, FeatureError> {
    let span = activity_span(node);
    let sat_price = match span {
        Some((first, last)) => rates.median_satoshi_price(block_dates.get(first)?, block_dates.get(last)?)?,
        None => f64::NAN,
    };
    let age = span.map_or(f64::NAN, |(f, l)| (l - f) as f64);
    let usd = |sats: f64| sats * sat_price;

    let counts = [
        node.degree,
        node.degree_in,
        node.degree_out,
        node.total_transaction_in,
        node.total_transaction_out,
    ];
    let cluster = [
        node.cluster_size,
        node.cluster_num_edges,
        node.cluster_num_cc,
        node.cluster_num_nodes_in_cc,
    ];

    let mut v = Vec::with_capacity(34);
    v.extend(counts.iter().map(|&c| c as f64));
    v.extend([
        opt(node.first_transaction_in),
        opt(node.last_transaction_in),
        opt(node.first_transaction_out),
        opt(node.last_transaction_out),
    ]);
    v.extend(cluster.iter().map(|&c| c as f64));

    let total_received = usd(node.total_received);
    let total_sent = usd(node.total_sent);
    v.extend([
        usd(node.min_sent),
        usd(node.max_sent),
        total_sent,
        usd(node.min_received),
        usd(node.max_received),
        total_received,
        div(total_received, node.total_transaction_in as f64),
        div(total_sent, node.total_transaction_out as f64),
    ]);

    let time_before_first_out = match (node.first_transaction_in, node.first_transaction_out) {
        (Some(i), Some(o)) => o as f64 - i as f64,
        _ => f64::NAN,
    };
    v.extend([
        div(node.cluster_num_nodes_in_cc as f64, node.cluster_size as f64),
        div(node.degree_out as f64, node.degree_in as f64),
        time_before_first_out,
        age,
    ]);

    v.extend(
        [node.total_transaction_in, node.total_transaction_out]
            .iter()
            .map(|&c| div(c as f64, age)),
    );
    v.extend(counts[..3].iter().map(|&c| div(c as f64, age)));
    v.extend(cluster.iter().map(|&c| div(c as f64, age)));
    Ok(v)
}

/// Linear-interpolation percentile of sorted data, `p` in `[0, 100]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConstants {
    pub name: String,
    pub kind: FeatureKind,
    /// Raw (not log) lower anchor.
    pub q_low: f64,
    /// Raw (not log) 95th percentile.
    pub q95: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConstants {
    pub manifest_version: u32,
    pub manifest_hash: String,
    pub fitted_on: String,
    pub features: Vec<FeatureConstants>,
}

fn fit_one(spec: &FeatureSpec, mut xs: Vec<f64>) -> FeatureConstants {
    xs.sort_by(f64::total_cmp);
    let (q_low, q95) = if xs.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let low = match spec.kind {
            FeatureKind::Plain => xs[0],
            FeatureKind::Value => percentile(&xs, 5.0),
        };
        (low, percentile(&xs, 95.0))
    };
    FeatureConstants {
        name: spec.name.clone(),
        kind: spec.kind,
        q_low,
        q95,
        degenerate: xs.is_empty() || q_low.ln() >= q95.ln(),
    }
}

/// Fit per-feature anchors on the positive values of a training split.
pub fn fit_normalization(
    train: &[Vec<f64>],
    manifest: &FeatureManifest,
    fitted_on: &str,
) -> Result<NormalizationConstants, FeatureError> {
    if train.is_empty() {
        return Err(FeatureError::EmptyTrainingSplit);
    }
    if let Some(bad) = train.iter().find(|r| r.len() != manifest.len()) {
        return Err(FeatureError::ManifestMismatch(format!(
            "row of width {} for a manifest of {}",
            bad.len(),
            manifest.len()
        )));
    }
    let features = manifest
        .features
        .par_iter()
        .enumerate()
        .map(|(j, spec)| {
            let xs = train
                .iter()
                .map(|r| r[j])
                .filter(|x| x.is_finite() && *x > 0.0)
                .collect();
            fit_one(spec, xs)
        })
        .collect();
    Ok(NormalizationConstants {
        manifest_version: manifest.version,
        manifest_hash: manifest.hash(),
        fitted_on: fitted_on.into(),
        features,
    })
}

impl FeatureConstants {
    pub fn apply(&self, x: f64) -> f64 {
        if !(x.is_finite() && x > 0.0) {
            return 0.0;
        }
        if self.degenerate {
            return 0.5;
        }
        let lo = self.q_low.ln();
        let y = (x.ln() - lo) / (self.q95.ln() - lo);
        y.clamp(0.0, 1.0)
    }
}

impl NormalizationConstants {
    pub fn check(&self, manifest: &FeatureManifest) -> Result<(), FeatureError> {
        if self.manifest_version != manifest.version || self.manifest_hash != manifest.hash() {
            return Err(FeatureError::ManifestMismatch(format!(
                "constants fitted for v{} {}, features are v{} {}",
                self.manifest_version,
                self.manifest_hash,
                manifest.version,
                manifest.hash()
            )));
        }
        Ok(())
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "# manifest_version={} manifest_hash={} fitted_on={}",
            self.manifest_version, self.manifest_hash, self.fitted_on
        )?;
        writeln!(w, "name,kind,q_low,q95,degenerate")?;
        for f in &self.features {
            writeln!(
                w,
                "{},{},{},{},{}",
                f.name,
                f.kind.as_str(),
                f.q_low,
                f.q95,
                f.degenerate
            )?;
        }
        Ok(())
    }

    pub fn read_csv(reader: impl BufRead) -> Result<Self, FeatureError> {
        let bad = |m: &str| FeatureError::Malformed(m.to_string());
        let mut lines = reader.lines();
        let mut next = || {
            lines
                .next()
                .transpose()
                .map_err(|e| FeatureError::Malformed(e.to_string()))
        };
        let meta = next()?.ok_or_else(|| bad("empty constants file"))?;
        let mut fields = BTreeMap::new();
        for kv in meta.trim_start_matches('#').split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("metadata line"))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| fields.get(k).cloned().ok_or_else(|| bad(k));
        let manifest_version = get("manifest_version")?.parse().map_err(|_| bad("manifest_version"))?;
        let manifest_hash = get("manifest_hash")?;
        let fitted_on = get("fitted_on")?;
        if next()?.as_deref() != Some("name,kind,q_low,q95,degenerate") {
            return Err(bad("constants header"));
        }
        let mut features = Vec::new();
        while let Some(line) = next()? {
            let cols: Vec<&str> = line.split(',').collect();
            let [name, kind, q_low, q95, degenerate] = cols[..] else {
                return Err(bad(&line));
            };
            features.push(FeatureConstants {
                name: name.into(),
                kind: FeatureKind::parse(kind).ok_or_else(|| bad(kind))?,
                q_low: q_low.parse().map_err(|_| bad(q_low))?,
                q95: q95.parse().map_err(|_| bad(q95))?,
                degenerate: degenerate.parse().map_err(|_| bad(degenerate))?,
            });
        }
        Ok(NormalizationConstants {
            manifest_version,
            manifest_hash,
            fitted_on,
            features,
        })
    }
}

/// Normalize one row into `[0, 1]`.
pub fn normalize(v: &[f64], c: &NormalizationConstants) -> Result<Vec<f64>, FeatureError> {
    if v.len() != c.features.len() {
        return Err(FeatureError::ManifestMismatch(format!(
            "row of width {} for {} constants",
            v.len(),
            c.features.len()
        )));
    }
    Ok(v.iter().zip(&c.features).map(|(&x, f)| f.apply(x)).collect())
}

/// Feature rows keyed by alias, as written to `features.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub manifest: FeatureManifest,
    pub rows: Vec<(ClusterAlias, Vec<f64>)>,
}

struct Cell(f64);

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_nan() {
            Ok(())
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FeatureMatrix {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "# features version={} hash={}",
            self.manifest.version,
            self.manifest.hash()
        )?;
        write!(w, "alias")?;
        for n in self.manifest.names() {
            write!(w, ",{n}")?;
        }
        writeln!(w)?;
        for (alias, row) in &self.rows {
            write!(w, "{alias}")?;
            for &x in row {
                write!(w, ",{}", Cell(x))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads a matrix written by [`FeatureMatrix::write_csv`]; the columns
    /// must match `manifest`.
    pub fn read_csv(reader: impl BufRead, manifest: &FeatureManifest) -> Result<Self, FeatureError> {
        let bad = |m: String| FeatureError::Malformed(m);
        let mut lines = reader.lines();
        let meta = lines
            .next()
            .transpose()
            .map_err(|e| bad(e.to_string()))?
            .ok_or_else(|| bad("empty feature file".into()))?;
        let expected = format!("# features version={} hash={}", manifest.version, manifest.hash());
        if meta != expected {
            return Err(FeatureError::ManifestMismatch(meta));
        }
        let header = lines
            .next()
            .transpose()
            .map_err(|e| bad(e.to_string()))?
            .unwrap_or_default();
        let want: Vec<&str> = std::iter::once("alias").chain(manifest.names()).collect();
        if header.split(',').collect::<Vec<_>>() != want {
            return Err(FeatureError::ManifestMismatch(header));
        }
        let mut rows = Vec::new();
        for line in lines {
            let line = line.map_err(|e| bad(e.to_string()))?;
            let mut cells = line.split(',');
            let alias = cells
                .next()
                .and_then(|a| a.parse().ok())
                .ok_or_else(|| bad(line.clone()))?;
            let row = cells
                .map(|c| if c.is_empty() { Ok(f64::NAN) } else { c.parse() })
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|_| bad(line.clone()))?;
            if row.len() != manifest.len() {
                return Err(bad(line));
            }
            rows.push((ClusterAlias(alias), row));
        }
        Ok(FeatureMatrix {
            manifest: manifest.clone(),
            rows,
        })
    }
}
