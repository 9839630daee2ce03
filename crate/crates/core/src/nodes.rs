//! Per-node attribute rows.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use thiserror::Error;

use crate::amount::Amount;
use crate::cluster::{ClusterAlias, ClusterStats};
use crate::edges::{EdgeRecord, TransferEvent};
use crate::labels::Category;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NodeError {
    #[error("edge {a}->{b} has {edge_total} transfers but {events} events support it")]
    InconsistentInputs {
        a: ClusterAlias,
        b: ClusterAlias,
        edge_total: u64,
        events: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NodeRecord {
    pub alias: ClusterAlias,
    pub label: Option<Category>,
    pub degree: u64,
    pub degree_in: u64,
    pub degree_out: u64,
    pub total_transaction_in: u64,
    pub total_transaction_out: u64,
    pub first_transaction_in: Option<u64>,
    pub last_transaction_in: Option<u64>,
    pub first_transaction_out: Option<u64>,
    pub last_transaction_out: Option<u64>,
    pub min_sent: Amount,
    pub max_sent: Amount,
    pub total_sent: Amount,
    pub min_received: Amount,
    pub max_received: Amount,
    pub total_received: Amount,
    pub cluster_size: u64,
    pub cluster_num_edges: u64,
    pub cluster_num_cc: u64,
    pub cluster_num_nodes_in_cc: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Side {
    count: u64,
    first: Option<u64>,
    last: Option<u64>,
    min: Option<Amount>,
    max: Amount,
    total: Amount,
}

impl Side {
    fn push(&mut self, block: u64, value: Amount) {
        self.count += 1;
        self.first = Some(self.first.map_or(block, |f| f.min(block)));
        self.last = Some(self.last.map_or(block, |l| l.max(block)));
        self.min = Some(self.min.map_or(value, |m| m.min(value)));
        self.max = self.max.max(value);
        self.total += value;
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    sent: Side,
    received: Side,
    degree_in: u64,
    degree_out: u64,
}

/// Build one record per alias in `cluster_stats` (every cluster holds TXOs)
/// plus any alias seen only in events.
///
/// `cluster_stats[i]` belongs to alias `i`.
pub fn compute_node_attributes<'a>(
    events: impl IntoIterator<Item = &'a TransferEvent>,
    edges: &[EdgeRecord],
    cluster_stats: &[ClusterStats],
) -> Result<Vec<NodeRecord>, NodeError> {
    let mut acc: BTreeMap<ClusterAlias, Acc> = BTreeMap::new();
    let mut pair_counts: HashMap<(ClusterAlias, ClusterAlias), u64> = HashMap::new();
    for e in events {
        acc.entry(e.sender).or_default().sent.push(e.block, e.value);
        acc.entry(e.recipient).or_default().received.push(e.block, e.value);
        *pair_counts.entry((e.sender, e.recipient)).or_default() += 1;
    }
    if pair_counts.len() != edges.len() {
        // some events have no edge; report the first such pair
        let known: std::collections::HashSet<_> = edges.iter().map(|e| (e.a, e.b)).collect();
        if let Some((&(a, b), &n)) = pair_counts.iter().filter(|(k, _)| !known.contains(k)).min() {
            return Err(NodeError::InconsistentInputs {
                a,
                b,
                edge_total: 0,
                events: n,
            });
        }
    }
    for e in edges {
        let n = pair_counts.get(&(e.a, e.b)).copied().unwrap_or(0);
        if n != e.total {
            return Err(NodeError::InconsistentInputs {
                a: e.a,
                b: e.b,
                edge_total: e.total,
                events: n,
            });
        }
        acc.entry(e.a).or_default().degree_out += 1;
        acc.entry(e.b).or_default().degree_in += 1;
    }
    for alias in 0..cluster_stats.len() as u64 {
        acc.entry(ClusterAlias(alias)).or_default();
    }

    Ok(acc
        .into_iter()
        .map(|(alias, a)| {
            let stats = cluster_stats.get(alias.0 as usize).copied().unwrap_or(ClusterStats {
                cluster_size: 1,
                ..Default::default()
            });
            NodeRecord {
                alias,
                label: None,
                degree: a.degree_in + a.degree_out,
                degree_in: a.degree_in,
                degree_out: a.degree_out,
                total_transaction_in: a.received.count,
                total_transaction_out: a.sent.count,
                first_transaction_in: a.received.first,
                last_transaction_in: a.received.last,
                first_transaction_out: a.sent.first,
                last_transaction_out: a.sent.last,
                min_sent: a.sent.min.unwrap_or_default(),
                max_sent: a.sent.max,
                total_sent: a.sent.total,
                min_received: a.received.min.unwrap_or_default(),
                max_received: a.received.max,
                total_received: a.received.total,
                cluster_size: stats.cluster_size,
                cluster_num_edges: stats.cluster_num_edges,
                cluster_num_cc: stats.cluster_num_cc,
                cluster_num_nodes_in_cc: stats.cluster_num_nodes_in_cc,
            }
        })
        .collect())
}

pub const NODE_CSV_HEADER: &str = "alias,label,degree,degree_in,degree_out,total_transaction_in,total_transaction_out,first_transaction_in,last_transaction_in,first_transaction_out,last_transaction_out,min_sent,max_sent,total_sent,min_received,max_received,total_received,cluster_size,cluster_num_edges,cluster_num_cc,cluster_num_nodes_in_cc";

fn opt(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl NodeRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.alias,
            self.label.map(|c| c.as_str()).unwrap_or(""),
            self.degree,
            self.degree_in,
            self.degree_out,
            self.total_transaction_in,
            self.total_transaction_out,
            opt(self.first_transaction_in),
            opt(self.last_transaction_in),
            opt(self.first_transaction_out),
            opt(self.last_transaction_out),
            self.min_sent,
            self.max_sent,
            self.total_sent,
            self.min_received,
            self.max_received,
            self.total_received,
            self.cluster_size,
            self.cluster_num_edges,
            self.cluster_num_cc,
            self.cluster_num_nodes_in_cc,
        )
    }
}

pub fn write_nodes_csv(w: &mut impl Write, nodes: &[NodeRecord]) -> std::io::Result<()> {
    writeln!(w, "{NODE_CSV_HEADER}")?;
    for n in nodes {
        writeln!(w, "{}", n.csv_row())?;
    }
    Ok(())
}
