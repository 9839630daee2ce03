//! Value transfers between clusters and the aggregated edge table.
//!
//! For a transaction, the net value of a party is what its outputs receive
//! minus what its inputs spend. Parties with a negative net value are senders,
//! positive ones recipients; a party netting exactly zero is neither. Each
//! sender passes to each recipient the recipient's net value scaled by the
//! sender's share of the senders' gross input. Fees are never an edge, and
//! coinbase rewards (no sender) produce no transfers.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use thiserror::Error;

use crate::amount::Amount;
use crate::chain::ScriptId;
use crate::cluster::{ClusterAlias, ClusterMap};
use crate::resolve::ResolvedTx;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EdgeError {
    #[error("alias {0} does not take part in the transaction")]
    AliasAbsent(ClusterAlias),
}

/// One side of a resolved transaction: a TXO with its owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Party {
    pub value: u64,
    pub alias: ClusterAlias,
    pub script_id: ScriptId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedTransaction {
    pub inputs: Vec<Party>,
    pub outputs: Vec<Party>,
    pub block_height: u64,
    pub is_coinbase: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TransferEvent {
    pub sender: ClusterAlias,
    pub recipient: ClusterAlias,
    pub value: Amount,
    pub block: u64,
}

/// `received(a) = Σ outputs of a − Σ inputs of a`, in satoshis.
pub fn net_value(tx: &ResolvedTransaction, alias: ClusterAlias) -> Result<i128, EdgeError> {
    let mut present = false;
    let mut net = 0i128;
    for p in &tx.outputs {
        if p.alias == alias {
            present = true;
            net += i128::from(p.value);
        }
    }
    for p in &tx.inputs {
        if p.alias == alias {
            present = true;
            net -= i128::from(p.value);
        }
    }
    if present {
        Ok(net)
    } else {
        Err(EdgeError::AliasAbsent(alias))
    }
}

/// Proportional attribution over arbitrary party keys.
///
/// `inputs` and `outputs` are `(key, value)` pairs; keys may repeat. Returns
/// `(sender, recipient, value)` triples ordered by sender then recipient.
pub fn attribute<K: Ord + Copy>(inputs: &[(K, u64)], outputs: &[(K, u64)]) -> Vec<(K, K, Amount)> {
    let mut gross: BTreeMap<K, (u64, u64)> = BTreeMap::new();
    for &(k, v) in inputs {
        gross.entry(k).or_default().0 += v;
    }
    for &(k, v) in outputs {
        gross.entry(k).or_default().1 += v;
    }
    let mut senders = Vec::new();
    let mut recipients = Vec::new();
    for (&k, &(spent, received)) in &gross {
        if received > spent {
            recipients.push((k, received - spent));
        } else if spent > received {
            senders.push((k, spent));
        }
    }
    if senders.is_empty() || recipients.is_empty() {
        return Vec::new();
    }
    let denom: u64 = senders.iter().map(|&(_, spent)| spent).sum();
    let mut out = Vec::with_capacity(senders.len() * recipients.len());
    for &(s, spent) in &senders {
        for &(r, net) in &recipients {
            out.push((s, r, Amount::proportional(spent, denom, net)));
        }
    }
    out
}

pub fn attribute_transfers(tx: &ResolvedTransaction) -> Vec<TransferEvent> {
    if tx.is_coinbase {
        return Vec::new();
    }
    let ins: Vec<(ClusterAlias, u64)> = tx.inputs.iter().map(|p| (p.alias, p.value)).collect();
    let outs: Vec<(ClusterAlias, u64)> = tx.outputs.iter().map(|p| (p.alias, p.value)).collect();
    attribute(&ins, &outs)
        .into_iter()
        .map(|(sender, recipient, value)| TransferEvent {
            sender,
            recipient,
            value,
            block: tx.block_height,
        })
        .collect()
}

/// Transfers of a resolved transaction under a final cluster map. Excluded
/// transactions and coinbases yield none.
pub fn resolved_transfers(tx: &ResolvedTx, map: &ClusterMap) -> Vec<TransferEvent> {
    if tx.excluded() || tx.is_coinbase {
        return Vec::new();
    }
    let ins: Vec<(ClusterAlias, u64)> = tx.inputs.iter().map(|t| (map.alias(t.slot), t.value)).collect();
    let outs: Vec<(ClusterAlias, u64)> = tx.outputs.iter().map(|t| (map.alias(t.slot), t.value)).collect();
    attribute(&ins, &outs)
        .into_iter()
        .map(|(sender, recipient, value)| TransferEvent {
            sender,
            recipient,
            value,
            block: tx.height,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeRecord {
    pub a: ClusterAlias,
    pub b: ClusterAlias,
    pub reveal: u64,
    pub last_seen: u64,
    pub total: u64,
    pub min_sent: Amount,
    pub max_sent: Amount,
    pub total_sent: Amount,
}

impl EdgeRecord {
    fn from_event(e: &TransferEvent) -> Self {
        EdgeRecord {
            a: e.sender,
            b: e.recipient,
            reveal: e.block,
            last_seen: e.block,
            total: 1,
            min_sent: e.value,
            max_sent: e.value,
            total_sent: e.value,
        }
    }

    /// Commutative, associative merge of two aggregates of the same pair.
    pub fn merge(&mut self, other: &EdgeRecord) {
        debug_assert_eq!((self.a, self.b), (other.a, other.b));
        self.reveal = self.reveal.min(other.reveal);
        self.last_seen = self.last_seen.max(other.last_seen);
        self.total += other.total;
        self.min_sent = self.min_sent.min(other.min_sent);
        self.max_sent = self.max_sent.max(other.max_sent);
        self.total_sent += other.total_sent;
    }
}

/// Incremental edge aggregation; partial aggregators merge deterministically.
#[derive(Debug, Default, Clone)]
pub struct EdgeAggregator {
    edges: HashMap<(ClusterAlias, ClusterAlias), EdgeRecord>,
}

impl EdgeAggregator {
    pub fn push(&mut self, e: &TransferEvent) {
        self.edges
            .entry((e.sender, e.recipient))
            .and_modify(|r| r.merge(&EdgeRecord::from_event(e)))
            .or_insert_with(|| EdgeRecord::from_event(e));
    }

    pub fn merge(&mut self, other: EdgeAggregator) {
        for (k, rec) in other.edges {
            self.edges.entry(k).and_modify(|r| r.merge(&rec)).or_insert(rec);
        }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Records sorted by `(a, b)`.
    pub fn finish(self) -> Vec<EdgeRecord> {
        let mut out: Vec<EdgeRecord> = self.edges.into_values().collect();
        out.sort_unstable_by_key(|r| (r.a, r.b));
        out
    }
}

pub fn aggregate_edges<'a>(events: impl IntoIterator<Item = &'a TransferEvent>) -> Vec<EdgeRecord> {
    let mut agg = EdgeAggregator::default();
    for e in events {
        agg.push(e);
    }
    agg.finish()
}

pub const EDGE_CSV_HEADER: &str = "a,b,reveal,last_seen,total,min_sent,max_sent,total_sent";

/// Write the edge table. Records are written in the order given.
pub fn write_edges_csv(w: &mut impl Write, edges: &[EdgeRecord]) -> std::io::Result<()> {
    writeln!(w, "{EDGE_CSV_HEADER}")?;
    for e in edges {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            e.a, e.b, e.reveal, e.last_seen, e.total, e.min_sent, e.max_sent, e.total_sent
        )?;
    }
    Ok(())
}
