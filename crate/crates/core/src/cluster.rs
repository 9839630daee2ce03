//! Script clustering with the common-input-ownership heuristic.
//!
//! Scripts that co-fund a transaction are assumed to share an owner. CoinJoin
//! and colored-coin transactions, and coinbases, contribute no links. Clusters
//! are numbered by the first on-chain appearance of their earliest script.
//!
//! Per-cluster internal statistics are computed on the *script-level* transfer
//! graph restricted to the cluster's own scripts: a transfer from script `s`
//! to script `t` of the same cluster is an internal edge. Connected components
//! count only scripts that take part in at least one internal transfer.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::ScriptId;
use crate::filters::FilterVerdict;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClusterError {
    #[error("input script {0} has no known funding output")]
    UnresolvedInput(ScriptId),
}

/// Dense node identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterAlias(pub u64);

impl fmt::Display for ClusterAlias {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Union-find over script slots (union by rank, path halving).
#[derive(Debug, Default, Clone)]
pub struct ClusterIndex {
    parent: Vec<u32>,
    rank: Vec<u8>,
    scripts: Vec<ScriptId>,
    script_to_slot: HashMap<ScriptId, u32>,
}

impl ClusterIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Index over pre-assigned slots, `scripts[i]` owning slot `i`.
    pub fn from_scripts(scripts: &[ScriptId]) -> Self {
        let mut idx = ClusterIndex {
            parent: (0..scripts.len() as u32).collect(),
            rank: vec![0; scripts.len()],
            scripts: scripts.to_vec(),
            script_to_slot: HashMap::with_capacity(scripts.len()),
        };
        for (i, id) in scripts.iter().enumerate() {
            idx.script_to_slot.entry(*id).or_insert(i as u32);
        }
        idx
    }

    /// Register a script at its first appearance; later calls are no-ops.
    pub fn add_script(&mut self, id: ScriptId) -> u32 {
        if let Some(&slot) = self.script_to_slot.get(&id) {
            return slot;
        }
        let slot = self.parent.len() as u32;
        self.parent.push(slot);
        self.rank.push(0);
        self.scripts.push(id);
        self.script_to_slot.insert(id, slot);
        slot
    }

    pub fn slot_of(&self, id: &ScriptId) -> Option<u32> {
        self.script_to_slot.get(id).copied()
    }

    pub fn script(&self, slot: u32) -> ScriptId {
        self.scripts[slot as usize]
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    /// Root without compressing; usable through a shared reference.
    pub fn find_const(&self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            x = self.parent[x as usize];
        }
        x
    }

    /// Merge the sets of `a` and `b`; false if already merged.
    pub fn union(&mut self, a: u32, b: u32) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (hi, lo) = match self.rank[ra as usize].cmp(&self.rank[rb as usize]) {
            std::cmp::Ordering::Less => (rb, ra),
            _ => (ra, rb),
        };
        self.parent[lo as usize] = hi;
        if self.rank[hi as usize] == self.rank[lo as usize] {
            self.rank[hi as usize] += 1;
        }
        true
    }

    /// Merge all `slots` into one set; returns the number of merges.
    pub fn union_all(&mut self, slots: &[u32]) -> usize {
        let Some((&first, rest)) = slots.split_first() else {
            return 0;
        };
        rest.iter().filter(|&&s| self.union(first, s)).count()
    }
}

/// A source of script links. Implementations see one transaction at a time.
pub trait LinkRule {
    fn name(&self) -> &'static str;

    /// Groups of slots to merge, given the input and output slots of an
    /// unfiltered, non-coinbase transaction.
    fn groups(&self, input_slots: &[u32], output_slots: &[u32]) -> Vec<Vec<u32>>;
}

/// Every input of a transaction belongs to the same owner.
#[derive(Debug, Default, Clone, Copy)]
pub struct CommonInputRule;

impl LinkRule for CommonInputRule {
    fn name(&self) -> &'static str {
        "common_input"
    }

    fn groups(&self, input_slots: &[u32], _output_slots: &[u32]) -> Vec<Vec<u32>> {
        let distinct: BTreeSet<u32> = input_slots.iter().copied().collect();
        if distinct.len() < 2 {
            return Vec::new();
        }
        vec![distinct.into_iter().collect()]
    }
}

/// Apply the heuristic to one transaction given by its input script ids.
pub fn apply_common_input_heuristic(
    input_scripts: &[ScriptId],
    is_coinbase: bool,
    verdict: &FilterVerdict,
    idx: &mut ClusterIndex,
) -> Result<usize, ClusterError> {
    if is_coinbase || verdict.excludes() {
        return Ok(0);
    }
    let slots = input_scripts
        .iter()
        .map(|id| idx.slot_of(id).ok_or(ClusterError::UnresolvedInput(*id)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(apply_rules(&[&CommonInputRule], &slots, &[], idx))
}

/// Apply a set of link rules to one (already filtered) transaction.
pub fn apply_rules(
    rules: &[&dyn LinkRule],
    input_slots: &[u32],
    output_slots: &[u32],
    idx: &mut ClusterIndex,
) -> usize {
    rules
        .iter()
        .flat_map(|rule| rule.groups(input_slots, output_slots))
        .map(|group| idx.union_all(&group))
        .sum()
}

/// Final slot → alias assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterMap {
    slot_alias: Vec<u64>,
    sizes: Vec<u64>,
}

impl ClusterMap {
    pub fn from_slot_aliases(slot_alias: Vec<u64>) -> Self {
        let n = slot_alias.iter().map(|&a| a + 1).max().unwrap_or(0) as usize;
        let mut sizes = vec![0u64; n];
        for &a in &slot_alias {
            sizes[a as usize] += 1;
        }
        ClusterMap { slot_alias, sizes }
    }

    pub fn alias(&self, slot: u32) -> ClusterAlias {
        ClusterAlias(self.slot_alias[slot as usize])
    }

    pub fn slot_aliases(&self) -> &[u64] {
        &self.slot_alias
    }

    pub fn num_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn num_scripts(&self) -> usize {
        self.slot_alias.len()
    }

    pub fn cluster_size(&self, alias: ClusterAlias) -> u64 {
        self.sizes.get(alias.0 as usize).copied().unwrap_or(0)
    }

    /// `script_id → alias` pairs sorted by script id.
    pub fn sorted_entries(&self, scripts: &[ScriptId]) -> Vec<(ScriptId, ClusterAlias)> {
        let mut out: Vec<(ScriptId, ClusterAlias)> = scripts
            .iter()
            .zip(&self.slot_alias)
            .map(|(id, &a)| (*id, ClusterAlias(a)))
            .collect();
        out.sort_unstable();
        out
    }
}

/// Number clusters in slot order: a cluster takes the next alias when its
/// first (earliest-appearing) script is reached.
pub fn finalize_aliases(idx: &mut ClusterIndex) -> ClusterMap {
    let n = idx.len();
    let mut root_alias: HashMap<u32, u64> = HashMap::new();
    let mut slot_alias = Vec::with_capacity(n);
    for slot in 0..n as u32 {
        let root = idx.find(slot);
        let next = root_alias.len() as u64;
        slot_alias.push(*root_alias.entry(root).or_insert(next));
    }
    ClusterMap::from_slot_aliases(slot_alias)
}

/// Script → alias lookup map, the external form of a finalized index.
pub fn alias_map(idx: &mut ClusterIndex, map: &ClusterMap) -> HashMap<ScriptId, ClusterAlias> {
    (0..idx.len() as u32)
        .map(|slot| (idx.script(slot), map.alias(slot)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClusterStats {
    pub cluster_size: u64,
    pub cluster_num_edges: u64,
    pub cluster_num_cc: u64,
    pub cluster_num_nodes_in_cc: u64,
}

/// A transfer between two scripts, before mapping to clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScriptTransfer<S> {
    pub sender: S,
    pub recipient: S,
}

/// Internal statistics of one cluster.
///
/// `transfers` should already be restricted to pairs inside the cluster;
/// edges are distinct directed script pairs.
pub fn cluster_internal_stats<S: Ord + Copy>(
    cluster_size: u64,
    transfers: impl IntoIterator<Item = ScriptTransfer<S>>,
) -> ClusterStats {
    let edges: BTreeSet<(S, S)> = transfers
        .into_iter()
        .filter(|t| t.sender != t.recipient)
        .map(|t| (t.sender, t.recipient))
        .collect();
    let nodes: Vec<S> = edges
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .collect::<BTreeSet<S>>()
        .into_iter()
        .collect();
    let pos = |s: &S| nodes.binary_search(s).unwrap() as u32;
    let mut uf = ClusterIndex {
        parent: (0..nodes.len() as u32).collect(),
        rank: vec![0; nodes.len()],
        scripts: Vec::new(),
        script_to_slot: HashMap::new(),
    };
    let mut merges = 0u64;
    for (a, b) in &edges {
        if uf.union(pos(a), pos(b)) {
            merges += 1;
        }
    }
    ClusterStats {
        cluster_size,
        cluster_num_edges: edges.len() as u64,
        cluster_num_cc: nodes.len() as u64 - merges,
        cluster_num_nodes_in_cc: nodes.len() as u64,
    }
}

/// Collects intra-cluster script pairs for every cluster in one pass.
#[derive(Debug, Default)]
pub struct IntraClusterGraph {
    pairs: HashMap<u64, BTreeSet<(u32, u32)>>,
}

impl IntraClusterGraph {
    pub fn record(&mut self, map: &ClusterMap, sender_slot: u32, recipient_slot: u32) {
        if sender_slot == recipient_slot {
            return;
        }
        let a = map.alias(sender_slot);
        if a == map.alias(recipient_slot) {
            self.pairs.entry(a.0).or_default().insert((sender_slot, recipient_slot));
        }
    }

    /// Stats for every alias `0..num_clusters`.
    pub fn finish(self, map: &ClusterMap) -> Vec<ClusterStats> {
        let mut out: Vec<ClusterStats> = (0..map.num_clusters() as u64)
            .map(|a| ClusterStats {
                cluster_size: map.cluster_size(ClusterAlias(a)),
                ..Default::default()
            })
            .collect();
        for (alias, pairs) in self.pairs {
            let size = out[alias as usize].cluster_size;
            out[alias as usize] = cluster_internal_stats(
                size,
                pairs.into_iter().map(|(s, r)| ScriptTransfer {
                    sender: s,
                    recipient: r,
                }),
            );
        }
        out
    }
}
