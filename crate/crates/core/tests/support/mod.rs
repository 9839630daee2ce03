//! Naive in-memory reference for the graph tables, written independently of
//! the streaming stages: linear UTXO scans, fixpoint transitive closure,
//! big-integer attribution and a hand-rolled CSV writer.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use forge_core::chain::address::hash160;
use forge_core::chain::{list_block_files, script_to_address, Block, BlockFile, Hash256, NetworkMagic};
use num_bigint::BigUint;
use sha2::{Digest, Sha256};

pub const FRAC: u32 = 52;

pub struct ReferenceTables {
    pub nodes_csv: String,
    pub edges_csv: String,
    pub excluded_txids: Vec<Hash256>,
}

/// Every block in every file, in disk order.
pub fn all_blocks(dir: &Path, magic: NetworkMagic) -> Vec<(Vec<u8>, Block)> {
    let mut out = Vec::new();
    for path in list_block_files(dir).unwrap() {
        let file = BlockFile::read(&path).unwrap();
        for loc in file.scan(magic).unwrap() {
            let payload = file.payload(loc).to_vec();
            let block = Block::parse(&payload).unwrap();
            out.push((payload, block));
        }
    }
    out
}

pub fn dsha(data: &[u8]) -> [u8; 32] {
    Sha256::digest(Sha256::digest(data)).into()
}

/// Longest chain from an all-zero parent, by walking parents with linear
/// search. Ties go to the tip that comes first on disk.
pub fn naive_main_chain(blocks: &[(Vec<u8>, Block)], limit: u64) -> Vec<usize> {
    let hash = |i: usize| dsha(&blocks[i].0[..80]);
    let prev = |i: usize| -> [u8; 32] { blocks[i].0[4..36].try_into().unwrap() };
    let parent = |i: usize| (0..blocks.len()).find(|&j| hash(j) == prev(i));
    let depth = |i: usize| -> Option<u64> {
        let mut d = 0;
        let mut cur = i;
        loop {
            if prev(cur) == [0u8; 32] {
                return Some(d);
            }
            cur = parent(cur)?;
            d += 1;
        }
    };
    let mut best: Option<(u64, usize)> = None;
    for i in 0..blocks.len() {
        if let Some(d) = depth(i) {
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
    }
    let (_, tip) = best.expect("a genesis block");
    let mut chain = vec![tip];
    while prev(*chain.last().unwrap()) != [0u8; 32] {
        chain.push(parent(*chain.last().unwrap()).unwrap());
    }
    chain.reverse();
    chain.truncate(limit as usize);
    chain
}

/// Transactions of a block payload as `(legacy serialization, full bytes)`,
/// found by walking the wire format directly.
pub fn split_transactions(payload: &[u8]) -> Vec<(Vec<u8>, Vec<u8>)> {
    fn varint(b: &[u8], pos: &mut usize) -> usize {
        let first = b[*pos];
        *pos += 1;
        let n = match first {
            0xfd => 2,
            0xfe => 4,
            0xff => 8,
            v => return v as usize,
        };
        let mut v = 0usize;
        for k in 0..n {
            v |= (b[*pos + k] as usize) << (8 * k);
        }
        *pos += n;
        v
    }
    let mut pos = 80;
    let count = varint(payload, &mut pos);
    let mut out = Vec::new();
    for _ in 0..count {
        let start = pos;
        let mut legacy = payload[pos..pos + 4].to_vec();
        pos += 4;
        let segwit = payload[pos] == 0 && payload[pos + 1] == 1;
        if segwit {
            pos += 2;
        }
        let body_start = pos;
        let n_in = varint(payload, &mut pos);
        for _ in 0..n_in {
            pos += 36;
            let l = varint(payload, &mut pos);
            pos += l + 4;
        }
        let n_out = varint(payload, &mut pos);
        for _ in 0..n_out {
            pos += 8;
            let l = varint(payload, &mut pos);
            pos += l;
        }
        legacy.extend_from_slice(&payload[body_start..pos]);
        if segwit {
            for _ in 0..n_in {
                let items = varint(payload, &mut pos);
                for _ in 0..items {
                    let l = varint(payload, &mut pos);
                    pos += l;
                }
            }
        }
        legacy.extend_from_slice(&payload[pos..pos + 4]);
        pos += 4;
        out.push((legacy, payload[start..pos].to_vec()));
    }
    assert_eq!(pos, payload.len(), "trailing bytes after the last transaction");
    out
}

struct Txo {
    txid: Hash256,
    vout: u32,
    value: u64,
    script: Vec<u8>,
    spent: bool,
}

struct Tx {
    txid: Hash256,
    height: u64,
    coinbase: bool,
    excluded: bool,
    /// (slot, value), zero values dropped.
    inputs: Vec<(usize, u64)>,
    outputs: Vec<(usize, u64)>,
    coinbase_message: Vec<u8>,
    coinbase_outputs: Vec<(u64, Vec<u8>)>,
}

/// reveal, last_seen, total, min, max, sum
type EdgeAcc = (u64, u64, u64, BigUint, BigUint, BigUint);

fn op_return_payload(s: &[u8]) -> Option<&[u8]> {
    if s.first() != Some(&0x6a) || s.len() < 2 {
        return None;
    }
    let op = s[1];
    let (len, start) = match op {
        1..=75 => (op as usize, 2),
        0x4c => (*s.get(2)? as usize, 3),
        0x4d => (u16::from_le_bytes([*s.get(2)?, *s.get(3)?]) as usize, 4),
        0x4e => (u32::from_le_bytes(s.get(2..6)?.try_into().ok()?) as usize, 6),
        _ => return None,
    };
    s.get(start..start + len)
}

fn is_colored(tx: &forge_core::RawTransaction) -> bool {
    let marker = tx
        .outputs
        .iter()
        .filter_map(|o| op_return_payload(&o.lock_script))
        .any(|p| p.starts_with(&[0x4f, 0x41, 0x01, 0x00]) || p.starts_with(b"omni"));
    let epobc = tx
        .inputs
        .first()
        .is_some_and(|i| matches!(i.sequence & 0x3f, 0b10_0101 | 0b11_0011));
    marker || epobc
}

fn is_coinjoin(tx: &forge_core::RawTransaction, input_scripts: &[Vec<u8>]) -> bool {
    let distinct: BTreeSet<&Vec<u8>> = input_scripts.iter().collect();
    if distinct.len() < 3 {
        return false;
    }
    tx.outputs
        .iter()
        .filter(|o| o.value >= 10_000)
        .any(|o| tx.outputs.iter().filter(|p| p.value == o.value).count() >= 3)
}

fn fixed(raw: &BigUint) -> String {
    let v: u128 = raw.try_into().expect("amount fits in 128 bits");
    format!("{}", v as f64 / (1u64 << FRAC) as f64)
}

#[derive(Default, Clone)]
struct Side {
    count: u64,
    first: Option<u64>,
    last: Option<u64>,
    min: Option<BigUint>,
    max: BigUint,
    total: BigUint,
}

impl Side {
    fn push(&mut self, block: u64, v: &BigUint) {
        self.count += 1;
        self.first = Some(self.first.map_or(block, |f| f.min(block)));
        self.last = Some(self.last.map_or(block, |l| l.max(block)));
        if self.min.as_ref().is_none_or(|m| v < m) {
            self.min = Some(v.clone());
        }
        if *v > self.max {
            self.max = v.clone();
        }
        self.total += v;
    }
}

/// `(sender, recipient, value·2^52)` over arbitrary keys, floor division.
fn naive_attribute<K: Ord + Copy>(inputs: &[(K, u64)], outputs: &[(K, u64)]) -> Vec<(K, K, BigUint)> {
    let keys: BTreeSet<K> = inputs.iter().chain(outputs).map(|p| p.0).collect();
    let mut senders = Vec::new();
    let mut recipients = Vec::new();
    for k in keys {
        let spent: u64 = inputs.iter().filter(|p| p.0 == k).map(|p| p.1).sum();
        let got: u64 = outputs.iter().filter(|p| p.0 == k).map(|p| p.1).sum();
        if got > spent {
            recipients.push((k, got - spent));
        } else if spent > got {
            senders.push((k, spent));
        }
    }
    let denom: u64 = senders.iter().map(|s| s.1).sum();
    let mut out = Vec::new();
    if recipients.is_empty() {
        return out;
    }
    for &(s, spent) in &senders {
        for &(r, net) in &recipients {
            let num = (BigUint::from(spent) * BigUint::from(net)) << FRAC;
            out.push((s, r, num / BigUint::from(denom)));
        }
    }
    out
}

fn components(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut comp: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for &(a, b) in edges {
            let m = comp[a].min(comp[b]);
            if comp[a] != m || comp[b] != m {
                comp[a] = m;
                comp[b] = m;
                changed = true;
            }
        }
        if !changed {
            return comp;
        }
    }
}

/// Category per address from the label CSV plus coinbase tags.
fn naive_labels(labels_csv: &str, patterns: &str, txs: &[Tx]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for line in labels_csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() >= 3 && !f[0].is_empty() {
            out.push((f[0].to_string(), f[1].to_string()));
        }
    }
    let pats: Vec<&str> = patterns
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.rsplit_once(',').unwrap().0)
        .collect();
    for tx in txs.iter().filter(|t| t.coinbase) {
        let hit = pats
            .iter()
            .any(|p| tx.coinbase_message.windows(p.len()).any(|w| w == p.as_bytes()));
        if hit {
            for (value, script) in &tx.coinbase_outputs {
                if *value > 0 {
                    if let Some(a) = script_to_address(script) {
                        out.push((a, "mining".into()));
                    }
                }
            }
        }
    }
    out
}

fn address_matches(address: &str, script: &[u8]) -> bool {
    if script_to_address(script).as_deref() == Some(address) {
        return true;
    }
    // A hex public key also names the key-hash script of that key.
    let is_p2pkh = script.len() == 25 && script[..3] == [0x76, 0xa9, 0x14] && script[23..] == [0x88, 0xac];
    match hex::decode(address) {
        Ok(key) if is_p2pkh && (key.len() == 33 || key.len() == 65) => hash160(&key) == script[3..23],
        _ => false,
    }
}

pub fn reference_tables(
    blocks_dir: &Path,
    magic: NetworkMagic,
    height_limit: u64,
    labels_csv: &Path,
    patterns: &Path,
) -> ReferenceTables {
    let blocks = all_blocks(blocks_dir, magic);
    let chain = naive_main_chain(&blocks, height_limit);

    let mut txos: Vec<Txo> = Vec::new();
    let mut scripts: Vec<Vec<u8>> = Vec::new();
    let slot_of = |scripts: &mut Vec<Vec<u8>>, s: &[u8]| match scripts.iter().position(|x| x == s) {
        Some(i) => i,
        None => {
            scripts.push(s.to_vec());
            scripts.len() - 1
        }
    };
    let mut txs = Vec::new();
    for (height, &bi) in chain.iter().enumerate() {
        for raw in &blocks[bi].1.txs {
            let coinbase =
                raw.inputs.len() == 1 && raw.inputs[0].prev_txid.0 == [0u8; 32] && raw.inputs[0].prev_vout == u32::MAX;
            let mut inputs = Vec::new();
            let mut input_scripts = Vec::new();
            if !coinbase {
                for i in &raw.inputs {
                    let t = txos
                        .iter_mut()
                        .find(|t| !t.spent && t.txid == i.prev_txid && t.vout == i.prev_vout)
                        .expect("input spends a known output");
                    t.spent = true;
                    if t.value > 0 {
                        input_scripts.push(t.script.clone());
                        inputs.push((t.script.clone(), t.value));
                    }
                }
            }
            let inputs: Vec<(usize, u64)> = inputs
                .into_iter()
                .map(|(s, v)| (slot_of(&mut scripts, &s), v))
                .collect();
            let mut outputs = Vec::new();
            for (vout, o) in raw.outputs.iter().enumerate() {
                txos.push(Txo {
                    txid: raw.txid,
                    vout: vout as u32,
                    value: o.value,
                    script: o.lock_script.clone(),
                    spent: false,
                });
                if o.value > 0 {
                    outputs.push((slot_of(&mut scripts, &o.lock_script), o.value));
                }
            }
            let excluded = !coinbase && (is_coinjoin(raw, &input_scripts) || is_colored(raw));
            txs.push(Tx {
                txid: raw.txid,
                height: height as u64,
                coinbase,
                excluded: excluded || (coinbase && is_colored(raw)),
                inputs,
                outputs,
                coinbase_message: raw.inputs[0].unlock_script.clone(),
                coinbase_outputs: raw.outputs.iter().map(|o| (o.value, o.lock_script.clone())).collect(),
            });
        }
    }
    let kept: Vec<&Tx> = txs.iter().filter(|t| !t.coinbase && !t.excluded).collect();

    // Clusters: closure of "co-spent in a kept transaction".
    let mut links = Vec::new();
    for t in &kept {
        for w in t.inputs.windows(2) {
            links.push((w[0].0, w[1].0));
        }
    }
    let comp = components(scripts.len(), &links);
    let roots: BTreeSet<usize> = comp.iter().copied().collect();
    let roots: Vec<usize> = roots.into_iter().collect();
    let alias: Vec<u64> = comp.iter().map(|c| roots.binary_search(c).unwrap() as u64).collect();
    let n_clusters = roots.len();

    // Transfer events.
    let mut events: Vec<(u64, u64, BigUint, u64)> = Vec::new();
    let mut intra: BTreeMap<u64, BTreeSet<(usize, usize)>> = BTreeMap::new();
    for t in &kept {
        let ins: Vec<(u64, u64)> = t.inputs.iter().map(|&(s, v)| (alias[s], v)).collect();
        let outs: Vec<(u64, u64)> = t.outputs.iter().map(|&(s, v)| (alias[s], v)).collect();
        for (s, r, v) in naive_attribute(&ins, &outs) {
            events.push((s, r, v, t.height));
        }
        for (s, r, _) in naive_attribute(&t.inputs, &t.outputs) {
            if alias[s] == alias[r] {
                intra.entry(alias[s]).or_default().insert((s, r));
            }
        }
    }

    // Edges.
    let mut edges: BTreeMap<(u64, u64), EdgeAcc> = BTreeMap::new();
    for (s, r, v, h) in &events {
        let e = edges
            .entry((*s, *r))
            .or_insert((*h, *h, 0, v.clone(), v.clone(), BigUint::default()));
        e.0 = e.0.min(*h);
        e.1 = e.1.max(*h);
        e.2 += 1;
        if *v < e.3 {
            e.3 = v.clone();
        }
        if *v > e.4 {
            e.4 = v.clone();
        }
        e.5 += v;
    }
    let mut edges_csv = String::from("a,b,reveal,last_seen,total,min_sent,max_sent,total_sent\n");
    for ((a, b), (rev, last, n, lo, hi, sum)) in &edges {
        writeln!(
            edges_csv,
            "{a},{b},{rev},{last},{n},{},{},{}",
            fixed(lo),
            fixed(hi),
            fixed(sum)
        )
        .unwrap();
    }

    // Labels.
    let labels = naive_labels(
        &fs::read_to_string(labels_csv).unwrap(),
        &fs::read_to_string(patterns).unwrap(),
        &txs,
    );
    let mut cats: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
    for (address, cat) in &labels {
        for (slot, s) in scripts.iter().enumerate() {
            if address_matches(address, s) {
                cats.entry(alias[slot]).or_default().insert(cat.clone());
            }
        }
    }

    // Nodes.
    let mut nodes_csv = String::from(
        "alias,label,degree,degree_in,degree_out,total_transaction_in,total_transaction_out,\
         first_transaction_in,last_transaction_in,first_transaction_out,last_transaction_out,\
         min_sent,max_sent,total_sent,min_received,max_received,total_received,\
         cluster_size,cluster_num_edges,cluster_num_cc,cluster_num_nodes_in_cc\n",
    );
    let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    for a in 0..n_clusters as u64 {
        let mut sent = Side::default();
        let mut recv = Side::default();
        for (s, r, v, h) in &events {
            if *s == a {
                sent.push(*h, v);
            }
            if *r == a {
                recv.push(*h, v);
            }
        }
        let d_out = edges.keys().filter(|k| k.0 == a).count();
        let d_in = edges.keys().filter(|k| k.1 == a).count();
        let size = alias.iter().filter(|&&x| x == a).count();
        let pairs: Vec<(usize, usize)> = intra.get(&a).map(|p| p.iter().copied().collect()).unwrap_or_default();
        let members: BTreeSet<usize> = pairs.iter().flat_map(|&(x, y)| [x, y]).collect();
        let members: Vec<usize> = members.into_iter().collect();
        let local: Vec<(usize, usize)> = pairs
            .iter()
            .map(|(x, y)| (members.binary_search(x).unwrap(), members.binary_search(y).unwrap()))
            .collect();
        let cc: BTreeSet<usize> = components(members.len(), &local).into_iter().collect();
        let label = match cats.get(&a) {
            Some(c) if c.len() == 1 => c.iter().next().unwrap().clone(),
            _ => String::new(),
        };
        let zero = BigUint::default();
        writeln!(
            nodes_csv,
            "{a},{label},{},{d_in},{d_out},{},{},{},{},{},{},{},{},{},{},{},{},{size},{},{},{}",
            d_in + d_out,
            recv.count,
            sent.count,
            opt(recv.first),
            opt(recv.last),
            opt(sent.first),
            opt(sent.last),
            fixed(sent.min.as_ref().unwrap_or(&zero)),
            fixed(&sent.max),
            fixed(&sent.total),
            fixed(recv.min.as_ref().unwrap_or(&zero)),
            fixed(&recv.max),
            fixed(&recv.total),
            pairs.len(),
            cc.len(),
            members.len(),
        )
        .unwrap();
    }

    ReferenceTables {
        nodes_csv,
        edges_csv,
        excluded_txids: txs.iter().filter(|t| t.excluded).map(|t| t.txid).collect(),
    }
}
