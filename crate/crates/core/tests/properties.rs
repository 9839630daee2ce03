use std::collections::{BTreeMap, BTreeSet, HashMap};

use forge_core::amount::FRAC_BITS;
use forge_core::chain::{
    parse_transaction, select_main_chain, BlockLocation, ChainOptions, Hash256, HeaderEntry, RawTransaction, ScriptId,
    TxIn, TxOut,
};
use forge_core::cluster::{cluster_internal_stats, ClusterAlias, ScriptTransfer};
use forge_core::edges::{aggregate_edges, attribute, TransferEvent};
use forge_core::features::{compute_age, fit_normalization, FeatureManifest};
use forge_core::filters::{evaluate, FilterConfig};
use forge_core::labels::{propagate_with, Category, LabelRecord};
use forge_core::nodes::compute_node_attributes;
use forge_core::sampler::{sample_neighborhood, stream_rng, SamplerConfig};
use forge_core::store::{read_edges_csv, read_nodes_csv, Direction, GraphStore, StoredEdge, StoredNode};
use forge_core::Amount;
use proptest::prelude::*;

type Sides = (Vec<(u8, u64)>, Vec<(u8, u64)>);

/// Inputs and outputs over a few keys with outputs never exceeding inputs.
fn tx_sides() -> impl Strategy<Value = Sides> {
    (
        prop::collection::vec((0u8..6, 1u64..2_100_000_000_000_000), 1..8),
        prop::collection::vec((0u8..6, 1u64..=1_000_000), 1..8),
    )
        .prop_map(|(inputs, weights)| {
            let total: u128 = inputs.iter().map(|&(_, v)| u128::from(v)).sum();
            let fee = total / 100;
            let wsum: u128 = weights.iter().map(|&(_, w)| u128::from(w)).sum();
            let outputs = weights
                .iter()
                .map(|&(k, w)| (k, ((total - fee) * u128::from(w) / wsum) as u64))
                .filter(|&(_, v)| v > 0)
                .collect();
            (inputs, outputs)
        })
}

fn gross(side: &[(u8, u64)]) -> BTreeMap<u8, u128> {
    let mut m = BTreeMap::new();
    for &(k, v) in side {
        *m.entry(k).or_default() += u128::from(v);
    }
    m
}

fn sid(i: u64) -> ScriptId {
    let mut b = [0u8; 33];
    b[1..9].copy_from_slice(&i.to_le_bytes());
    ScriptId(b)
}

fn graph(n: u64, pairs: &[(u64, u64)]) -> GraphStore {
    let nodes = (0..n)
        .map(|a| StoredNode {
            alias: ClusterAlias(a),
            cluster_size: 1,
            ..Default::default()
        })
        .collect();
    let keys: BTreeSet<(u64, u64)> = pairs
        .iter()
        .map(|&(a, b)| (a % n, b % n))
        .filter(|(a, b)| a != b)
        .collect();
    let edges = keys
        .into_iter()
        .map(|(a, b)| StoredEdge {
            a: ClusterAlias(a),
            b: ClusterAlias(b),
            reveal: a,
            last_seen: a + b,
            total: 1 + (a ^ b) % 7,
            min_sent: 0.5,
            max_sent: 1.25 + a as f64,
            total_sent: 3.0 + b as f64 / 3.0,
        })
        .collect();
    GraphStore::new(nodes, edges).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn attribution_conserves_each_recipients_net((inputs, outputs) in tx_sides()) {
        let events = attribute(&inputs, &outputs);
        let spent = gross(&inputs);
        let recv = gross(&outputs);
        let keys: BTreeSet<u8> = spent.keys().chain(recv.keys()).copied().collect();
        let net = |k: u8| recv.get(&k).copied().unwrap_or(0) as i128 - spent.get(&k).copied().unwrap_or(0) as i128;
        let senders = keys.iter().filter(|&&k| net(k) < 0).count() as u128;
        for &k in &keys {
            let incoming: u128 = events.iter().filter(|e| e.1 == k).map(|e| e.2.raw()).sum();
            let outgoing: u128 = events.iter().filter(|e| e.0 == k).map(|e| e.2.raw()).sum();
            prop_assert!(incoming == 0 || outgoing == 0, "key {} on both sides", k);
            if net(k) > 0 && senders > 0 {
                let exact = (net(k) as u128) << FRAC_BITS;
                prop_assert!(incoming <= exact && exact - incoming < senders, "key {}: {} vs {}", k, incoming, exact);
            } else {
                prop_assert_eq!(incoming, 0);
            }
            prop_assert!(outgoing <= spent.get(&k).copied().unwrap_or(0) << FRAC_BITS, "sender bound for {}", k);
        }
        for e in &events {
            prop_assert!(e.0 != e.1 && !e.2.is_zero());
        }
    }

    #[test]
    fn attribution_ignores_txo_order((inputs, outputs) in tx_sides(), rot in 0usize..8) {
        let mut a = attribute(&inputs, &outputs);
        let mut ri = inputs.clone();
        let mut ro = outputs.clone();
        let r = rot % ri.len();
        ri.rotate_left(r);
        ro.reverse();
        let mut b = attribute(&ri, &ro);
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn node_table_received_equals_sent(
        raw in prop::collection::vec((0u64..12, 0u64..12, 1u64..1_000_000_000, 0u64..500), 0..120),
    ) {
        let events: Vec<TransferEvent> = raw
            .iter()
            .filter(|r| r.0 != r.1)
            .map(|&(s, r, v, b)| TransferEvent {
                sender: ClusterAlias(s),
                recipient: ClusterAlias(r),
                value: Amount::from_sats(v),
                block: b,
            })
            .collect();
        let edges = aggregate_edges(&events);
        let nodes = compute_node_attributes(&events, &edges, &[]).unwrap();
        let sent: Amount = nodes.iter().map(|n| n.total_sent).sum();
        let received: Amount = nodes.iter().map(|n| n.total_received).sum();
        prop_assert_eq!(sent, received);
        let deg_in: u64 = nodes.iter().map(|n| n.degree_in).sum();
        let deg_out: u64 = nodes.iter().map(|n| n.degree_out).sum();
        prop_assert_eq!(deg_in, edges.len() as u64);
        prop_assert_eq!(deg_out, edges.len() as u64);
        for n in &nodes {
            prop_assert_eq!(n.degree, n.degree_in + n.degree_out);
            prop_assert!(n.min_sent <= n.max_sent && n.max_sent <= n.total_sent);
            prop_assert!(n.min_received <= n.max_received && n.max_received <= n.total_received);
            prop_assert!(n.first_transaction_in <= n.last_transaction_in);
            prop_assert!(n.first_transaction_out <= n.last_transaction_out);
        }
        for e in &edges {
            prop_assert!(e.reveal <= e.last_seen);
            prop_assert!(e.min_sent <= e.max_sent && e.max_sent <= e.total_sent);
        }
    }

    #[test]
    fn cluster_stats_inequalities(size in 1u64..30, pairs in prop::collection::vec((0u64..30, 0u64..30), 0..80)) {
        let transfers = pairs
            .iter()
            .map(|&(a, b)| ScriptTransfer { sender: a % size, recipient: b % size });
        let s = cluster_internal_stats(size, transfers);
        prop_assert_eq!(s.cluster_size, size);
        prop_assert!(s.cluster_num_nodes_in_cc <= s.cluster_size);
        prop_assert!(s.cluster_num_cc <= s.cluster_num_nodes_in_cc);
        prop_assert!(s.cluster_num_edges <= size * (size - 1));
        prop_assert!(s.cluster_num_nodes_in_cc <= 2 * s.cluster_num_edges);
        prop_assert_eq!(s.cluster_num_edges == 0, s.cluster_num_nodes_in_cc == 0);
        prop_assert!(s.cluster_num_cc * 2 <= s.cluster_num_nodes_in_cc);
    }

    #[test]
    fn store_degrees_and_adjacency(n in 1u64..40, pairs in prop::collection::vec((0u64..40, 0u64..40), 0..150)) {
        let g = graph(n, &pairs);
        let (_, m) = g.counts();
        let mut out_sum = 0;
        let mut in_sum = 0;
        let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
        for a in 0..n {
            let alias = ClusterAlias(a);
            let (o, i, both) = (
                g.degree(alias, Direction::Out).unwrap(),
                g.degree(alias, Direction::In).unwrap(),
                g.degree(alias, Direction::Both).unwrap(),
            );
            prop_assert_eq!(both, o + i);
            out_sum += o;
            in_sum += i;
            let adj: Vec<&StoredEdge> = g.adjacency(alias, Direction::Both).unwrap().collect();
            prop_assert_eq!(adj.len(), both);
            for e in adj {
                prop_assert!(e.a == alias || e.b == alias);
                *seen.entry((e.a.0, e.b.0)).or_default() += 1;
            }
        }
        prop_assert_eq!(out_sum, m);
        prop_assert_eq!(in_sum, m);
        prop_assert_eq!(seen.len(), m);
        prop_assert!(seen.values().all(|&c| c == 2));
        prop_assert!(g.degree(ClusterAlias(n), Direction::Both).is_err());
    }

    #[test]
    fn store_csv_and_binary_round_trip(n in 1u64..30, pairs in prop::collection::vec((0u64..30, 0u64..30), 0..90)) {
        let g = graph(n, &pairs);
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        g.write_nodes_csv(&mut nodes).unwrap();
        g.write_edges_csv(&mut edges).unwrap();
        let again = GraphStore::import_csv(&nodes[..], &edges[..]).unwrap();
        prop_assert_eq!(read_nodes_csv(&nodes[..]).unwrap(), g.nodes.rows().to_vec());
        prop_assert_eq!(read_edges_csv(&edges[..]).unwrap(), g.edges.edges().to_vec());
        prop_assert_eq!(again.nodes.rows(), g.nodes.rows());
        prop_assert_eq!(again.edges.edges(), g.edges.edges());

        let dir = tempfile::tempdir().unwrap();
        g.write_binary(dir.path()).unwrap();
        let back = GraphStore::read_binary(dir.path()).unwrap();
        prop_assert_eq!(back.nodes.rows(), g.nodes.rows());
        prop_assert_eq!(back.edges.edges(), g.edges.edges());
    }

    #[test]
    fn normalization_bounded_monotone_reproducible(
        rows in prop::collection::vec(prop::collection::vec(prop_oneof![Just(0.0), Just(f64::NAN), 1e-6f64..1e12], 34), 1..40),
        probes in prop::collection::vec((0usize..34, 1e-9f64..1e15, 1e-9f64..1e15), 50),
    ) {
        let manifest = FeatureManifest::standard();
        let c = fit_normalization(&rows, &manifest, "train").unwrap();
        // NaN anchors of empty features defeat ==
        prop_assert_eq!(format!("{c:?}"), format!("{:?}", fit_normalization(&rows, &manifest, "train").unwrap()));
        for f in &c.features {
            prop_assert!(f.degenerate || f.q_low < f.q95);
        }
        for (j, x, y) in probes {
            let f = &c.features[j];
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            let (a, b) = (f.apply(lo), f.apply(hi));
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
            prop_assert!(a <= b, "{}: {} -> {}, {} -> {}", f.name, lo, a, hi, b);
            prop_assert_eq!(f.apply(-x), 0.0);
        }
    }

    #[test]
    fn age_is_last_minus_first_activity(
        fi in prop::option::of(0u64..1000), di in 0u64..1000,
        fo in prop::option::of(0u64..1000), d_o in 0u64..1000,
    ) {
        let node = StoredNode {
            first_transaction_in: fi,
            last_transaction_in: fi.map(|f| f + di),
            first_transaction_out: fo,
            last_transaction_out: fo.map(|f| f + d_o),
            ..Default::default()
        };
        match compute_age(&node) {
            Ok(age) => {
                let first = fi.into_iter().chain(fo).min().unwrap();
                let last = fi.map(|f| f + di).into_iter().chain(fo.map(|f| f + d_o)).max().unwrap();
                prop_assert_eq!(age, last - first);
            }
            Err(_) => prop_assert!(fi.is_none() && fo.is_none()),
        }
    }

    #[test]
    fn label_propagation_invariants(
        records in prop::collection::vec((0u64..30, 0usize..3), 0..40),
        clusters in prop::collection::vec(0u64..8, 30),
        drop in 0usize..40,
    ) {
        let cats = [Category::Exchange, Category::Mixer, Category::Gambling];
        let labels: Vec<LabelRecord> = records
            .iter()
            .map(|&(a, c)| LabelRecord {
                address: format!("addr{a}"),
                category: cats[c],
                source: "test".into(),
                entity_name: None,
            })
            .collect();
        // addresses 25.. have no script on chain
        let index = |addr: &str| Ok(BTreeSet::from([sid(addr[4..].parse().unwrap())]));
        let cluster_of = |id: &ScriptId| {
            let i = u64::from_le_bytes(id.0[1..9].try_into().unwrap());
            (i < 25).then(|| ClusterAlias(clusters[i as usize]))
        };
        let p = propagate_with(&labels, index, cluster_of);
        prop_assert_eq!(&p, &propagate_with(&labels, index, cluster_of));

        let matched: BTreeSet<&str> = labels
            .iter()
            .filter(|l| !p.unmatched.contains(&l.address))
            .map(|l| l.address.as_str())
            .collect();
        prop_assert!(p.labels.len() <= matched.len());
        let contributing: u64 = p.labels.iter().map(|l| l.contributing_addresses).sum();
        prop_assert!(contributing as usize <= matched.len());
        for l in &p.labels {
            prop_assert!(!p.conflicted.contains(&l.alias));
            let expected: BTreeSet<Category> = labels
                .iter()
                .filter(|r| cluster_of(&sid(r.address[4..].parse().unwrap())) == Some(l.alias))
                .map(|r| r.category)
                .collect();
            prop_assert_eq!(expected, BTreeSet::from([l.category]));
        }

        if !labels.is_empty() {
            let mut fewer = labels.clone();
            fewer.remove(drop % labels.len());
            let q = propagate_with(&fewer, index, cluster_of);
            let before: BTreeMap<ClusterAlias, Category> = p.labels.iter().map(|l| (l.alias, l.category)).collect();
            for l in &q.labels {
                match before.get(&l.alias) {
                    Some(&c) => prop_assert_eq!(c, l.category),
                    None => prop_assert!(p.conflicted.contains(&l.alias)),
                }
            }
            for a in &q.conflicted {
                prop_assert!(p.conflicted.contains(a));
            }
        }
    }

    #[test]
    fn sampled_neighborhood_is_a_bounded_tree(
        n in 2u64..80,
        pairs in prop::collection::vec((0u64..80, 0u64..80), 0..400),
        seed in 0u64..80,
        copy in 0usize..12,
        f1 in 1usize..12,
        f2 in 1usize..8,
    ) {
        let g = graph(n, &pairs);
        let cfg = SamplerConfig { fanouts: vec![f1, f2], ..SamplerConfig::default() };
        let seed = ClusterAlias(seed % n);
        let h = sample_neighborhood(seed, &cfg, &g, &mut stream_rng(cfg.rng_seed, seed, copy)).unwrap();
        prop_assert_eq!(&h.levels[0], &vec![seed]);
        prop_assert!(h.levels.len() <= cfg.k_max + 1);
        let nodes = h.nodes();
        let distinct: BTreeSet<ClusterAlias> = nodes.iter().copied().collect();
        prop_assert_eq!(distinct.len(), nodes.len());
        prop_assert!(nodes.len() <= cfg.max_nodes());
        prop_assert_eq!(h.edges.len(), nodes.len() - 1);
        let mut kids: HashMap<ClusterAlias, usize> = HashMap::new();
        let mut parent_of = HashMap::new();
        for &(p, c) in &h.edges {
            prop_assert!(parent_of.insert(c, p).is_none());
            *kids.entry(p).or_default() += 1;
        }
        for (k, level) in h.levels.iter().enumerate().skip(1) {
            for c in level {
                let p = parent_of[c];
                prop_assert!(h.levels[k - 1].contains(&p));
            }
        }
        for (k, level) in h.levels.iter().enumerate().take(cfg.k_max) {
            for p in level {
                prop_assert!(kids.get(p).copied().unwrap_or(0) <= cfg.fanouts[k]);
            }
        }
        let again = sample_neighborhood(seed, &cfg, &g, &mut stream_rng(cfg.rng_seed, seed, copy)).unwrap();
        prop_assert_eq!(h, again);
    }

    #[test]
    fn transaction_round_trip(
        version in any::<i32>(),
        ins in prop::collection::vec((any::<[u8; 32]>(), any::<u32>(), prop::collection::vec(any::<u8>(), 0..80), any::<u32>()), 1..5),
        outs in prop::collection::vec((0u64..=2_100_000_000_000_000, prop::collection::vec(any::<u8>(), 0..60)), 0..5),
        locktime in any::<u32>(),
        witness in prop::option::of(prop::collection::vec(prop::collection::vec(any::<u8>(), 0..40), 0..3)),
    ) {
        let inputs: Vec<TxIn> = ins
            .into_iter()
            .map(|(h, v, s, q)| TxIn { prev_txid: Hash256(h), prev_vout: v, unlock_script: s, sequence: q })
            .collect();
        let n_in = inputs.len();
        let witness = witness.map(|stack| vec![stack; n_in]);
        let outputs = outs.into_iter().map(|(value, lock_script)| TxOut { value, lock_script }).collect();
        let tx = RawTransaction::new(version, inputs, outputs, locktime, witness);
        let bytes = tx.serialize();
        let (back, used) = parse_transaction(&bytes, 0).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back.txid, Hash256::double_sha256(&tx.serialize_legacy()));
        prop_assert_eq!(back, tx);
    }

    #[test]
    fn filter_verdict_is_pure(
        values in prop::collection::vec(prop_oneof![Just(50_000u64), 1u64..1_000_000], 1..8),
        scripts in prop::collection::vec(0u64..6, 1..8),
        rot in 0usize..8,
        height in 0u64..1_000_000,
    ) {
        let inputs = scripts
            .iter()
            .enumerate()
            .map(|(i, _)| TxIn { prev_txid: Hash256([i as u8 + 1; 32]), prev_vout: 0, unlock_script: vec![], sequence: u32::MAX })
            .collect();
        let outputs = values.iter().map(|&value| TxOut { value, lock_script: vec![0x51] }).collect();
        let mut tx = RawTransaction::new(1, inputs, outputs, 0, None);
        let ids: Vec<ScriptId> = scripts.iter().map(|&s| sid(s)).collect();
        let cfg = FilterConfig::default();
        let v = evaluate(&tx, &ids, &cfg);
        prop_assert_eq!(&v, &evaluate(&tx, &ids, &cfg));
        let mut rotated = ids.clone();
        rotated.rotate_left(rot % ids.len());
        prop_assert_eq!(&v, &evaluate(&tx, &rotated, &cfg));
        tx.block_height = height;
        prop_assert_eq!(&v, &evaluate(&tx, &ids, &cfg));
        let repeated = values
            .iter()
            .any(|&x| x >= 10_000 && values.iter().filter(|&&y| y == x).count() >= 3);
        let distinct = scripts.iter().collect::<BTreeSet<_>>().len();
        prop_assert_eq!(v.is_coinjoin, repeated && distinct >= 3);
    }

    #[test]
    fn main_chain_heights_are_consecutive(
        parents in prop::collection::vec(prop::option::of(any::<prop::sample::Index>()), 1..60),
        limit in 1u64..80,
    ) {
        // block i extends an earlier block, or is a genesis when None
        let hash = |i: usize| {
            let mut h = [0u8; 32];
            h[..8].copy_from_slice(&(i as u64 + 1).to_le_bytes());
            Hash256(h)
        };
        let mut depth = Vec::new();
        let entries: Vec<HeaderEntry> = parents
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let parent = p.filter(|_| i > 0).map(|ix| ix.index(i));
                depth.push(parent.map_or(0, |q| depth[q] + 1));
                HeaderEntry {
                    hash: hash(i),
                    prev_hash: parent.map_or(Hash256::ZERO, hash),
                    timestamp: i as u32,
                    file: 0,
                    loc: BlockLocation { offset: i * 100, len: 80 },
                }
            })
            .collect();
        let opts = ChainOptions { height_limit: limit, ..ChainOptions::default() };
        let chain = select_main_chain(&entries, &opts).unwrap();
        let longest = depth.iter().max().unwrap() + 1;
        prop_assert_eq!(chain.len() as u64, (longest as u64).min(limit));
        prop_assert!(entries[chain[0]].prev_hash.is_zero());
        for (h, w) in chain.windows(2).enumerate() {
            prop_assert_eq!(entries[w[1]].prev_hash, entries[w[0]].hash);
            prop_assert_eq!(depth[w[1]], h + 1);
        }
        let tip = depth.iter().position(|&d| d + 1 == longest).unwrap();
        if limit as usize >= longest {
            prop_assert_eq!(*chain.last().unwrap(), tip);
        }
        let full = select_main_chain(&entries, &ChainOptions { require_full: true, ..opts });
        prop_assert_eq!(full.is_ok(), limit as usize <= longest);
    }
}
