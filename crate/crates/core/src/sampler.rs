//! Bounded-fanout neighborhood sampling around labeled seeds, and the
//! neighborhood buffers consumed by trainers.
//!
//! The graph is treated as undirected. Each (seed, copy) pair draws from its
//! own ChaCha stream, so buffers are reproducible and can be built in any
//! order or in parallel.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::ClusterAlias;
use crate::labels::Category;
use crate::store::{Direction, GraphStore, StoreError};

pub const BUFFER_COPIES: usize = 12;
pub const BUFFER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("unknown alias {0}")]
    UnknownAlias(ClusterAlias),
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("no feature row for alias {0}")]
    MissingFeatures(ClusterAlias),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("store: {0}")]
    Store(StoreError),
}

impl From<StoreError> for SamplerError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownAlias(a) => SamplerError::UnknownAlias(a),
            other => SamplerError::Store(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub k_max: usize,
    pub fanouts: Vec<usize>,
    pub high_degree_threshold: usize,
    pub edge_sample_cap: usize,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            k_max: 2,
            fanouts: vec![10, 5],
            high_degree_threshold: 100_000,
            edge_sample_cap: 100_000,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::InvalidConfig(m));
        if self.k_max < 1 {
            return bad("k_max must be at least 1".into());
        }
        if self.fanouts.len() != self.k_max {
            return bad(format!("{} fanouts for k_max {}", self.fanouts.len(), self.k_max));
        }
        if self.fanouts.contains(&0) {
            return bad("fanouts must be at least 1".into());
        }
        if self.edge_sample_cap == 0 {
            return bad("edge_sample_cap must be at least 1".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).unwrap()))
    }

    /// Upper bound on nodes in one neighborhood: `1 + n_1 + n_1 n_2 + ...`.
    pub fn max_nodes(&self) -> usize {
        let mut total = 1usize;
        let mut level = 1usize;
        for &n in &self.fanouts {
            level = level.saturating_mul(n);
            total = total.saturating_add(level);
        }
        total
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for one (seed, copy) pair.
pub fn stream_rng(rng_seed: u64, seed: ClusterAlias, copy: usize) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(splitmix64(rng_seed) ^ seed.0) ^ copy as u64);
    ChaCha8Rng::seed_from_u64(s)
}

/// Sorted undirected neighbor set. Above the degree threshold the set comes
/// from a uniform sample of at most `edge_sample_cap` incident edges.
pub fn neighbors<R: Rng + ?Sized>(
    alias: ClusterAlias,
    cfg: &SamplerConfig,
    store: &GraphStore,
    rng: &mut R,
) -> Result<Vec<ClusterAlias>, SamplerError> {
    let degree = store.degree(alias, Direction::Both)?;
    let mut out: Vec<ClusterAlias> = if degree > cfg.high_degree_threshold {
        store
            .random_edge_sample(alias, cfg.edge_sample_cap, rng)?
            .into_iter()
            .map(|e| e.other(alias))
            .collect()
    } else {
        store
            .adjacency(alias, Direction::Both)?
            .map(|e| e.other(alias))
            .collect()
    };
    out.sort_unstable();
    out.dedup();
    out.retain(|&n| n != alias);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledNeighborhood {
    pub seed: ClusterAlias,
    /// `levels[0] == [seed]`; `levels[k]` holds the nodes selected at depth `k`.
    pub levels: Vec<Vec<ClusterAlias>>,
    /// `(parent, child)` in selection order.
    pub edges: Vec<(ClusterAlias, ClusterAlias)>,
}

impl SampledNeighborhood {
    /// All nodes, sorted.
    pub fn nodes(&self) -> Vec<ClusterAlias> {
        let mut v: Vec<ClusterAlias> = self.levels.iter().flatten().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn node_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }
}

/// Breadth-limited extraction: at depth `k` each frontier node keeps at most
/// `n_k` neighbors not yet explored, in the frontier, or already selected.
pub fn sample_neighborhood<R: Rng + ?Sized>(
    seed: ClusterAlias,
    cfg: &SamplerConfig,
    store: &GraphStore,
    rng: &mut R,
) -> Result<SampledNeighborhood, SamplerError> {
    if store.nodes.row_of(seed).is_none() {
        return Err(SamplerError::UnknownAlias(seed));
    }
    let mut levels = vec![vec![seed]];
    let mut edges = Vec::new();
    let mut seen: HashSet<ClusterAlias> = HashSet::from([seed]);
    for k in 0..cfg.k_max {
        let n_k = cfg.fanouts[k];
        let mut next = Vec::new();
        for &n in &levels[k] {
            let candidates: Vec<ClusterAlias> = neighbors(n, cfg, store, rng)?
                .into_iter()
                .filter(|c| !seen.contains(c))
                .collect();
            let chosen: Vec<ClusterAlias> = if candidates.len() > n_k {
                let mut idx = rand::seq::index::sample(rng, candidates.len(), n_k).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| candidates[i]).collect()
            } else {
                candidates
            };
            for c in chosen {
                seen.insert(c);
                edges.push((n, c));
                next.push(c);
            }
        }
        if next.is_empty() {
            break;
        }
        levels.push(next);
    }
    Ok(SampledNeighborhood { seed, levels, edges })
}

/// `copies` independent neighborhoods per seed, in seed order.
pub fn build_buffer(
    seeds: &[ClusterAlias],
    copies: usize,
    cfg: &SamplerConfig,
    store: &GraphStore,
) -> Result<Vec<Vec<SampledNeighborhood>>, SamplerError> {
    cfg.validate()?;
    seeds
        .par_iter()
        .map(|&seed| {
            (0..copies)
                .map(|c| sample_neighborhood(seed, cfg, store, &mut stream_rng(cfg.rng_seed, seed, c)))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<ClusterAlias>,
    pub validation: Vec<ClusterAlias>,
    pub test: Vec<ClusterAlias>,
}

impl Splits {
    pub fn named(&self) -> [(&'static str, &[ClusterAlias]); 3] {
        [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }
}

/// Seeded per-class 40/30/30 split; every class with a seed has one in train.
pub fn stratified_split(labeled: &[(ClusterAlias, Category)], rng_seed: u64) -> Splits {
    let mut by_class: BTreeMap<Category, Vec<ClusterAlias>> = BTreeMap::new();
    for &(a, c) in labeled {
        by_class.entry(c).or_default().push(a);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(rng_seed ^ SPLIT_STREAM));
    let mut splits = Splits {
        train: vec![],
        validation: vec![],
        test: vec![],
    };
    for (_, mut members) in by_class {
        members.sort_unstable();
        members.dedup();
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = ((n * 4 + 5) / 10).max(1);
        let n_val = ((n * 3 + 5) / 10).min(n - n_train);
        splits.train.extend_from_slice(&members[..n_train]);
        splits.validation.extend_from_slice(&members[n_train..n_train + n_val]);
        splits.test.extend_from_slice(&members[n_train + n_val..]);
    }
    splits.train.sort_unstable();
    splits.validation.sort_unstable();
    splits.test.sort_unstable();
    splits
}

const SPLIT_STREAM: u64 = 0x5eed_0000_0000_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodNode {
    pub alias: ClusterAlias,
    pub features: Vec<f64>,
    pub label: Option<Category>,
}

/// One neighborhood as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodFile {
    pub seed: ClusterAlias,
    pub copy: usize,
    pub config_hash: String,
    pub feature_manifest_hash: String,
    pub nodes: Vec<NeighborhoodNode>,
    pub edges: Vec<(ClusterAlias, ClusterAlias)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub seed: ClusterAlias,
    pub label: Option<Category>,
    /// Paths relative to the manifest's directory, one per copy.
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferManifest {
    pub version: u32,
    pub config_hash: String,
    pub feature_manifest_hash: String,
    pub feature_names: Vec<String>,
    pub copies: usize,
    pub splits: BTreeMap<String, Vec<BufferEntry>>,
}

impl BufferManifest {
    pub fn read(path: &Path) -> Result<Self, SamplerError> {
        let bytes = fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| SamplerError::Io(io::Error::other(e)))
    }
}

/// Writes one JSON file per (seed, copy) under `dir/split/` and returns the
/// manifest entries. `row` supplies the normalized features and label of a
/// node.
pub fn write_split(
    dir: &Path,
    split: &str,
    buffer: &[Vec<SampledNeighborhood>],
    config_hash: &str,
    feature_manifest_hash: &str,
    row: &(dyn Fn(ClusterAlias) -> Option<(Vec<f64>, Option<Category>)> + Sync),
) -> Result<Vec<BufferEntry>, SamplerError> {
    fs::create_dir_all(dir.join(split))?;
    buffer
        .par_iter()
        .map(|copies| {
            let seed = copies[0].seed;
            let mut files = Vec::with_capacity(copies.len());
            for (copy, hood) in copies.iter().enumerate() {
                let nodes = hood
                    .nodes()
                    .into_iter()
                    .map(|alias| {
                        let (features, label) = row(alias).ok_or(SamplerError::MissingFeatures(alias))?;
                        Ok(NeighborhoodNode { alias, features, label })
                    })
                    .collect::<Result<Vec<_>, SamplerError>>()?;
                let file = NeighborhoodFile {
                    seed,
                    copy,
                    config_hash: config_hash.into(),
                    feature_manifest_hash: feature_manifest_hash.into(),
                    nodes,
                    edges: hood.edges.clone(),
                };
                let rel = PathBuf::from(split).join(format!("{}_{:02}.json", seed.0, copy));
                fs::write(dir.join(&rel), serde_json::to_vec(&file).map_err(io::Error::other)?)?;
                files.push(rel);
            }
            let label = row(seed).and_then(|(_, l)| l);
            Ok(BufferEntry { seed, label, files })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{StoredEdge, StoredNode};

    fn graph(n: u64, edges: &[(u64, u64)]) -> GraphStore {
        let nodes = (0..n)
            .map(|a| StoredNode {
                alias: ClusterAlias(a),
                ..Default::default()
            })
            .collect();
        let edges = edges
            .iter()
            .map(|&(a, b)| StoredEdge {
                a: ClusterAlias(a),
                b: ClusterAlias(b),
                total: 1,
                ..Default::default()
            })
            .collect();
        GraphStore::new(nodes, edges).unwrap()
    }

    fn aliases(v: &[u64]) -> Vec<ClusterAlias> {
        v.iter().map(|&a| ClusterAlias(a)).collect()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn undirected_neighbors() {
        let g = graph(3, &[(0, 1), (2, 0)]);
        let cfg = SamplerConfig::default();
        assert_eq!(
            neighbors(ClusterAlias(0), &cfg, &g, &mut rng()).unwrap(),
            aliases(&[1, 2])
        );
        assert!(matches!(
            neighbors(ClusterAlias(5), &cfg, &g, &mut rng()),
            Err(SamplerError::UnknownAlias(_))
        ));
    }

    #[test]
    fn high_degree_fallback_caps_neighbors() {
        let edges: Vec<(u64, u64)> = (1..=50).map(|i| (0, i)).collect();
        let g = graph(51, &edges);
        let cfg = SamplerConfig {
            high_degree_threshold: 20,
            edge_sample_cap: 8,
            ..Default::default()
        };
        assert_eq!(neighbors(ClusterAlias(0), &cfg, &g, &mut rng()).unwrap().len(), 8);
        assert_eq!(neighbors(ClusterAlias(3), &cfg, &g, &mut rng()).unwrap(), aliases(&[0]));
    }

    #[test]
    fn path_graph_is_fully_explored() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let h = sample_neighborhood(ClusterAlias(0), &SamplerConfig::default(), &g, &mut rng()).unwrap();
        assert_eq!(h.nodes(), aliases(&[0, 1, 2]));
        assert_eq!(
            h.edges,
            vec![(ClusterAlias(0), ClusterAlias(1)), (ClusterAlias(1), ClusterAlias(2))]
        );
    }

    #[test]
    fn star_respects_fanout() {
        let edges: Vec<(u64, u64)> = (1..=20).map(|i| (0, i)).collect();
        let g = graph(21, &edges);
        let h = sample_neighborhood(ClusterAlias(0), &SamplerConfig::default(), &g, &mut rng()).unwrap();
        assert_eq!(h.node_count(), 11);
        assert_eq!(h.edges.len(), 10);
    }

    #[test]
    fn isolated_seed() {
        let g = graph(2, &[]);
        let h = sample_neighborhood(ClusterAlias(1), &SamplerConfig::default(), &g, &mut rng()).unwrap();
        assert_eq!(h.nodes(), aliases(&[1]));
        assert!(h.edges.is_empty());
    }

    #[test]
    fn triangle_does_not_revisit() {
        let g = graph(3, &[(0, 1), (1, 2), (2, 0)]);
        let h = sample_neighborhood(ClusterAlias(0), &SamplerConfig::default(), &g, &mut rng()).unwrap();
        assert_eq!(h.levels, vec![aliases(&[0]), aliases(&[1, 2])]);
        assert_eq!(h.edges.len(), 2);
    }

    #[test]
    fn buffer_shape_and_determinism() {
        let edges: Vec<(u64, u64)> = (1..=30).map(|i| (i % 7, i)).collect();
        let g = graph(31, &edges);
        let seeds = aliases(&(0..10).collect::<Vec<_>>());
        let cfg = SamplerConfig {
            fanouts: vec![2, 2],
            rng_seed: 99,
            ..Default::default()
        };
        let a = build_buffer(&seeds, BUFFER_COPIES, &cfg, &g).unwrap();
        assert_eq!(a.iter().map(Vec::len).sum::<usize>(), 120);
        assert_eq!(a, build_buffer(&seeds, BUFFER_COPIES, &cfg, &g).unwrap());
        let one = build_buffer(&seeds, 1, &cfg, &g).unwrap();
        assert_eq!(one[3][0], a[3][0]);
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        let bad = SamplerConfig {
            fanouts: vec![3],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(SamplerConfig::default().max_nodes(), 61);
    }

    #[test]
    fn split_fractions() {
        let labeled: Vec<(ClusterAlias, Category)> = (0..100)
            .map(|i| (ClusterAlias(i), Category::Exchange))
            .chain([(ClusterAlias(500), Category::Ponzi)])
            .collect();
        let s = stratified_split(&labeled, 3);
        assert_eq!(s.train.len(), 41);
        assert_eq!(s.validation.len(), 30);
        assert_eq!(s.test.len(), 30);
        assert!(s.train.contains(&ClusterAlias(500)));
        assert_eq!(s, stratified_split(&labeled, 3));
        let all: HashSet<_> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
        assert_eq!(all.len(), 101);
    }

    #[test]
    fn files_and_manifest_entries() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let cfg = SamplerConfig::default();
        let buf = build_buffer(&aliases(&[0]), 2, &cfg, &g).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let row = |a: ClusterAlias| Some((vec![a.0 as f64 / 10.0], (a.0 == 0).then_some(Category::Bet)));
        let entries = write_split(dir.path(), "train", &buf, &cfg.hash(), "h", &row).unwrap();
        assert_eq!(entries[0].files.len(), 2);
        assert_eq!(entries[0].label, Some(Category::Bet));
        let f: NeighborhoodFile =
            serde_json::from_slice(&fs::read(dir.path().join(&entries[0].files[1])).unwrap()).unwrap();
        assert_eq!(f.copy, 1);
        assert_eq!(f.nodes.len(), 3);
        assert_eq!(f.nodes[2].features, vec![0.2]);
    }
}
