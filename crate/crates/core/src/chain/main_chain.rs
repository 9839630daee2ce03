//! Main-chain selection over the headers found in block files.
//!
//! Block files are written in arrival order, not height order, and may hold
//! orphans or stale forks. Blocks are indexed by hash and linked through
//! `prev_hash`; the longest branch rooted at a genesis block (all-zero
//! `prev_hash`) wins, ties going to the tip seen first on disk.

use std::collections::HashMap;

use rayon::prelude::*;

use super::block::Block;
use super::blockfile::{BlockFile, BlockLocation, NetworkMagic};
use super::{ChainError, Hash256};

#[derive(Debug, Clone, Copy)]
pub struct ChainOptions {
    pub magic: NetworkMagic,
    /// Keep heights `0..height_limit`.
    pub height_limit: u64,
    /// Fail with [`ChainError::BrokenChain`] when the stored chain is shorter
    /// than `height_limit` instead of returning what is available.
    pub require_full: bool,
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions {
            magic: NetworkMagic::MAINNET,
            height_limit: 700_000,
            require_full: false,
        }
    }
}

/// One stored block, identified by file and position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeaderEntry {
    pub hash: Hash256,
    pub prev_hash: Hash256,
    pub timestamp: u32,
    pub file: usize,
    pub loc: BlockLocation,
}

/// Index every record header of every file. Files are scanned in parallel;
/// entries come back in (file, offset) order.
pub fn index_headers(files: &[BlockFile], magic: NetworkMagic) -> Result<Vec<HeaderEntry>, ChainError> {
    let per_file: Vec<Result<Vec<HeaderEntry>, ChainError>> = files
        .par_iter()
        .enumerate()
        .map(|(file_idx, file)| {
            let wrap = |source| ChainError::Parse {
                path: file.path.display().to_string(),
                source,
            };
            let locs = file.scan(magic).map_err(wrap)?;
            locs.into_iter()
                .map(|loc| {
                    let header = file.header_at(loc).map_err(wrap)?;
                    Ok(HeaderEntry {
                        hash: header.hash(),
                        prev_hash: header.prev_hash,
                        timestamp: header.timestamp,
                        file: file_idx,
                        loc,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for entries in per_file {
        out.extend(entries?);
    }
    Ok(out)
}

/// Pick the main chain. Returns indices into `entries`, position = height.
pub fn select_main_chain(entries: &[HeaderEntry], opts: &ChainOptions) -> Result<Vec<usize>, ChainError> {
    let mut by_hash: HashMap<Hash256, usize> = HashMap::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        by_hash.entry(e.hash).or_insert(i);
    }
    let mut children: HashMap<Hash256, Vec<usize>> = HashMap::new();
    let mut roots = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        if by_hash[&e.hash] != i {
            continue; // duplicate record of a block already indexed
        }
        if e.prev_hash.is_zero() {
            roots.push(i);
        } else {
            children.entry(e.prev_hash).or_default().push(i);
        }
    }
    if roots.is_empty() {
        return Err(ChainError::MissingGenesis);
    }

    // Depth-first walk from every genesis candidate, recording the deepest tip.
    let mut parent: Vec<Option<usize>> = vec![None; entries.len()];
    let mut best: Option<(u64, usize)> = None;
    let mut stack: Vec<(usize, u64)> = roots.iter().map(|&r| (r, 0)).collect();
    while let Some((idx, height)) = stack.pop() {
        match best {
            Some((h, i)) if h > height || (h == height && i < idx) => {}
            _ => best = Some((height, idx)),
        }
        if let Some(kids) = children.get(&entries[idx].hash) {
            for &k in kids {
                parent[k] = Some(idx);
                stack.push((k, height + 1));
            }
        }
    }
    let (tip_height, tip) = best.expect("at least one root");

    let mut chain = Vec::with_capacity(tip_height as usize + 1);
    let mut cursor = Some(tip);
    while let Some(i) = cursor {
        chain.push(i);
        cursor = parent[i];
    }
    chain.reverse();

    let available = chain.len() as u64;
    if opts.require_full && available < opts.height_limit {
        return Err(ChainError::BrokenChain { height: available });
    }
    chain.truncate(opts.height_limit.min(available) as usize);
    Ok(chain)
}

/// Decode the main chain held in `files`, heights `0..min(limit, available)`.
///
/// Every transaction gets its block height assigned.
pub fn build_main_chain(files: &[BlockFile], opts: &ChainOptions) -> Result<Vec<(u64, Block)>, ChainError> {
    let entries = index_headers(files, opts.magic)?;
    let chain = select_main_chain(&entries, opts)?;
    chain
        .par_iter()
        .enumerate()
        .map(|(height, &idx)| {
            let e = &entries[idx];
            let file = &files[e.file];
            let mut block = file.block_at(e.loc).map_err(|source| ChainError::Parse {
                path: file.path.display().to_string(),
                source,
            })?;
            block.set_height(height as u64);
            Ok((height as u64, block))
        })
        .collect()
}
