use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{Config, PipelineError, Stage, Work};
use crate::chain::{
    index_headers, list_block_files, parse_transaction, select_main_chain, Block, BlockFile, BlockLocation, ChainError,
    ScriptId, HEADER_LEN,
};
use crate::cluster::{
    apply_rules, finalize_aliases, ClusterAlias, ClusterIndex, ClusterMap, CommonInputRule, IntraClusterGraph,
};
use crate::edges::{attribute, resolved_transfers, write_edges_csv, EdgeAggregator};
use crate::features::{
    derive_features, fit_normalization, normalize, BlockDates, FeatureManifest, FeatureMatrix, RatesTable,
};
use crate::labels::{
    extract_coinbase_tags_from_txs, load_labels, load_patterns, propagate, write_cluster_labels_csv, Category,
};
use crate::nodes::{compute_node_attributes, write_nodes_csv};
use crate::resolve::{read_resolved, write_resolved, ResolvedTx, Resolver, ScriptTable};
use crate::sampler::{build_buffer, stratified_split, write_split, BufferManifest, BUFFER_FORMAT_VERSION};
use crate::store::{read_nodes_csv, ExportFormat, GraphStore};

pub(super) fn execute(stage: Stage, cfg: &Config, out: &Path, dir: &Path) -> Result<Work, PipelineError> {
    match stage {
        Stage::Parse => parse(cfg, dir),
        Stage::Filter => filter(cfg, out, dir),
        Stage::Cluster => cluster(out, dir),
        Stage::Edges => edges(out, dir),
        Stage::Attributes => attributes(out, dir),
        Stage::Label => label(cfg, out, dir),
        Stage::Features => features(cfg, out, dir),
        Stage::Sample => sample(cfg, out, dir),
        Stage::Export => export(cfg, out, dir),
    }
}

fn create(path: &Path) -> io::Result<BufWriter<File>> {
    Ok(BufWriter::with_capacity(1 << 20, File::create(path)?))
}

fn open(path: &Path) -> io::Result<BufReader<File>> {
    Ok(BufReader::with_capacity(1 << 20, File::open(path)?))
}

fn parse_err(path: &Path, source: crate::chain::ParseError) -> PipelineError {
    PipelineError::Chain(ChainError::Parse {
        path: path.display().to_string(),
        source,
    })
}

const CHAIN_HEADER: &str = "height,file,offset,len,hash,timestamp";

struct ChainRow {
    file: String,
    loc: BlockLocation,
    timestamp: u32,
}

fn parse(cfg: &Config, dir: &Path) -> Result<Work, PipelineError> {
    let opts = cfg.chain_options()?;
    let blocks_dir = cfg.resolve(&cfg.chain.blocks_dir);
    let paths = list_block_files(&blocks_dir)?;
    let names: Vec<String> = paths
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();

    // Header index, one file in memory at a time.
    let mut entries = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let file = BlockFile::read(p)?;
        let mut found = index_headers(std::slice::from_ref(&file), opts.magic)?;
        found.iter_mut().for_each(|e| e.file = i);
        entries.extend(found);
    }
    let chain = select_main_chain(&entries, &opts)?;

    // Decode every main-chain block once so later stages can trust the bytes.
    let mut per_file: Vec<Vec<BlockLocation>> = vec![Vec::new(); paths.len()];
    for &i in &chain {
        per_file[entries[i].file].push(entries[i].loc);
    }
    let mut txs = 0u64;
    for (i, locs) in per_file.iter().enumerate() {
        if locs.is_empty() {
            continue;
        }
        let file = BlockFile::read(&paths[i])?;
        let counts = locs
            .par_iter()
            .map(|&loc| file.block_at(loc).map(|b| b.txs.len() as u64))
            .collect::<Result<Vec<u64>, _>>()
            .map_err(|e| parse_err(&paths[i], e))?;
        txs += counts.iter().sum::<u64>();
    }

    let mut w = create(&dir.join("chain.csv"))?;
    writeln!(w, "{CHAIN_HEADER}")?;
    for (height, &i) in chain.iter().enumerate() {
        let e = &entries[i];
        writeln!(
            w,
            "{height},{},{},{},{},{}",
            names[e.file], e.loc.offset, e.loc.len, e.hash, e.timestamp
        )?;
    }
    w.flush()?;
    Ok(Work {
        items: txs,
        unit: "transactions",
    })
}

fn read_chain(out: &Path) -> Result<Vec<ChainRow>, PipelineError> {
    let path = out.join("parse/chain.csv");
    let bad = |line: usize| PipelineError::Inconsistent(format!("{} line {line}", path.display()));
    let mut rows = Vec::new();
    for (i, line) in open(&path)?.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != CHAIN_HEADER {
                return Err(bad(1));
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 || f[0].parse::<usize>().ok() != Some(rows.len()) {
            return Err(bad(i + 1));
        }
        rows.push(ChainRow {
            file: f[1].to_string(),
            loc: BlockLocation {
                offset: f[2].parse().map_err(|_| bad(i + 1))?,
                len: f[3].parse().map_err(|_| bad(i + 1))?,
            },
            timestamp: f[5].parse().map_err(|_| bad(i + 1))?,
        });
    }
    Ok(rows)
}

/// Block files of the main chain, loaded on demand and dropped once no
/// longer referenced by the current window.
struct FileCache {
    dir: PathBuf,
    files: HashMap<String, BlockFile>,
}

impl FileCache {
    fn new(dir: PathBuf) -> Self {
        FileCache {
            dir,
            files: HashMap::new(),
        }
    }

    fn window(&mut self, rows: &[ChainRow]) -> Result<(), PipelineError> {
        self.files.retain(|name, _| rows.iter().any(|r| &r.file == name));
        for r in rows {
            if !self.files.contains_key(&r.file) {
                let f = BlockFile::read(self.dir.join(&r.file))?;
                self.files.insert(r.file.clone(), f);
            }
        }
        Ok(())
    }

    fn get(&self, name: &str) -> &BlockFile {
        &self.files[name]
    }
}

const DECODE_WINDOW: usize = 256;

/// Visit main-chain blocks in height order.
fn for_each_block(
    cfg: &Config,
    rows: &[ChainRow],
    mut visit: impl FnMut(Block) -> Result<(), PipelineError>,
) -> Result<(), PipelineError> {
    let dir = cfg.resolve(&cfg.chain.blocks_dir);
    let mut cache = FileCache::new(dir.clone());
    for (w, window) in rows.chunks(DECODE_WINDOW).enumerate() {
        cache.window(window)?;
        let blocks = window
            .par_iter()
            .enumerate()
            .map(|(j, r)| {
                let mut b = cache
                    .get(&r.file)
                    .block_at(r.loc)
                    .map_err(|e| parse_err(&dir.join(&r.file), e))?;
                b.set_height((w * DECODE_WINDOW + j) as u64);
                Ok(b)
            })
            .collect::<Result<Vec<Block>, PipelineError>>()?;
        for b in blocks {
            visit(b)?;
        }
    }
    Ok(())
}

fn filter(cfg: &Config, out: &Path, dir: &Path) -> Result<Work, PipelineError> {
    let rows = read_chain(out)?;
    let mut resolver = Resolver::new(cfg.filters);
    let mut resolved = create(&dir.join("resolved.bin"))?;
    let mut flagged = create(&dir.join("filters.csv"))?;
    writeln!(flagged, "txid,height,coinjoin,colored,reason")?;
    let mut txs = 0u64;
    for_each_block(cfg, &rows, |block| {
        for tx in &block.txs {
            let r = resolver.resolve(tx)?;
            write_resolved(&mut resolved, &r)?;
            if r.excluded() {
                writeln!(
                    flagged,
                    "{},{},{},{},{}",
                    r.txid,
                    r.height,
                    r.verdict.is_coinjoin,
                    r.verdict.colored_protocol,
                    r.verdict.reason.replace(',', ";")
                )?;
            }
            txs += 1;
        }
        Ok(())
    })?;
    resolved.flush()?;
    flagged.flush()?;
    let mut w = create(&dir.join("scripts.bin"))?;
    resolver.scripts().write_to(&mut w)?;
    w.flush()?;
    Ok(Work {
        items: txs,
        unit: "transactions",
    })
}

fn for_each_resolved(
    out: &Path,
    mut visit: impl FnMut(ResolvedTx) -> Result<(), PipelineError>,
) -> Result<(), PipelineError> {
    let mut r = open(&out.join("filter/resolved.bin"))?;
    while let Some(tx) = read_resolved(&mut r)? {
        visit(tx)?;
    }
    Ok(())
}

fn read_scripts(out: &Path) -> Result<ScriptTable, PipelineError> {
    Ok(ScriptTable::read_from(&mut open(&out.join("filter/scripts.bin"))?)?)
}

const CLUSTER_RECORD: usize = 33 + 8;

fn cluster(out: &Path, dir: &Path) -> Result<Work, PipelineError> {
    let scripts = read_scripts(out)?;
    let mut idx = ClusterIndex::from_scripts(scripts.ids());
    let rule = CommonInputRule;
    let mut txs = 0u64;
    for_each_resolved(out, |tx| {
        if !tx.excluded() && !tx.is_coinbase {
            let ins: Vec<u32> = tx.inputs.iter().map(|t| t.slot).collect();
            let outs: Vec<u32> = tx.outputs.iter().map(|t| t.slot).collect();
            apply_rules(&[&rule], &ins, &outs, &mut idx);
        }
        txs += 1;
        Ok(())
    })?;
    let map = finalize_aliases(&mut idx);
    drop(idx);

    let mut w = create(&dir.join("slot_alias.bin"))?;
    for &a in map.slot_aliases() {
        w.write_all(&a.to_le_bytes())?;
    }
    w.flush()?;

    let entries = map.sorted_entries(scripts.ids());
    let mut bin = create(&dir.join("clusters.bin"))?;
    let mut csv = create(&dir.join("clusters.csv"))?;
    writeln!(csv, "script_id,alias")?;
    for (id, alias) in &entries {
        bin.write_all(&id.0)?;
        bin.write_all(&alias.0.to_le_bytes())?;
        writeln!(csv, "{id},{alias}")?;
    }
    bin.flush()?;
    csv.flush()?;
    Ok(Work {
        items: txs,
        unit: "transactions",
    })
}

fn read_cluster_map(out: &Path) -> Result<ClusterMap, PipelineError> {
    let mut bytes = Vec::new();
    File::open(out.join("cluster/slot_alias.bin"))?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(PipelineError::Inconsistent("slot_alias.bin is truncated".into()));
    }
    let aliases = bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ClusterMap::from_slot_aliases(aliases))
}

/// Script id → alias, sorted by script id.
struct ScriptAliases(Vec<(ScriptId, ClusterAlias)>);

impl ScriptAliases {
    fn read(out: &Path) -> Result<Self, PipelineError> {
        let mut bytes = Vec::new();
        File::open(out.join("cluster/clusters.bin"))?.read_to_end(&mut bytes)?;
        if bytes.len() % CLUSTER_RECORD != 0 {
            return Err(PipelineError::Inconsistent("clusters.bin is truncated".into()));
        }
        Ok(ScriptAliases(
            bytes
                .chunks_exact(CLUSTER_RECORD)
                .map(|c| {
                    (
                        ScriptId(c[..33].try_into().unwrap()),
                        ClusterAlias(u64::from_le_bytes(c[33..].try_into().unwrap())),
                    )
                })
                .collect(),
        ))
    }

    fn get(&self, id: &ScriptId) -> Option<ClusterAlias> {
        self.0.binary_search_by(|(s, _)| s.cmp(id)).ok().map(|i| self.0[i].1)
    }
}

fn edges(out: &Path, dir: &Path) -> Result<Work, PipelineError> {
    let map = read_cluster_map(out)?;
    let mut agg = EdgeAggregator::default();
    let mut events = 0u64;
    for_each_resolved(out, |tx| {
        for e in resolved_transfers(&tx, &map) {
            agg.push(&e);
            events += 1;
        }
        Ok(())
    })?;
    let records = agg.finish();
    let mut w = create(&dir.join("edges.csv"))?;
    write_edges_csv(&mut w, &records)?;
    w.flush()?;
    Ok(Work {
        items: events,
        unit: "transfer events",
    })
}

fn attributes(out: &Path, dir: &Path) -> Result<Work, PipelineError> {
    let map = read_cluster_map(out)?;
    let mut events = Vec::new();
    let mut intra = IntraClusterGraph::default();
    for_each_resolved(out, |tx| {
        let ev = resolved_transfers(&tx, &map);
        // Script-level transfers only matter where a cluster pays itself.
        if !tx.excluded() && !tx.is_coinbase && has_internal_pair(&tx, &map) {
            let ins: Vec<(u32, u64)> = tx.inputs.iter().map(|t| (t.slot, t.value)).collect();
            let outs: Vec<(u32, u64)> = tx.outputs.iter().map(|t| (t.slot, t.value)).collect();
            for (s, r, _) in attribute(&ins, &outs) {
                intra.record(&map, s, r);
            }
        }
        events.extend(ev);
        Ok(())
    })?;

    let mut agg = EdgeAggregator::default();
    events.iter().for_each(|e| agg.push(e));
    let records = agg.finish();
    let mut edge_csv = Vec::new();
    write_edges_csv(&mut edge_csv, &records)?;
    if edge_csv != fs::read(out.join("edges/edges.csv"))? {
        return Err(PipelineError::Inconsistent(
            "edges/edges.csv does not match the transfers in filter/resolved.bin".into(),
        ));
    }

    let stats = intra.finish(&map);
    let nodes = compute_node_attributes(&events, &records, &stats)?;
    let mut w = create(&dir.join("nodes.csv"))?;
    write_nodes_csv(&mut w, &nodes)?;
    w.flush()?;
    Ok(Work {
        items: nodes.len() as u64,
        unit: "nodes",
    })
}

/// Whether some input and output of the transaction belong to one cluster.
fn has_internal_pair(tx: &ResolvedTx, map: &ClusterMap) -> bool {
    tx.inputs.iter().any(|i| {
        tx.outputs
            .iter()
            .any(|o| i.slot != o.slot && map.alias(i.slot) == map.alias(o.slot))
    })
}

fn label(cfg: &Config, out: &Path, dir: &Path) -> Result<Work, PipelineError> {
    let mut records = Vec::new();
    let mut errors = create(&dir.join("label_errors.csv"))?;
    writeln!(errors, "file,error")?;
    for f in &cfg.labels.files {
        let path = cfg.resolve(f);
        let load = load_labels(open(&path)?)?;
        for e in &load.errors {
            writeln!(errors, "{},{}", f.display(), e.to_string().replace(',', ";"))?;
        }
        records.extend(load.records);
    }

    if let Some(p) = &cfg.labels.coinbase_patterns {
        let patterns = load_patterns(open(&cfg.resolve(p))?)?;
        let coinbases = read_coinbases(cfg, out)?;
        records.extend(extract_coinbase_tags_from_txs(&coinbases, &patterns));
    }

    let aliases = ScriptAliases::read(out)?;
    let prop = propagate(&records, |id| aliases.get(id));
    drop(aliases);

    for e in &prop.invalid {
        writeln!(errors, "address,{}", e.to_string().replace(',', ";"))?;
    }
    errors.flush()?;

    let mut w = create(&dir.join("cluster_labels.csv"))?;
    write_cluster_labels_csv(&mut w, &prop.labels)?;
    w.flush()?;
    let mut w = create(&dir.join("unmatched.csv"))?;
    writeln!(w, "address")?;
    for a in &prop.unmatched {
        writeln!(w, "{a}")?;
    }
    w.flush()?;
    let mut w = create(&dir.join("conflicts.csv"))?;
    writeln!(w, "alias")?;
    for a in &prop.conflicted {
        writeln!(w, "{a}")?;
    }
    w.flush()?;

    // Fill the empty label column of the attribute table.
    let by_alias: HashMap<u64, Category> = prop.labels.iter().map(|l| (l.alias.0, l.category)).collect();
    let mut w = create(&dir.join("nodes.csv"))?;
    for (i, line) in open(&out.join("attributes/nodes.csv"))?.lines().enumerate() {
        let line = line?;
        if i == 0 {
            writeln!(w, "{line}")?;
            continue;
        }
        let (alias, rest) = line
            .split_once(",,")
            .ok_or_else(|| PipelineError::Inconsistent(format!("attributes/nodes.csv line {}", i + 1)))?;
        let label = alias
            .parse::<u64>()
            .ok()
            .and_then(|a| by_alias.get(&a))
            .map_or("", |c| c.as_str());
        writeln!(w, "{alias},{label},{rest}")?;
    }
    w.flush()?;
    Ok(Work {
        items: prop.labels.len() as u64,
        unit: "labeled clusters",
    })
}

/// The coinbase of every main-chain block, without decoding the rest.
fn read_coinbases(cfg: &Config, out: &Path) -> Result<Vec<crate::chain::RawTransaction>, PipelineError> {
    let rows = read_chain(out)?;
    let dir = cfg.resolve(&cfg.chain.blocks_dir);
    let mut cache = FileCache::new(dir.clone());
    let mut txs = Vec::with_capacity(rows.len());
    for window in rows.chunks(DECODE_WINDOW) {
        cache.window(window)?;
        for r in window {
            let payload = cache.get(&r.file).payload(r.loc);
            let decode = || -> Result<_, crate::chain::ParseError> {
                let (n, used) = crate::chain::decode_compact_size(&payload[HEADER_LEN..])?;
                if n == 0 {
                    return Ok(None);
                }
                parse_transaction(payload, HEADER_LEN + used).map(|(tx, _)| Some(tx))
            };
            if payload.len() > HEADER_LEN {
                if let Some(tx) = decode().map_err(|e| parse_err(&dir.join(&r.file), e))? {
                    txs.push(tx);
                }
            }
        }
    }
    Ok(txs)
}

fn features(cfg: &Config, out: &Path, dir: &Path) -> Result<Work, PipelineError> {
    let rates = RatesTable::from_csv(open(&cfg.resolve(&cfg.features.rates))?)?;
    let dates = BlockDates::from_timestamps(read_chain(out)?.iter().map(|r| r.timestamp));
    let nodes = read_nodes_csv(open(&out.join("label/nodes.csv"))?)?;
    let rows = nodes
        .par_iter()
        .map(|n| derive_features(n, &rates, &dates).map(|v| (n.alias, v)))
        .collect::<Result<Vec<_>, _>>()?;
    let matrix = FeatureMatrix {
        manifest: FeatureManifest::standard(),
        rows,
    };
    let mut w = create(&dir.join("features.csv"))?;
    matrix.write_csv(&mut w)?;
    w.flush()?;
    Ok(Work {
        items: matrix.rows.len() as u64,
        unit: "nodes",
    })
}

fn load_store(out: &Path) -> Result<GraphStore, PipelineError> {
    Ok(GraphStore::import_csv(
        open(&out.join("label/nodes.csv"))?,
        open(&out.join("edges/edges.csv"))?,
    )?)
}

fn sample(cfg: &Config, out: &Path, dir: &Path) -> Result<Work, PipelineError> {
    let store = load_store(out)?;
    let manifest = FeatureManifest::standard();
    let matrix = FeatureMatrix::read_csv(open(&out.join("features/features.csv"))?, &manifest)?;
    let row_of = |alias: ClusterAlias| {
        matrix
            .rows
            .binary_search_by_key(&alias, |(a, _)| *a)
            .ok()
            .map(|i| &matrix.rows[i].1)
    };

    let labeled: Vec<(ClusterAlias, Category)> = store
        .nodes
        .rows()
        .iter()
        .filter_map(|n| n.label.map(|c| (n.alias, c)))
        .collect();
    let splits = stratified_split(&labeled, cfg.buffer.split_seed);
    fs::write(
        dir.join("splits.json"),
        serde_json::to_vec_pretty(&splits).map_err(io::Error::other)?,
    )?;

    let buffers = splits
        .named()
        .map(|(name, seeds)| build_buffer(seeds, cfg.buffer.copies, &cfg.sampler, &store).map(|b| (name, b)));
    let mut built = Vec::with_capacity(3);
    for b in buffers {
        built.push(b?);
    }

    // Normalization anchors come from every node reachable in training neighborhoods.
    let mut train_nodes: Vec<ClusterAlias> = built[0].1.iter().flatten().flat_map(|h| h.nodes()).collect();
    train_nodes.sort_unstable();
    train_nodes.dedup();
    let train_rows: Vec<Vec<f64>> = train_nodes.iter().filter_map(|&a| row_of(a).cloned()).collect();
    let constants = fit_normalization(&train_rows, &manifest, "train")?;
    let mut w = create(&dir.join("constants.csv"))?;
    constants.write_csv(&mut w)?;
    w.flush()?;

    let labels: HashMap<ClusterAlias, Category> = labeled.iter().copied().collect();
    let row = |alias: ClusterAlias| -> Option<(Vec<f64>, Option<Category>)> {
        let raw = row_of(alias)?;
        Some((normalize(raw, &constants).ok()?, labels.get(&alias).copied()))
    };
    let buffer_dir = dir.join("buffer");
    let config_hash = cfg.sampler.hash();
    let feature_hash = manifest.hash();
    let mut entries = std::collections::BTreeMap::new();
    let mut files = 0u64;
    for (name, buffer) in &built {
        let e = write_split(&buffer_dir, name, buffer, &config_hash, &feature_hash, &row)?;
        files += e.iter().map(|x| x.files.len() as u64).sum::<u64>();
        entries.insert(name.to_string(), e);
    }
    let bm = BufferManifest {
        version: BUFFER_FORMAT_VERSION,
        config_hash,
        feature_manifest_hash: feature_hash,
        feature_names: manifest.names().map(str::to_string).collect(),
        copies: cfg.buffer.copies,
        splits: entries,
    };
    fs::create_dir_all(&buffer_dir)?;
    fs::write(
        buffer_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&bm).map_err(io::Error::other)?,
    )?;
    Ok(Work {
        items: files,
        unit: "neighborhoods",
    })
}

fn export(cfg: &Config, out: &Path, dir: &Path) -> Result<Work, PipelineError> {
    let store = load_store(out)?;
    for f in &cfg.output.export_formats {
        match f.as_str() {
            "csv" => store.export(dir, ExportFormat::Csv)?,
            "sql_text" => store.export(dir, ExportFormat::SqlText)?,
            "binary" => store.export(&dir.join("store"), ExportFormat::Binary)?,
            other => return Err(PipelineError::ConfigInvalid(format!("unknown export format {other:?}"))),
        }
    }
    let (n, e) = store.counts();
    Ok(Work {
        items: (n + e) as u64,
        unit: "rows",
    })
}
