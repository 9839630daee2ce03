//! Deterministic synthetic chains for tests, demos and load runs.
//!
//! A run plants multi-script entities (so the common-input heuristic has
//! something to merge), CoinJoins, colored-coin transactions, tagged
//! coinbases, a stale fork and an orphan, and writes them as `blk*.dat`
//! files together with a label file, a coinbase pattern file, a rates table
//! and a pipeline config.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::DateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chain::script::build;
use crate::chain::{
    script_to_address, write_record, Block, BlockHeader, Hash256, NetworkMagic, RawTransaction, TxIn, TxOut,
};
use crate::filters::{EPOBC_TRANSFER_TAG, OMNI_MARKER, OPEN_ASSETS_MARKER};
use crate::labels::Category;

type Witness = Vec<Vec<Vec<u8>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub blocks: u64,
    /// Non-coinbase transactions, spread evenly over blocks `1..blocks`.
    pub txs: u64,
    pub entities: usize,
    pub pools: usize,
    pub coinjoins: usize,
    pub seed: u64,
    pub magic: NetworkMagic,
    pub genesis_time: u32,
    pub block_interval: u32,
    /// A file is closed once it grows past this many bytes.
    pub max_file_bytes: usize,
    /// Plant a stale one-block fork and a parentless block.
    pub forks: bool,
    /// Fraction of entities that receive a label.
    pub labeled_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            blocks: 200,
            txs: 1000,
            entities: 120,
            pools: 3,
            coinjoins: 1,
            seed: 1,
            magic: NetworkMagic::MAINNET,
            genesis_time: 1_400_000_000,
            block_interval: 3_600,
            max_file_bytes: 128 << 20,
            forks: true,
            labeled_fraction: 0.5,
        }
    }
}

impl SynthConfig {
    /// Sized for `txs` transactions with roughly 25 per block.
    pub fn scaled(txs: u64, seed: u64) -> Self {
        let blocks = (txs / 25).max(200);
        let entities = (txs as usize / 5).max(120);
        SynthConfig {
            blocks,
            txs,
            entities,
            labeled_fraction: (1000.0 / entities as f64).min(0.5),
            pools: 8,
            coinjoins: (txs as usize / 10_000).max(1),
            seed,
            block_interval: 600,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynthSummary {
    pub files: Vec<PathBuf>,
    pub main_chain_blocks: u64,
    pub transactions: u64,
    pub coinjoins: u64,
    pub colored: u64,
    pub stale_blocks: u64,
    pub labels: u64,
}

struct Utxo {
    txid: Hash256,
    vout: u32,
    value: u64,
    script: usize,
}

struct Entity {
    scripts: Vec<usize>,
    utxos: Vec<Utxo>,
}

struct World {
    rng: ChaCha8Rng,
    scripts: Vec<Vec<u8>>,
    entities: Vec<Entity>,
    pending: Vec<(usize, Utxo)>,
}

const FEE: u64 = 1_000;

impl World {
    fn new_script(&mut self) -> usize {
        let r: u8 = self.rng.random_range(0..20);
        let mut bytes = [0u8; 32];
        self.rng.fill(&mut bytes);
        let h20: [u8; 20] = bytes[..20].try_into().unwrap();
        let script = match r {
            0..=9 => build::p2pkh(&h20),
            10..=13 => build::p2wpkh(&h20),
            14..=16 => build::p2sh(&h20),
            17 => build::p2wsh(&bytes),
            _ => {
                let mut key = [0u8; 33];
                key[0] = 0x02 | (bytes[0] & 1);
                key[1..].copy_from_slice(&bytes);
                build::p2pk(&key)
            }
        };
        self.scripts.push(script);
        self.scripts.len() - 1
    }

    fn receive_script(&mut self, e: usize) -> usize {
        // occasionally a fresh address, as wallets do
        if self.rng.random_bool(0.1) {
            let s = self.new_script();
            self.entities[e].scripts.push(s);
            s
        } else {
            let n = self.entities[e].scripts.len();
            self.entities[e].scripts[self.rng.random_range(0..n)]
        }
    }

    fn out(&self, script: usize, value: u64) -> TxOut {
        TxOut {
            value,
            lock_script: self.scripts[script].clone(),
        }
    }

    fn spend(&mut self, e: usize, n: usize) -> Vec<Utxo> {
        let utxos = &mut self.entities[e].utxos;
        let n = n.min(utxos.len());
        (0..n)
            .map(|_| {
                let i = self.rng.random_range(0..utxos.len());
                utxos.swap_remove(i)
            })
            .collect()
    }

    fn inputs(&mut self, spent: &[Utxo], first_sequence: u32) -> (Vec<TxIn>, Option<Witness>) {
        let mut segwit = false;
        let mut stacks = Vec::new();
        let inputs = spent
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let script = &self.scripts[u.script];
                let witness_input = script.first() == Some(&0x00);
                let mut sig = [0u8; 72];
                self.rng.fill(&mut sig[..]);
                let unlock = if witness_input {
                    segwit = true;
                    stacks.push(vec![sig.to_vec(), sig[..33].to_vec()]);
                    Vec::new()
                } else {
                    stacks.push(Vec::new());
                    [&[72u8][..], &sig[..]].concat()
                };
                TxIn {
                    prev_txid: u.txid,
                    prev_vout: u.vout,
                    unlock_script: unlock,
                    sequence: if i == 0 { first_sequence } else { u32::MAX },
                }
            })
            .collect();
        (inputs, segwit.then_some(stacks))
    }

    /// Queue the spendable outputs of `tx`; `owners[i]` is the entity of output `i`.
    fn settle(&mut self, tx: &RawTransaction, owners: &[Option<(usize, usize)>]) {
        for (vout, (o, owner)) in tx.outputs.iter().zip(owners).enumerate() {
            if let Some((e, script)) = *owner {
                if o.value > 0 {
                    self.pending.push((
                        e,
                        Utxo {
                            txid: tx.txid,
                            vout: vout as u32,
                            value: o.value,
                            script,
                        },
                    ));
                }
            }
        }
    }

    fn confirm(&mut self) {
        for (e, u) in self.pending.drain(..) {
            self.entities[e].utxos.push(u);
        }
    }

    fn pick_funded(&mut self, tries: usize) -> Option<usize> {
        (0..tries)
            .map(|_| self.rng.random_range(0..self.entities.len()))
            .find(|&e| !self.entities[e].utxos.is_empty())
    }

    fn payment(&mut self) -> Option<RawTransaction> {
        let sender = self.pick_funded(64)?;
        let k = self.rng.random_range(1..=3);
        let spent = self.spend(sender, k);
        let total: u64 = spent.iter().map(|u| u.value).sum();
        let (inputs, witness) = self.inputs(&spent, u32::MAX);
        let mut outputs = Vec::new();
        let mut owners = Vec::new();
        let n_recipients = self.rng.random_range(1..=2);
        if total <= 4 * FEE {
            let r = self.rng.random_range(0..self.entities.len());
            let s = self.receive_script(r);
            outputs.push(self.out(s, total));
            owners.push(Some((r, s)));
        } else {
            let mut left = total - FEE;
            for _ in 0..n_recipients {
                let r = self.rng.random_range(0..self.entities.len());
                let amount = self.rng.random_range(1..=left / 2);
                let s = self.receive_script(r);
                outputs.push(self.out(s, amount));
                owners.push(Some((r, s)));
                left -= amount;
            }
            let change = self.receive_script(sender);
            outputs.push(self.out(change, left));
            owners.push(Some((sender, change)));
        }
        let tx = RawTransaction::new(2, inputs, outputs, 0, witness);
        self.settle(&tx, &owners);
        Some(tx)
    }

    fn coinjoin(&mut self) -> Option<RawTransaction> {
        let mut participants = Vec::new();
        for _ in 0..200 {
            if participants.len() == 4 {
                break;
            }
            let e = self.rng.random_range(0..self.entities.len());
            let rich = self.entities[e].utxos.iter().any(|u| u.value > 200_000);
            if rich && !participants.contains(&e) {
                participants.push(e);
            }
        }
        if participants.len() < 3 {
            return None;
        }
        let denomination = 100_000;
        let mut spent = Vec::new();
        let mut outputs = Vec::new();
        let mut owners = Vec::new();
        for &e in &participants {
            let i = self.entities[e].utxos.iter().position(|u| u.value > 200_000).unwrap();
            let u = self.entities[e].utxos.swap_remove(i);
            let s = self.receive_script(e);
            outputs.push(self.out(s, denomination));
            owners.push(Some((e, s)));
            let c = self.receive_script(e);
            outputs.push(self.out(c, u.value - denomination - FEE));
            owners.push(Some((e, c)));
            spent.push(u);
        }
        let (inputs, witness) = self.inputs(&spent, u32::MAX);
        let tx = RawTransaction::new(1, inputs, outputs, 0, witness);
        self.settle(&tx, &owners);
        Some(tx)
    }

    /// One of Omni, Open Assets or EPOBC, chosen by `which`.
    fn colored(&mut self, which: usize) -> Option<RawTransaction> {
        let e = self.pick_funded(64)?;
        let spent = self.spend(e, 1);
        let value = spent[0].value;
        let sequence = if which == 2 {
            0xffff_ff00 | EPOBC_TRANSFER_TAG
        } else {
            u32::MAX
        };
        let (inputs, witness) = self.inputs(&spent, sequence);
        let s = self.receive_script(e);
        let mut outputs = vec![self.out(s, value.saturating_sub(FEE).max(1))];
        let mut owners = vec![Some((e, s))];
        match which {
            0 => outputs.push(TxOut {
                value: 0,
                lock_script: build::op_return(&[&OMNI_MARKER[..], &[0, 0, 0, 0, 0, 0, 0, 31]].concat()),
            }),
            1 => outputs.insert(
                0,
                TxOut {
                    value: 0,
                    lock_script: build::op_return(&[&OPEN_ASSETS_MARKER[..], &[1, 100]].concat()),
                },
            ),
            _ => {}
        }
        if which == 1 {
            owners.insert(0, None);
        } else if which == 0 {
            owners.push(None);
        }
        let tx = RawTransaction::new(1, inputs, outputs, 0, witness);
        self.settle(&tx, &owners);
        Some(tx)
    }
}

fn coinbase(height: u64, message: &[u8], outputs: Vec<TxOut>) -> RawTransaction {
    let mut script = vec![3];
    script.extend_from_slice(&(height as u32).to_le_bytes()[..3]);
    script.extend_from_slice(message);
    RawTransaction::new(
        1,
        vec![TxIn {
            prev_txid: Hash256::ZERO,
            prev_vout: u32::MAX,
            unlock_script: script,
            sequence: u32::MAX,
        }],
        outputs,
        0,
        None,
    )
}

fn make_block(prev: Hash256, timestamp: u32, nonce: u32, txs: Vec<RawTransaction>) -> Block {
    let ids: Vec<Hash256> = txs.iter().map(|t| t.txid).collect();
    Block {
        header: BlockHeader {
            version: 0x2000_0000,
            prev_hash: prev,
            merkle_root: crate::chain::merkle_root(&ids),
            timestamp,
            bits: 0x207f_ffff,
            nonce,
        },
        txs,
    }
}

struct FileSink {
    dir: PathBuf,
    magic: NetworkMagic,
    max: usize,
    buf: Vec<u8>,
    files: Vec<PathBuf>,
}

impl FileSink {
    fn push(&mut self, block: &Block) -> io::Result<()> {
        write_record(&mut self.buf, self.magic, &block.serialize());
        if self.buf.len() >= self.max {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        if self.buf.is_empty() {
            return Ok(());
        }
        // preallocated files end in zero padding
        self.buf.extend_from_slice(&[0u8; 64]);
        let path = self.dir.join(format!("blk{:05}.dat", self.files.len()));
        fs::write(&path, &self.buf)?;
        self.buf.clear();
        self.files.push(path);
        Ok(())
    }
}

pub const SUBSIDY: u64 = 50 * 100_000_000;

/// Writes `blk*.dat` files into `dir` (created if needed).
pub fn generate_chain(cfg: &SynthConfig, dir: &Path) -> io::Result<(SynthSummary, Vec<LabelRow>)> {
    fs::create_dir_all(dir)?;
    let mut w = World {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        scripts: Vec::new(),
        entities: Vec::new(),
        pending: Vec::new(),
    };
    for _ in 0..cfg.entities {
        let n = w.rng.random_range(1..=4);
        let scripts = (0..n).map(|_| w.new_script()).collect();
        w.entities.push(Entity {
            scripts,
            utxos: Vec::new(),
        });
    }
    let pools: Vec<usize> = (0..cfg.pools.min(cfg.entities)).collect();

    let mut sink = FileSink {
        dir: dir.to_path_buf(),
        magic: cfg.magic,
        max: cfg.max_file_bytes,
        buf: Vec::new(),
        files: Vec::new(),
    };
    let mut summary = SynthSummary::default();

    // genesis funds every entity's first script
    let grant = 100_000_000u64;
    let owners: Vec<Option<(usize, usize)>> = (0..cfg.entities).map(|e| Some((e, w.entities[e].scripts[0]))).collect();
    let outputs = owners.iter().map(|o| w.out(o.unwrap().1, grant)).collect();
    let cb = coinbase(0, b"synthetic genesis", outputs);
    w.settle(&cb, &owners);
    w.confirm();
    let genesis = make_block(Hash256::ZERO, cfg.genesis_time, 0, vec![cb]);
    let mut prev = genesis.hash();
    sink.push(&genesis)?;

    let body_blocks = cfg.blocks.saturating_sub(1).max(1);
    let per_block = cfg.txs / body_blocks;
    let extra = cfg.txs % body_blocks;
    let special_every = |n: usize| {
        if n == 0 {
            u64::MAX
        } else {
            (body_blocks / (n as u64 + 1)).max(1)
        }
    };
    let coinjoin_every = special_every(cfg.coinjoins);
    let colored_at = [body_blocks / 4 + 1, body_blocks / 2 + 1, 3 * body_blocks / 4 + 1];
    let fork_at = (cfg.blocks / 3).max(2);

    for height in 1..cfg.blocks {
        let timestamp = cfg.genesis_time + height as u32 * cfg.block_interval;
        let pool = pools[(height as usize) % pools.len().max(1)];
        let pool_script = w.receive_script(pool);
        let tag = format!("/Pool{pool}/");
        let cb = coinbase(height, tag.as_bytes(), vec![w.out(pool_script, SUBSIDY)]);
        w.settle(&cb, &[Some((pool, pool_script))]);
        let mut txs = vec![cb];

        let n = per_block + u64::from(height - 1 < extra);
        for _ in 0..n {
            if let Some(tx) = w.payment() {
                txs.push(tx);
            }
        }
        if (height - 1) % coinjoin_every == coinjoin_every - 1 && summary.coinjoins < cfg.coinjoins as u64 {
            if let Some(tx) = w.coinjoin() {
                txs.push(tx);
                summary.coinjoins += 1;
            }
        }
        if let Some(which) = colored_at.iter().position(|&h| h == height) {
            if let Some(tx) = w.colored(which) {
                txs.push(tx);
                summary.colored += 1;
            }
        }
        summary.transactions += txs.len() as u64 - 1;
        let block = make_block(prev, timestamp, height as u32, txs);
        sink.push(&block)?;

        if cfg.forks && height == fork_at {
            // a competing sibling that loses, and a block with no known parent
            let stale_script = w.new_script();
            let stale = make_block(
                block.header.prev_hash,
                timestamp + 1,
                u32::MAX,
                vec![coinbase(height, b"stale", vec![w.out(stale_script, SUBSIDY)])],
            );
            let mut unknown = [0u8; 32];
            w.rng.fill(&mut unknown);
            let orphan = make_block(
                Hash256(unknown),
                timestamp + 2,
                u32::MAX - 1,
                vec![coinbase(height, b"orphan", vec![w.out(stale_script, SUBSIDY)])],
            );
            sink.push(&stale)?;
            sink.push(&orphan)?;
            summary.stale_blocks += 2;
        }
        prev = block.hash();
        w.confirm();
    }
    sink.flush()?;
    summary.files = sink.files.clone();
    summary.main_chain_blocks = cfg.blocks.max(1);

    let categories = [
        Category::Exchange,
        Category::Gambling,
        Category::Individual,
        Category::Ponzi,
        Category::Ransomware,
        Category::Bet,
        Category::Marketplace,
    ];
    let mut labels = Vec::new();
    for (e, entity) in w.entities.iter().enumerate() {
        if pools.contains(&e) || !w.rng.random_bool(cfg.labeled_fraction) {
            continue;
        }
        let category = categories[e % categories.len()];
        let picks = w.rng.random_range(1..=2).min(entity.scripts.len());
        for &s in &entity.scripts[..picks] {
            if let Some(address) = script_to_address(&w.scripts[s]) {
                labels.push(LabelRow { address, category });
            }
        }
    }
    summary.labels = labels.len() as u64;
    Ok((summary, labels))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRow {
    pub address: String,
    pub category: Category,
}

/// Everything `forge all` needs: blocks, labels, patterns, rates and a config.
pub fn generate_fixture(cfg: &SynthConfig, root: &Path) -> io::Result<SynthSummary> {
    fs::create_dir_all(root)?;
    let (summary, labels) = generate_chain(cfg, &root.join("blocks"))?;

    let mut f = io::BufWriter::new(fs::File::create(root.join("labels.csv"))?);
    writeln!(f, "address,label,source")?;
    for l in &labels {
        writeln!(f, "{},{},synthetic", l.address, l.category)?;
    }
    f.flush()?;

    let mut f = fs::File::create(root.join("pools.txt"))?;
    for p in 0..cfg.pools.min(cfg.entities) {
        writeln!(f, "/Pool{p}/,Pool{p}")?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdead_beef);
    let first = DateTime::from_timestamp(i64::from(cfg.genesis_time), 0)
        .unwrap()
        .date_naive();
    let end = i64::from(cfg.genesis_time) + cfg.blocks as i64 * i64::from(cfg.block_interval) + 86_400;
    let last = DateTime::from_timestamp(end, 0).unwrap().date_naive();
    let mut f = io::BufWriter::new(fs::File::create(root.join("rates.csv"))?);
    writeln!(f, "date,usd_per_btc")?;
    let mut price = 500.0f64;
    for day in first.iter_days().take_while(|d| *d <= last) {
        writeln!(f, "{day},{:.2}", price)?;
        price = (price * rng.random_range(0.95..1.05)).max(1.0);
    }
    f.flush()?;

    fs::write(root.join("forge.toml"), fixture_config(cfg))?;
    Ok(summary)
}

fn fixture_config(cfg: &SynthConfig) -> String {
    format!(
        r#"[chain]
blocks_dir = "blocks"
magic = "{magic}"
height_limit = {limit}

[filters]

[labels]
files = ["labels.csv"]
coinbase_patterns = "pools.txt"

[features]
rates = "rates.csv"

[sampler]
k_max = 2
fanouts = [10, 5]
rng_seed = {seed}

[buffer]
copies = 12
split_seed = {seed}

[output]
dir = "out"
"#,
        magic = cfg.magic,
        limit = cfg.blocks,
        seed = cfg.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{build_main_chain, BlockFile, ChainOptions};

    fn small() -> SynthConfig {
        SynthConfig {
            blocks: 40,
            txs: 200,
            entities: 30,
            max_file_bytes: 8_000,
            ..Default::default()
        }
    }

    #[test]
    fn chain_is_parseable_and_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (sa, la) = generate_chain(&small(), a.path()).unwrap();
        let (sb, _) = generate_chain(&small(), b.path()).unwrap();
        assert!(sa.files.len() > 1);
        assert_eq!(sa.files.len(), sb.files.len());
        for (x, y) in sa.files.iter().zip(&sb.files) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        assert!(!la.is_empty());
        assert_eq!(sa.coinjoins, 1);
        assert_eq!(sa.colored, 3);

        let files: Vec<BlockFile> = sa.files.iter().map(|p| BlockFile::read(p).unwrap()).collect();
        let chain = build_main_chain(&files, &ChainOptions::default()).unwrap();
        assert_eq!(chain.len(), 40);
        let txs: usize = chain.iter().map(|(_, b)| b.txs.len() - 1).sum();
        assert_eq!(txs as u64, sa.transactions);
        assert!(chain
            .iter()
            .all(|(_, b)| b.txs[0].inputs[0].unlock_script.windows(5).all(|w| w != b"stale")));
    }

    #[test]
    fn fixture_files() {
        let dir = tempfile::tempdir().unwrap();
        generate_fixture(&small(), dir.path()).unwrap();
        for f in ["labels.csv", "pools.txt", "rates.csv", "forge.toml"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let rates =
            crate::features::RatesTable::from_csv(fs::File::open(dir.path().join("rates.csv")).unwrap()).unwrap();
        assert!(rates.len() >= 2);
    }
}
