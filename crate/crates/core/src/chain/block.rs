use super::encode::{write_compact_size, Reader};
use super::tx::{read_transaction, RawTransaction};
use super::{Hash256, ParseError};

pub const HEADER_LEN: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHeader {
    pub version: i32,
    pub prev_hash: Hash256,
    pub merkle_root: Hash256,
    /// Unix seconds.
    pub timestamp: u32,
    pub bits: u32,
    pub nonce: u32,
}

impl BlockHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self, ParseError> {
        let mut r = Reader::new(bytes, 0);
        read_header(&mut r)
    }

    pub fn serialize(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&self.version.to_le_bytes());
        out[4..36].copy_from_slice(&self.prev_hash.0);
        out[36..68].copy_from_slice(&self.merkle_root.0);
        out[68..72].copy_from_slice(&self.timestamp.to_le_bytes());
        out[72..76].copy_from_slice(&self.bits.to_le_bytes());
        out[76..80].copy_from_slice(&self.nonce.to_le_bytes());
        out
    }

    pub fn hash(&self) -> Hash256 {
        Hash256::double_sha256(&self.serialize())
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<BlockHeader, ParseError> {
    Ok(BlockHeader {
        version: r.i32()?,
        prev_hash: Hash256(r.array()?),
        merkle_root: Hash256(r.array()?),
        timestamp: r.u32()?,
        bits: r.u32()?,
        nonce: r.u32()?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub txs: Vec<RawTransaction>,
}

impl Block {
    /// Parse a full block payload (header, tx count, transactions).
    pub fn parse(bytes: &[u8]) -> Result<Self, ParseError> {
        let mut r = Reader::new(bytes, 0);
        let header = read_header(&mut r)?;
        let n_tx = r.compact_size()?;
        let mut txs = Vec::with_capacity((n_tx as usize).min(r.remaining() / 60 + 1));
        for _ in 0..n_tx {
            txs.push(read_transaction(&mut r)?);
        }
        if r.remaining() != 0 {
            return Err(ParseError::MalformedBlock(format!(
                "{} trailing bytes after {n_tx} transactions",
                r.remaining()
            )));
        }
        Ok(Block { header, txs })
    }

    pub fn hash(&self) -> Hash256 {
        self.header.hash()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 256 * self.txs.len());
        out.extend_from_slice(&self.header.serialize());
        write_compact_size(&mut out, self.txs.len() as u64);
        for tx in &self.txs {
            tx.write(&mut out, tx.witness.is_some());
        }
        out
    }

    pub fn set_height(&mut self, height: u64) {
        for tx in &mut self.txs {
            tx.block_height = height;
        }
    }
}

/// Merkle root over txids, duplicating the last entry on odd levels.
pub fn merkle_root(txids: &[Hash256]) -> Hash256 {
    if txids.is_empty() {
        return Hash256::ZERO;
    }
    let mut level: Vec<Hash256> = txids.to_vec();
    while level.len() > 1 {
        if level.len() % 2 == 1 {
            level.push(*level.last().unwrap());
        }
        level = level
            .chunks(2)
            .map(|pair| {
                let mut buf = [0u8; 64];
                buf[..32].copy_from_slice(&pair[0].0);
                buf[32..].copy_from_slice(&pair[1].0);
                Hash256::double_sha256(&buf)
            })
            .collect();
    }
    level[0]
}
