//! Raw block data: wire format, block files, chain ordering and scripts.

pub mod address;
pub mod block;
pub mod blockfile;
pub mod encode;
pub mod main_chain;
pub mod script;
pub mod tx;

use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use address::{address_to_script_ids, script_to_address, AddressError};
pub use block::{merkle_root, Block, BlockHeader, HEADER_LEN};
pub use blockfile::{list_block_files, scan_records, write_record, BlockFile, BlockLocation, NetworkMagic};
pub use encode::decode_compact_size;
pub use main_chain::{build_main_chain, index_headers, select_main_chain, ChainOptions, HeaderEntry};
pub use script::{classify_script, ScriptDescriptor, ScriptId, ScriptKind};
pub use tx::{parse_transaction, RawTransaction, TxIn, TxOut};

/// Upper bound on any single output value, in satoshis.
pub const MAX_MONEY: u64 = 21_000_000 * 100_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("truncated input: needed {needed} bytes at offset {offset}, {available} available")]
    TruncatedInput {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("malformed transaction: {0}")]
    MalformedTransaction(String),
    #[error("malformed block: {0}")]
    MalformedBlock(String),
    #[error("bad network magic at offset {offset}")]
    BadMagic { offset: usize },
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("no genesis block (all-zero prev_hash) among the stored blocks")]
    MissingGenesis,
    #[error("no stored block extends height {height}")]
    BrokenChain { height: u64 },
    #[error("{path}: {source}")]
    Parse { path: String, source: ParseError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 32-byte double-SHA-256 digest, kept in internal (wire) byte order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Hash256(pub [u8; 32]);

impl Hash256 {
    pub const ZERO: Hash256 = Hash256([0u8; 32]);

    pub fn double_sha256(data: &[u8]) -> Self {
        let first = Sha256::digest(data);
        Hash256(Sha256::digest(first).into())
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0u8; 32]
    }

    /// Parse the conventional byte-reversed hex display form.
    pub fn from_display_hex(s: &str) -> Option<Self> {
        let mut bytes: [u8; 32] = hex::decode(s).ok()?.try_into().ok()?;
        bytes.reverse();
        Some(Hash256(bytes))
    }
}

impl fmt::Display for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut rev = self.0;
        rev.reverse();
        f.write_str(&hex::encode(rev))
    }
}

impl fmt::Debug for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash256({self})")
    }
}
