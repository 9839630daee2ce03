//! `blk*.dat` framing: `magic (4) | payload length (4, LE) | payload`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::block::{Block, BlockHeader, HEADER_LEN};
use super::ParseError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NetworkMagic(pub [u8; 4]);

impl NetworkMagic {
    pub const MAINNET: NetworkMagic = NetworkMagic([0xf9, 0xbe, 0xb4, 0xd9]);
    pub const TESTNET3: NetworkMagic = NetworkMagic([0x0b, 0x11, 0x09, 0x07]);
    pub const REGTEST: NetworkMagic = NetworkMagic([0xfa, 0xbf, 0xb5, 0xda]);
}

impl Default for NetworkMagic {
    fn default() -> Self {
        NetworkMagic::MAINNET
    }
}

impl fmt::Display for NetworkMagic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for NetworkMagic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mainnet" => return Ok(Self::MAINNET),
            "testnet" | "testnet3" => return Ok(Self::TESTNET3),
            "regtest" => return Ok(Self::REGTEST),
            _ => {}
        }
        let bytes = hex::decode(s).map_err(|e| format!("network magic {s:?}: {e}"))?;
        let arr: [u8; 4] = bytes
            .try_into()
            .map_err(|_| format!("network magic {s:?} must be 4 bytes"))?;
        Ok(NetworkMagic(arr))
    }
}

/// Where a block payload sits inside its file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLocation {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct BlockFile {
    pub path: PathBuf,
    pub bytes: Vec<u8>,
}

impl BlockFile {
    pub fn read(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let bytes = std::fs::read(&path)?;
        Ok(BlockFile { path, bytes })
    }

    pub fn from_bytes(path: impl Into<PathBuf>, bytes: Vec<u8>) -> Self {
        BlockFile {
            path: path.into(),
            bytes,
        }
    }

    /// Locate every record payload in the file.
    pub fn scan(&self, magic: NetworkMagic) -> Result<Vec<BlockLocation>, ParseError> {
        scan_records(&self.bytes, magic)
    }

    pub fn payload(&self, loc: BlockLocation) -> &[u8] {
        &self.bytes[loc.offset..loc.offset + loc.len]
    }

    pub fn header_at(&self, loc: BlockLocation) -> Result<BlockHeader, ParseError> {
        if loc.len < HEADER_LEN {
            return Err(ParseError::MalformedBlock(format!(
                "record of {} bytes at offset {} is shorter than a header",
                loc.len, loc.offset
            )));
        }
        BlockHeader::parse(&self.bytes[loc.offset..loc.offset + HEADER_LEN])
    }

    pub fn block_at(&self, loc: BlockLocation) -> Result<Block, ParseError> {
        Block::parse(self.payload(loc))
    }
}

/// Walk the record framing. Zero bytes between or after records are padding.
pub fn scan_records(bytes: &[u8], magic: NetworkMagic) -> Result<Vec<BlockLocation>, ParseError> {
    let mut out = Vec::new();
    let mut pos = 0usize;
    loop {
        while pos < bytes.len() && bytes[pos] == 0 {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Ok(out);
        }
        if bytes.len() - pos < 8 {
            return Err(ParseError::TruncatedInput {
                offset: pos,
                needed: 8,
                available: bytes.len() - pos,
            });
        }
        if bytes[pos..pos + 4] != magic.0 {
            return Err(ParseError::BadMagic { offset: pos });
        }
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let start = pos + 8;
        if bytes.len() - start < len {
            return Err(ParseError::TruncatedInput {
                offset: start,
                needed: len,
                available: bytes.len() - start,
            });
        }
        out.push(BlockLocation { offset: start, len });
        pos = start + len;
    }
}

/// Frame one block payload as a file record.
pub fn write_record(out: &mut Vec<u8>, magic: NetworkMagic, payload: &[u8]) {
    out.extend_from_slice(&magic.0);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
}

/// `blk*.dat` files in a directory, in name order.
pub fn list_block_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("blk") && n.ends_with(".dat"))
        })
        .collect();
    files.sort();
    Ok(files)
}
