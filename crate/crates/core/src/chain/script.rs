//! Locking-script templates and canonical script identifiers.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

pub const OP_0: u8 = 0x00;
pub const OP_PUSHDATA1: u8 = 0x4c;
pub const OP_PUSHDATA2: u8 = 0x4d;
pub const OP_PUSHDATA4: u8 = 0x4e;
pub const OP_1: u8 = 0x51;
pub const OP_16: u8 = 0x60;
pub const OP_RETURN: u8 = 0x6a;
pub const OP_DUP: u8 = 0x76;
pub const OP_EQUAL: u8 = 0x87;
pub const OP_EQUALVERIFY: u8 = 0x88;
pub const OP_HASH160: u8 = 0xa9;
pub const OP_CHECKSIG: u8 = 0xac;
pub const OP_CHECKMULTISIG: u8 = 0xae;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScriptKind {
    Nonstandard,
    P2pk,
    P2pkh,
    P2sh,
    P2wpkh,
    P2wsh,
    BareMultisig,
    OpReturn,
}

impl ScriptKind {
    pub fn tag(self) -> u8 {
        match self {
            ScriptKind::Nonstandard => 0,
            ScriptKind::P2pk => 1,
            ScriptKind::P2pkh => 2,
            ScriptKind::P2sh => 3,
            ScriptKind::P2wpkh => 4,
            ScriptKind::P2wsh => 5,
            ScriptKind::BareMultisig => 6,
            ScriptKind::OpReturn => 7,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ScriptKind::Nonstandard,
            1 => ScriptKind::P2pk,
            2 => ScriptKind::P2pkh,
            3 => ScriptKind::P2sh,
            4 => ScriptKind::P2wpkh,
            5 => ScriptKind::P2wsh,
            6 => ScriptKind::BareMultisig,
            7 => ScriptKind::OpReturn,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScriptKind::Nonstandard => "nonstandard",
            ScriptKind::P2pk => "p2pk",
            ScriptKind::P2pkh => "p2pkh",
            ScriptKind::P2sh => "p2sh",
            ScriptKind::P2wpkh => "p2wpkh",
            ScriptKind::P2wsh => "p2wsh",
            ScriptKind::BareMultisig => "bare_multisig",
            ScriptKind::OpReturn => "op_return",
        }
    }
}

impl fmt::Display for ScriptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Kind tag byte followed by the SHA-256 of the script bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScriptId(pub [u8; 33]);

impl ScriptId {
    pub const LEN: usize = 33;

    pub fn of(kind: ScriptKind, script: &[u8]) -> Self {
        let mut id = [0u8; 33];
        id[0] = kind.tag();
        id[1..].copy_from_slice(&Sha256::digest(script));
        ScriptId(id)
    }

    pub fn kind(&self) -> Option<ScriptKind> {
        ScriptKind::from_tag(self.0[0])
    }
}

impl fmt::Display for ScriptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for ScriptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScriptId({self})")
    }
}

impl FromStr for ScriptId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s).map_err(|e| e.to_string())?;
        let arr: [u8; 33] = bytes
            .try_into()
            .map_err(|_| format!("script id {s:?} is not 33 bytes"))?;
        Ok(ScriptId(arr))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptDescriptor {
    pub script_bytes: Vec<u8>,
    pub kind: ScriptKind,
    pub script_id: ScriptId,
}

pub fn classify_script(script_bytes: &[u8]) -> ScriptDescriptor {
    let kind = script_kind(script_bytes);
    ScriptDescriptor {
        script_bytes: script_bytes.to_vec(),
        kind,
        script_id: ScriptId::of(kind, script_bytes),
    }
}

/// Identifier without copying the script.
pub fn script_id(script_bytes: &[u8]) -> ScriptId {
    ScriptId::of(script_kind(script_bytes), script_bytes)
}

pub fn script_kind(s: &[u8]) -> ScriptKind {
    match s {
        [OP_DUP, OP_HASH160, 0x14, hash @ .., OP_EQUALVERIFY, OP_CHECKSIG] if hash.len() == 20 => ScriptKind::P2pkh,
        [OP_HASH160, 0x14, hash @ .., OP_EQUAL] if hash.len() == 20 => ScriptKind::P2sh,
        [OP_0, 0x14, program @ ..] if program.len() == 20 => ScriptKind::P2wpkh,
        [OP_0, 0x20, program @ ..] if program.len() == 32 => ScriptKind::P2wsh,
        [0x21, key @ .., OP_CHECKSIG] if key.len() == 33 => ScriptKind::P2pk,
        [0x41, key @ .., OP_CHECKSIG] if key.len() == 65 => ScriptKind::P2pk,
        [OP_RETURN, ..] => ScriptKind::OpReturn,
        _ if is_bare_multisig(s) => ScriptKind::BareMultisig,
        _ => ScriptKind::Nonstandard,
    }
}

fn small_int(op: u8) -> Option<usize> {
    (OP_1..=OP_16).contains(&op).then(|| (op - OP_1 + 1) as usize)
}

fn is_bare_multisig(s: &[u8]) -> bool {
    let (Some(&first), Some(&last)) = (s.first(), s.last()) else {
        return false;
    };
    if last != OP_CHECKMULTISIG || s.len() < 3 {
        return false;
    }
    let (Some(m), Some(n)) = (small_int(first), small_int(s[s.len() - 2])) else {
        return false;
    };
    if m > n {
        return false;
    }
    let mut pos = 1;
    let end = s.len() - 2;
    let mut keys = 0;
    while pos < end {
        let len = s[pos] as usize;
        if len != 33 && len != 65 {
            return false;
        }
        pos += 1 + len;
        keys += 1;
    }
    pos == end && keys == n
}

/// Payload of the first data push after `OP_RETURN`, if any.
pub fn op_return_payload(s: &[u8]) -> Option<&[u8]> {
    if s.first() != Some(&OP_RETURN) {
        return None;
    }
    let rest = &s[1..];
    let op = *rest.first()?;
    let (len, start) = match op {
        0x01..=0x4b => (op as usize, 1),
        OP_PUSHDATA1 => (*rest.get(1)? as usize, 2),
        OP_PUSHDATA2 => (u16::from_le_bytes([*rest.get(1)?, *rest.get(2)?]) as usize, 3),
        OP_PUSHDATA4 => (u32::from_le_bytes(rest.get(1..5)?.try_into().ok()?) as usize, 5),
        _ => return None,
    };
    rest.get(start..start + len)
}

/// Script-building helpers shared with address decoding and fixtures.
pub mod build {
    use super::*;

    pub fn p2pkh(hash160: &[u8; 20]) -> Vec<u8> {
        [&[OP_DUP, OP_HASH160, 0x14][..], hash160, &[OP_EQUALVERIFY, OP_CHECKSIG]].concat()
    }

    pub fn p2sh(hash160: &[u8; 20]) -> Vec<u8> {
        [&[OP_HASH160, 0x14][..], hash160, &[OP_EQUAL]].concat()
    }

    pub fn p2wpkh(program: &[u8; 20]) -> Vec<u8> {
        [&[OP_0, 0x14][..], program].concat()
    }

    pub fn p2wsh(program: &[u8; 32]) -> Vec<u8> {
        [&[OP_0, 0x20][..], program].concat()
    }

    pub fn p2pk(pubkey: &[u8]) -> Vec<u8> {
        let mut s = Vec::with_capacity(pubkey.len() + 2);
        s.push(pubkey.len() as u8);
        s.extend_from_slice(pubkey);
        s.push(OP_CHECKSIG);
        s
    }

    /// Witness program of any version; versions above 0 are not templated.
    pub fn witness_program(version: u8, program: &[u8]) -> Vec<u8> {
        let op = if version == 0 { OP_0 } else { OP_1 + version - 1 };
        [&[op, program.len() as u8][..], program].concat()
    }

    pub fn op_return(payload: &[u8]) -> Vec<u8> {
        let mut s = vec![OP_RETURN];
        if payload.len() <= 0x4b {
            s.push(payload.len() as u8);
        } else {
            s.push(OP_PUSHDATA1);
            s.push(payload.len() as u8);
        }
        s.extend_from_slice(payload);
        s
    }
}
