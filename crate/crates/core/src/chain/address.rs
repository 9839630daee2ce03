//! Address strings to the locking scripts they can unlock, and back.
//!
//! Accepted forms: base58check (P2PKH / P2SH, main and test networks),
//! bech32/bech32m segwit addresses, and hex-encoded public keys. A public key
//! can unlock both its pay-to-pubkey script and the pay-to-pubkey-hash script
//! of its HASH160, so it yields two identifiers.

use std::collections::BTreeSet;

use bech32::{hrp, segwit};
use ripemd::Ripemd160;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::script::{build, script_id, ScriptId, ScriptKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AddressError {
    #[error("invalid address {address:?}: {reason}")]
    InvalidAddress { address: String, reason: String },
}

fn invalid(address: &str, reason: impl Into<String>) -> AddressError {
    AddressError::InvalidAddress {
        address: address.to_string(),
        reason: reason.into(),
    }
}

pub fn hash160(data: &[u8]) -> [u8; 20] {
    Ripemd160::digest(Sha256::digest(data)).into()
}

pub fn address_to_script_ids(address: &str) -> Result<BTreeSet<ScriptId>, AddressError> {
    let address = address.trim();
    if address.is_empty() {
        return Err(invalid(address, "empty"));
    }
    if let Some(key) = parse_pubkey_hex(address) {
        return Ok(
            [script_id(&build::p2pk(&key)), script_id(&build::p2pkh(&hash160(&key)))]
                .into_iter()
                .collect(),
        );
    }
    if looks_like_segwit(address) {
        let (_, version, program) = segwit::decode(address).map_err(|e| invalid(address, e.to_string()))?;
        let script = match (version.to_u8(), program.len()) {
            (0, 20) => build::p2wpkh(program.as_slice().try_into().unwrap()),
            (0, 32) => build::p2wsh(program.as_slice().try_into().unwrap()),
            (v, _) => build::witness_program(v, &program),
        };
        return Ok([script_id(&script)].into_iter().collect());
    }
    let decoded = bs58::decode(address)
        .with_check(None)
        .into_vec()
        .map_err(|e| invalid(address, e.to_string()))?;
    let (version, payload) = decoded.split_first().ok_or_else(|| invalid(address, "empty payload"))?;
    let hash: [u8; 20] = payload
        .try_into()
        .map_err(|_| invalid(address, format!("payload of {} bytes", payload.len())))?;
    let script = match version {
        0x00 | 0x6f => build::p2pkh(&hash),
        0x05 | 0xc4 => build::p2sh(&hash),
        v => return Err(invalid(address, format!("unknown version byte {v:#04x}"))),
    };
    Ok([script_id(&script)].into_iter().collect())
}

fn looks_like_segwit(address: &str) -> bool {
    let lower = address.to_ascii_lowercase();
    ["bc1", "tb1", "bcrt1"].iter().any(|p| lower.starts_with(p))
}

fn parse_pubkey_hex(s: &str) -> Option<Vec<u8>> {
    let ok_len = s.len() == 66 || s.len() == 130;
    if !ok_len || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    let key = hex::decode(s).ok()?;
    match (key[0], key.len()) {
        (0x02 | 0x03, 33) | (0x04, 65) => Some(key),
        _ => None,
    }
}

/// Mainnet address string for a locking script, where one exists.
///
/// Pay-to-pubkey scripts are rendered as the hex public key, which
/// [`address_to_script_ids`] accepts.
pub fn script_to_address(script: &[u8]) -> Option<String> {
    let kind = super::script::script_kind(script);
    match kind {
        ScriptKind::P2pkh => Some(bs58::encode(&script[3..23]).with_check_version(0x00).into_string()),
        ScriptKind::P2sh => Some(bs58::encode(&script[2..22]).with_check_version(0x05).into_string()),
        ScriptKind::P2wpkh | ScriptKind::P2wsh => segwit::encode(hrp::BC, segwit::VERSION_0, &script[2..]).ok(),
        ScriptKind::P2pk => Some(hex::encode(&script[1..script.len() - 1])),
        _ => None,
    }
}
