//! CoinJoin and colored-coin detection.
//!
//! Flagged transactions still create outputs (their scripts become nodes) but
//! contribute no cluster links and no transfer events.
//!
//! The CoinJoin rule is the equal-value-output pattern: enough outputs sharing
//! one value, funded by enough distinct scripts. The thresholds are stand-ins
//! for the published heuristics and are configurable.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::chain::script::{op_return_payload, script_kind};
use crate::chain::{RawTransaction, ScriptId, ScriptKind};

pub const OPEN_ASSETS_MARKER: [u8; 4] = [0x4f, 0x41, 0x01, 0x00];
pub const OMNI_MARKER: [u8; 4] = *b"omni";
pub const EPOBC_GENESIS_TAG: u32 = 0b10_0101;
pub const EPOBC_TRANSFER_TAG: u32 = 0b11_0011;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColoredProtocol {
    #[default]
    None,
    OpenAssets,
    Omni,
    Epobc,
}

impl ColoredProtocol {
    pub fn code(self) -> u8 {
        match self {
            ColoredProtocol::None => 0,
            ColoredProtocol::OpenAssets => 1,
            ColoredProtocol::Omni => 2,
            ColoredProtocol::Epobc => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ColoredProtocol::None,
            1 => ColoredProtocol::OpenAssets,
            2 => ColoredProtocol::Omni,
            3 => ColoredProtocol::Epobc,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ColoredProtocol::None => "none",
            ColoredProtocol::OpenAssets => "open_assets",
            ColoredProtocol::Omni => "omni",
            ColoredProtocol::Epobc => "epobc",
        }
    }
}

impl fmt::Display for ColoredProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FilterVerdict {
    pub is_coinjoin: bool,
    pub colored_protocol: ColoredProtocol,
    pub reason: String,
}

impl FilterVerdict {
    pub fn pass() -> Self {
        Self::default()
    }

    /// Whether the transaction is kept out of clustering and edge building.
    pub fn excludes(&self) -> bool {
        self.is_coinjoin || self.colored_protocol != ColoredProtocol::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoinJoinConfig {
    pub min_equal_outputs: usize,
    pub min_distinct_input_scripts: usize,
    /// Satoshis.
    pub min_equal_value: u64,
}

impl Default for CoinJoinConfig {
    fn default() -> Self {
        CoinJoinConfig {
            min_equal_outputs: 3,
            min_distinct_input_scripts: 3,
            min_equal_value: 10_000,
        }
    }
}

impl CoinJoinConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_equal_outputs == 0 || self.min_distinct_input_scripts == 0 || self.min_equal_value == 0 {
            return Err("coinjoin thresholds must all be at least 1".into());
        }
        Ok(())
    }
}

/// The `[filters]` configuration section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_equal_outputs: usize,
    pub min_distinct_input_scripts: usize,
    pub min_equal_value: u64,
    pub coinjoin: bool,
    pub open_assets: bool,
    pub omni: bool,
    pub epobc: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let cj = CoinJoinConfig::default();
        FilterConfig {
            min_equal_outputs: cj.min_equal_outputs,
            min_distinct_input_scripts: cj.min_distinct_input_scripts,
            min_equal_value: cj.min_equal_value,
            coinjoin: true,
            open_assets: true,
            omni: true,
            epobc: true,
        }
    }
}

impl FilterConfig {
    pub fn coinjoin_config(&self) -> CoinJoinConfig {
        CoinJoinConfig {
            min_equal_outputs: self.min_equal_outputs,
            min_distinct_input_scripts: self.min_distinct_input_scripts,
            min_equal_value: self.min_equal_value,
        }
    }
}

/// `input_scripts` are the script ids of the outputs the inputs spend.
pub fn detect_coinjoin(tx: &RawTransaction, input_scripts: &[ScriptId], cfg: &CoinJoinConfig) -> bool {
    coinjoin_pattern(tx, input_scripts, cfg).is_some()
}

/// The shared value and its multiplicity when the pattern matches.
fn coinjoin_pattern(tx: &RawTransaction, input_scripts: &[ScriptId], cfg: &CoinJoinConfig) -> Option<(u64, usize)> {
    if tx.is_coinbase() {
        return None;
    }
    let distinct: HashSet<&ScriptId> = input_scripts.iter().collect();
    if distinct.len() < cfg.min_distinct_input_scripts {
        return None;
    }
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for out in &tx.outputs {
        if out.value >= cfg.min_equal_value {
            *counts.entry(out.value).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .filter(|&(_, n)| n >= cfg.min_equal_outputs)
        .max_by_key(|&(value, n)| (n, value))
}

pub fn detect_colored(tx: &RawTransaction) -> ColoredProtocol {
    detect_colored_enabled(tx, true, true, true)
}

fn detect_colored_enabled(tx: &RawTransaction, open_assets: bool, omni: bool, epobc: bool) -> ColoredProtocol {
    for out in &tx.outputs {
        if script_kind(&out.lock_script) != ScriptKind::OpReturn {
            continue;
        }
        let Some(payload) = op_return_payload(&out.lock_script) else {
            continue;
        };
        if open_assets && payload.starts_with(&OPEN_ASSETS_MARKER) {
            return ColoredProtocol::OpenAssets;
        }
        if omni && payload.starts_with(&OMNI_MARKER) {
            return ColoredProtocol::Omni;
        }
    }
    if epobc {
        if let Some(first) = tx.inputs.first() {
            let tag = first.sequence & 0x3f;
            if tag == EPOBC_GENESIS_TAG || tag == EPOBC_TRANSFER_TAG {
                return ColoredProtocol::Epobc;
            }
        }
    }
    ColoredProtocol::None
}

/// Run every enabled detector.
pub fn evaluate(tx: &RawTransaction, input_scripts: &[ScriptId], cfg: &FilterConfig) -> FilterVerdict {
    let mut verdict = FilterVerdict::pass();
    let mut reasons = Vec::new();
    if cfg.coinjoin {
        if let Some((value, n)) = coinjoin_pattern(tx, input_scripts, &cfg.coinjoin_config()) {
            verdict.is_coinjoin = true;
            reasons.push(format!("equal_outputs:{n}x{value}"));
        }
    }
    let colored = detect_colored_enabled(tx, cfg.open_assets, cfg.omni, cfg.epobc);
    if colored != ColoredProtocol::None {
        verdict.colored_protocol = colored;
        reasons.push(match colored {
            ColoredProtocol::Epobc => "epobc_sequence_tag".to_string(),
            other => format!("{other}_marker"),
        });
    }
    verdict.reason = reasons.join(";");
    verdict
}
