//! Input resolution against the running UTXO set.
//!
//! Every script gets a dense *slot* the first time it locks a non-zero output,
//! so slot order is first on-chain appearance order. Zero-value outputs are
//! tracked only so that spending them is recognised; they own no script.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::chain::script::script_id;
use crate::chain::{Hash256, RawTransaction, ScriptId};
use crate::filters::{self, ColoredProtocol, FilterConfig, FilterVerdict};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ResolveError {
    #[error("input {vin} of {txid} spends unknown output {prev_txid}:{prev_vout}")]
    UnresolvedInput {
        txid: Hash256,
        vin: usize,
        prev_txid: Hash256,
        prev_vout: u32,
    },
    #[error("more than 2^32 distinct scripts")]
    SlotOverflow,
}

/// A non-zero output, or a spent one, reduced to its value and script slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotTxo {
    pub value: u64,
    pub slot: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedTx {
    pub txid: Hash256,
    pub height: u64,
    pub is_coinbase: bool,
    pub verdict: FilterVerdict,
    /// Funding outputs of the inputs, zero-value ones dropped.
    pub inputs: Vec<SlotTxo>,
    /// Non-zero outputs.
    pub outputs: Vec<SlotTxo>,
}

impl ResolvedTx {
    /// Excluded from clustering and transfer events.
    pub fn excluded(&self) -> bool {
        self.verdict.excludes()
    }
}

/// Script ids by slot, in first-appearance order.
#[derive(Debug, Default, Clone)]
pub struct ScriptTable {
    ids: Vec<ScriptId>,
    first_height: Vec<u64>,
    index: HashMap<ScriptId, u32>,
}

impl ScriptTable {
    pub fn intern(&mut self, id: ScriptId, height: u64) -> Result<u32, ResolveError> {
        if let Some(&slot) = self.index.get(&id) {
            return Ok(slot);
        }
        let slot = u32::try_from(self.ids.len()).map_err(|_| ResolveError::SlotOverflow)?;
        self.ids.push(id);
        self.first_height.push(height);
        self.index.insert(id, slot);
        Ok(slot)
    }

    pub fn slot_of(&self, id: &ScriptId) -> Option<u32> {
        self.index.get(id).copied()
    }

    pub fn id(&self, slot: u32) -> ScriptId {
        self.ids[slot as usize]
    }

    pub fn first_height(&self, slot: u32) -> u64 {
        self.first_height[slot as usize]
    }

    pub fn ids(&self) -> &[ScriptId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_u64::<LittleEndian>(self.ids.len() as u64)?;
        for (id, h) in self.ids.iter().zip(&self.first_height) {
            w.write_all(&id.0)?;
            w.write_u64::<LittleEndian>(*h)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> io::Result<Self> {
        let n = r.read_u64::<LittleEndian>()? as usize;
        let mut table = ScriptTable::default();
        table.ids.reserve(n);
        for _ in 0..n {
            let mut id = [0u8; 33];
            r.read_exact(&mut id)?;
            let h = r.read_u64::<LittleEndian>()?;
            table
                .intern(ScriptId(id), h)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        }
        Ok(table)
    }
}

/// Streaming resolver; feed transactions in chain order.
#[derive(Debug, Default)]
pub struct Resolver {
    utxos: HashMap<(Hash256, u32), Option<SlotTxo>>,
    scripts: ScriptTable,
    filters: FilterConfig,
}

impl Resolver {
    pub fn new(filters: FilterConfig) -> Self {
        Resolver {
            filters,
            ..Default::default()
        }
    }

    pub fn scripts(&self) -> &ScriptTable {
        &self.scripts
    }

    pub fn into_scripts(self) -> ScriptTable {
        self.scripts
    }

    pub fn utxo_count(&self) -> usize {
        self.utxos.len()
    }

    pub fn resolve(&mut self, tx: &RawTransaction) -> Result<ResolvedTx, ResolveError> {
        let is_coinbase = tx.is_coinbase();
        let mut inputs = Vec::with_capacity(tx.inputs.len());
        let mut input_ids = Vec::with_capacity(tx.inputs.len());
        if !is_coinbase {
            for (vin, input) in tx.inputs.iter().enumerate() {
                let key = (input.prev_txid, input.prev_vout);
                match self.utxos.remove(&key) {
                    Some(Some(txo)) => {
                        inputs.push(txo);
                        input_ids.push(self.scripts.id(txo.slot));
                    }
                    Some(None) => {}
                    None => {
                        return Err(ResolveError::UnresolvedInput {
                            txid: tx.txid,
                            vin,
                            prev_txid: input.prev_txid,
                            prev_vout: input.prev_vout,
                        })
                    }
                }
            }
        }

        let verdict = filters::evaluate(tx, &input_ids, &self.filters);

        let mut outputs = Vec::with_capacity(tx.outputs.len());
        for (vout, out) in tx.outputs.iter().enumerate() {
            let key = (tx.txid, vout as u32);
            if out.value == 0 {
                self.utxos.insert(key, None);
                continue;
            }
            let slot = self.scripts.intern(script_id(&out.lock_script), tx.block_height)?;
            let txo = SlotTxo { value: out.value, slot };
            outputs.push(txo);
            self.utxos.insert(key, Some(txo));
        }

        Ok(ResolvedTx {
            txid: tx.txid,
            height: tx.block_height,
            is_coinbase,
            verdict,
            inputs,
            outputs,
        })
    }
}

const FLAG_COINBASE: u8 = 1;
const FLAG_COINJOIN: u8 = 2;

pub fn write_resolved(w: &mut impl Write, tx: &ResolvedTx) -> io::Result<()> {
    w.write_all(&tx.txid.0)?;
    w.write_u64::<LittleEndian>(tx.height)?;
    let mut flags = tx.verdict.colored_protocol.code() << 2;
    if tx.is_coinbase {
        flags |= FLAG_COINBASE;
    }
    if tx.verdict.is_coinjoin {
        flags |= FLAG_COINJOIN;
    }
    w.write_u8(flags)?;
    w.write_u32::<LittleEndian>(tx.inputs.len() as u32)?;
    w.write_u32::<LittleEndian>(tx.outputs.len() as u32)?;
    for txo in tx.inputs.iter().chain(&tx.outputs) {
        w.write_u64::<LittleEndian>(txo.value)?;
        w.write_u32::<LittleEndian>(txo.slot)?;
    }
    Ok(())
}

/// `Ok(None)` at a clean end of stream. The verdict's reason text is not stored.
pub fn read_resolved(r: &mut impl Read) -> io::Result<Option<ResolvedTx>> {
    let mut txid = [0u8; 32];
    match r.read_exact(&mut txid) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let height = r.read_u64::<LittleEndian>()?;
    let flags = r.read_u8()?;
    let colored = ColoredProtocol::from_code(flags >> 2)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad colored-protocol code"))?;
    let n_in = r.read_u32::<LittleEndian>()? as usize;
    let n_out = r.read_u32::<LittleEndian>()? as usize;
    let mut read_txos = |n: usize| -> io::Result<Vec<SlotTxo>> {
        (0..n)
            .map(|_| {
                Ok(SlotTxo {
                    value: r.read_u64::<LittleEndian>()?,
                    slot: r.read_u32::<LittleEndian>()?,
                })
            })
            .collect()
    };
    let inputs = read_txos(n_in)?;
    let outputs = read_txos(n_out)?;
    Ok(Some(ResolvedTx {
        txid: Hash256(txid),
        height,
        is_coinbase: flags & FLAG_COINBASE != 0,
        verdict: FilterVerdict {
            is_coinjoin: flags & FLAG_COINJOIN != 0,
            colored_protocol: colored,
            reason: String::new(),
        },
        inputs,
        outputs,
    }))
}
