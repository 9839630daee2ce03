//! Transaction wire format (legacy and segwit serialization).

use super::encode::{write_compact_size, Reader};
use super::{Hash256, ParseError, MAX_MONEY};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxIn {
    pub prev_txid: Hash256,
    pub prev_vout: u32,
    pub unlock_script: Vec<u8>,
    pub sequence: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxOut {
    /// Satoshis.
    pub value: u64,
    pub lock_script: Vec<u8>,
}

/// A decoded transaction together with its position in the chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTransaction {
    pub version: i32,
    pub inputs: Vec<TxIn>,
    pub outputs: Vec<TxOut>,
    pub locktime: u32,
    /// One stack per input when the transaction used the segwit serialization.
    pub witness: Option<Vec<Vec<Vec<u8>>>>,
    pub txid: Hash256,
    pub block_height: u64,
}

impl TxIn {
    pub fn is_null_prevout(&self) -> bool {
        self.prev_txid.is_zero() && self.prev_vout == u32::MAX
    }
}

impl RawTransaction {
    /// Build a transaction from parts, computing its txid.
    pub fn new(
        version: i32,
        inputs: Vec<TxIn>,
        outputs: Vec<TxOut>,
        locktime: u32,
        witness: Option<Vec<Vec<Vec<u8>>>>,
    ) -> Self {
        let mut tx = RawTransaction {
            version,
            inputs,
            outputs,
            locktime,
            witness,
            txid: Hash256::ZERO,
            block_height: 0,
        };
        tx.txid = Hash256::double_sha256(&tx.serialize_legacy());
        tx
    }

    pub fn is_coinbase(&self) -> bool {
        self.inputs.len() == 1 && self.inputs[0].is_null_prevout()
    }

    pub fn total_output(&self) -> u64 {
        self.outputs.iter().map(|o| o.value).sum()
    }

    /// Serialization without witness data; the txid preimage.
    pub fn serialize_legacy(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.estimated_size());
        self.write(&mut out, false);
        out
    }

    /// Serialization in the form the transaction was parsed from.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.estimated_size());
        self.write(&mut out, self.witness.is_some());
        out
    }

    pub fn wtxid(&self) -> Hash256 {
        Hash256::double_sha256(&self.serialize())
    }

    fn estimated_size(&self) -> usize {
        10 + self.inputs.iter().map(|i| 41 + i.unlock_script.len()).sum::<usize>()
            + self.outputs.iter().map(|o| 9 + o.lock_script.len()).sum::<usize>()
    }

    pub(crate) fn write(&self, out: &mut Vec<u8>, with_witness: bool) {
        out.extend_from_slice(&self.version.to_le_bytes());
        if with_witness {
            out.extend_from_slice(&[0x00, 0x01]);
        }
        write_compact_size(out, self.inputs.len() as u64);
        for input in &self.inputs {
            out.extend_from_slice(&input.prev_txid.0);
            out.extend_from_slice(&input.prev_vout.to_le_bytes());
            write_compact_size(out, input.unlock_script.len() as u64);
            out.extend_from_slice(&input.unlock_script);
            out.extend_from_slice(&input.sequence.to_le_bytes());
        }
        write_compact_size(out, self.outputs.len() as u64);
        for output in &self.outputs {
            out.extend_from_slice(&output.value.to_le_bytes());
            write_compact_size(out, output.lock_script.len() as u64);
            out.extend_from_slice(&output.lock_script);
        }
        if with_witness {
            let empty = Vec::new();
            let stacks = self.witness.as_ref().unwrap_or(&empty);
            for i in 0..self.inputs.len() {
                match stacks.get(i) {
                    Some(stack) => {
                        write_compact_size(out, stack.len() as u64);
                        for item in stack {
                            write_compact_size(out, item.len() as u64);
                            out.extend_from_slice(item);
                        }
                    }
                    None => out.push(0),
                }
            }
        }
        out.extend_from_slice(&self.locktime.to_le_bytes());
    }
}

/// Parse one transaction starting at `offset`.
///
/// Returns the transaction (with `block_height` 0; the chain builder fills it
/// in) and the number of bytes consumed.
pub fn parse_transaction(bytes: &[u8], offset: usize) -> Result<(RawTransaction, usize), ParseError> {
    let mut r = Reader::new(bytes, offset);
    let tx = read_transaction(&mut r)?;
    Ok((tx, r.pos() - offset))
}

pub(crate) fn read_transaction(r: &mut Reader<'_>) -> Result<RawTransaction, ParseError> {
    let version = r.i32()?;
    let mut segwit = false;
    if r.peek()? == 0x00 {
        r.take(1)?;
        let flag = r.take(1)?[0];
        if flag != 0x01 {
            return Err(ParseError::MalformedTransaction(format!(
                "witness flag byte {flag:#04x}, expected 0x01"
            )));
        }
        segwit = true;
    }

    let n_in = r.compact_size()?;
    if n_in == 0 {
        return Err(ParseError::MalformedTransaction("zero inputs".into()));
    }
    // Each input needs at least 41 bytes; bound the allocation by what is left.
    let mut inputs = Vec::with_capacity((n_in as usize).min(r.remaining() / 41 + 1));
    for _ in 0..n_in {
        let prev_txid = Hash256(r.array()?);
        let prev_vout = r.u32()?;
        let unlock_script = r.var_bytes()?.to_vec();
        let sequence = r.u32()?;
        inputs.push(TxIn {
            prev_txid,
            prev_vout,
            unlock_script,
            sequence,
        });
    }

    let n_out = r.compact_size()?;
    let mut outputs = Vec::with_capacity((n_out as usize).min(r.remaining() / 9 + 1));
    for _ in 0..n_out {
        let value = r.u64()?;
        if value > MAX_MONEY {
            return Err(ParseError::MalformedTransaction(format!(
                "output value {value} exceeds the money supply"
            )));
        }
        let lock_script = r.var_bytes()?.to_vec();
        outputs.push(TxOut { value, lock_script });
    }

    let witness = if segwit {
        let mut stacks = Vec::with_capacity(inputs.len());
        for _ in 0..inputs.len() {
            let n_items = r.compact_size()?;
            let mut stack = Vec::with_capacity((n_items as usize).min(r.remaining() + 1));
            for _ in 0..n_items {
                stack.push(r.var_bytes()?.to_vec());
            }
            stacks.push(stack);
        }
        Some(stacks)
    } else {
        None
    };
    let locktime = r.u32()?;

    let mut tx = RawTransaction {
        version,
        inputs,
        outputs,
        locktime,
        witness,
        txid: Hash256::ZERO,
        block_height: 0,
    };
    tx.txid = Hash256::double_sha256(&tx.serialize_legacy());
    Ok(tx)
}
