//! Little-endian primitives and the compact-size integer encoding.

use super::ParseError;

/// Decode a compact-size integer from the front of `bytes`.
///
/// Returns the value and the number of bytes consumed. Non-canonical
/// encodings are accepted here; callers that need byte-exact round trips
/// check [`compact_size_len`] against the consumed length.
pub fn decode_compact_size(bytes: &[u8]) -> Result<(u64, usize), ParseError> {
    let first = *bytes.first().ok_or(ParseError::TruncatedInput {
        offset: 0,
        needed: 1,
        available: 0,
    })?;
    let width = match first {
        0xfd => 2,
        0xfe => 4,
        0xff => 8,
        v => return Ok((u64::from(v), 1)),
    };
    if bytes.len() < 1 + width {
        return Err(ParseError::TruncatedInput {
            offset: 0,
            needed: 1 + width,
            available: bytes.len(),
        });
    }
    let mut buf = [0u8; 8];
    buf[..width].copy_from_slice(&bytes[1..1 + width]);
    Ok((u64::from_le_bytes(buf), 1 + width))
}

/// Length of the canonical compact-size encoding of `value`.
pub fn compact_size_len(value: u64) -> usize {
    match value {
        0..=0xfc => 1,
        0xfd..=0xffff => 3,
        0x1_0000..=0xffff_ffff => 5,
        _ => 9,
    }
}

pub fn write_compact_size(out: &mut Vec<u8>, value: u64) {
    match value {
        0..=0xfc => out.push(value as u8),
        0xfd..=0xffff => {
            out.push(0xfd);
            out.extend_from_slice(&(value as u16).to_le_bytes());
        }
        0x1_0000..=0xffff_ffff => {
            out.push(0xfe);
            out.extend_from_slice(&(value as u32).to_le_bytes());
        }
        _ => {
            out.push(0xff);
            out.extend_from_slice(&value.to_le_bytes());
        }
    }
}

/// Forward-only cursor over a byte slice. Offsets in errors are absolute.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], pos: usize) -> Self {
        Reader { bytes, pos }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len().saturating_sub(self.pos)
    }

    pub fn peek(&self) -> Result<u8, ParseError> {
        self.bytes.get(self.pos).copied().ok_or(self.truncated(1))
    }

    fn truncated(&self, needed: usize) -> ParseError {
        ParseError::TruncatedInput {
            offset: self.pos,
            needed,
            available: self.remaining(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], ParseError> {
        if self.remaining() < n {
            return Err(self.truncated(n));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], ParseError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32, ParseError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn i32(&mut self) -> Result<i32, ParseError> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, ParseError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    /// Compact size, rejecting non-canonical encodings.
    pub fn compact_size(&mut self) -> Result<u64, ParseError> {
        let start = self.pos;
        let (value, used) =
            decode_compact_size(&self.bytes[self.pos.min(self.bytes.len())..]).map_err(|e| match e {
                ParseError::TruncatedInput { needed, available, .. } => ParseError::TruncatedInput {
                    offset: start,
                    needed,
                    available,
                },
                other => other,
            })?;
        if used != compact_size_len(value) {
            return Err(ParseError::MalformedTransaction(format!(
                "non-canonical compact size at offset {start}"
            )));
        }
        self.pos += used;
        Ok(value)
    }

    /// Length-prefixed byte string.
    pub fn var_bytes(&mut self) -> Result<&'a [u8], ParseError> {
        let len = self.compact_size()?;
        if len > self.remaining() as u64 {
            return Err(self.truncated(len.min(usize::MAX as u64) as usize));
        }
        self.take(len as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_byte_values() {
        assert_eq!(decode_compact_size(&[0x05]).unwrap(), (5, 1));
        assert_eq!(decode_compact_size(&[0xfc, 0xaa]).unwrap(), (0xfc, 1));
    }

    #[test]
    fn multi_byte_values() {
        assert_eq!(decode_compact_size(&[0xfd, 0x00, 0x01]).unwrap(), (256, 3));
        assert_eq!(
            decode_compact_size(&[0xfe, 0x00, 0x00, 0x01, 0x00]).unwrap(),
            (65536, 5)
        );
        assert_eq!(decode_compact_size(&[0xff, 1, 0, 0, 0, 0, 0, 0, 0]).unwrap(), (1, 9));
    }

    #[test]
    fn truncated() {
        assert!(matches!(
            decode_compact_size(&[0xfd, 0x01]),
            Err(ParseError::TruncatedInput { needed: 3, .. })
        ));
        assert!(matches!(
            decode_compact_size(&[]),
            Err(ParseError::TruncatedInput { .. })
        ));
    }

    #[test]
    fn canonical_writer_matches_len() {
        for v in [0u64, 0xfc, 0xfd, 0xffff, 0x1_0000, 0xffff_ffff, 0x1_0000_0000, u64::MAX] {
            let mut out = Vec::new();
            write_compact_size(&mut out, v);
            assert_eq!(out.len(), compact_size_len(v));
            assert_eq!(decode_compact_size(&out).unwrap(), (v, out.len()));
        }
    }

    #[test]
    fn reader_rejects_non_canonical() {
        let bytes = [0xfd, 0x05, 0x00];
        let mut r = Reader::new(&bytes, 0);
        assert!(matches!(r.compact_size(), Err(ParseError::MalformedTransaction(_))));
    }
}
