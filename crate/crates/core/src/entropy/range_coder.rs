//! Byte-oriented range coder with 32-bit state and carry propagation.
//!
//! Symbol intervals are mapped as `[r*c_lo >> P, r*c_hi >> P)` computed in 64
//! bits, which partitions the current range exactly.  The final flush emits
//! the fewest bytes that pin a value inside the last interval; the decoder
//! reads zeros past the end of input.

use super::cdf::CdfTable;
use crate::error::{Error, Result};

const TOP: u64 = 1 << 24;
const SPAN: u64 = 1 << 32;

pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: SPAN - 1,
            out: Vec::new(),
        }
    }

    fn carry(&mut self) {
        for b in self.out.iter_mut().rev() {
            let (v, overflow) = b.overflowing_add(1);
            *b = v;
            if !overflow {
                return;
            }
        }
        unreachable!("carry past the first byte: the coded value exceeds 1");
    }

    pub fn encode(&mut self, symbol: i32, table: &CdfTable) -> Result<()> {
        let (c_lo, c_hi) = table.interval(symbol).ok_or(Error::SymbolOutOfSupport {
            symbol,
            lo: table.lo(),
            hi: table.hi(),
        })?;
        let p = table.precision();
        let a = (self.range * c_lo as u64) >> p;
        let b = (self.range * c_hi as u64) >> p;
        self.low += a;
        self.range = b - a;
        if self.low >= SPAN {
            self.low -= SPAN;
            self.carry();
        }
        while self.range < TOP {
            self.out.push((self.low >> 24) as u8);
            self.low = (self.low & 0x00FF_FFFF) << 8;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        let (k, v) = flush_value(self.low, self.range);
        let v = if v >= SPAN {
            self.carry();
            v - SPAN
        } else {
            v
        };
        for i in 0..k {
            self.out.push((v >> (24 - 8 * i)) as u8);
        }
        self.out
    }
}

/// Fewest leading bytes `k` of a value `v` in `[low, low + range)` whose
/// remaining bytes are zero.
fn flush_value(low: u64, range: u64) -> (usize, u64) {
    for k in 0..4 {
        let unit = 1u64 << (32 - 8 * k);
        let v = low.div_ceil(unit) * unit;
        if v < low + range {
            return (k, v);
        }
    }
    (4, low)
}

pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    low: u64,
    range: u64,
    /// `code - low`, always below `range` on valid input.
    offset: u64,
    emitted: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = Self {
            bytes,
            pos: 0,
            low: 0,
            range: SPAN - 1,
            offset: 0,
            emitted: 0,
        };
        for _ in 0..4 {
            d.offset = (d.offset << 8) | d.next_byte();
        }
        d
    }

    fn next_byte(&mut self) -> u64 {
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b as u64
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<i32> {
        let p = table.precision();
        let t = (((self.offset + 1) << p) - 1) / self.range;
        if t >= 1 << p {
            return Err(Error::Entropy("range-coded payload is corrupt".into()));
        }
        let (symbol, c_lo, c_hi) = table.lookup(t as u32);
        let a = (self.range * c_lo as u64) >> p;
        let b = (self.range * c_hi as u64) >> p;
        self.offset -= a;
        self.low = (self.low + a) % SPAN;
        self.range = b - a;
        while self.range < TOP {
            self.offset = (self.offset << 8) | self.next_byte();
            self.low = (self.low & 0x00FF_FFFF) << 8;
            self.range <<= 8;
            self.emitted += 1;
        }
        Ok(symbol)
    }

    /// Checks that the input length equals what the encoder produced.
    /// Checks that the input length equals what the encoder produced and that
    /// the final code value is the one the encoder's flush would pick.
    pub fn finish(self) -> Result<()> {
        let (k, v) = flush_value(self.low, self.range);
        let expected = self.emitted + k;
        let actual = self.bytes.len();
        match actual.cmp(&expected) {
            std::cmp::Ordering::Less => Err(Error::Truncated { expected, actual }),
            std::cmp::Ordering::Greater => Err(Error::TrailingBytes { expected, actual }),
            std::cmp::Ordering::Equal if (self.low + self.offset) % SPAN != v % SPAN => {
                Err(Error::Entropy("range-coded payload does not end on a flush boundary".into()))
            }
            std::cmp::Ordering::Equal => Ok(()),
        }
    }
}

/// Encodes `symbols[i]` with `tables[i]`.
pub fn range_encode(symbols: &[i32], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::shape(
            "range_encode",
            format!("{} symbols but {} tables", symbols.len(), tables.len()),
        ));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(s, t)?;
    }
    Ok(enc.finish())
}

/// Decodes `tables.len()` symbols and checks the payload length.
pub fn range_decode(bytes: &[u8], tables: &[&CdfTable]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes);
    let out = tables.iter().map(|t| dec.decode(t)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}
