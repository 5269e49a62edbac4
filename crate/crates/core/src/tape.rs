//! Sectioned container for correlation tapes.
//!
//! Layout: magic `FLM1`, version u8, party u8, l u8, s u8, section count u8,
//! then one table entry per section (tag u8, count u32, byte length u64),
//! then each section body followed by its CRC32. All integers little-endian.

use std::io::{Read, Write};

use thiserror::Error;

use crate::ring::{RingElement, RingParams, ELEMENT_BYTES};

pub const MAGIC: &[u8; 4] = b"FLM1";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("not a correlation tape (bad magic)")]
    BadMagic,
    #[error("unsupported tape version {0}")]
    Version(u8),
    #[error("checksum mismatch in section {0}")]
    Checksum(u8),
    #[error("tape truncated")]
    Truncated,
    #[error("malformed tape: {0}")]
    Malformed(String),
    #[error("tape i/o: {0}")]
    Io(#[from] std::io::Error),
}

type TResult<T> = std::result::Result<T, TapeError>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Section {
    pub tag: u8,
    pub count: u32,
    pub body: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub party: u8,
    pub params: RingParams,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn section(&self, tag: u8) -> Option<&Section> {
        self.sections.iter().find(|s| s.tag == tag)
    }

    pub fn to_bytes(&self) -> TResult<Vec<u8>> {
        if self.sections.len() > u8::MAX as usize {
            return Err(TapeError::Malformed("too many sections".into()));
        }
        let body_len: usize = self.sections.iter().map(|s| s.body.len() + 4).sum();
        let mut out = Vec::with_capacity(9 + 13 * self.sections.len() + body_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[
            VERSION,
            self.party,
            self.params.l() as u8,
            self.params.s() as u8,
            self.sections.len() as u8,
        ]);
        for s in &self.sections {
            out.push(s.tag);
            out.extend_from_slice(&s.count.to_le_bytes());
            out.extend_from_slice(&(s.body.len() as u64).to_le_bytes());
        }
        for s in &self.sections {
            out.extend_from_slice(&s.body);
            out.extend_from_slice(&crc32fast::hash(&s.body).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> TResult<Container> {
        let mut r = ByteReader::new(bytes);
        if r.take(4).map_err(|_| TapeError::BadMagic)? != MAGIC {
            return Err(TapeError::BadMagic);
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(TapeError::Version(version));
        }
        let party = r.u8()?;
        let (l, s) = (r.u8()?, r.u8()?);
        let params = RingParams::new(l as u32, s as u32)
            .map_err(|e| TapeError::Malformed(format!("ring parameters: {e}")))?;
        let n = r.u8()?;
        let mut table = Vec::with_capacity(n as usize);
        for _ in 0..n {
            table.push((r.u8()?, r.u32()?, r.u64()?));
        }
        let mut sections = Vec::with_capacity(n as usize);
        for (tag, count, len) in table {
            let len = usize::try_from(len).map_err(|_| TapeError::Truncated)?;
            let body = r.take(len)?.to_vec();
            let crc = r.u32()?;
            if crc32fast::hash(&body) != crc {
                return Err(TapeError::Checksum(tag));
            }
            sections.push(Section { tag, count, body });
        }
        if !r.is_empty() {
            return Err(TapeError::Malformed("trailing bytes".into()));
        }
        Ok(Container { party, params, sections })
    }

    pub fn write_to(&self, w: &mut impl Write) -> TResult<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> TResult<Container> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Container::from_bytes(&bytes)
    }
}

/// Little-endian append-only encoder.
#[derive(Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn element(&mut self, e: RingElement) {
        self.buf.extend_from_slice(&e.to_le_bytes());
    }

    pub fn elements(&mut self, es: &[RingElement]) {
        for &e in es {
            self.element(e);
        }
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

/// Little-endian cursor decoder. Every read reports truncation.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> TResult<&'a [u8]> {
        if self.remaining() < n {
            return Err(TapeError::Truncated);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn array<const N: usize>(&mut self) -> TResult<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub fn u8(&mut self) -> TResult<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> TResult<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> TResult<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> TResult<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn element(&mut self, params: RingParams) -> TResult<RingElement> {
        let b = self.take(ELEMENT_BYTES)?;
        params
            .decode_element(b)
            .map_err(|e| TapeError::Malformed(e.to_string()))
    }

    pub fn elements(&mut self, params: RingParams, n: usize) -> TResult<Vec<RingElement>> {
        (0..n).map(|_| self.element(params)).collect()
    }

    /// Length-prefixed (u32) element vector.
    pub fn element_vec(&mut self, params: RingParams) -> TResult<Vec<RingElement>> {
        let n = self.u32()? as usize;
        if n.saturating_mul(ELEMENT_BYTES) > self.remaining() {
            return Err(TapeError::Truncated);
        }
        self.elements(params, n)
    }
}

impl ByteWriter {
    pub fn element_vec(&mut self, es: &[RingElement]) {
        self.u32(es.len() as u32);
        self.elements(es);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let p = RingParams::new(8, 4).unwrap();
        let mut w = ByteWriter::new();
        w.element_vec(&[p.element(1), p.element(4095)]);
        Container {
            party: 1,
            params: p,
            sections: vec![
                Section { tag: 1, count: 1, body: w.into_inner() },
                Section { tag: 9, count: 0, body: vec![] },
            ],
        }
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"FLM1");
        assert_eq!(bytes[4..9], [VERSION, 1, 8, 4, 2]);
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut r = ByteReader::new(&back.section(1).unwrap().body);
        let v = r.element_vec(c.params).unwrap();
        assert_eq!(v[1].value(), 4095);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let table_end = 9 + 2 * 13;
        let mut flipped = bytes.clone();
        flipped[table_end + 5] ^= 0x10;
        assert!(matches!(Container::from_bytes(&flipped), Err(TapeError::Checksum(1))));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Container::from_bytes(&magic), Err(TapeError::BadMagic)));

        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 2]), Err(TapeError::Truncated)));
    }
}
