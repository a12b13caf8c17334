//! Little-endian byte encoding shared by the dataset and checkpoint formats.

use crate::error::{Error, Result};

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn len_u32(&mut self, n: usize) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::Data(format!("length {n} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }
    pub fn str(&mut self, s: &str) -> Result<()> {
        self.len_u32(s.len())?;
        self.bytes(s.as_bytes());
        Ok(())
    }
    /// Append the CRC32 of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    pub fn at(buf: &'a [u8], pos: usize) -> Self {
        Reader { buf, pos }
    }
    pub fn pos(&self) -> usize {
        self.pos
    }
    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Data(format!(
                "truncated input: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.arr()?))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    pub fn usize32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    pub fn str(&mut self) -> Result<String> {
        let n = self.usize32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Data(e.to_string()))
    }
}

/// Split off and verify the trailing CRC32. Returns the covered body.
pub fn verify_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Data("file too short for a checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(body)
}

/// Check the magic, then the checksum, then the version, so that each
/// failure cause maps to its own error.
pub fn open<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Reader<'a>> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(Error::Data(format!("missing {:?} magic", String::from_utf8_lossy(magic))));
    }
    let body = verify_crc(bytes)?;
    let mut r = Reader::new(body);
    r.take(4)?;
    let found = r.u32()?;
    if found != version {
        return Err(Error::Version { found, expected: version });
    }
    Ok(r)
}
