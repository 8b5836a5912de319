//! Little-endian reading and writing shared by the dataset and checkpoint files.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("{kind} file: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        kind: &'static str,
        expected: String,
        found: String,
    },

    #[error("{kind} file: version {found} is not supported (this build reads version {expected})")]
    Version {
        kind: &'static str,
        found: u16,
        expected: u16,
    },

    #[error("{kind} file truncated while reading {what} at byte {offset}: needed {needed} bytes, {available} left")]
    Truncated {
        kind: &'static str,
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("{kind} file: {count} unexpected trailing bytes")]
    TrailingBytes { kind: &'static str, count: usize },

    #[error("{kind} file: {detail}")]
    Invalid { kind: &'static str, detail: String },
}

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
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
}

pub(crate) struct Reader<'a> {
    kind: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(kind: &'static str, buf: &'a [u8]) -> Self {
        Reader { kind, buf, pos: 0 }
    }

    pub fn invalid(&self, detail: impl Into<String>) -> FormatError {
        FormatError::Invalid {
            kind: self.kind,
            detail: detail.into(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if n > self.remaining() {
            return Err(FormatError::Truncated {
                kind: self.kind,
                what,
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Fails unless `count` items of `width` bytes remain, so corrupt counts
    /// never drive a huge allocation.
    pub fn expect(&self, count: usize, width: usize, what: &'static str) -> Result<(), FormatError> {
        let needed = count.checked_mul(width).ok_or_else(|| self.invalid(format!("{what} count {count} overflows")))?;
        if needed > self.remaining() {
            return Err(FormatError::Truncated {
                kind: self.kind,
                what,
                offset: self.pos,
                needed,
                available: self.remaining(),
            });
        }
        Ok(())
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], FormatError> {
        Ok(self.take(N, what)?.try_into().expect("slice of length N"))
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.array::<4>("magic")?;
        if &found != expected {
            return Err(FormatError::BadMagic {
                kind: self.kind,
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(&found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u16) -> Result<(), FormatError> {
        let found = self.u16("version")?;
        if found != expected {
            return Err(FormatError::Version {
                kind: self.kind,
                found,
                expected,
            });
        }
        Ok(())
    }

    pub fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub fn f32(&mut self, what: &'static str) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.array(what)?))
    }

    pub fn f64(&mut self, what: &'static str) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    pub fn finish(self) -> Result<(), FormatError> {
        match self.remaining() {
            0 => Ok(()),
            count => Err(FormatError::TrailingBytes { kind: self.kind, count }),
        }
    }
}
