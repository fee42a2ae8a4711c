//! Little-endian primitives shared by the on-disk formats.

use crate::error::DataError;

pub(crate) struct Out(pub Vec<u8>);

impl Out {
    pub fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn len32(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("count exceeds u32"));
    }
    pub fn string(&mut self, s: &str) {
        self.len32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

pub(crate) struct In<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl In<'_> {
    pub fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N], DataError> {
        let end = self.pos + N;
        if end > self.buf.len() {
            return Err(DataError::Parse {
                offset: self.pos as u64,
                detail: format!("unexpected end of file reading {what}"),
            });
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..end]);
        self.pos = end;
        Ok(out)
    }
    pub fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(what)?))
    }
    pub fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(what)?))
    }
    pub fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(what)?))
    }
    pub fn f64(&mut self, what: &str) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(what)?))
    }
    pub fn usize(&mut self, what: &str) -> Result<usize, DataError> {
        self.u32(what).map(|v| v as usize)
    }
    pub fn string(&mut self, what: &str) -> Result<String, DataError> {
        let n = self.usize(what)?;
        let start = self.pos;
        if start + n > self.buf.len() {
            return Err(DataError::Parse {
                offset: start as u64,
                detail: format!("unexpected end of file reading {what}"),
            });
        }
        self.pos += n;
        String::from_utf8(self.buf[start..start + n].to_vec()).map_err(|_| DataError::Parse {
            offset: start as u64,
            detail: format!("{what} is not valid UTF-8"),
        })
    }
}
