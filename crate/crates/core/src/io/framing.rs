//! Little-endian primitives shared by the binary codecs.

use super::IoError;

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Writer {
            buf: magic.to_vec(),
        };
        w.u32(version);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32_slice(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn f64_slice(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    /// Appends a checksum of everything after the 4-byte magic.
    pub fn finish_with_crc(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf[4..]);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    format: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Opens a container: checks magic and the trailing whole-body
    /// checksum, then positions after the version field.
    pub fn open_checked(
        format: &'static str,
        magic: &[u8; 4],
        want_version: u32,
        buf: &'a [u8],
    ) -> Result<Self, IoError> {
        if buf.len() < 12 {
            return Err(IoError::Format(format!(
                "{format}: file too short ({} bytes)",
                buf.len()
            )));
        }
        if &buf[..4] != magic {
            return Err(IoError::Format(format!(
                "{format}: bad magic {:?}, expected {:?}",
                &buf[..4.min(buf.len())],
                magic
            )));
        }
        let body = &buf[..buf.len() - 4];
        let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(&body[4..]);
        if stored != computed {
            return Err(IoError::Format(format!(
                "{format}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})"
            )));
        }
        let mut r = Reader {
            format,
            buf: body,
            pos: 4,
        };
        let version = r.u32()?;
        if version != want_version {
            return Err(IoError::Format(format!(
                "{format}: unsupported version {version}, expected {want_version}"
            )));
        }
        Ok(r)
    }

    /// Opens a container without the whole-body checksum; used where
    /// checksums are per-section instead.
    pub fn open_unchecked(
        format: &'static str,
        magic: &[u8; 4],
        want_version: u32,
        buf: &'a [u8],
    ) -> Result<Self, IoError> {
        if buf.len() < 8 {
            return Err(IoError::Format(format!(
                "{format}: file too short ({} bytes)",
                buf.len()
            )));
        }
        if &buf[..4] != magic {
            return Err(IoError::Format(format!(
                "{format}: bad magic {:?}, expected {:?}",
                &buf[..4],
                magic
            )));
        }
        let mut r = Reader {
            format,
            buf,
            pos: 4,
        };
        let version = r.u32()?;
        if version != want_version {
            return Err(IoError::Format(format!(
                "{format}: unsupported version {version}, expected {want_version}"
            )));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.buf.len() {
            return Err(IoError::Format(format!(
                "{}: truncated while reading {what} (need {n} bytes at offset {}, have {})",
                self.format,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4, "u32")?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.take(8, "f64")?.try_into().unwrap()))
    }

    pub fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>, IoError> {
        let raw = self.take(8 * n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>, IoError> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn byte_vec(&mut self, n: usize, what: &str) -> Result<&'a [u8], IoError> {
        self.take(n, what)
    }

    pub fn str(&mut self, what: &str) -> Result<String, IoError> {
        let n = self.u32()? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| {
            IoError::Format(format!("{}: {what} is not valid UTF-8", self.format))
        })
    }

    /// Errors unless every byte has been consumed.
    pub fn expect_end(&self) -> Result<(), IoError> {
        if self.pos != self.buf.len() {
            return Err(IoError::Format(format!(
                "{}: {} trailing bytes after the payload",
                self.format,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
