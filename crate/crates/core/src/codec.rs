//! Little-endian binary framing shared by the embedding, neighbour-cache and
//! checkpoint files: 4 magic bytes, a u16 version, a body, then a CRC32 of
//! every preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: &[u8; 4], version: u16) -> Self {
        let mut buf = Vec::with_capacity(1024);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    /// u32 byte length followed by UTF-8 bytes.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Validate magic and version; returns the reader positioned after them.
    pub fn open(data: &'a [u8], magic: &[u8; 4], version: u16) -> Result<Self> {
        if data.len() < 4 || &data[..4] != magic {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
            });
        }
        let mut r = Self { data, pos: 4 };
        let v = r.u16()?;
        if v != version {
            return Err(Error::Format { offset: 4, message: format!("unsupported version {v}") });
        }
        Ok(r)
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        // the trailing 4 bytes belong to the checksum
        let avail = self.data.len().saturating_sub(4).saturating_sub(self.pos);
        if n > avail {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated payload: need {n} bytes, {avail} available"),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format { offset: at as u64, message: "key is not valid UTF-8".into() })
    }

    /// Check that exactly the checksum remains and that it matches.
    pub fn finish(self) -> Result<()> {
        if self.data.len() != self.pos + 4 {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("{} unexpected trailing bytes", self.data.len().saturating_sub(self.pos + 4)),
            });
        }
        let stored = u32::from_le_bytes(self.data[self.pos..].try_into().unwrap());
        let actual = crc32fast::hash(&self.data[..self.pos]);
        if stored != actual {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            });
        }
        Ok(())
    }

    /// Bound for pre-allocating `count` items of `item_size` bytes.
    pub fn check_count(&self, count: u64, item_size: usize) -> Result<usize> {
        let avail = self.data.len().saturating_sub(4).saturating_sub(self.pos) as u64;
        if count.saturating_mul(item_size as u64) > avail {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated payload: header declares {count} entries"),
            });
        }
        Ok(count as usize)
    }
}

/// Write via a sibling temporary file and rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}


/// Compact JSON with object keys sorted, so equal values hash equally.
pub fn canonical_json<T: serde::Serialize>(value: &T) -> Result<String> {
    // serde_json's map type is ordered by key unless `preserve_order` is on
    Ok(serde_json::to_value(value)?.to_string())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod canonical_tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn key_order_is_sorted() {
        let mut a = HashMap::new();
        a.insert("zeta", 1);
        a.insert("alpha", 2);
        assert_eq!(canonical_json(&a).unwrap(), r#"{"alpha":2,"zeta":1}"#);
        assert_eq!(sha256_hex(b"").len(), 64);
    }
}

/// Verify the trailing checksum before any field is interpreted.
pub fn check_crc(data: &[u8]) -> Result<()> {
    if data.len() < 4 {
        return Err(Error::Format { offset: 0, message: "file shorter than its checksum".into() });
    }
    let body = data.len() - 4;
    let stored = u32::from_le_bytes(data[body..].try_into().unwrap());
    let actual = crc32fast::hash(&data[..body]);
    if stored != actual {
        return Err(Error::Format {
            offset: body as u64,
            message: format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        });
    }
    Ok(())
}
