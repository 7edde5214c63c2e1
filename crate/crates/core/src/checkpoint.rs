//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[4]  "MERC" (model weights) or "MERA" (adapter)
//! u32       version = 1
//! u32       tensor count
//! per tensor:
//!   u16     name length, then that many UTF-8 bytes
//!   u8      rank, then rank × u64 dims
//!   f32     × product(dims) payload
//! ```
//!
//! Tensors are written in name order, so equal parameter sets always encode
//! to equal bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkit::{ParamSet, Tensor};

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Model,
    Adapter,
}

impl Kind {
    pub fn magic(self) -> &'static [u8; 4] {
        match self {
            Kind::Model => b"MERC",
            Kind::Adapter => b"MERA",
        }
    }
}

/// Exact encoded size of `params` in bytes.
pub fn encoded_len(params: &ParamSet) -> usize {
    12 + params
        .iter()
        .map(|(name, t)| 2 + name.len() + 1 + 8 * t.rank() + 4 * t.numel())
        .sum::<usize>()
}

pub fn encode(params: &ParamSet, kind: Kind) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(encoded_len(params));
    out.extend_from_slice(kind.magic());
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(params.len()).map_err(|_| Error::Capacity("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Capacity(format!("tensor name `{name}` longer than 65535 bytes")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Capacity(format!("`{name}` has rank > 255")))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint of the given kind. Nothing is returned unless the
/// whole buffer parses.
pub fn decode(buf: &[u8], kind: Kind) -> Result<ParamSet> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != kind.magic() {
        r.pos = 0;
        return Err(r.fail(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(kind.magic())
        )));
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos = at;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format {
                offset: at as u64,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let at = r.pos;
            let d = usize::try_from(r.u64("dimension")?).ok();
            numel = match d.and_then(|d| numel.checked_mul(d).map(|n| (d, n))) {
                Some((d, n)) if n.checked_mul(4).is_some_and(|b| b <= buf.len()) => {
                    shape.push(d);
                    n
                }
                _ => {
                    r.pos = at;
                    return Err(r.fail(format!("dimension of `{name}` exceeds file size")));
                }
            };
        }
        let payload = r.take(4 * numel, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.contains(&name) {
            return Err(r.fail(format!("duplicate tensor `{name}`")));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(params)
}

/// Writes atomically: the file appears only once fully written.
pub fn save(params: &ParamSet, kind: Kind, path: &Path) -> Result<()> {
    let bytes = encode(params, kind)?;
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path, kind: Kind) -> Result<ParamSet> {
    decode(&fs::read(path)?, kind)
}

/// Lowercase hex SHA-256 of the model encoding; used as a model id.
pub fn digest(params: &ParamSet) -> Result<String> {
    Ok(hex_sha256(&encode(params, Kind::Model)?))
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
