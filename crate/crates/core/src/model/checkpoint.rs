//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! "TFCK" | version u32 | NetworkSpec as canonical JSON
//! then per tensor until EOF:
//!   name_len u32 | name bytes | rank u32 | dims u32 × rank | values f64 × numel
//! ```
//!
//! The JSON has sorted keys and no whitespace, so equal specs produce equal
//! bytes.

use std::fs;
use std::path::Path;

use super::{NetworkParams, NetworkSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &NetworkParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    // Round-tripping through Value sorts object keys.
    let spec = serde_json::to_value(params.spec())?;
    out.extend_from_slice(serde_json::to_string(&spec)?.as_bytes());
    for (name, t) in params.named() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parse checkpoint bytes; `origin` names the source in errors.
pub fn decode_checkpoint(bytes: &[u8], origin: &str) -> Result<NetworkParams> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path: origin,
    };
    if r.take(4).map_err(|_| Error::BadMagic {
        path: origin.into(),
    })? != CHECKPOINT_MAGIC
    {
        return Err(Error::BadMagic {
            path: origin.into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: origin.into(),
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let mut stream =
        serde_json::Deserializer::from_slice(&bytes[r.pos..]).into_iter::<NetworkSpec>();
    let spec = match stream.next() {
        Some(Ok(spec)) => spec,
        Some(Err(e)) if e.is_eof() => {
            return Err(Error::Truncated {
                path: origin.into(),
            })
        }
        Some(Err(e)) => {
            return Err(Error::Format {
                path: origin.into(),
                message: format!("bad network spec: {e}"),
            })
        }
        None => {
            return Err(Error::Truncated {
                path: origin.into(),
            })
        }
    };
    r.pos += stream.byte_offset();

    let mut named = Vec::new();
    while !r.at_end() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format {
            path: origin.into(),
            message: "parameter name is not UTF-8".into(),
        })?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        named.push((name, Tensor::new(shape, data)?));
    }
    NetworkParams::from_named(&spec, named).map_err(|e| Error::Format {
        path: origin.into(),
        message: e.to_string(),
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &NetworkParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
