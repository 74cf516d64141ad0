//! Binary checkpoint format.
//!
//! ```text
//! "MDCK"                      4 bytes
//! version                     u32 LE
//! config length               u32 LE, then that many bytes of key=value text
//! repeated until end of file:
//!   name length               u32 LE
//!   name                      UTF-8 bytes
//!   rank                      u32 LE
//!   dims                      rank x u64 LE
//!   payload                   product(dims) x f64 LE
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{EmbeddingNet, NetConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(net: &EmbeddingNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EmbeddingNet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}

pub(crate) fn encode(net: &EmbeddingNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = net.config().to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, tensor) in net.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(format!(
                "truncated {what}: expected {n} bytes, found {remaining} at offset {}",
                self.pos
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub(crate) fn decode(bytes: &[u8]) -> std::result::Result<EmbeddingNet, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err("bad magic bytes, not a checkpoint file".into());
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        ));
    }
    let text_len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(text_len, "config text")?)
        .map_err(|_| "config text is not UTF-8".to_string())?;
    let config = NetConfig::from_text(text).map_err(|e| e.to_string())?;

    let mut params = BTreeMap::new();
    while !r.at_end() {
        let name_len = r.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_string();
        let rank = r.u32("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("parameter dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 8, &format!("payload of `{name}`"))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(format!("duplicate parameter `{name}`"));
        }
    }
    EmbeddingNet::from_params(config, params).map_err(|e| e.to_string())
}
