//! Binary weight checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "MILSI1"                       6-byte magic
//! config_len, config_json        ModelConfig as JSON
//! repeated until EOF:
//!   name_len, name (UTF-8)
//!   rank, dims[rank]
//!   values                       product(dims) little-endian f32
//! ```

use super::{Model, ModelConfig, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MILSI1";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Model<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + 4 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let cfg = serde_json::to_vec(self.config())?;
        put_u32(&mut out, cfg.len())?;
        out.extend_from_slice(&cfg);
        for p in self.params() {
            put_u32(&mut out, p.name.len())?;
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.shape().len())?;
            for &d in p.value.shape() {
                put_u32(&mut out, d)?;
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let len = r.u32()?;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
        let mut params = Vec::new();
        while r.pos < bytes.len() {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(Param {
                name,
                value: Tensor::new(shape, data)?,
            });
        }
        Model::from_params(config, params)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    Model::from_bytes(&std::fs::read(path)?)
}
