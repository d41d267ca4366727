//! Binary model files.
//!
//! Layout (little-endian): magic `D2D1`, `u32` format version, `u32` length
//! plus JSON configuration, `u32` tensor count, then per tensor a `u32`
//! length plus UTF-8 name, `u32` rank, `u64` dims and `f32` values.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"D2D1";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config)?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::ModelFile(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Decode the configuration and raw tensors without checking them against
/// each other.
pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ParamStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::ModelFile("not a model file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::ModelFile(format!("unsupported version {version}")));
    }
    let n = r.u32("config length")? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(n, "config")?).map_err(|e| Error::ModelFile(format!("config: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::ModelFile("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::ModelFile(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 4)
            .ok_or_else(|| Error::ModelFile(format!("tensor `{name}` is larger than the file")))?;
        let raw = r.take(numel * 4, &format!("tensor `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        params.insert(&name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::ModelFile(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((config, params))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (config, params) = decode(bytes)?;
    Model::from_params(config, params)
}

/// Load the weights under a caller-supplied configuration; any dimension
/// disagreement names the offending tensor.
pub fn from_bytes_with(bytes: &[u8], config: ModelConfig) -> Result<Model> {
    let (_, params) = decode(bytes)?;
    Model::from_params(config, params)
}

/// Write through a temporary file so a crash never leaves a partial model.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
