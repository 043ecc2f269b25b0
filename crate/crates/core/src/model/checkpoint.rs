//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "USAMCKPT" | version u32 | config_len u64 | config JSON
//! repeated: name_len u32 | name | rank u32 | extents u64 × rank | f32 × numel
//! ```
//!
//! Records are written in sorted name order and run to end of file.

use std::path::Path;

use super::{check_params, ModelConfig, ModelError, ParamStore, PromptModel};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"USAMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &PromptModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * model.num_parameters());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    for (name, t) in &model.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<PromptModel, ModelError> {
    let head = &bytes[..bytes.len().min(8)];
    if head != &CHECKPOINT_MAGIC[..head.len()] {
        return Err(ModelError::Version("bad magic; not an ultrasam checkpoint".into()));
    }
    let mut r = Reader { buf: bytes, pos: 0 };
    r.take(8, "magic")?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let cfg_len = r.u64("config length")? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(cfg_len, "config")?)
        .map_err(|e| ModelError::CheckpointConfig(e.to_string()))?;
    cfg.validate()?;
    let expected: std::collections::HashMap<String, Vec<usize>> = super::param_specs(&cfg)
        .into_iter()
        .map(|s| (s.name, s.shape))
        .collect();

    let mut params = ParamStore::new();
    while !r.done() {
        let name_len = r.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| ModelError::CheckpointConfig("parameter name is not UTF-8".into()))?
            .to_string();
        let what = format!("parameter {name}");
        let rank = r.u32(&what)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&what)? as usize);
        }
        let want = expected
            .get(&name)
            .ok_or_else(|| ModelError::UnknownParameter(name.clone()))?;
        if &shape != want {
            return Err(ModelError::ParamShape {
                name,
                expected: want.clone(),
                got: shape,
            });
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n, &what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(ModelError::CheckpointConfig(format!("duplicate parameter {name}")));
        }
    }
    check_params(&cfg, &params)?;
    Ok(PromptModel { config: cfg, params })
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save_checkpoint(model: &PromptModel, path: &Path) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, write_checkpoint(model)).map_err(|e| ModelError::Io(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<PromptModel, ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    read_checkpoint(&bytes)
}
