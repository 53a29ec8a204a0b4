//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MMTTCKPT"
//! version    u32      CHECKPOINT_VERSION
//! header     u32 length + UTF-8 JSON of ModelConfig
//! count      u32      number of parameter tensors
//! per tensor:
//!   name     u32 length + UTF-8 bytes
//!   kind     u8       0 weight, 1 bias, 2 norm scale, 3 norm shift
//!   rank     u32, then rank x u64 dims
//!   values   f64 x product(dims)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, MultimodalClassifier, ParamKind, Parameter};
use crate::autodiff::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMTTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &MultimodalClassifier, mut out: impl Write) -> Result<(), ModelError> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(model.config()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&(model.parameters().len() as u32).to_le_bytes())?;
    for p in model.parameters() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        let kind: u8 = match p.kind {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::NormScale => 2,
            ParamKind::NormShift => 3,
        };
        out.write_all(&[kind])?;
        out.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ModelError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ModelError::Checkpoint(format!("invalid UTF-8 at byte {at}")))
    }
}

pub fn read_checkpoint(mut input: impl Read) -> Result<MultimodalClassifier, ModelError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic tag".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported format version {version}")));
    }
    let header = c.string()?;
    let config: ModelConfig = serde_json::from_str(&header).map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    let count = c.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = c.string()?;
        let at = c.pos;
        let kind = match c.take(1)?[0] {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::NormScale,
            3 => ParamKind::NormShift,
            k => return Err(ModelError::Checkpoint(format!("unknown parameter kind {k} at byte {at}"))),
        };
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| ModelError::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        params.push(Parameter {
            name,
            kind,
            value: Tensor::new(shape, data)?,
        });
    }
    if c.pos != buf.len() {
        return Err(ModelError::Checkpoint(format!("trailing bytes after offset {}", c.pos)));
    }
    MultimodalClassifier::from_parameters(config, params)
}

pub fn save_checkpoint(model: &MultimodalClassifier, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MultimodalClassifier, ModelError> {
    read_checkpoint(fs::File::open(path)?)
}
