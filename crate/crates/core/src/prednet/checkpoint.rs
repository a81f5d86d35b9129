//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "STCCKPT\0"
//! version  u32
//! meta     u32 length + UTF-8 bytes (resolved run configuration)
//! count    u32
//! tensor*  u32 name length, name, u8 dtype, u32 rank, u64 dims.., data
//! ```

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STCCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk element type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorDtype {
    F32,
    F64,
}

impl TensorDtype {
    fn code(self) -> u8 {
        match self {
            TensorDtype::F32 => 0,
            TensorDtype::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(TensorDtype::F32),
            1 => Ok(TensorDtype::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: IndexMap<String, Tensor>,
}

pub fn save_checkpoint(
    path: &Path,
    meta: &str,
    tensors: &IndexMap<String, Tensor>,
    dtype: TensorDtype,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dtype.code());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            match dtype {
                TensorDtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                TensorDtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    // Write to a sibling file first so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let meta = r.string("metadata")?;
    let count = r.u32("tensor count")?;
    let mut tensors = IndexMap::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let dtype = TensorDtype::from_code(r.take(1, "dtype")?[0])?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64("shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let width = match dtype {
            TensorDtype::F32 => 4,
            TensorDtype::F64 => 8,
        };
        let raw = r.take(numel * width, &format!("data of `{name}`"))?;
        let data = match dtype {
            TensorDtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            TensorDtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { meta, tensors })
}
