//! Binary checkpoints: `SGCK`, version, spec text, then named f64 tensors.
//! All integers little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::layers::ParamStore;
use super::model::Model;
use super::spec::ArchitectureSpec;
use crate::error::{Result, SegError};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| SegError::InvalidArgument(format!("{what} {n} does not fit in u32")))
}

/// Serializes every parameter, buffers included, in registration order.
pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = model.spec().to_canonical_text();
    buf.extend_from_slice(&u32_of(text.len(), "spec length")?.to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    let params: &ParamStore = model.params();
    buf.extend_from_slice(&u32_of(params.len(), "parameter count")?.to_le_bytes());
    for (name, p) in params {
        let len = u16::try_from(name.len())
            .map_err(|_| SegError::InvalidArgument(format!("parameter name `{name}` too long")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        for d in p.value.shape().dims() {
            buf.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
        .map_err(|e| SegError::format(format!("write failed: {e}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            SegError::format(format!("truncated checkpoint while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint and checks it against the layout its spec implies.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Model> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| SegError::format(format!("read failed: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(SegError::format(format!("bad magic {magic:?}, expected \"SGCK\"")));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(SegError::format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let text_len = cur.u32("spec length")? as usize;
    let text = std::str::from_utf8(cur.take(text_len, "spec")?)
        .map_err(|_| SegError::format("spec block is not UTF-8"))?;
    let spec = ArchitectureSpec::from_canonical_text(text)?;
    let mut model = Model::skeleton(&spec)?;

    let count = cur.u32("parameter count")? as usize;
    if count != model.params().len() {
        return Err(SegError::format(format!(
            "checkpoint has {count} parameters, {} spec implies {}",
            spec.family,
            model.params().len()
        )));
    }
    for _ in 0..count {
        let len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| SegError::format("parameter name is not UTF-8"))?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = cur.u32("shape")? as usize;
        }
        let shape = Shape::from_dims(dims);
        let expected = model
            .params()
            .get(&name)
            .map(|p| p.value.shape())
            .ok_or_else(|| SegError::format(format!("unexpected parameter `{name}`")))?;
        if expected != shape {
            return Err(SegError::format(format!(
                "parameter `{name}` has shape {shape}, spec implies {expected}"
            )));
        }
        let raw = cur.take(shape.numel() * 8, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.set_param(&name, Tensor::new(shape, data)?)?;
    }
    if cur.pos != bytes.len() {
        return Err(SegError::format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - cur.pos
        )));
    }
    Ok(model)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &buf).map_err(|e| SegError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| SegError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = std::fs::File::open(path).map_err(|e| SegError::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file)).map_err(|e| e.at_path(path))
}
