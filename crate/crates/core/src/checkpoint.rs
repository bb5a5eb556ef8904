//! Self-describing binary checkpoint container.
//!
//! Layout: `HFCK` magic, u32 format version, u64 entry count, then per entry
//! a length-prefixed UTF-8 name, u32 rows, u32 cols, and `rows*cols`
//! little-endian `f64` values. Everything the trainer needs to resume —
//! parameters, latents, Adam moments, per-key step counts, schedule
//! position — is stored as named tensors, so a checkpoint round-trips to a
//! bit-identical next optimization step.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::diff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HFCK";

/// Current container format version; readers reject anything else.
pub const FORMAT_VERSION: u32 = 1;

/// A loaded checkpoint: format version plus all named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(tensors: BTreeMap<String, Tensor>) -> Checkpoint {
        Checkpoint {
            version: FORMAT_VERSION,
            tensors,
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(name, t)| {
                name.strip_prefix(prefix)
                    .map(|rest| (rest.to_string(), t.clone()))
            })
            .collect()
    }

    /// A required scalar entry (shape `[1, 1]`).
    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
        if t.dim() != (1, 1) {
            return Err(Error::Checkpoint(format!("entry {name} is not a scalar")));
        }
        Ok(t[(0, 0)])
    }
}

/// Serialize named tensors to the container format.
pub fn to_bytes(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 4 + n.len() + 8 + t.len() * 8)
        .sum();
    let mut bytes = Vec::with_capacity(16 + payload);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        bytes.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for &v in t.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

/// Parse a container from bytes.
pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Checkpoint> {
    let fail = |msg: String| Error::Checkpoint(format!("{origin}: {msg}"));
    let mut off = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if off + n > bytes.len() {
            return Err(fail("truncated".into()));
        }
        let s = &bytes[off..off + n];
        off += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(fail("bad magic, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fail(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| fail("entry name is not UTF-8".into()))?
            .to_string();
        let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let raw = take(rows * cols * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_shape_vec((rows, cols), values)
            .map_err(|_| fail(format!("bad shape for {name}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(fail(format!("duplicate entry {name}")));
        }
    }
    if off != bytes.len() {
        return Err(fail("trailing bytes after last entry".into()));
    }
    Ok(Checkpoint {
        version,
        tensors,
    })
}

/// Write a checkpoint atomically (temp file + rename).
pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let bytes = to_bytes(tensors);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt")
    ));
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint from disk.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    from_bytes(&bytes, &path.display().to_string())
}
