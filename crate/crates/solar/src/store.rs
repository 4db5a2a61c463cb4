//! Binary descriptor store.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic   4 bytes  "SOLR"
//! version u32      1
//! dim     u32
//! count   u64
//! then per record:
//!   name_len u16, name (UTF-8), dim x f32 values
//! ```
//!
//! Vectors are unit-norm within 1e-5 and names are unique. Writes go
//! through a temp file and rename; an advisory file lock serializes
//! access so one process owns a store at a time.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imageio::write_atomic;
use crate::pooling::{l2_normalize, Descriptor};

pub const STORE_MAGIC: [u8; 4] = *b"SOLR";
pub const STORE_VERSION: u32 = 1;
const UNIT_TOL: f64 = 1e-5;

/// One named vector as stored on disk (f32 precision).
#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    pub name: String,
    pub values: Vec<f32>,
}

impl StoreEntry {
    pub fn from_descriptor(name: impl Into<String>, d: &Descriptor) -> Self {
        StoreEntry {
            name: name.into(),
            values: d.values().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Promote back to a unit descriptor; the f32 rounding is corrected by
    /// re-normalizing in f64.
    pub fn to_descriptor(&self) -> Result<Descriptor> {
        let v = ndarray::Array1::from_iter(self.values.iter().map(|&x| x as f64));
        l2_normalize(&v)
    }
}

/// Advisory lock guard; released on drop.
pub struct StoreLock {
    #[allow(dead_code)]
    file: fs::File,
    path: PathBuf,
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn lock_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".lock");
    path.with_file_name(name)
}

/// Take the advisory lock for `path` (exclusive for writers, shared for
/// readers).
pub fn lock_store(path: &Path, exclusive: bool) -> Result<StoreLock> {
    let lp = lock_path(path);
    if let Some(dir) = lp.parent() {
        fs::create_dir_all(dir)?;
    }
    let file = fs::OpenOptions::new().create(true).write(true).open(&lp)?;
    #[cfg(unix)]
    {
        use std::os::unix::io::AsRawFd;
        let op = if exclusive { libc::LOCK_EX } else { libc::LOCK_SH };
        let rc = unsafe { libc::flock(file.as_raw_fd(), op) };
        if rc != 0 {
            return Err(Error::Io(std::io::Error::last_os_error()));
        }
    }
    Ok(StoreLock { file, path: lp })
}

fn validate_entries(entries: &[StoreEntry]) -> Result<u32> {
    if entries.is_empty() {
        return Err(Error::validation("store must hold at least one descriptor"));
    }
    let dim = entries[0].values.len();
    if dim == 0 || dim > u32::MAX as usize {
        return Err(Error::validation(format!("bad descriptor dimension {dim}")));
    }
    let mut names = std::collections::BTreeSet::new();
    for e in entries {
        if e.values.len() != dim {
            return Err(Error::validation(format!(
                "entry {} has dimension {}, store uses {dim}",
                e.name,
                e.values.len()
            )));
        }
        if e.name.len() > u16::MAX as usize {
            return Err(Error::validation(format!("name too long: {}", e.name)));
        }
        if !names.insert(&e.name) {
            return Err(Error::validation(format!("duplicate name {}", e.name)));
        }
        let norm: f64 = e
            .values
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::validation(format!(
                "entry {} has norm {norm}, expected 1 within {UNIT_TOL}",
                e.name
            )));
        }
    }
    Ok(dim as u32)
}

/// Serialize entries to the byte format.
pub fn encode_store(entries: &[StoreEntry]) -> Result<Vec<u8>> {
    let dim = validate_entries(entries)?;
    let mut out = Vec::new();
    out.extend_from_slice(&STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        for &v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse the byte format, reporting the byte offset of any corruption.
pub fn decode_store(bytes: &[u8]) -> Result<Vec<StoreEntry>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format(
                format!("truncated while reading {what}"),
                *pos as u64,
            ));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let magic = take(&mut pos, 4, "magic")?;
    if magic != STORE_MAGIC {
        return Err(Error::format(
            format!("bad magic {magic:02x?}, expected {:02x?}", STORE_MAGIC),
            0,
        ));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4, "version")?.try_into().unwrap());
    if version != STORE_VERSION {
        return Err(Error::format(format!("unsupported version {version}"), 4));
    }
    let dim = u32::from_le_bytes(take(&mut pos, 4, "dim")?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(take(&mut pos, 8, "count")?.try_into().unwrap()) as usize;

    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let at = pos as u64;
        let name_len =
            u16::from_le_bytes(take(&mut pos, 2, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len, "name")?.to_vec())
            .map_err(|_| Error::format(format!("record {i}: name is not UTF-8"), at))?;
        let raw = take(&mut pos, dim * 4, "values")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(StoreEntry { name, values });
    }
    if pos != bytes.len() {
        return Err(Error::format(
            format!("{} trailing bytes after {count} records", bytes.len() - pos),
            pos as u64,
        ));
    }
    validate_entries(&entries)?;
    Ok(entries)
}

/// Write a store file atomically under an exclusive advisory lock.
pub fn write_store(path: &Path, entries: &[StoreEntry]) -> Result<()> {
    let bytes = encode_store(entries)?;
    let _lock = lock_store(path, true)?;
    write_atomic(path, &bytes)
}

/// Read a store file under a shared advisory lock.
pub fn read_store(path: &Path) -> Result<Vec<StoreEntry>> {
    let _lock = lock_store(path, false)?;
    let bytes = fs::read(path)?;
    decode_store(&bytes)
}
