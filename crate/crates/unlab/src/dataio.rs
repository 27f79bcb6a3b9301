//! ULAB dataset format.
//!
//! Layout: magic "ULAB", version u16 LE, u32 n, u32 d, u32 C, u8 split tag
//! (0 train / 1 test), n*d little-endian f64 features row-major, then n
//! u16 LE labels.

use std::fs;
use std::io::Write;
use std::path::Path;

use unlab_core::data::{Dataset, SplitTag};
use unlab_core::Tensor;

use crate::{RunError, RunResult};

pub const MAGIC: &[u8; 4] = b"ULAB";
pub const VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4 + 1;

pub fn save_dataset(ds: &Dataset, path: &Path) -> RunResult<()> {
    if ds.classes > u16::MAX as usize + 1 {
        return Err(RunError::Runtime(format!(
            "ULAB labels are u16; {} classes do not fit",
            ds.classes
        )));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(ds.len() as u32).to_le_bytes())?;
    file.write_all(&(ds.dim() as u32).to_le_bytes())?;
    file.write_all(&(ds.classes as u32).to_le_bytes())?;
    file.write_all(&[match ds.split {
        SplitTag::Train => 0u8,
        SplitTag::Test => 1u8,
    }])?;
    let mut payload = Vec::with_capacity(ds.len() * ds.dim() * 8 + ds.len() * 2);
    for v in ds.features.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.labels {
        payload.extend_from_slice(&(y as u16).to_le_bytes());
    }
    file.write_all(&payload)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> RunResult<Dataset> {
    let bytes = fs::read(path)
        .map_err(|e| RunError::Runtime(format!("read {}: {e}", path.display())))?;
    let bad = |msg: &str| RunError::Runtime(format!("{}: {msg}", path.display()));
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic, not a ULAB dataset"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version} (expected {VERSION})")));
    }
    let u32_at = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let n = u32_at(6) as usize;
    let d = u32_at(10) as usize;
    let classes = u32_at(14) as usize;
    let split = match bytes[18] {
        0 => SplitTag::Train,
        1 => SplitTag::Test,
        other => return Err(bad(&format!("unknown split tag {other}"))),
    };
    let feat_bytes = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| bad("size overflow"))?;
    let expected = HEADER_LEN + feat_bytes + n * 2;
    if bytes.len() < expected {
        return Err(bad("truncated payload"));
    }
    if bytes.len() > expected {
        return Err(bad("trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n * d {
        let at = HEADER_LEN + i * 8;
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&bytes[at..at + 8]);
        data.push(f64::from_le_bytes(raw));
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let at = HEADER_LEN + feat_bytes + i * 2;
        let y = u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize;
        if y >= classes {
            return Err(bad(&format!("label {y} out of range for {classes} classes")));
        }
        labels.push(y);
    }
    let features = Tensor::new(&[n, d], data)?;
    Ok(Dataset::new(features, labels, classes, split)?)
}
