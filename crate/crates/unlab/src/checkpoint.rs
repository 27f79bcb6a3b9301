//! ULCK checkpoint format.
//!
//! Layout: magic "ULCK", format version u16 LE, manifest length u32 LE,
//! manifest JSON, then a raw blob of little-endian f64 parameter values.
//! The manifest lists parameter names, shapes, and offsets (in f64 units)
//! into the blob, plus the architecture and bundle metadata needed to
//! rebuild the model structurally before loading values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unlab_core::nn::{
    attach_ec_modules, build_backbone, validate_bundle, ModelBundle, ModelDims, Provenance,
};
use unlab_core::Tensor;

use crate::{RunError, RunResult};

pub const MAGIC: &[u8; 4] = b"ULCK";
pub const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in f64 units.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct MetaEntry {
    seed: u64,
    config_hash: String,
    provenance: String,
    ec_pretrained: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    arch: ModelDims,
    ec_attached: bool,
    meta: MetaEntry,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> RunResult<()> {
    let named = bundle.named_params();
    let mut params = Vec::with_capacity(named.len());
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in &named {
        params.push(ParamEntry { name: name.clone(), shape: tensor.shape().to_vec(), offset });
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += tensor.numel();
    }
    let manifest = Manifest {
        arch: bundle.dims.clone(),
        ec_attached: !bundle.ec_modules.is_empty(),
        meta: MetaEntry {
            seed: bundle.meta.seed,
            config_hash: bundle.meta.config_hash.clone(),
            provenance: bundle.meta.provenance.as_string(),
            ec_pretrained: bundle.meta.ec_pretrained,
        },
        params,
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| RunError::Runtime(format!("manifest encode: {e}")))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(manifest_json.len() as u32).to_le_bytes())?;
    file.write_all(&manifest_json)?;
    file.write_all(&blob)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> RunResult<ModelBundle> {
    let bytes = fs::read(path)
        .map_err(|e| RunError::Runtime(format!("read {}: {e}", path.display())))?;
    let bad = |msg: &str| RunError::Runtime(format!("{}: {msg}", path.display()));
    if bytes.len() < 10 {
        return Err(bad("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic, not a ULCK checkpoint"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version} (expected {VERSION})")));
    }
    let manifest_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let manifest_end = 10usize.checked_add(manifest_len).ok_or_else(|| bad("corrupt length"))?;
    if bytes.len() < manifest_end {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[10..manifest_end])
        .map_err(|e| bad(&format!("manifest decode: {e}")))?;
    let blob = &bytes[manifest_end..];
    if blob.len() % 8 != 0 {
        return Err(bad("blob length is not a multiple of 8"));
    }
    let blob_values = blob.len() / 8;
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blob_values != expected {
        return Err(bad(&format!("blob holds {blob_values} values, manifest expects {expected}")));
    }

    let mut bundle = build_backbone(&manifest.arch, manifest.meta.seed)?;
    if manifest.ec_attached {
        bundle = attach_ec_modules(bundle, manifest.arch.d_proj, manifest.meta.seed)?;
    }
    let read_tensor = |entry: &ParamEntry| -> RunResult<Tensor> {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset.checked_add(numel).ok_or_else(|| bad("corrupt offset"))?;
        if end > blob_values {
            return Err(bad(&format!("parameter {} overruns blob", entry.name)));
        }
        let mut data = Vec::with_capacity(numel);
        for i in entry.offset..end {
            let mut raw = [0u8; 8];
            raw.copy_from_slice(&blob[i * 8..i * 8 + 8]);
            data.push(f64::from_le_bytes(raw));
        }
        Ok(Tensor::new(&entry.shape, data)?)
    };

    let expected_names: Vec<String> =
        bundle.named_params().iter().map(|(n, _)| n.clone()).collect();
    let manifest_names: Vec<&String> = manifest.params.iter().map(|p| &p.name).collect();
    if expected_names.len() != manifest_names.len()
        || expected_names.iter().zip(&manifest_names).any(|(a, b)| &a != b)
    {
        return Err(bad("parameter list does not match the declared architecture"));
    }
    let values: Vec<Tensor> =
        manifest.params.iter().map(read_tensor).collect::<RunResult<_>>()?;
    for (slot, tensor) in bundle.params_mut().into_iter().zip(values) {
        if slot.shape() != tensor.shape() {
            return Err(bad("parameter shape mismatch"));
        }
        *slot = tensor;
    }
    bundle.meta.seed = manifest.meta.seed;
    bundle.meta.config_hash = manifest.meta.config_hash;
    bundle.meta.provenance = Provenance::parse(&manifest.meta.provenance)?;
    bundle.meta.ec_pretrained = manifest.meta.ec_pretrained;
    validate_bundle(&bundle)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use unlab_core::nn::fingerprint;

    fn sample_bundle() -> ModelBundle {
        let dims = ModelDims {
            input_dim: 4,
            stage_widths: vec![6, 6, 6],
            classes: 3,
            d_proj: 5,
            split_final: false,
        };
        let mut bundle =
            attach_ec_modules(build_backbone(&dims, 42).unwrap(), 5, 42).unwrap();
        bundle.meta.config_hash = "deadbeef".into();
        bundle.meta.provenance = Provenance::Unlearned("ec:full".into());
        bundle.meta.ec_pretrained = true;
        bundle
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ulck");
        let bundle = sample_bundle();
        save_checkpoint(&bundle, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(fingerprint(&bundle), fingerprint(&loaded));
        assert_eq!(bundle, loaded);
    }

    #[test]
    fn truncated_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ulck");
        save_checkpoint(&sample_bundle(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn future_version_errors_naming_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ulck");
        save_checkpoint(&sample_bundle(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..6].copy_from_slice(&7u16.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version 7"), "{err}");
    }

    #[test]
    fn bad_magic_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ulck");
        save_checkpoint(&sample_bundle(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("magic"));
    }
}
