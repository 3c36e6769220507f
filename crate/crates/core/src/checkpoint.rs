//! Checkpoint file: a magic line, one JSON header line (model config,
//! adapter placement, parameter manifest), then every parameter as
//! little-endian f32 in manifest order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{attach, PlacementSpec};
use crate::autodiff::Origin;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegModel};

pub const MAGIC: &str = "ADAPTSEG-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub origin: Origin,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model_config: ModelConfig,
    /// `None` when no adapter set is attached.
    pub adapters: Option<PlacementSpec>,
    pub manifest: Vec<ManifestEntry>,
}

pub fn header(model: &SegModel) -> Header {
    Header {
        format_version: FORMAT_VERSION,
        model_config: model.config().clone(),
        adapters: model.adapters().map(|a| *a.spec()),
        manifest: model
            .registry()
            .iter()
            .map(|(_, e)| ManifestEntry {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                origin: e.origin,
                trainable: e.trainable(),
            })
            .collect(),
    }
}

pub fn write_checkpoint(model: &SegModel, out: &mut impl Write) -> Result<()> {
    writeln!(out, "{MAGIC} {FORMAT_VERSION}")?;
    writeln!(out, "{}", serde_json::to_string(&header(model))?)?;
    let mut payload = Vec::with_capacity(model.registry().len() * 4);
    for (_, e) in model.registry().iter() {
        for &v in e.tensor.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&payload)?;
    Ok(())
}

pub fn to_bytes(model: &SegModel) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).expect("writing to memory cannot fail");
    buf
}

pub fn read_checkpoint(input: impl Read) -> Result<SegModel> {
    let mut r = BufReader::new(input);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let expected = format!("{MAGIC} {FORMAT_VERSION}");
    if line.trim_end() != expected {
        return Err(Error::Checkpoint(format!(
            "bad magic line {:?}, expected {expected:?}",
            line.trim_end()
        )));
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;

    let mut model = SegModel::new(header.model_config.clone(), 0)?;
    if let Some(spec) = header.adapters {
        attach(&mut model, spec, 0)?;
    }
    let expected = self::header(&model).manifest;
    if expected.len() != header.manifest.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model has {}",
            header.manifest.len(),
            expected.len()
        )));
    }
    for (want, got) in expected.iter().zip(&header.manifest) {
        if (&want.name, &want.shape, want.origin) != (&got.name, &got.shape, got.origin) {
            return Err(Error::Checkpoint(format!(
                "manifest entry {} {:?} ({}) does not match model tensor {} {:?} ({})",
                got.name, got.shape, got.origin, want.name, want.shape, want.origin
            )));
        }
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let total: usize = header
        .manifest
        .iter()
        .map(|m| m.shape.iter().product::<usize>())
        .sum();
    if payload.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, manifest needs {}",
            payload.len(),
            total * 4
        )));
    }
    let mut chunks = payload.chunks_exact(4);
    let ids: Vec<_> = model.registry().ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.manifest) {
        let reg = model.registry_mut();
        for v in reg.tensor_mut(id).data_mut() {
            let b = chunks.next().expect("payload length checked");
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
        reg.set_trainable(id, entry.trainable);
    }
    Ok(model)
}

/// Writes `model` to `path`; refuses to replace an existing file unless
/// `force` is set.
pub fn save_checkpoint(model: &SegModel, path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::WouldOverwrite(path.to_path_buf()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SegModel> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    read_checkpoint(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Preset;

    fn small() -> ModelConfig {
        ModelConfig::compact()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for preset in [None, Some(Preset::GlmedSa), Some(Preset::MedSa)] {
            let mut m = SegModel::new(small(), 3).unwrap();
            if let Some(p) = preset {
                attach(&mut m, p.spec(), 5).unwrap();
                m.registry_mut().apply_freeze_policy();
            }
            let bytes = to_bytes(&m);
            let back = read_checkpoint(bytes.as_slice()).unwrap();
            assert_eq!(to_bytes(&back), bytes);
            for ((_, a), (_, b)) in m.registry().iter().zip(back.registry().iter()) {
                assert_eq!(a.name, b.name);
                assert_eq!(a.tensor.data(), b.tensor.data());
                assert_eq!(a.trainable(), b.trainable());
            }
            assert_eq!(back.placement(), m.placement());
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = SegModel::new(small(), 0).unwrap();
        let bytes = to_bytes(&m);
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_checkpoint(&b"NOT-A-CKPT 1\n{}\n"[..]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(read_checkpoint(extra.as_slice()).is_err());
    }

    #[test]
    fn refuses_overwrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = SegModel::new(small(), 0).unwrap();
        save_checkpoint(&m, &path, false).unwrap();
        assert!(matches!(
            save_checkpoint(&m, &path, false),
            Err(Error::WouldOverwrite(_))
        ));
        save_checkpoint(&m, &path, true).unwrap();
        assert_eq!(to_bytes(&load_checkpoint(&path).unwrap()), to_bytes(&m));
    }
}
