//! Checkpoint serialisation.
//!
//! A checkpoint is two files sharing a stem: a JSON manifest
//! (`<stem>.json`) listing configs plus every tensor's name, shape, and
//! dtype, and a sidecar binary (`<stem>.bin`) holding the payloads as
//! little-endian f32 in exactly the manifest's order, row major, with no
//! padding. Because all parameters live on the f32 grid in memory, a
//! save/load cycle reproduces the model — and therefore its forward pass —
//! bit for bit.

use crate::backbone::config::ConfigError;
use crate::backbone::geometry::ModuleKind;
use crate::backbone::model::{inject_mor, Backbone, ModelError, MorModel};
use crate::adapter::RoleId;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const FORMAT_NAME: &str = "moragent-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub backbone: crate::backbone::config::BackboneConfig,
    pub mor: crate::backbone::config::MorConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Payload path that pairs with a manifest path.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

enum TensorRef<'a> {
    V(&'a Array1<f64>),
    M(&'a Array2<f64>),
}

impl TensorRef<'_> {
    fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::V(a) => vec![a.len()],
            TensorRef::M(a) => vec![a.nrows(), a.ncols()],
        }
    }

    fn write_f32_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorRef::V(a) => {
                for &v in a.iter() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            TensorRef::M(a) => {
                for &v in a.iter() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
}

/// Every tensor with its manifest name, in the fixed serialisation order:
/// embedding, blocks in layer order, final norm, head, then adapters by
/// (layer, projection kind, role).
fn catalog(model: &MorModel) -> Vec<(String, TensorRef<'_>)> {
    let mut out: Vec<(String, TensorRef)> = Vec::new();
    out.push(("embed".into(), TensorRef::M(&model.backbone.embed)));
    for (l, b) in model.backbone.blocks.iter().enumerate() {
        out.push((format!("block{l}.ln1"), TensorRef::V(&b.ln1)));
        out.push((format!("block{l}.wq"), TensorRef::M(&b.wq)));
        out.push((format!("block{l}.wk"), TensorRef::M(&b.wk)));
        out.push((format!("block{l}.wv"), TensorRef::M(&b.wv)));
        out.push((format!("block{l}.wo"), TensorRef::M(&b.wo)));
        out.push((format!("block{l}.ln2"), TensorRef::V(&b.ln2)));
        out.push((format!("block{l}.w_gate"), TensorRef::M(&b.w_gate)));
        out.push((format!("block{l}.w_up"), TensorRef::M(&b.w_up)));
        out.push((format!("block{l}.w_down"), TensorRef::M(&b.w_down)));
    }
    out.push(("final_norm".into(), TensorRef::V(&model.backbone.final_norm)));
    out.push(("lm_head".into(), TensorRef::M(&model.backbone.lm_head)));
    for (&(l, kind), layer) in &model.adapters {
        for role in RoleId::ALL {
            let g = layer.group(role);
            let stem = format!("adapters.l{l}.{kind}.{role}");
            out.push((format!("{stem}.shared.down"), TensorRef::M(&g.shared.down)));
            out.push((format!("{stem}.shared.up"), TensorRef::M(&g.shared.up)));
            for (i, p) in g.routed.iter().enumerate() {
                out.push((format!("{stem}.routed{i}.down"), TensorRef::M(&p.down)));
                out.push((format!("{stem}.routed{i}.up"), TensorRef::M(&p.up)));
            }
            out.push((format!("{stem}.router"), TensorRef::M(&g.router.weight)));
        }
    }
    out
}

/// Write `<path>` (manifest JSON) and `<path with .bin>` (payload).
pub fn save_checkpoint(model: &MorModel, manifest_path: &Path) -> Result<(), CheckpointError> {
    let entries = catalog(model);
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        backbone: model.backbone.cfg.clone(),
        mor: model.mor.clone(),
        tensors: entries
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape(),
                dtype: "f32".into(),
            })
            .collect(),
    };
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut payload = Vec::new();
    for (_, t) in &entries {
        t.write_f32_le(&mut payload);
    }
    let mut f = fs::File::create(manifest_path)?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    fs::write(payload_path(manifest_path), payload)?;
    Ok(())
}

/// Rebuild a model from manifest + payload, verifying shapes and sizes.
pub fn load_checkpoint(manifest_path: &Path) -> Result<MorModel, CheckpointError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.format != FORMAT_NAME {
        return Err(CheckpointError::Format(format!(
            "unrecognised format marker {:?}",
            manifest.format
        )));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {}",
            manifest.version
        )));
    }
    let backbone = Backbone::zeroed(manifest.backbone.clone())?;
    let mut model = inject_mor(backbone, manifest.mor.clone())?;

    // Validate the manifest's tensor list against the rebuilt skeleton.
    let expected: Vec<(String, Vec<usize>)> = catalog(&model)
        .iter()
        .map(|(n, t)| (n.clone(), t.shape()))
        .collect();
    if manifest.tensors.len() != expected.len() {
        return Err(CheckpointError::Format(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut total = 0usize;
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(CheckpointError::Format(format!(
                "tensor {:?} {:?} does not match expected {:?} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        if entry.dtype != "f32" {
            return Err(CheckpointError::Format(format!(
                "tensor {:?} has unsupported dtype {:?}",
                entry.name, entry.dtype
            )));
        }
        total += shape.iter().product::<usize>();
    }

    let payload = fs::read(payload_path(manifest_path))?;
    if payload.len() != total * 4 {
        return Err(CheckpointError::Truncated { expected: total * 4, actual: payload.len() });
    }

    // Fill tensors in catalog order. The mutable pass mirrors `catalog`.
    let mut offset = 0usize;
    {
        let read_into_2 = |a: &mut Array2<f64>, offset: &mut usize| {
            for v in a.iter_mut() {
                let bytes: [u8; 4] = payload[*offset..*offset + 4].try_into().unwrap();
                *v = f32::from_le_bytes(bytes) as f64;
                *offset += 4;
            }
        };
        let read_into_1 = |a: &mut Array1<f64>, offset: &mut usize, payload: &[u8]| {
            for v in a.iter_mut() {
                let bytes: [u8; 4] = payload[*offset..*offset + 4].try_into().unwrap();
                *v = f32::from_le_bytes(bytes) as f64;
                *offset += 4;
            }
        };

        let bb = &mut model.backbone;
        let mut embed = bb.embed.as_ref().clone();
        read_into_2(&mut embed, &mut offset);
        bb.embed = std::sync::Arc::new(embed);
        for l in 0..bb.cfg.n_layers {
            let b = &mut bb.blocks[l];
            let mut ln1 = b.ln1.as_ref().clone();
            read_into_1(&mut ln1, &mut offset, &payload);
            b.ln1 = std::sync::Arc::new(ln1);
            for kind in [ModuleKind::Query, ModuleKind::Key, ModuleKind::Value, ModuleKind::Out] {
                let mut w = b.projection(kind).as_ref().clone();
                read_into_2(&mut w, &mut offset);
                let arc = std::sync::Arc::new(w);
                match kind {
                    ModuleKind::Query => b.wq = arc,
                    ModuleKind::Key => b.wk = arc,
                    ModuleKind::Value => b.wv = arc,
                    ModuleKind::Out => b.wo = arc,
                    _ => unreachable!(),
                }
            }
            let mut ln2 = b.ln2.as_ref().clone();
            read_into_1(&mut ln2, &mut offset, &payload);
            b.ln2 = std::sync::Arc::new(ln2);
            for kind in [ModuleKind::Gate, ModuleKind::Up, ModuleKind::Down] {
                let mut w = b.projection(kind).as_ref().clone();
                read_into_2(&mut w, &mut offset);
                let arc = std::sync::Arc::new(w);
                match kind {
                    ModuleKind::Gate => b.w_gate = arc,
                    ModuleKind::Up => b.w_up = arc,
                    ModuleKind::Down => b.w_down = arc,
                    _ => unreachable!(),
                }
            }
        }
        let mut fln = bb.final_norm.as_ref().clone();
        read_into_1(&mut fln, &mut offset, &payload);
        bb.final_norm = std::sync::Arc::new(fln);
        let mut head = bb.lm_head.as_ref().clone();
        read_into_2(&mut head, &mut offset);
        bb.lm_head = std::sync::Arc::new(head);

        // Re-alias adapter bases to the freshly loaded block weights.
        let blocks = bb.blocks.clone();
        for (&(l, kind), layer) in model.adapters.iter_mut() {
            layer.base = std::sync::Arc::clone(blocks[l].projection(kind));
        }
        for layer in model.adapters.values_mut() {
            for role in RoleId::ALL {
                let g = layer.group_mut(role);
                read_into_2(&mut g.shared.down, &mut offset);
                read_into_2(&mut g.shared.up, &mut offset);
                for p in g.routed.iter_mut() {
                    read_into_2(&mut p.down, &mut offset);
                    read_into_2(&mut p.up, &mut offset);
                }
                read_into_2(&mut g.router.weight, &mut offset);
            }
        }
    }
    debug_assert_eq!(offset, payload.len());
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{RoleId, RoleMask};
    use crate::backbone::config::{BackboneConfig, MorConfig};

    fn small_model(seed: u64) -> MorModel {
        let cfg = BackboneConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
            seed,
            ..BackboneConfig::default()
        };
        let mor = MorConfig { rank: 2, total_pairs: [3, 3, 3], top_k: [2, 1, 1], ..MorConfig::default() };
        let mut m = inject_mor(Backbone::new(cfg).unwrap(), mor).unwrap();
        m.randomize_adapters(seed ^ 7, 0.2);
        m
    }

    #[test]
    fn round_trip_reproduces_forward_bits() {
        let model = small_model(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(model.base_checksum(), loaded.base_checksum());
        for key in model.trainable_keys() {
            assert_eq!(model.tensor(&key), loaded.tensor(&key));
        }
        let ids = vec![9u32, 200, 37, 258, 44];
        let mask = RoleMask(vec![RoleId::Reasoner, RoleId::Executor, RoleId::Summarizer, RoleId::Reasoner, RoleId::Executor]);
        let a = model.logits(&ids, &mask).unwrap();
        let b = loaded.logits(&ids, &mask).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let model = small_model(11);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        save_checkpoint(&model, &p1).unwrap();
        save_checkpoint(&model, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(
            std::fs::read(payload_path(&p1)).unwrap(),
            std::fs::read(payload_path(&p2)).unwrap()
        );
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let model = small_model(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&model, &path).unwrap();
        let bin = payload_path(&path);
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Truncated { .. })
        ));
        // Trailing garbage is equally fatal.
        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 8]);
        std::fs::write(&bin, extended).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn tampered_manifest_is_rejected() {
        let model = small_model(6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&model, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("\"embed\"", "\"embex\"")).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Format(_))));

        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Json(_))));
    }
}
