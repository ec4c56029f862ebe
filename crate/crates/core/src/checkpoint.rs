//! Model checkpoints: a manifest plus one raw little-endian f64 blob per
//! parameter tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_blob, resolve_relative, write_file, BlobRef, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, StitchModel};
use crate::nn::Parameterized;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    Full,
    AdaptersOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub scope: Scope,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, BlobRef>,
}

fn in_scope(scope: Scope, name: &str) -> bool {
    scope == Scope::Full || name.starts_with("adapters.")
}

pub fn save_checkpoint(model: &StitchModel, dir: &Path, scope: Scope) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mut result = Ok(());
    model.visit("", &mut |name, t| {
        if result.is_err() || !in_scope(scope, name) {
            return;
        }
        let rel = format!("params/{name}.f64");
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        result = write_file(&dir.join(&rel), &bytes);
        tensors.insert(name.to_string(), BlobRef { path: rel, shape: t.shape().to_vec() });
    });
    result?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        scope,
        config: model.config().clone(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})", manifest.version),
        ));
    }
    Ok(manifest)
}

/// Rebuilds the model a full checkpoint was taken from.
pub fn load_checkpoint(dir: &Path) -> Result<StitchModel> {
    let manifest = read_manifest(dir)?;
    if manifest.scope != Scope::Full {
        return Err(Error::Config("adapters-only checkpoint needs a backbone; use load_into".into()));
    }
    let mut model = StitchModel::new(manifest.config.clone(), 0)?;
    apply(&mut model, dir, &manifest)?;
    Ok(model)
}

/// Loads a checkpoint onto an existing model. Full checkpoints must come
/// from an identical config; adapter checkpoints need matching encoders,
/// modalities and adapter layout.
pub fn load_into(model: &mut StitchModel, dir: &Path) -> Result<()> {
    let manifest = read_manifest(dir)?;
    let (saved, ours) = (&manifest.config, model.config());
    let compatible = match manifest.scope {
        Scope::Full => saved == ours,
        Scope::AdaptersOnly => {
            saved.encoder == ours.encoder && saved.modalities == ours.modalities && saved.stitch == ours.stitch
        }
    };
    if !compatible {
        return Err(Error::Config(format!(
            "checkpoint config ({} modalities, stitch {:?}) does not match model ({} modalities, stitch {:?})",
            saved.modalities.len(),
            saved.stitch,
            ours.modalities.len(),
            ours.stitch
        )));
    }
    apply(model, dir, &manifest)
}

fn apply(model: &mut StitchModel, dir: &Path, manifest: &CheckpointManifest) -> Result<()> {
    let mut expected = Vec::new();
    model.visit("", &mut |name, t| {
        if in_scope(manifest.scope, name) {
            expected.push((name.to_string(), t.shape().to_vec()));
        }
    });
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, model expects {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut values = BTreeMap::new();
    for (name, shape) in &expected {
        let blob = manifest
            .tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {name}")))?;
        if &blob.shape != shape {
            return Err(Error::Config(format!("tensor {name}: checkpoint shape {:?}, model shape {shape:?}", blob.shape)));
        }
        let n: usize = shape.iter().product();
        let bytes = read_blob(&resolve_relative(dir, &blob.path)?, n * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        values.insert(name.clone(), data);
    }
    model.visit_mut("", &mut |name, t| {
        if let Some(data) = values.remove(name) {
            t.data_mut().copy_from_slice(&data);
        }
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::nn::named_params;
    use crate::stitch::{DensityConfig, DensityVariant};

    fn stitched(m: usize) -> ModelConfig {
        tiny_config(m, Some(DensityConfig::new(DensityVariant::PairBidirectional, [3, 4])), true)
    }

    fn same_params(a: &StitchModel, b: &StitchModel) -> bool {
        let (pa, pb) = (named_params(a), named_params(b));
        pa.len() == pb.len()
            && pa.iter().zip(&pb).all(|((na, ta), (nb, tb))| {
                na == nb && ta.bit_eq(tb) && ta.requires_grad() == tb.requires_grad()
            })
    }

    #[test]
    fn full_round_trip() {
        let mut model = StitchModel::new(stitched(2), 5).unwrap();
        model.adapters.as_mut().unwrap().randomize(0.3, 1);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path(), Scope::Full).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert!(same_params(&model, &back));
        assert_eq!(back.config(), model.config());
    }

    #[test]
    fn adapters_only_onto_matching_backbone() {
        let mut trained = StitchModel::new(stitched(2), 5).unwrap();
        trained.adapters.as_mut().unwrap().randomize(0.3, 2);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&trained, dir.path(), Scope::AdaptersOnly).unwrap();

        let mut fresh = StitchModel::new(stitched(2), 5).unwrap();
        assert_ne!(fresh.adapters, trained.adapters);
        load_into(&mut fresh, dir.path()).unwrap();
        assert!(same_params(&fresh, &trained));
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn modality_count_mismatch_is_rejected() {
        let model = StitchModel::new(stitched(2), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for scope in [Scope::Full, Scope::AdaptersOnly] {
            save_checkpoint(&model, dir.path(), scope).unwrap();
            let mut three = StitchModel::new(stitched(3), 0).unwrap();
            let err = load_into(&mut three, dir.path()).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{err}");
        }
    }

    #[test]
    fn shape_and_length_corruption() {
        let model = StitchModel::new(stitched(2), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path(), Scope::Full).unwrap();
        let blob = dir.path().join("params/decoder.classifier.bias.f64");
        fs::write(&blob, [0u8; 9]).unwrap();
        assert!(load_checkpoint(dir.path()).unwrap_err().to_string().contains("expected 40 bytes"));

        let path = dir.path().join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["tensors"]["decoder.classifier.bias"]["shape"] = serde_json::json!([6]);
        fs::write(&path, v.to_string()).unwrap();
        assert!(load_checkpoint(dir.path()).unwrap_err().to_string().contains("shape"));

        v["version"] = 2.into();
        fs::write(&path, v.to_string()).unwrap();
        assert!(load_checkpoint(dir.path()).unwrap_err().to_string().contains("version 2"));
    }
}
