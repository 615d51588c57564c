//! Model checkpoints: a directory holding `params.fcr` (the flat parameter
//! vector as a `1 × 1 × N` raster) and `manifest.json` (architecture, seed,
//! selection record and the named tensor layout).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierBundle, ClassifierSpec};
use crate::decoder::{Decoder, DecoderSpec};
use crate::error::{io_err, FcamError, Result};
use crate::nn::{param_hash, ParamEntry, ParamTable};
use crate::raster::{load_raster, save_raster, Raster, RasterMeta};
use crate::training::CheckpointRecord;

pub const PARAMS_FILE: &str = "params.fcr";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Classifier,
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub kind: ModelKind,
    /// Classifier architecture; for a decoder, the classifier it was trained against.
    pub classifier: ClassifierSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<DecoderSpec>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<CheckpointRecord>,
    pub param_count: usize,
    pub param_hash: String,
    pub tensors: Vec<ParamEntry>,
}

fn write(dir: &Path, params: &[f32], manifest: &CheckpointManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let raster = Raster::new(1, 1, params.len(), params.to_vec())?;
    let meta = RasterMeta {
        encoding: Some("flat f32 parameter vector".into()),
        ..Default::default()
    };
    save_raster(&dir.join(PARAMS_FILE), &raster, &meta)?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(manifest)?).map_err(io_err(&path))
}

/// Reads the manifest and parameters, checking the stored hash.
fn read(dir: &Path, kind: ModelKind) -> Result<(CheckpointManifest, Vec<f32>)> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() || !dir.join(PARAMS_FILE).is_file() {
        return Err(FcamError::CheckpointNotFound(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.kind != kind {
        return Err(FcamError::InvalidArgument(format!(
            "{} holds a {:?} checkpoint, expected {:?}",
            dir.display(),
            manifest.kind,
            kind
        )));
    }
    let (raster, _) = load_raster(&dir.join(PARAMS_FILE))?;
    if raster.data.len() != manifest.param_count {
        return Err(FcamError::ShapeMismatch {
            expected: format!("{} parameters", manifest.param_count),
            actual: format!("{} parameters", raster.data.len()),
        });
    }
    if param_hash(&raster.data) != manifest.param_hash {
        return Err(FcamError::InvalidArgument(format!(
            "{}: parameter hash does not match manifest",
            dir.display()
        )));
    }
    Ok((manifest, raster.data))
}

fn check_layout(table: &ParamTable, manifest: &CheckpointManifest) -> Result<()> {
    if table.entries() != manifest.tensors.as_slice() {
        return Err(FcamError::ShapeMismatch {
            expected: "tensor layout of the stored architecture".into(),
            actual: "a different layout".into(),
        });
    }
    Ok(())
}

pub fn save_classifier(
    dir: &Path,
    bundle: &ClassifierBundle,
    seed: u64,
    selected: Option<CheckpointRecord>,
) -> Result<CheckpointManifest> {
    let manifest = CheckpointManifest {
        kind: ModelKind::Classifier,
        classifier: bundle.spec().clone(),
        decoder: None,
        seed,
        selected,
        param_count: bundle.params().len(),
        param_hash: bundle.param_hash(),
        tensors: bundle.table().entries().to_vec(),
    };
    write(dir, bundle.params(), &manifest)?;
    Ok(manifest)
}

pub fn load_classifier(dir: &Path) -> Result<(ClassifierBundle, CheckpointManifest)> {
    let (manifest, params) = read(dir, ModelKind::Classifier)?;
    let mut bundle = ClassifierBundle::new(manifest.classifier.clone(), manifest.seed)?;
    check_layout(bundle.table(), &manifest)?;
    bundle.set_params(params)?;
    Ok((bundle, manifest))
}

pub fn save_decoder(
    dir: &Path,
    decoder: &Decoder,
    classifier: &ClassifierSpec,
    selected: Option<CheckpointRecord>,
) -> Result<CheckpointManifest> {
    let manifest = CheckpointManifest {
        kind: ModelKind::Decoder,
        classifier: classifier.clone(),
        decoder: Some(decoder.spec().clone()),
        seed: decoder.seed(),
        selected,
        param_count: decoder.param_count(),
        param_hash: decoder.param_hash(),
        tensors: decoder.table().entries().to_vec(),
    };
    write(dir, decoder.params(), &manifest)?;
    Ok(manifest)
}

/// Loads a decoder and checks it was trained against `classifier`.
pub fn load_decoder(dir: &Path, classifier: &ClassifierSpec) -> Result<(Decoder, CheckpointManifest)> {
    let (manifest, params) = read(dir, ModelKind::Decoder)?;
    if &manifest.classifier != classifier {
        return Err(FcamError::ShapeMismatch {
            expected: format!("decoder for {classifier:?}"),
            actual: format!("decoder for {:?}", manifest.classifier),
        });
    }
    let spec = manifest
        .decoder
        .clone()
        .ok_or_else(|| FcamError::InvalidArgument("decoder manifest lacks a decoder spec".into()))?;
    let mut decoder = Decoder::new(spec, &classifier.encoder, manifest.seed)?;
    check_layout(decoder.table(), &manifest)?;
    decoder.set_params(params)?;
    Ok((decoder, manifest))
}

/// Standard checkpoint locations inside a run directory.
pub fn classifier_dir(run: &Path) -> PathBuf {
    run.join("checkpoints").join("classifier")
}

pub fn decoder_dir(run: &Path) -> PathBuf {
    run.join("checkpoints").join("decoder")
}
