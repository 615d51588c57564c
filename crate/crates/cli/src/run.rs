//! Run directory layout and shared plumbing for the subcommands.
//!
//! ```text
//! <run>/config.toml                 resolved configuration snapshot
//! <run>/checkpoints/{classifier,decoder}/
//! <run>/logs/*.jsonl                per-iteration and per-epoch logs
//! <run>/reports/*.json|csv          evaluation reports and curves
//! <run>/cams/<method>_<split>/      stored maps (with probs.json)
//! <run>/plots/*.svg|csv
//! <run>/sweep/, <run>/ablation/
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fcam_core::config::RunConfig;
use fcam_core::datasets::{FolderDataset, SampleRecord, Split};
use fcam_core::error::FcamError;
use fcam_core::training::eval_view;
use serde::Serialize;

use crate::error::CliResult;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> FcamError + '_ {
    move |source| FcamError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    /// Subdirectory of the run, created on demand.
    pub fn dir(&self, name: &str) -> CliResult<PathBuf> {
        let d = self.root.join(name);
        fs::create_dir_all(&d).map_err(io(&d))?;
        Ok(d)
    }

    /// Configuration precedence: explicit file, then the run's snapshot, then
    /// the desk-scale preset. Overrides apply last.
    pub fn resolve_config(&self, file: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
        let snapshot = self.config_path();
        let mut cfg = match file {
            Some(p) => load_config_file(p)?,
            None if snapshot.is_file() => load_config_file(&snapshot)?,
            None => RunConfig::desk_scale(),
        };
        cfg.apply_overrides(overrides)?;
        Ok(cfg)
    }

    pub fn save_config(&self, cfg: &RunConfig) -> CliResult<()> {
        fs::create_dir_all(&self.root).map_err(io(&self.root))?;
        cfg.save(&self.config_path())?;
        Ok(())
    }

    pub fn write_text(&self, rel: &str, text: &str) -> CliResult<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io(parent))?;
        }
        fs::write(&path, text).map_err(io(&path))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> CliResult<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(FcamError::from)?;
        self.write_text(rel, &text)
    }

    /// One JSON document per line.
    pub fn write_jsonl<T: Serialize>(&self, rel: &str, items: &[T]) -> CliResult<PathBuf> {
        let mut buf = Vec::new();
        for item in items {
            serde_json::to_writer(&mut buf, item).map_err(FcamError::from)?;
            buf.write_all(b"\n").expect("writing to memory");
        }
        self.write_text(rel, std::str::from_utf8(&buf).expect("JSON is UTF-8"))
    }
}

/// Configuration outside any run directory: the file if given, else the
/// desk-scale preset, then overrides.
pub fn standalone_config(file: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut cfg = match file {
        Some(p) => load_config_file(p)?,
        None => RunConfig::desk_scale(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

/// A missing or malformed config file is a configuration error.
pub fn load_config_file(path: &Path) -> CliResult<RunConfig> {
    if !path.is_file() {
        return Err(FcamError::Config(format!("config file {} not found", path.display())).into());
    }
    Ok(RunConfig::load(path)?)
}

pub fn open_dataset(cfg: &RunConfig) -> CliResult<FolderDataset> {
    let ds = FolderDataset::open(&cfg.dataset.root)?;
    if ds.num_classes() != cfg.classifier.num_classes {
        return Err(FcamError::Config(format!(
            "dataset has {} classes but classifier.num_classes = {}",
            ds.num_classes(),
            cfg.classifier.num_classes
        ))
        .into());
    }
    Ok(ds)
}

pub fn load_split(ds: &FolderDataset, split: Split) -> CliResult<Vec<SampleRecord>> {
    Ok(ds.load_split(split)?)
}

/// Records of `split` in evaluation view.
pub fn eval_records(cfg: &RunConfig, ds: &FolderDataset, split: Split) -> CliResult<Vec<SampleRecord>> {
    load_split(ds, split)?
        .iter()
        .map(|r| eval_view(r, cfg.train.resize, cfg.train.crop).map_err(Into::into))
        .collect()
}
