//! Declarative run configuration. Loaded from TOML, every field can be
//! overridden with a dotted key such as `train.lr=0.05`. Unknown keys are
//! rejected both in files and in overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierSpec;
use crate::datasets::{Split, SyntheticConfig};
use crate::decoder::DecoderSpec;
use crate::error::{io_err, FcamError, Result};
use crate::losses::LossConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Folder dataset root; `generate` writes here.
    pub root: PathBuf,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    /// Take the top-k operating τ from the validation split.
    pub operating_tau_from_val: bool,
    /// Write every evaluated map as a raster under the run directory.
    pub save_cams: bool,
    pub timing_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            operating_tau_from_val: true,
            save_cams: false,
            timing_runs: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub classifier: ClassifierSpec,
    pub decoder: DecoderSpec,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Settings sized for the synthetic 64×64 dataset on a CPU.
    pub fn desk_scale() -> Self {
        let seed = 7;
        Self {
            dataset: DatasetConfig {
                root: PathBuf::from("data"),
                synthetic: SyntheticConfig {
                    seed,
                    ..SyntheticConfig::default()
                },
            },
            classifier: ClassifierSpec::default(),
            decoder: DecoderSpec::default(),
            train: TrainConfig {
                stage1_epochs: 30,
                stage2_epochs: 10,
                resize: 64,
                crop: 64,
                n_minus: 0.7,
                k_fg: 5,
                k_bg: 5,
                seed,
                ..TrainConfig::default()
            },
            loss: LossConfig {
                lambda_crf: 1e-4,
                crf_downsample: Some(2),
                ..LossConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| FcamError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| FcamError::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?).map_err(io_err(path))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.dataset
            .synthetic
            .validate()
            .map_err(|e| FcamError::Config(e.to_string()))?;
        if self.decoder.stage_widths.len() != self.classifier.encoder.stage_widths.len() {
            return Err(FcamError::Config(format!(
                "decoder has {} stages, encoder has {}",
                self.decoder.stage_widths.len(),
                self.classifier.encoder.stage_widths.len()
            )));
        }
        if self.classifier.num_classes != self.dataset.synthetic.classes {
            return Err(FcamError::Config(format!(
                "classifier.num_classes = {} but dataset.synthetic.classes = {}",
                self.classifier.num_classes, self.dataset.synthetic.classes
            )));
        }
        Ok(())
    }

    /// Applies one `dotted.key=value` override. The value is parsed as a TOML
    /// literal and falls back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        self.apply_overrides(&[assignment])
    }

    /// Applies overrides in order and validates the result once; on error the
    /// configuration is left unchanged.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        let mut updated = self.clone();
        for a in assignments {
            let a = a.as_ref();
            let (key, raw) = a
                .split_once('=')
                .ok_or_else(|| FcamError::Config(format!("override `{a}` is not key=value")))?;
            updated = updated.with_value(key.trim(), raw.trim())?;
        }
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let updated = self.with_value(key, raw)?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    fn with_value(&self, key: &str, raw: &str) -> Result<Self> {
        let unknown = || FcamError::Config(format!("unknown config key `{key}`"));
        let mut root = toml::Value::try_from(self).map_err(|e| FcamError::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let (leaf, path) = parts.split_last().ok_or_else(unknown)?;
        if leaf.is_empty() {
            return Err(unknown());
        }
        let mut node = &mut root;
        for p in path {
            node = node.get_mut(*p).filter(|v| v.is_table()).ok_or_else(unknown)?;
        }
        node.as_table_mut().ok_or_else(unknown)?.insert(leaf.to_string(), parse_literal(raw));
        root.try_into()
            .map_err(|e: toml::de::Error| FcamError::Config(format!("`{key}`: {}", e.message())))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
