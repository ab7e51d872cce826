//! Run configuration: one TOML file fully determines a training run.
//!
//! The effective config (file plus flag overrides) is snapshotted into the
//! run directory so the run can be reproduced from the snapshot alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mitokit::augment::AugmentPolicy;
use mitokit::data::Track;
use mitokit::inference::TtaPolicy;
use mitokit::lora::LoraConfig;
use mitokit::losses::FocalParams;
use mitokit::models::seg::SegModelConfig;
use mitokit::models::vit::VitConfig;
use mitokit::training::TrainConfig;

use crate::commands::CliError;

/// A fully resolved run configuration.
///
/// In the TOML file, `[train]`, `[augment]`, `[focal]`, and `[tta]` are
/// optional:
/// omitted sections resolve to the track's defaults at load time, and the
/// snapshot written into the run directory always stores the resolved
/// values, so a snapshot alone reproduces the run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
    /// Focal loss shape. The default `alpha = 0.25` is tuned for corpora
    /// where positives are rare; balanced datasets calibrate better with
    /// `alpha = 1.0` (the plain class-symmetric focal loss).
    pub focal: FocalParams,
    /// Adapter settings; presence turns adapter tuning on (classification
    /// track only). The classifier head is always left trainable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraConfig>,
    /// Test-time augmentation policy; `infer --tta` falls back to the
    /// default ten-variant policy when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tta: Option<TtaPolicy>,
    pub model: ModelSection,
}

/// On-disk shape: sections that have track defaults may be omitted.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    run: RunSection,
    #[serde(default)]
    train: Option<TrainConfig>,
    #[serde(default)]
    augment: Option<AugmentPolicy>,
    #[serde(default)]
    focal: Option<FocalParams>,
    #[serde(default)]
    lora: Option<LoraConfig>,
    #[serde(default)]
    tta: Option<TtaPolicy>,
    model: ModelSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub track: Track,
    pub manifest: PathBuf,
    pub plan: PathBuf,
    pub seed: u64,
}

/// Exactly one of the two model shapes, matched to the track.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg: Option<SegModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vit: Option<VitConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read run config {}: {e}", path.display()))
        })?;
        let raw: RawConfig = toml::from_str(&text).map_err(|e| {
            CliError::Usage(format!("malformed run config {}: {e}", path.display()))
        })?;
        let track = raw.run.track;
        let explicit_train = raw.train.is_some();
        let mut train = raw.train.unwrap_or_else(|| match track {
            Track::Detection => TrainConfig::detection_defaults(),
            Track::Classification => TrainConfig::classification_defaults(),
        });
        if !explicit_train {
            train.seed = raw.run.seed;
        }
        let augment = raw.augment.unwrap_or_else(|| match track {
            Track::Detection => AugmentPolicy::detection_default(),
            Track::Classification => {
                let size = raw.model.vit.as_ref().map_or(64, |v| v.image_size);
                AugmentPolicy::classification_default(size)
            }
        });
        let cfg = RunConfig {
            run: raw.run,
            train,
            augment,
            focal: raw.focal.unwrap_or_default(),
            lora: raw.lora,
            tta: raw.tta,
            model: raw.model,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("cannot serialize run config: {e}")))?;
        fs::write(path, text)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match self.run.track {
            Track::Detection => {
                if self.model.seg.is_none() {
                    return Err(CliError::Usage(
                        "detection runs need a [model.seg] section".into(),
                    ));
                }
                if self.lora.is_some() {
                    return Err(CliError::Usage(
                        "adapter tuning applies to the classification track".into(),
                    ));
                }
            }
            Track::Classification => {
                if self.model.vit.is_none() {
                    return Err(CliError::Usage(
                        "classification runs need a [model.vit] section".into(),
                    ));
                }
            }
        }
        self.train
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        self.focal
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(tta) = &self.tta {
            tta.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(())
    }

    /// Rewrite manifest and plan as absolute paths so the snapshot
    /// reproduces the run from any working directory.
    pub fn absolutize(&mut self) -> Result<(), CliError> {
        self.run.manifest = canonical(&self.run.manifest)?;
        self.run.plan = canonical(&self.run.plan)?;
        Ok(())
    }
}

fn canonical(path: &Path) -> Result<PathBuf, CliError> {
    path.canonicalize()
        .map_err(|e| CliError::Usage(format!("cannot resolve {}: {e}", path.display())))
}
