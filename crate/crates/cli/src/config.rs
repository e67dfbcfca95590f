//! Run configuration: one TOML file with nested sections, overridable from
//! the command line and written back, fully resolved, next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use aquamvs::costvolume::CascadeSettings;
use aquamvs::medium::{BackscatterExponent, DEFAULT_SH_LEVEL};
use aquamvs::training::{LossConfig, ModelSettings, TrainConfig};
use aquamvs::{Error, Result};
use serde::{Deserialize, Serialize};

/// File name of the resolved record in each output directory.
pub const RUN_RECORD: &str = "run.toml";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MediumSettings {
    pub sh_level: usize,
    pub exponent: BackscatterExponent,
    /// Disable the medium subnet (direct blending of underwater colours).
    pub ablate: bool,
}

impl Default for MediumSettings {
    fn default() -> Self {
        Self {
            sh_level: DEFAULT_SH_LEVEL,
            exponent: BackscatterExponent::default(),
            ablate: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub iterations: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub view_count_probs: [f64; 3],
    pub patch_size: usize,
    /// Source views used when rendering, restoring or estimating depth.
    pub inference_views: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            final_learning_rate: t.final_learning_rate,
            view_count_probs: t.view_count_probs,
            patch_size: t.patch_size,
            inference_views: t.model.inference_views,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub cascade: CascadeSettings,
    pub medium: MediumSettings,
    pub train: TrainSettings,
    pub loss: LossConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            output: None,
            seed: 0,
            cascade: CascadeSettings::default(),
            medium: MediumSettings::default(),
            train: TrainSettings::default(),
            loss: LossConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: e.span().map(|s| s.start as u64).unwrap_or(0),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn model_settings(&self) -> ModelSettings {
        ModelSettings {
            sh_level: self.medium.sh_level,
            exponent: self.medium.exponent,
            ablate_medium: self.medium.ablate,
            cascade: self.cascade,
            inference_views: self.train.inference_views,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.train.iterations,
            learning_rate: self.train.learning_rate,
            final_learning_rate: self.train.final_learning_rate,
            view_count_probs: self.train.view_count_probs,
            patch_size: self.train.patch_size,
            seed: self.seed,
            model: self.model_settings(),
        }
    }

    /// Range checks of every section plus existence of the manifest.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.loss.validate()?;
        if let Some(m) = &self.manifest {
            if !m.is_file() {
                return Err(Error::Config(format!("manifest {} does not exist", m.display())));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::Config("no manifest given (use --manifest or set `manifest`)".into()))
    }

    pub fn output(&self) -> Result<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory given (use --output or set `output`)".into()))
    }
}

/// Parse `--planes 16,8`.
pub fn parse_planes(s: &str) -> std::result::Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("expected two comma-separated counts, got `{s}`"));
    }
    let n = |p: &str| p.parse::<usize>().map_err(|e| format!("`{p}`: {e}"));
    Ok((n(parts[0])?, n(parts[1])?))
}
