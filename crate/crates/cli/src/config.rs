//! The TOML run configuration shared by every subcommand.
//!
//! Every section and key is optional; missing values take the defaults
//! shown in `configs/default.toml`. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use octclass_core::models::{Architecture, ModelConfig};
use octclass_core::train::TrainConfig;
use octclass_core::xai::{LimeConfig, Method, OcclusionConfig};
use octclass_core::NUM_CLASSES;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub xai: XaiConfig,
    pub serve: ServeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory with one sub-directory per class.
    pub root: Option<PathBuf>,
    /// A manifest written by `prepare-data` or `synth-data`; wins over `root`.
    pub manifest: Option<PathBuf>,
    /// Train, validation and test fractions.
    pub split_fractions: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            manifest: None,
            split_fractions: [0.8, 0.1, 0.1],
            split_seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub width_multiplier: f64,
    pub depth_multiplier: f64,
    pub num_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            architecture: Architecture::XceptionStyle,
            width_multiplier: 1.0,
            depth_multiplier: 1.0,
            num_classes: NUM_CLASSES,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, seed: u64) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.architecture)
            .with_width(self.width_multiplier)
            .with_depth(self.depth_multiplier)
            .with_seed(seed);
        cfg.num_classes = self.num_classes;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XaiConfig {
    pub method: Method,
    /// Grad-CAM target layer; the model's last spatial activation if unset.
    pub gradcam_layer: Option<String>,
    pub overlay_alpha: f64,
    pub lime: LimeConfig,
    pub occlusion: OcclusionConfig,
}

impl Default for XaiConfig {
    fn default() -> Self {
        XaiConfig {
            method: Method::GradCam,
            gradcam_layer: None,
            overlay_alpha: octclass_core::xai::DEFAULT_OVERLAY_ALPHA,
            lime: LimeConfig::default(),
            occlusion: OcclusionConfig::default(),
        }
    }
}

impl XaiConfig {
    /// Settings for `method` as a JSON object suitable for
    /// `ExplainRequest::from_params`.
    pub fn params_for(&self, method: Method) -> serde_json::Value {
        match method {
            Method::GradCam => serde_json::json!({ "layer": self.gradcam_layer }),
            Method::Lime => serde_json::to_value(self.lime).expect("lime config serializes"),
            Method::Occlusion => serde_json::to_value(self.occlusion).expect("occlusion config serializes"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub checkpoint: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    pub explain_timeout_s: f64,
    pub max_upload_mb: f64,
    pub max_concurrent_explains: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            checkpoint: None,
            host: "127.0.0.1".into(),
            port: 8080,
            explain_timeout_s: 60.0,
            max_upload_mb: 10.0,
            max_concurrent_explains: 2,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Reads and validates `path`.
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = RunConfig::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<RunConfig, CliError> {
        match path {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let [a, b, c] = self.data.split_fractions;
        if !(a > 0.0 && b > 0.0 && c > 0.0 && (a + b + c - 1.0).abs() <= 1e-9) {
            return Err(CliError::Usage(format!(
                "data.split_fractions {:?} must be positive and sum to 1",
                self.data.split_fractions
            )));
        }
        self.model.to_model_config(self.train.seeds.model).validate()?;
        self.train.validate()?;
        self.xai.lime.validate()?;
        self.xai.occlusion.validate()?;
        if !(0.0..=1.0).contains(&self.xai.overlay_alpha) {
            return Err(CliError::Usage(format!("xai.overlay_alpha {} outside [0, 1]", self.xai.overlay_alpha)));
        }
        let s = &self.serve;
        if !(s.explain_timeout_s > 0.0 && s.explain_timeout_s.is_finite()) {
            return Err(CliError::Usage("serve.explain_timeout_s must be positive".into()));
        }
        if !(s.max_upload_mb > 0.0 && s.max_upload_mb.is_finite()) {
            return Err(CliError::Usage("serve.max_upload_mb must be positive".into()));
        }
        if s.max_concurrent_explains == 0 {
            return Err(CliError::Usage("serve.max_concurrent_explains must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    /// Writes `run_config.toml` into `dir`, headed by the invoking command line.
    pub fn echo_into(&self, dir: &Path, command: &str) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("run_config.toml");
        let text = format!("# {command}\n\n{}", self.to_toml());
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[train]\nlearnin_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learnin_rate"), "{err}");
        assert!(RunConfig::from_toml("[extras]\nx = 1\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.model.architecture = Architecture::TinyCnn;
        cfg.train.learning_rate = 1e-3;
        cfg.data.root = Some("data/oct".into());
        cfg.xai.gradcam_layer = Some("conv2_relu".into());
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.data.split_fractions = [0.5, 0.5, 0.5];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.width_multiplier = 2.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.xai.occlusion.stride = 0;
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn shipped_example_matches_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }
}
