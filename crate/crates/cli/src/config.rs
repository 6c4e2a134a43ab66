//! Run configuration: a TOML file layered under environment variables and flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use warpdepth::augment::AugmentConfig;
use warpdepth::geometry::CameraModel;
use warpdepth::objective::{ObjectiveConfig, Variant};
use warpdepth::optimizer::OptimConfig;
use warpdepth::photometric::PhotometricConfig;
use warpdepth::regularizer::RegConfig;
use warpdepth::synthetic::{default_camera, two_plane_scene, SceneSpec};

use crate::error::{CliError, CliResult, Context};

/// Baseline of the built-in scene used when no scene file is configured.
pub const DEFAULT_BASELINE: f64 = 0.12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scene description; the built-in two-plane scene when absent.
    pub scene: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    /// Explicit intrinsics; derived from the image size when absent.
    pub camera: Option<CameraModel>,
    pub variant: Variant,
    pub scales: usize,
    pub motion: bool,
    /// Include the splatting (forward-warp) photometric terms.
    pub forward_terms: bool,
    pub iterations: usize,
    pub optimizer: OptimConfig,
    pub reg: RegConfig,
    pub photo: PhotometricConfig,
    /// Augmentation of the snippet before optimization; off when absent.
    pub augment: Option<AugmentConfig>,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let objective = ObjectiveConfig::default();
        Self {
            scene: None,
            height: 64,
            width: 96,
            camera: None,
            variant: objective.variant,
            scales: objective.scales,
            motion: false,
            forward_terms: objective.forward_terms,
            iterations: 2000,
            optimizer: OptimConfig::default(),
            reg: objective.reg,
            photo: objective.photo,
            augment: None,
            output_dir: PathBuf::from("warpdepth-out"),
            seed: 0,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).context(format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        // Relative scene paths are resolved against the config file.
        if let (Some(scene), Some(dir)) = (&cfg.scene, path.parent()) {
            if scene.is_relative() {
                cfg.scene = Some(dir.join(scene));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.scales == 0 {
            return Err(CliError::usage("scales must be at least 1"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(CliError::usage("image size must be positive"));
        }
        self.optimizer.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        if let Some(c) = &self.camera {
            c.validate()?;
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            variant: self.variant,
            scales: self.scales,
            photo: self.photo,
            reg: self.reg,
            forward_terms: self.forward_terms,
            ..ObjectiveConfig::default()
        }
    }

    /// Camera for a `height x width` image.
    pub fn camera_for(&self, height: usize, width: usize) -> CliResult<CameraModel> {
        match self.camera {
            Some(c) if (c.height, c.width) != (height, width) => Err(CliError::usage(format!(
                "configured camera is {}x{} but the image is {height}x{width}",
                c.height, c.width
            ))),
            Some(c) => Ok(c),
            None => Ok(default_camera(height, width)),
        }
    }

    /// The configured scene with its seed replaced by the run seed.
    pub fn scene_spec(&self) -> CliResult<SceneSpec> {
        let mut spec = match &self.scene {
            Some(path) => {
                let text =
                    fs::read_to_string(path).context(format!("reading {}", path.display()))?;
                SceneSpec::from_toml(&text).context(path.display())?
            }
            None => two_plane_scene(self.seed, DEFAULT_BASELINE),
        };
        spec.seed = self.seed;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.optimizer.learning_rate, 1e-4);
        assert_eq!(cfg.objective(), ObjectiveConfig::default());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig =
            toml::from_str("scales = 2\n[optimizer]\nlearning_rate = 0.001\n").unwrap();
        assert_eq!(cfg.scales, 2);
        assert_eq!(cfg.optimizer.learning_rate, 1e-3);
        assert_eq!(cfg.optimizer.beta1, 0.9);
        assert_eq!(cfg.iterations, 2000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("scalez = 2").is_err());
    }

    #[test]
    fn camera_must_match_image() {
        let cfg = RunConfig {
            camera: Some(default_camera(4, 6)),
            ..Default::default()
        };
        assert!(cfg.camera_for(4, 6).is_ok());
        assert!(cfg.camera_for(6, 4).is_err());
    }
}
