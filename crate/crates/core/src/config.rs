//! Experiment configuration: one TOML document with a section per module.
//! Every key has a default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::labeling::{SplitRatios, Thresholds};
use crate::policy::{ActionMode, Arm, EpisodeConfig, ObservationConfig, PpoConfig, RewardConfig};
use crate::predictor::PredictorConfig;
use crate::world::{CameraConfig, SceneConfig, WorldParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub arm: Arm,
    pub world: WorldSection,
    pub mapping: MappingSection,
    pub labeling: LabelingSection,
    pub predictor: PredictorConfig,
    pub policy: PolicySection,
    pub budget: BudgetSection,
    pub eval: EvalConfig,
    pub paths: PathsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            arm: Arm::Full,
            world: WorldSection::default(),
            mapping: MappingSection::default(),
            labeling: LabelingSection::default(),
            predictor: PredictorConfig::default(),
            policy: PolicySection::default(),
            budget: BudgetSection::default(),
            eval: EvalConfig::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub params: WorldParams,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            train_scenes: 10,
            val_scenes: 2,
            test_scenes: 3,
            scene: SceneConfig::default(),
            camera: CameraConfig::default(),
            params: WorldParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingSection {
    /// Voxel edge length (m).
    pub resolution: f64,
}

impl Default for MappingSection {
    fn default() -> Self {
        Self { resolution: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingSection {
    pub thresholds: Thresholds,
    /// Environment steps before annotation by confidence switches on.
    pub confidence_start_steps: u64,
    /// Radius of the segmentation-free labeling sphere (m).
    pub sphere_radius: f64,
    /// Frames within this many steps of an interaction get baseline labels.
    pub window: usize,
    pub splits: SplitRatios,
}

impl Default for LabelingSection {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            confidence_start_steps: 20_000,
            sphere_radius: 0.2,
            window: 10,
            splits: SplitRatios::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub episode_steps: usize,
    pub action_mode: ActionMode,
    /// Objects with a lower mean prediction cannot be targeted.
    pub confidence_floor: f64,
    /// Episodes collected per policy update with one model snapshot.
    pub workers: usize,
    pub observation: ObservationConfig,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            episode_steps: 600,
            action_mode: ActionMode::Explicit,
            confidence_floor: 0.05,
            workers: 8,
            observation: ObservationConfig::default(),
            reward: RewardConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    /// Total environment steps; rounded up to whole episodes.
    pub total_steps: u64,
    /// Write a resumable checkpoint after this many policy updates.
    pub checkpoint_every: usize,
    /// Evaluate on the validation scenes after this many policy updates.
    pub eval_every: usize,
}

impl Default for BudgetSection {
    fn default() -> Self {
        Self {
            total_steps: 100_000,
            checkpoint_every: 1,
            eval_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Scene directory; relative paths resolve against the config file.
    pub scenes: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            scenes: PathBuf::from("scenes"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::malformed(origin, e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Load and resolve relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut c = Self::from_toml(&text, path)?;
        if c.paths.scenes.is_relative() {
            if let Some(dir) = path.parent() {
                c.paths.scenes = dir.join(&c.paths.scenes);
            }
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.scene.validate()?;
        self.labeling.splits.validate()?;
        let th = self.labeling.thresholds;
        if !(0.0..=1.0).contains(&th.xi_f) || !(0.0..=1.0).contains(&th.xi_t) || th.xi_f >= th.xi_t {
            return Err(Error::Config(format!("thresholds need 0 <= xi_f < xi_t <= 1, got {} and {}", th.xi_f, th.xi_t)));
        }
        let p = &self.policy;
        if p.episode_steps == 0 || p.workers == 0 {
            return Err(Error::Config("episode_steps and workers must be positive".into()));
        }
        let side = p.observation.side;
        if side == 0 || side % 2 != 0 {
            return Err(Error::Config(format!("observation side must be even and positive, got {side}")));
        }
        if self.world.camera.width == 0 || self.world.camera.height == 0 {
            return Err(Error::Config("camera must have at least one pixel".into()));
        }
        if self.world.train_scenes == 0 || self.world.test_scenes == 0 {
            return Err(Error::Config("need at least one training and one test scene".into()));
        }
        if !(self.mapping.resolution > 0.0) {
            return Err(Error::Config("voxel resolution must be positive".into()));
        }
        if self.budget.total_steps == 0 || self.budget.checkpoint_every == 0 || self.budget.eval_every == 0 {
            return Err(Error::Config("budget entries must be positive".into()));
        }
        Ok(())
    }

    /// Number of whole episodes that fit the budget (at least one).
    pub fn episodes(&self) -> u64 {
        self.budget.total_steps.div_ceil(self.policy.episode_steps as u64).max(1)
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            max_steps: self.policy.episode_steps,
            arm: self.arm,
            action_mode: self.policy.action_mode,
            camera: self.world.camera.clone(),
            world: self.world.params.clone(),
            observation: self.policy.observation,
            reward: self.policy.reward,
            confidence_floor: self.policy.confidence_floor,
            map_resolution: self.mapping.resolution,
            layout_attempts: self.world.scene.max_placement_attempts,
        }
    }

    /// Everything except arm and seed; ablation arms must agree on this.
    pub fn shared_part(&self) -> Result<String> {
        let mut c = self.clone();
        c.arm = Arm::Full;
        c.seed = 0;
        c.to_toml()
    }
}
