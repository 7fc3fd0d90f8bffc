//! Run configuration: one structured file holding every knob and seed, so
//! any artifact can be reproduced from the config that made it.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use worldgrow_core::procgen::Threshold;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world_seed: u64,
    pub curation_seed: u64,
    pub rooms: u32,
    pub fine_count: usize,
    pub coarse_count: usize,
    /// Curation aborts with a nonzero exit below this many accepted blocks
    /// per level.
    pub min_blocks: usize,
    pub max_attempts: u32,
    /// Decimal string, validated into (0, 1] at load.
    pub threshold: String,

    /// Block resolution N (voxels per block edge).
    pub resolution: u32,
    pub height_m: f64,
    pub feature_channels: usize,
    pub latent_channels: usize,
    pub hidden_width: usize,

    pub train_steps: u32,
    pub learning_rate: f64,
    pub batch: usize,
    pub train_seed: u64,
    pub model_seed: u64,
    pub codec_seed: u64,
    pub condition_seed: u64,

    pub sample_steps: u32,
    pub t_prime: f64,
    pub extent_x: u32,
    pub extent_y: u32,
    pub grow_seed: u64,

    pub eval_points: usize,
    pub eval_seed: u64,

    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world_seed: 7,
            curation_seed: 11,
            rooms: 6,
            fine_count: 12,
            coarse_count: 12,
            min_blocks: 1,
            max_attempts: 400,
            threshold: "0.5".into(),
            resolution: 32,
            height_m: 3.0,
            feature_channels: 6,
            latent_channels: 8,
            hidden_width: 32,
            train_steps: 200,
            learning_rate: 1e-4,
            batch: 8,
            train_seed: 13,
            model_seed: 17,
            codec_seed: 19,
            condition_seed: 23,
            sample_steps: 50,
            t_prime: 0.4,
            extent_x: 1,
            extent_y: 1,
            grow_seed: 29,
            eval_points: 256,
            eval_seed: 31,
            data_dir: "data".into(),
            out_dir: "out".into(),
        }
    }
}

impl RunConfig {
    /// Re-check the constraints owned by other modules so a bad config
    /// fails at load, not halfway through a run.
    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(
            self.resolution > 0 && self.resolution % 8 == 0,
            "resolution must be a positive multiple of 8, got {}",
            self.resolution
        );
        anyhow::ensure!(
            self.t_prime > 0.0 && self.t_prime < 1.0,
            "t_prime must lie in (0, 1), got {}",
            self.t_prime
        );
        Threshold::from_decimal_str(&self.threshold)
            .with_context(|| format!("threshold {:?} must lie in (0, 1]", self.threshold))?;
        anyhow::ensure!(self.sample_steps >= 1, "sample_steps must be >= 1");
        anyhow::ensure!(self.batch >= 1, "batch must be >= 1");
        anyhow::ensure!(self.hidden_width >= 1, "hidden_width must be >= 1");
        anyhow::ensure!(
            self.extent_x >= 1 && self.extent_y >= 1,
            "growth extent must be at least 1x1"
        );
        anyhow::ensure!(
            self.height_m > 0.0 && self.height_m.is_finite(),
            "height_m must be positive"
        );
        anyhow::ensure!(self.eval_points >= 1, "eval_points must be >= 1");
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = toml::to_string_pretty(self).context("serializing config")?;
        std::fs::write(path, text)
            .with_context(|| format!("writing config {}", path.display()))?;
        Ok(())
    }

    pub fn threshold(&self) -> anyhow::Result<Threshold> {
        Threshold::from_decimal_str(&self.threshold)
            .with_context(|| format!("threshold {:?}", self.threshold))
    }

    /// Fine voxel edge in metres; blocks are height_m tall at N voxels.
    pub fn fine_cell(&self) -> f32 {
        (self.height_m / self.resolution as f64) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let cfg = RunConfig::default();
        cfg.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, loaded);
        let again = dir.path().join("again.toml");
        loaded.save(&again).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }

    #[test]
    fn validation_rejects_module_constraint_violations() {
        let ok = RunConfig::default();
        ok.validate().unwrap();
        let mut bad = ok.clone();
        bad.resolution = 20;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.t_prime = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.t_prime = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.threshold = "1.5".into();
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.threshold = "0".into();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn partial_config_fills_defaults_and_unknown_keys_fail() {
        let cfg: RunConfig = toml::from_str("resolution = 16").unwrap();
        assert_eq!(cfg.resolution, 16);
        assert_eq!(cfg.sample_steps, RunConfig::default().sample_steps);
        assert!(toml::from_str::<RunConfig>("reslution = 16").is_err());
    }
}
