//! Training configurations, read from flat `key = value` files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioning::Overlays;
use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::flowcore::VelocityConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub degradation: DegradationSpec,
    pub overlay_keypoints: bool,
    pub overlay_accessory: bool,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub id_gate_fraction: f64,
    pub lambda_id: f64,
    pub condition_dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub emb_width: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        let arch = VelocityConfig::default();
        Self {
            degradation: DegradationSpec::downsample(8),
            overlay_keypoints: true,
            overlay_accessory: true,
            phase1_steps: 5000,
            phase2_steps: 2000,
            id_gate_fraction: 0.35,
            lambda_id: 0.5,
            condition_dropout: 0.1,
            lr: 1e-4,
            weight_decay: 1e-3,
            batch_size: 32,
            seed: 0,
            base_channels: arch.base_channels,
            channel_mult: arch.channel_mult,
            emb_width: arch.emb_width,
            checkpoint_every: 500,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub id_gate_fraction: f64,
    pub lambda_id: f64,
    pub steps: usize,
    pub perceptual_loss_enabled: bool,
    pub lambda_perceptual: f64,
    pub condition_dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub init_from: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            id_gate_fraction: 0.5,
            lambda_id: 0.5,
            steps: 2000,
            perceptual_loss_enabled: false,
            lambda_perceptual: 1.0,
            condition_dropout: 0.1,
            lr: 1e-4,
            weight_decay: 1e-3,
            batch_size: 32,
            seed: 0,
            init_from: None,
            checkpoint_every: 500,
            log_every: 50,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(format!("{name} = {v} must lie in [0, 1]")))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{name} = {v} must be positive")))
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        unit("id_gate_fraction", self.id_gate_fraction)?;
        unit("condition_dropout", self.condition_dropout)?;
        positive("lambda_id", self.lambda_id)?;
        positive("lr", self.lr)?;
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn overlays(&self) -> Overlays {
        Overlays {
            keypoints: self.overlay_keypoints,
            accessory: self.overlay_accessory,
        }
    }

    pub fn velocity_config(&self, resolution: usize, embed_dim: usize) -> VelocityConfig {
        VelocityConfig {
            resolution,
            embed_dim,
            base_channels: self.base_channels,
            channel_mult: self.channel_mult.clone(),
            emb_width: self.emb_width,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.phase1_steps + self.phase2_steps
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        unit("id_gate_fraction", self.id_gate_fraction)?;
        unit("condition_dropout", self.condition_dropout)?;
        positive("lambda_id", self.lambda_id)?;
        positive("lr", self.lr)?;
        if self.perceptual_loss_enabled {
            positive("lambda_perceptual", self.lambda_perceptual)?;
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Parse a flat `key = value` document; unknown keys are rejected.
pub fn parse_config<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::config(e.to_string()))
}

pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

pub fn config_to_string<T: Serialize>(config: &T) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::Serde(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_parsing() {
        let c: TeacherConfig = parse_config("degradation = \"gaussian_blur:16\"\nphase1_steps = 10\n").unwrap();
        assert_eq!(c.degradation, DegradationSpec::gaussian_blur(16));
        assert_eq!(c.phase1_steps, 10);
        assert_eq!(c.id_gate_fraction, 0.35);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.weight_decay, 1e-3);
        let back: TeacherConfig = parse_config(&config_to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(parse_config::<TeacherConfig>("bogus = 1").is_err());
        let s: StudentConfig = parse_config("init_from = \"t/final.safetensors\"").unwrap();
        assert_eq!(s.id_gate_fraction, 0.5);
        assert_eq!(s.init_from.as_deref(), Some(Path::new("t/final.safetensors")));
    }

    #[test]
    fn gate_fraction_is_validated() {
        let c = TeacherConfig {
            id_gate_fraction: 1.5,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let s = StudentConfig {
            id_gate_fraction: -0.1,
            ..Default::default()
        };
        assert!(s.validate().is_err());
        assert!(TeacherConfig::default().validate().is_ok());
    }
}
