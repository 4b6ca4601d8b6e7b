use serde::{Deserialize, Serialize};

use super::optim::{AdamHyper, Schedule};
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::renderer::RenderConfig;

/// Prior (auto-decoder) training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub field: FieldConfig,
    pub render: RenderConfig,
    pub lambda_prop: f64,
    /// Rays drawn from each selected view of each selected identity.
    pub rays_per_identity: usize,
    pub views_per_batch: usize,
    pub identities_per_batch: usize,
    pub schedule: Schedule,
    pub adam: AdamHyper,
    pub clip_norm: Option<f64>,
    /// Standard deviation of the initial latent codes.
    pub latent_init_std: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            field: FieldConfig::default(),
            render: RenderConfig::default(),
            lambda_prop: 1.0,
            rays_per_identity: 128,
            views_per_batch: 8,
            identities_per_batch: 64,
            schedule: Schedule {
                lr_initial: 0.002,
                lr_final: 0.00002,
                total_steps: 1_000_000,
            },
            adam: AdamHyper::default(),
            clip_norm: Some(0.001),
            latent_init_std: 0.01,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.render.validate()?;
        self.schedule.validate()?;
        if self.rays_per_identity == 0 || self.views_per_batch == 0 || self.identities_per_batch == 0 {
            return Err(Error::Config("batch counts must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps
    }
}

/// Latent inversion with the network frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub patches_per_step: usize,
    pub patch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub lambda_perceptual: f64,
    /// Minimum fraction of reference foreground pixels in a sampled patch.
    pub min_foreground: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            patches_per_step: 8,
            patch_size: 32,
            steps: 1500,
            lr: 0.001,
            lambda_perceptual: 0.2,
            min_foreground: 0.25,
        }
    }
}

/// Finetuning of the prior on a target identity, plus its inversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub render: RenderConfig,
    pub lambda_prop: f64,
    pub lambda_normal: f64,
    pub lambda_v: f64,
    pub rays_per_batch: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// `(resolution, steps)`: the first entry whose resolution is at least
    /// the image size is used, the last one beyond that.
    pub steps_by_resolution: Vec<(u32, usize)>,
    /// Replaces the table lookup when set.
    pub steps: Option<usize>,
    pub adam: AdamHyper,
    pub clip_norm: Option<f64>,
    pub optimize_latent: bool,
    pub inversion: InversionConfig,
    pub seed: u64,
    pub threads: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            render: RenderConfig::default(),
            lambda_prop: 1.0,
            lambda_normal: 0.001,
            lambda_v: 0.0001,
            rays_per_batch: 8912,
            lr_initial: 0.001,
            lr_final: 0.00002,
            steps_by_resolution: vec![
                (256, 25_000),
                (512, 50_000),
                (1024, 100_000),
                (2048, 200_000),
                (4096, 300_000),
            ],
            steps: None,
            adam: AdamHyper::default(),
            clip_norm: None,
            optimize_latent: true,
            inversion: InversionConfig::default(),
            seed: 0,
            threads: 1,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        self.schedule(256).validate()?;
        if self.rays_per_batch == 0 {
            return Err(Error::Config("rays_per_batch must be positive".into()));
        }
        if self.steps.is_none() && self.steps_by_resolution.is_empty() {
            return Err(Error::Config("no finetuning step count".into()));
        }
        let inv = &self.inversion;
        if inv.patches_per_step == 0 || inv.patch_size == 0 || !(inv.lr > 0.0) {
            return Err(Error::Config("inversion counts and lr must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_for_resolution(&self, resolution: u32) -> usize {
        if let Some(s) = self.steps {
            return s;
        }
        self.steps_by_resolution
            .iter()
            .find(|(r, _)| *r >= resolution)
            .or(self.steps_by_resolution.last())
            .map(|(_, s)| *s)
            .unwrap_or(0)
    }

    pub fn schedule(&self, resolution: u32) -> Schedule {
        Schedule {
            lr_initial: self.lr_initial,
            lr_final: self.lr_final,
            total_steps: self.steps_for_resolution(resolution),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_the_published_settings() {
        let t = TrainConfig::default();
        assert_eq!(t.rays_per_identity * t.views_per_batch * t.identities_per_batch, 65_536);
        assert_eq!(t.clip_norm, Some(0.001));
        let f = FitConfig::default();
        assert_eq!((f.lambda_normal, f.lambda_v, f.rays_per_batch), (0.001, 0.0001, 8912));
        assert_eq!(f.steps_for_resolution(256), 25_000);
        assert_eq!(f.steps_for_resolution(64), 25_000);
        assert_eq!(f.steps_for_resolution(600), 100_000);
        assert_eq!(f.steps_for_resolution(8192), 300_000);
        assert_eq!(f.inversion.steps, 1500);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FitConfig>("lambda_v = 0.5\nbogus = 1\n").is_err());
        let f: FitConfig = toml::from_str("lambda_v = 0.5\n[inversion]\nsteps = 3\n").unwrap();
        assert_eq!((f.lambda_v, f.inversion.steps), (0.5, 3));
    }
}
