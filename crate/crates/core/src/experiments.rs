//! Workstation-sized profile and the ablation sweeps run on it.

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, identity_views, psnr, ssim, IdentityViews, MultiViewDataset, Split};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams};
use crate::renderer::{render_image, RenderConfig};
use crate::training::{
    finetune, identity_distance, init_latent, train_prior, FitConfig, InitContext, InitStrategy,
    InversionConfig, PriorModel, Schedule, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskProfile {
    pub identities: usize,
    pub views: usize,
    pub resolution: u32,
    pub data_seed: u64,
    /// Views of the held-out subject used for fitting; the rest are scored.
    pub input_views: Vec<usize>,
    /// Specular strength of the held-out subject.
    pub target_specular: f64,
    pub prior: TrainConfig,
    pub fit: FitConfig,
    /// Fitting a freshly initialized network to the input views.
    pub scratch: FitConfig,
}

pub fn desk_field() -> FieldConfig {
    FieldConfig {
        spatial_levels: 8,
        view_levels: 4,
        latent_dim: 64,
        proposal_width: 32,
        proposal_depth: 2,
        nerf_width: 64,
        nerf_depth: 4,
        bottleneck_dim: 64,
        view_width: 32,
        density_bias: -4.0,
    }
}

pub fn desk_render() -> RenderConfig {
    RenderConfig {
        stage1_samples: 32,
        stage2_samples: 32,
        nerf_samples: 32,
        ..Default::default()
    }
}

impl Default for DeskProfile {
    fn default() -> Self {
        DeskProfile {
            identities: 8,
            views: 8,
            resolution: 64,
            data_seed: 1,
            input_views: vec![0, 5],
            target_specular: 0.3,
            prior: TrainConfig {
                field: desk_field(),
                render: desk_render(),
                rays_per_identity: 16,
                views_per_batch: 2,
                identities_per_batch: 4,
                schedule: Schedule {
                    lr_initial: 0.005,
                    lr_final: 0.0002,
                    total_steps: 20_000,
                },
                ..Default::default()
            },
            fit: FitConfig {
                render: desk_render(),
                rays_per_batch: 128,
                lr_initial: 0.001,
                lr_final: 0.00002,
                steps: Some(1500),
                inversion: InversionConfig {
                    patches_per_step: 2,
                    patch_size: 16,
                    steps: 300,
                    ..Default::default()
                },
                ..Default::default()
            },
            scratch: FitConfig {
                render: desk_render(),
                rays_per_batch: 128,
                lr_initial: 0.003,
                lr_final: 0.0002,
                steps: Some(1500),
                ..Default::default()
            },
        }
    }
}

impl DeskProfile {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.fit.validate()?;
        self.scratch.validate()?;
        if self.identities == 0 || self.views == 0 || self.resolution == 0 {
            return Err(Error::Config("desk profile counts must be positive".into()));
        }
        if self.input_views.is_empty() || self.input_views.iter().any(|&v| v >= self.views) {
            return Err(Error::Config("input_views must index the target views".into()));
        }
        if self.input_views.len() >= self.views {
            return Err(Error::Config("no views left to score".into()));
        }
        Ok(())
    }

    /// Training identities followed by one held-out subject.
    pub fn dataset(&self) -> MultiViewDataset {
        let mut ds = generate_dataset(self.identities + 1, self.views, self.resolution, self.data_seed);
        let last = ds.identities.len() - 1;
        let held = &ds.identities[last];
        let mut identity = held.identity.clone().expect("generated subjects carry parameters");
        identity.bump_amplitude = self.target_specular;
        let mut target = identity_views(held.id.clone(), identity, &held.cameras);
        target.split = Split::Holdout;
        ds.identities[last] = target;
        ds
    }

    pub fn scored_views(&self) -> Vec<usize> {
        (0..self.views).filter(|v| !self.input_views.contains(v)).collect()
    }
}

/// Splits a held-out subject into fitting and scoring views.
pub fn split_target(target: &IdentityViews, inputs: &[usize]) -> (IdentityViews, IdentityViews) {
    let scored: Vec<usize> = (0..target.images.len()).filter(|v| !inputs.contains(v)).collect();
    (target.select_views(inputs), target.select_views(&scored))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewScore {
    pub psnr: f64,
    pub ssim: f64,
}

/// Renders every view of `views` and scores it against the reference,
/// PSNR over the reference foreground.
pub fn evaluate(
    params: &FieldParams<f32>,
    latent: &[f32],
    views: &IdentityViews,
    render: &RenderConfig,
    threads: usize,
) -> Result<Vec<ViewScore>> {
    views
        .cameras
        .iter()
        .zip(&views.images)
        .map(|(cam, reference)| {
            let out = render_image(params, latent, cam, render, threads)?;
            let mask = reference.nonzero_mask();
            Ok(ViewScore {
                psnr: psnr(&out.color, reference, Some(&mask))?,
                ssim: ssim(&out.color, reference)?,
            })
        })
        .collect()
}

pub fn mean_psnr(scores: &[ViewScore]) -> f64 {
    scores.iter().map(|s| s.psnr).sum::<f64>() / scores.len().max(1) as f64
}

pub fn mean_ssim(scores: &[ViewScore]) -> f64 {
    scores.iter().map(|s| s.ssim).sum::<f64>() / scores.len().max(1) as f64
}

/// Mean training-view PSNR of every code in a trained prior.
pub fn prior_training_psnr(model: &PriorModel, dataset: &MultiViewDataset, render: &RenderConfig, threads: usize) -> Result<f64> {
    let mut all = Vec::new();
    for (row, (_, views)) in dataset.split(Split::Train).enumerate() {
        all.extend(evaluate(&model.params, model.latents.row(row), views, render, threads)?);
    }
    Ok(mean_psnr(&all))
}

/// One fitted variant scored on the fitting and the held-out views.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub train_psnr: f64,
    pub holdout_psnr: f64,
    pub holdout_ssim: f64,
}

pub const SWEEP_HEADER: &str = "variant\ttrain_psnr\tholdout_psnr\tholdout_ssim";

impl SweepRow {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.4}\t{:.4}\t{:.4}",
            self.label, self.train_psnr, self.holdout_psnr, self.holdout_ssim
        )
    }
}

/// Rows sorted best first by held-out PSNR.
pub fn format_table(rows: &[SweepRow]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| b.holdout_psnr.total_cmp(&a.holdout_psnr));
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in &sorted {
        out.push_str(&r.tsv());
        out.push('\n');
    }
    out
}

fn fit_and_score(
    label: &str,
    params: &FieldParams<f32>,
    latent: &[f32],
    inputs: &IdentityViews,
    scored: &IdentityViews,
    fit: &FitConfig,
) -> Result<SweepRow> {
    let model = finetune(params, latent, inputs, fit)?;
    let train = evaluate(&model.params, &model.latent, inputs, &fit.render, fit.threads)?;
    let held = evaluate(&model.params, &model.latent, scored, &fit.render, fit.threads)?;
    Ok(SweepRow {
        label: label.to_string(),
        train_psnr: mean_psnr(&train),
        holdout_psnr: mean_psnr(&held),
        holdout_ssim: mean_ssim(&held),
    })
}

/// Trains the profile's prior on the training identities of `dataset`.
pub fn train_desk_prior(profile: &DeskProfile, dataset: &MultiViewDataset) -> Result<PriorModel> {
    profile.validate()?;
    train_prior(dataset, &profile.prior)
}

fn held_out(dataset: &MultiViewDataset) -> Result<&IdentityViews> {
    dataset
        .split(Split::Holdout)
        .map(|(_, v)| v)
        .next()
        .ok_or(Error::EmptyList("held-out identities"))
}

/// Finetunes the prior on the held-out subject's input views from each
/// latent initialization, with one shared budget.
pub fn init_sweep(
    profile: &DeskProfile,
    model: &PriorModel,
    dataset: &MultiViewDataset,
    strategies: &[InitStrategy],
) -> Result<Vec<SweepRow>> {
    let target = held_out(dataset)?;
    let (inputs, scored) = split_target(target, &profile.input_views);
    let train: Vec<&IdentityViews> = dataset.split(Split::Train).map(|(_, v)| v).collect();
    let distances: Vec<f64> = train.iter().map(|c| identity_distance(&inputs, c)).collect();
    let ctx = InitContext {
        latent_dim: model.params.config.latent_dim,
        seed: profile.fit.seed,
        table: Some(&model.latents),
        distances: Some(&distances),
        params: Some(&model.params),
        target: Some(&inputs),
        fit: Some(&profile.fit),
    };
    strategies
        .iter()
        .map(|&s| {
            let latent = init_latent(s, &ctx)?;
            fit_and_score(s.name(), &model.params, &latent, &inputs, &scored, &profile.fit)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularization {
    Full,
    NoViewReg,
    NoNormal,
    None,
}

impl Regularization {
    pub const ALL: [Regularization; 4] = [
        Regularization::Full,
        Regularization::NoViewReg,
        Regularization::NoNormal,
        Regularization::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regularization::Full => "full",
            Regularization::NoViewReg => "no_view_reg",
            Regularization::NoNormal => "no_normal",
            Regularization::None => "none",
        }
    }

    pub fn apply(self, fit: &FitConfig) -> FitConfig {
        let mut f = fit.clone();
        if matches!(self, Regularization::NoViewReg | Regularization::None) {
            f.lambda_v = 0.0;
        }
        if matches!(self, Regularization::NoNormal | Regularization::None) {
            f.lambda_normal = 0.0;
        }
        f
    }
}

/// Finetunes from the inverted code with regularizer subsets switched off.
pub fn regularization_sweep(
    profile: &DeskProfile,
    model: &PriorModel,
    dataset: &MultiViewDataset,
    variants: &[Regularization],
) -> Result<Vec<SweepRow>> {
    let target = held_out(dataset)?;
    let (inputs, scored) = split_target(target, &profile.input_views);
    let ctx = InitContext {
        latent_dim: model.params.config.latent_dim,
        params: Some(&model.params),
        target: Some(&inputs),
        fit: Some(&profile.fit),
        ..Default::default()
    };
    let latent = init_latent(InitStrategy::Inversion, &ctx)?;
    variants
        .iter()
        .map(|&r| fit_and_score(r.name(), &model.params, &latent, &inputs, &scored, &r.apply(&profile.fit)))
        .collect()
}

/// The prior finetuned from its inverted code next to a freshly
/// initialized network fitted to the same views.
pub fn scratch_comparison(
    profile: &DeskProfile,
    model: &PriorModel,
    dataset: &MultiViewDataset,
) -> Result<Vec<SweepRow>> {
    let target = held_out(dataset)?;
    let (inputs, scored) = split_target(target, &profile.input_views);
    let ctx = InitContext {
        latent_dim: model.params.config.latent_dim,
        params: Some(&model.params),
        target: Some(&inputs),
        fit: Some(&profile.fit),
        ..Default::default()
    };
    let latent = init_latent(InitStrategy::Inversion, &ctx)?;
    let prior = fit_and_score("prior", &model.params, &latent, &inputs, &scored, &profile.fit)?;
    let fresh = FieldParams::<f32>::init(&model.params.config, profile.prior.seed ^ 0x5eed)?;
    let zeros = vec![0.0; model.params.config.latent_dim];
    let scratch = fit_and_score("scratch", &fresh, &zeros, &inputs, &scored, &profile.scratch)?;
    Ok(vec![prior, scratch])
}
