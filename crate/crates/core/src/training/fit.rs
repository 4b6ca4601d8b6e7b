use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::FitConfig;
use super::log::StepRecord;
use super::objective::{patch_objective, ray_objective, ObjectiveWeights, PatchTarget, RayTargets};
use super::optim::{adam_step, clip_gradients, lr_at_step, AdamState};
use super::prior::{mix_seed, push_random_rays, STREAM_BATCH, STREAM_RAYS};
use crate::data::IdentityViews;
use crate::error::{Error, Result};
use crate::field::{FieldParams, GradientBundle, LatentTable};
use crate::losses::{view_branch_reg_grad, PerceptualMetric, PyramidProxy};

const STREAM_PATCH: u64 = 3;
const PATCH_ATTEMPTS: usize = 64;

/// Draws one patch origin; prefers origins whose reference foreground
/// covers at least `min_foreground` of the patch.
fn sample_patch(
    views: &IdentityViews,
    masks: &[Vec<bool>],
    size: usize,
    min_foreground: f64,
    rng: &mut impl Rng,
) -> (usize, usize, usize) {
    let mut last = (0, 0, 0);
    for _ in 0..PATCH_ATTEMPTS {
        let v = rng.gen_range(0..views.images.len());
        let img = &views.images[v];
        let x0 = rng.gen_range(0..=img.width - size);
        let y0 = rng.gen_range(0..=img.height - size);
        last = (v, x0, y0);
        let fg = (y0..y0 + size)
            .flat_map(|y| (x0..x0 + size).map(move |x| y * img.width + x))
            .filter(|&i| masks[v][i])
            .count();
        if fg as f64 >= min_foreground * (size * size) as f64 {
            break;
        }
    }
    last
}

/// Recovers a latent code for `views` with the network frozen, starting
/// from `init` (zeros when absent).
pub fn invert_latent(
    params: &FieldParams<f32>,
    views: &IdentityViews,
    config: &FitConfig,
    init: Option<&[f32]>,
) -> Result<(Vec<f32>, Vec<StepRecord>)> {
    invert_latent_with(params, views, config, init, &PyramidProxy::default())
}

pub fn invert_latent_with(
    params: &FieldParams<f32>,
    views: &IdentityViews,
    config: &FitConfig,
    init: Option<&[f32]>,
    metric: &dyn PerceptualMetric,
) -> Result<(Vec<f32>, Vec<StepRecord>)> {
    config.validate()?;
    if views.images.is_empty() {
        return Err(Error::EmptyList("inversion views"));
    }
    let dim = params.config.latent_dim;
    let mut code = match init {
        Some(c) if c.len() == dim => c.to_vec(),
        Some(c) => return Err(Error::shape(format!("latent init has {} values, need {dim}", c.len()))),
        None => vec![0.0; dim],
    };
    let inv = &config.inversion;
    let min_side = views.images.iter().map(|i| i.width.min(i.height)).min().unwrap();
    let size = inv.patch_size.min(min_side);
    let masks = views.masks();
    let mut adam = AdamState::new(dim, config.adam);
    let mut log = Vec::with_capacity(inv.steps);
    for step in 0..inv.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, STREAM_PATCH, step as u64));
        let patches: Vec<PatchTarget> = (0..inv.patches_per_step)
            .map(|p| {
                let (v, x0, y0) = sample_patch(views, &masks, size, inv.min_foreground, &mut rng);
                let cam = &views.cameras[v];
                let img = &views.images[v];
                let mut rays = Vec::with_capacity(size * size);
                let mut colors = Vec::with_capacity(size * size * 3);
                let mut seeds = Vec::with_capacity(size * size);
                for y in y0..y0 + size {
                    for x in x0..x0 + size {
                        rays.push(cam.ray_for_pixel(x as f64, y as f64));
                        colors.extend_from_slice(&img.get(x, y));
                        seeds.push(mix_seed(
                            config.seed ^ step as u64,
                            STREAM_RAYS,
                            (p * size * size + seeds.len()) as u64,
                        ));
                    }
                }
                PatchTarget {
                    size,
                    rays,
                    colors,
                    slot: 0,
                    seeds,
                }
            })
            .collect();
        let (loss, grad) = patch_objective(
            params,
            &code,
            &patches,
            &config.render,
            inv.lambda_perceptual,
            metric,
            config.threads,
        )?;
        adam_step(&mut adam, &mut code, &grad, inv.lr)?;
        log.push(StepRecord {
            step,
            lr: inv.lr,
            loss,
        });
    }
    Ok((code, log))
}

/// Finetuned model for one target identity.
#[derive(Clone, Debug)]
pub struct FittedModel {
    pub params: FieldParams<f32>,
    pub latent: Vec<f32>,
    pub log: Vec<StepRecord>,
}

/// Optimizes all parameters and the code on random rays across `views`
/// under the reconstruction, interlevel, normal and view-branch terms.
pub fn finetune(
    params: &FieldParams<f32>,
    latent: &[f32],
    views: &IdentityViews,
    config: &FitConfig,
) -> Result<FittedModel> {
    finetune_with(params, latent, views, config, |_| {})
}

pub fn finetune_with(
    params: &FieldParams<f32>,
    latent: &[f32],
    views: &IdentityViews,
    config: &FitConfig,
    mut observer: impl FnMut(&StepRecord),
) -> Result<FittedModel> {
    config.validate()?;
    if views.images.is_empty() {
        return Err(Error::EmptyList("finetuning views"));
    }
    let dim = params.config.latent_dim;
    if latent.len() != dim {
        return Err(Error::shape(format!("latent has {} values, need {dim}", latent.len())));
    }
    let resolution = views.images.iter().map(|i| i.width.max(i.height)).max().unwrap() as u32;
    let schedule = config.schedule(resolution);
    let mut params = params.clone();
    let mut code = latent.to_vec();
    let mut adam = AdamState::new(params.len(), config.adam);
    let mut latent_adam = AdamState::new(dim, config.adam);
    let weights = ObjectiveWeights {
        lambda_prop: config.lambda_prop,
        lambda_normal: config.lambda_normal,
    };
    let n_views = views.images.len();
    let mut log = Vec::with_capacity(schedule.total_steps);
    for step in 0..schedule.total_steps {
        let lr = lr_at_step(&schedule, step)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, STREAM_BATCH, step as u64));
        let mut targets = RayTargets::default();
        let mut ray_index = 0u64;
        let mut seed_of = || {
            ray_index += 1;
            mix_seed(config.seed ^ step as u64, STREAM_RAYS, ray_index)
        };
        // Rays spread evenly over the views, remainder to the first ones.
        for v in 0..n_views {
            let count = config.rays_per_batch / n_views + usize::from(v < config.rays_per_batch % n_views);
            push_random_rays(&mut targets, views, v, count, 0, &mut rng, &mut seed_of);
        }
        let (mut loss, grads) = ray_objective(
            &params,
            &code,
            &targets,
            &config.render,
            weights,
            true,
            config.threads,
        )?;
        let mut bundle = GradientBundle {
            params: grads.params.expect("parameter gradients requested"),
            latents: Default::default(),
        };
        loss.view_reg = if config.lambda_v > 0.0 {
            view_branch_reg_grad(&params, config.lambda_v, &mut bundle.params)
        } else {
            0.0
        };
        loss.lambda_v = config.lambda_v;
        let loss = loss.finish();
        if config.optimize_latent {
            bundle.latents.insert(0, grads.latents);
        }
        if let Some(max) = config.clip_norm {
            bundle = clip_gradients(bundle, max);
        }
        adam_step(&mut adam, &mut params.values, &bundle.params, lr)?;
        if let Some(g) = bundle.latents.get(&0) {
            adam_step(&mut latent_adam, &mut code, g, lr)?;
        }
        let record = StepRecord { step, lr, loss };
        observer(&record);
        log.push(record);
    }
    Ok(FittedModel {
        params,
        latent: code,
        log,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    Zeros,
    Noise,
    Mean,
    Nearest,
    Furthest,
    Inversion,
}

impl InitStrategy {
    pub const ALL: [InitStrategy; 6] = [
        InitStrategy::Zeros,
        InitStrategy::Noise,
        InitStrategy::Mean,
        InitStrategy::Nearest,
        InitStrategy::Furthest,
        InitStrategy::Inversion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitStrategy::Zeros => "zeros",
            InitStrategy::Noise => "noise",
            InitStrategy::Mean => "mean",
            InitStrategy::Nearest => "nearest",
            InitStrategy::Furthest => "furthest",
            InitStrategy::Inversion => "inversion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        InitStrategy::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Inputs the initialization strategies may need.
#[derive(Clone, Copy, Default)]
pub struct InitContext<'a> {
    pub latent_dim: usize,
    pub seed: u64,
    /// Trained codes, for `mean`, `nearest`, `furthest` and the noise scale.
    pub table: Option<&'a LatentTable<f32>>,
    /// Proxy distance from the target to each table row.
    pub distances: Option<&'a [f64]>,
    /// Frozen prior, target views and settings, for `inversion`.
    pub params: Option<&'a FieldParams<f32>>,
    pub target: Option<&'a IdentityViews>,
    pub fit: Option<&'a FitConfig>,
}

/// Standard deviation of Gaussian-noise codes without a trained table.
pub const DEFAULT_NOISE_STD: f64 = 0.01;

pub fn init_latent(strategy: InitStrategy, ctx: &InitContext<'_>) -> Result<Vec<f32>> {
    let dim = ctx.latent_dim;
    match strategy {
        InitStrategy::Zeros => Ok(vec![0.0; dim]),
        InitStrategy::Noise => {
            let std = ctx.table.map(table_std).filter(|s| *s > 0.0).unwrap_or(DEFAULT_NOISE_STD);
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            Ok((0..dim).map(|_| normal.sample(&mut rng) as f32).collect())
        }
        InitStrategy::Mean => {
            let table = ctx.table.ok_or(Error::MissingContext("latent table"))?;
            if table.is_empty() {
                return Err(Error::EmptyList("latent table"));
            }
            let mut mean = vec![0.0f64; dim];
            for i in 0..table.len() {
                for (m, v) in mean.iter_mut().zip(table.row(i)) {
                    *m += *v as f64;
                }
            }
            Ok(mean.iter().map(|m| (m / table.len() as f64) as f32).collect())
        }
        InitStrategy::Nearest | InitStrategy::Furthest => {
            let table = ctx.table.ok_or(Error::MissingContext("latent table"))?;
            let d = ctx.distances.ok_or(Error::MissingContext("identity distances"))?;
            if d.len() != table.len() || d.is_empty() {
                return Err(Error::shape("one distance per table row required"));
            }
            let pick = if strategy == InitStrategy::Nearest {
                argmin(d)
            } else {
                argmin(&d.iter().map(|v| -v).collect::<Vec<_>>())
            };
            Ok(table.row(pick).to_vec())
        }
        InitStrategy::Inversion => {
            let params = ctx.params.ok_or(Error::MissingContext("prior parameters"))?;
            let target = ctx.target.ok_or(Error::MissingContext("target views"))?;
            let fit = ctx.fit.ok_or(Error::MissingContext("fit config"))?;
            Ok(invert_latent(params, target, fit, None)?.0)
        }
    }
}

fn argmin(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap()
}

fn table_std(t: &LatentTable<f32>) -> f64 {
    let n = t.codes.len().max(1) as f64;
    let mean = t.codes.iter().map(|&v| v as f64).sum::<f64>() / n;
    (t.codes.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Identity-similarity proxy: L2 distance between mean foreground colours
/// plus one minus the silhouette IoU, comparing each target view with the
/// candidate's view from the nearest camera.
pub fn identity_distance(target: &IdentityViews, candidate: &IdentityViews) -> f64 {
    let mean_fg = |v: &IdentityViews| {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for img in &v.images {
            for px in img.data.chunks_exact(3) {
                if px.iter().any(|&c| c != 0.0) {
                    for k in 0..3 {
                        acc[k] += px[k] as f64;
                    }
                    n += 1;
                }
            }
        }
        acc.map(|a| a / n.max(1) as f64)
    };
    let (a, b) = (mean_fg(target), mean_fg(candidate));
    let color = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let mut iou = 0.0;
    for (cam, img) in target.cameras.iter().zip(&target.images) {
        let nearest = (0..candidate.cameras.len())
            .min_by(|&i, &j| {
                let di = (candidate.cameras[i].center() - cam.center()).norm();
                let dj = (candidate.cameras[j].center() - cam.center()).norm();
                di.total_cmp(&dj)
            })
            .unwrap();
        let other = &candidate.images[nearest];
        let (ma, mb) = (img.nonzero_mask(), other.nonzero_mask());
        if ma.len() != mb.len() {
            continue;
        }
        let inter = ma.iter().zip(&mb).filter(|(x, y)| **x && **y).count();
        let union = ma.iter().zip(&mb).filter(|(x, y)| **x || **y).count();
        iou += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    color + 1.0 - iou / target.images.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> LatentTable<f32> {
        LatentTable::from_rows(2, &[vec![1.0, 1.0], vec![-1.0, -1.0]]).unwrap()
    }

    #[test]
    fn zeros_and_mean() {
        let t = table();
        let ctx = InitContext {
            latent_dim: 2,
            table: Some(&t),
            ..Default::default()
        };
        assert_eq!(init_latent(InitStrategy::Zeros, &ctx).unwrap(), vec![0.0, 0.0]);
        assert_eq!(init_latent(InitStrategy::Mean, &ctx).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn nearest_and_furthest_follow_the_distances() {
        let t = table();
        let d = [0.1, 0.9];
        let ctx = InitContext {
            latent_dim: 2,
            table: Some(&t),
            distances: Some(&d),
            ..Default::default()
        };
        assert_eq!(init_latent(InitStrategy::Nearest, &ctx).unwrap(), vec![1.0, 1.0]);
        assert_eq!(init_latent(InitStrategy::Furthest, &ctx).unwrap(), vec![-1.0, -1.0]);
    }

    #[test]
    fn noise_is_seeded() {
        let ctx = InitContext {
            latent_dim: 8,
            seed: 4,
            ..Default::default()
        };
        let a = init_latent(InitStrategy::Noise, &ctx).unwrap();
        assert_eq!(a, init_latent(InitStrategy::Noise, &ctx).unwrap());
        assert_ne!(a, init_latent(InitStrategy::Noise, &InitContext { seed: 5, ..ctx }).unwrap());
    }

    #[test]
    fn missing_context_is_reported() {
        let ctx = InitContext {
            latent_dim: 2,
            ..Default::default()
        };
        for s in [InitStrategy::Mean, InitStrategy::Nearest, InitStrategy::Inversion] {
            assert!(matches!(init_latent(s, &ctx), Err(Error::MissingContext(_))));
        }
    }

    #[test]
    fn identity_is_closest_to_itself() {
        let ds = crate::data::generate_dataset(3, 2, 16, 9);
        let t = &ds.identities[0];
        let d: Vec<f64> = ds.identities.iter().map(|c| identity_distance(t, c)).collect();
        assert!(d[0].abs() < 1e-12);
        assert!(d[1] > 0.0 && d[2] > 0.0);
    }
}
