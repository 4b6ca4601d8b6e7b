use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::log::StepRecord;
use super::objective::{ray_objective, ObjectiveWeights, RayTargets};
use super::optim::{adam_step, clip_gradients, lr_at_step, AdamState, SparseAdam};
use crate::data::{IdentityViews, MultiViewDataset, Split};
use crate::error::{Error, Result};
use crate::field::{FieldParams, GradientBundle, LatentTable};

/// Reproducible 64-bit mixing of a seed with a stream and an index.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const STREAM_BATCH: u64 = 1;
pub(crate) const STREAM_RAYS: u64 = 2;

/// Trained prior: network, one code per training identity (in dataset
/// order), and the per-step log.
#[derive(Clone, Debug)]
pub struct PriorModel {
    pub params: FieldParams<f32>,
    pub latents: LatentTable<f32>,
    pub log: Vec<StepRecord>,
}

/// Draws `count` random pixels of `view` into `targets`.
pub(crate) fn push_random_rays(
    targets: &mut RayTargets,
    identity: &IdentityViews,
    view: usize,
    count: usize,
    slot: u32,
    rng: &mut impl Rng,
    seed_of: &mut impl FnMut() -> u64,
) {
    let cam = &identity.cameras[view];
    let img = &identity.images[view];
    for _ in 0..count {
        let x = rng.gen_range(0..img.width);
        let y = rng.gen_range(0..img.height);
        targets.push(cam.ray_for_pixel(x as f64, y as f64), img.get(x, y), slot, seed_of());
    }
}

/// Auto-decoder training of the network and the per-identity codes on the
/// train split of `dataset`.
pub fn train_prior(dataset: &MultiViewDataset, config: &TrainConfig) -> Result<PriorModel> {
    train_prior_with(dataset, config, |_| {})
}

/// [`train_prior`] reporting every step to `observer`.
pub fn train_prior_with(
    dataset: &MultiViewDataset,
    config: &TrainConfig,
    mut observer: impl FnMut(&StepRecord),
) -> Result<PriorModel> {
    config.validate()?;
    let train: Vec<&IdentityViews> = dataset.split(Split::Train).map(|(_, v)| v).collect();
    if train.is_empty() {
        return Err(Error::EmptyList("training identities"));
    }
    let dim = config.field.latent_dim;
    let mut params = FieldParams::<f32>::init(&config.field, config.seed)?;
    let mut latents =
        LatentTable::<f32>::random(train.len(), dim, config.latent_init_std, mix_seed(config.seed, 0, 0));
    let mut adam = AdamState::new(params.len(), config.adam);
    let mut latent_adam = SparseAdam::new(train.len(), dim, config.adam);
    let weights = ObjectiveWeights {
        lambda_prop: config.lambda_prop,
        lambda_normal: 0.0,
    };
    let mut log = Vec::with_capacity(config.total_steps());

    for step in 0..config.total_steps() {
        let lr = lr_at_step(&config.schedule, step)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, STREAM_BATCH, step as u64));
        let ids = sample(&mut rng, train.len(), config.identities_per_batch.min(train.len())).into_vec();
        let mut targets = RayTargets::default();
        let mut ray_index = 0u64;
        let mut seed_of = || {
            ray_index += 1;
            mix_seed(config.seed ^ step as u64, STREAM_RAYS, ray_index)
        };
        let mut slot_codes = Vec::with_capacity(ids.len());
        for (slot, &id) in ids.iter().enumerate() {
            let identity = train[id];
            let n_views = identity.cameras.len();
            let views = sample(&mut rng, n_views, config.views_per_batch.min(n_views)).into_vec();
            for v in views {
                push_random_rays(
                    &mut targets,
                    identity,
                    v,
                    config.rays_per_identity,
                    slot as u32,
                    &mut rng,
                    &mut seed_of,
                );
            }
            slot_codes.push(id);
        }
        let slot_latents: Vec<f32> = slot_codes
            .iter()
            .flat_map(|&c| latents.row(c).iter().copied())
            .collect();
        let (loss, grads) = ray_objective(
            &params,
            &slot_latents,
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
        for (slot, &code) in slot_codes.iter().enumerate() {
            bundle
                .latents
                .insert(code, grads.latents[slot * dim..(slot + 1) * dim].to_vec());
        }
        if let Some(max) = config.clip_norm {
            bundle = clip_gradients(bundle, max);
        }
        adam_step(&mut adam, &mut params.values, &bundle.params, lr)?;
        for (code, g) in &bundle.latents {
            latent_adam.step_row(*code, latents.row_mut(*code), g, lr);
        }
        let record = StepRecord { step, lr, loss };
        observer(&record);
        log.push(record);
    }
    Ok(PriorModel {
        params,
        latents,
        log,
    })
}
