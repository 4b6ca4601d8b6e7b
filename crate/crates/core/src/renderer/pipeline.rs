//! Three-stage hierarchical rendering of ray batches, with the reverse pass
//! used by all training phases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::composite::{compositing_backward, compositing_weights, summarize, RenderOutput};
use super::sampling::{importance_resample, stratified_partition, IntervalPartition};
use crate::encoding::{integrated_pe, view_pe};
use crate::error::{Error, Result};
use crate::field::{analytic_normals, FieldParams, Groups, NerfTape, NormalEstimate, TrunkTape};
use crate::geometry::{Ray, Vec3};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Uniform proposal samples.
    pub stage1_samples: usize,
    /// Resampled proposal samples.
    pub stage2_samples: usize,
    /// Resampled NeRF samples.
    pub nerf_samples: usize,
    /// Fraction of histogram mass spread uniformly before resampling.
    pub resample_padding: f64,
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
    /// Zero the density of samples whose frustum mean leaves the box.
    pub cull: bool,
    /// Finite-difference spacing of analytic normals.
    pub normal_step: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            stage1_samples: 256,
            stage2_samples: 256,
            nerf_samples: 128,
            resample_padding: 1e-3,
            box_min: [-1.0; 3],
            box_max: [1.0; 3],
            cull: true,
            normal_step: 1e-3,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_samples == 0 || self.stage2_samples == 0 || self.nerf_samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if !(self.normal_step > 0.0) || !(self.resample_padding >= 0.0) {
            return Err(Error::Config("normal_step > 0 and resample_padding >= 0".into()));
        }
        if (0..3).any(|k| !(self.box_min[k] < self.box_max[k])) {
            return Err(Error::Config("box_min must be below box_max".into()));
        }
        Ok(())
    }

    pub fn inside(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.box_min[k] && p[k] <= self.box_max[k])
    }

    /// Length of the ray segment inside the box.
    pub fn box_chord(&self, ray: &Ray) -> f64 {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            let inv = 1.0 / ray.direction[k];
            let a = (self.box_min[k] - ray.origin[k]) * inv;
            let b = (self.box_max[k] - ray.origin[k]) * inv;
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t1 - t0).max(0.0)
    }
}

/// Rays to render together. Each ray selects a latent slot; `seeds` enable
/// per-ray jittered sampling, `None` renders deterministically.
#[derive(Clone, Copy, Debug)]
pub struct RayBatch<'a, T> {
    pub rays: &'a [Ray],
    pub latents: &'a [T],
    pub latent_slot: &'a [u32],
    pub seeds: Option<&'a [u64]>,
}

#[derive(Clone, Debug)]
pub struct StageTape<T> {
    pub samples: usize,
    /// `rays × (samples + 1)`.
    pub boundaries: Vec<f64>,
    pub inside: Vec<bool>,
    pub row_latent: Vec<u32>,
    /// Densities after culling.
    pub density: Vec<T>,
    pub weights: Vec<T>,
    pub trans_next: Vec<T>,
}

impl<T: Real> StageTape<T> {
    pub fn ray_boundaries(&self, r: usize) -> &[f64] {
        &self.boundaries[r * (self.samples + 1)..(r + 1) * (self.samples + 1)]
    }

    pub fn ray_weights(&self, r: usize) -> &[T] {
        &self.weights[r * self.samples..(r + 1) * self.samples]
    }

    pub fn partition(&self, r: usize) -> IntervalPartition {
        IntervalPartition {
            boundaries: self.ray_boundaries(r).to_vec(),
        }
    }

    pub fn weights_f64(&self, r: usize) -> Vec<f64> {
        self.ray_weights(r).iter().map(|w| w.f64()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RenderTape<T> {
    pub rays: usize,
    pub proposal: [StageTape<T>; 2],
    pub proposal_tapes: [TrunkTape<T>; 2],
    pub nerf: StageTape<T>,
    pub nerf_tape: NerfTape<T>,
    /// `rays × view_dim`.
    pub view: Vec<T>,
    pub view_index: Vec<u32>,
    /// Composited color, `rays × 3`.
    pub color: Vec<T>,
    /// Analytic normal targets of the NeRF samples, when requested.
    pub analytic: Option<Vec<NormalEstimate>>,
}

/// Cotangents of a rendered batch.
#[derive(Clone, Debug)]
pub struct RenderCotangents<T> {
    /// `rays × 3`, for the composited color.
    pub color: Vec<T>,
    /// `rays × nerf_samples`, added to the NeRF compositing weights.
    pub nerf_weights: Vec<T>,
    /// `rays × nerf_samples × 3`, for the predicted normals.
    pub predicted_normals: Vec<T>,
    /// Per proposal stage, `rays × samples`.
    pub proposal_weights: [Vec<T>; 2],
}

impl<T: Real> RenderCotangents<T> {
    pub fn zeros(tape: &RenderTape<T>) -> Self {
        let n = tape.rays;
        RenderCotangents {
            color: vec![T::zero(); n * 3],
            nerf_weights: vec![T::zero(); n * tape.nerf.samples],
            predicted_normals: vec![T::zero(); n * tape.nerf.samples * 3],
            proposal_weights: [
                vec![T::zero(); n * tape.proposal[0].samples],
                vec![T::zero(); n * tape.proposal[1].samples],
            ],
        }
    }
}

/// Encodes the frustum of every interval and flags box membership.
fn encode_stage<T: Real>(
    rays: &[Ray],
    boundaries: &[f64],
    samples: usize,
    levels: usize,
    cfg: &RenderConfig,
) -> (Vec<T>, Vec<bool>, Vec<Vec3>) {
    let sd = 6 * levels;
    let rows = rays.len() * samples;
    let mut spatial = vec![T::zero(); rows * sd];
    let mut inside = vec![true; rows];
    let mut means = Vec::with_capacity(rows);
    for (r, ray) in rays.iter().enumerate() {
        let b = &boundaries[r * (samples + 1)..(r + 1) * (samples + 1)];
        for i in 0..samples {
            let row = r * samples + i;
            let g = ray.frustum_gaussian(b[i], b[i + 1]);
            integrated_pe(&g, levels, &mut spatial[row * sd..(row + 1) * sd]);
            if cfg.cull {
                inside[row] = cfg.inside(&g.mean);
            }
            means.push(g.mean);
        }
    }
    (spatial, inside, means)
}

fn stage_weights<T: Real>(
    density: &[T],
    boundaries: &[f64],
    rays: usize,
    samples: usize,
) -> (Vec<T>, Vec<T>) {
    let mut weights = vec![T::zero(); rays * samples];
    let mut trans_next = vec![T::zero(); rays * samples];
    for r in 0..rays {
        let s = r * samples..(r + 1) * samples;
        compositing_weights(
            &density[s.clone()],
            &boundaries[r * (samples + 1)..(r + 1) * (samples + 1)],
            &mut weights[s.clone()],
            &mut trans_next[s],
        );
    }
    (weights, trans_next)
}

fn row_latents(slots: &[u32], samples: usize) -> Vec<u32> {
    slots
        .iter()
        .flat_map(|&s| std::iter::repeat(s).take(samples))
        .collect()
}

/// Fixed partitions for every stage, used to replay a render with the
/// sampling held constant (resampling is not differentiated).
#[derive(Clone, Debug)]
pub struct StagePartitions {
    pub stages: [Vec<f64>; 3],
}

impl<T: Real> RenderTape<T> {
    pub fn partitions(&self) -> StagePartitions {
        StagePartitions {
            stages: [
                self.proposal[0].boundaries.clone(),
                self.proposal[1].boundaries.clone(),
                self.nerf.boundaries.clone(),
            ],
        }
    }
}

fn proposal_stage<T: Real>(
    params: &FieldParams<T>,
    batch: &RayBatch<'_, T>,
    boundaries: Vec<f64>,
    samples: usize,
    cfg: &RenderConfig,
) -> (StageTape<T>, TrunkTape<T>) {
    let levels = params.config.spatial_levels;
    let (spatial, inside, _) = encode_stage::<T>(batch.rays, &boundaries, samples, levels, cfg);
    let row_latent = row_latents(batch.latent_slot, samples);
    let tape = params.proposal_forward(
        &spatial,
        Groups {
            values: batch.latents,
            dim: params.config.latent_dim,
            index: &row_latent,
        },
    );
    let density: Vec<T> = tape
        .density
        .iter()
        .zip(&inside)
        .map(|(&d, &keep)| if keep { d } else { T::zero() })
        .collect();
    let (weights, trans_next) = stage_weights(&density, &boundaries, batch.rays.len(), samples);
    (
        StageTape {
            samples,
            boundaries,
            inside,
            row_latent,
            density,
            weights,
            trans_next,
        },
        tape,
    )
}

fn resample_all<T: Real>(
    prev: &StageTape<T>,
    n: usize,
    padding: f64,
    rngs: &mut Option<Vec<ChaCha8Rng>>,
) -> Vec<f64> {
    let rays = prev.boundaries.len() / (prev.samples + 1);
    let mut out = Vec::with_capacity(rays * (n + 1));
    for r in 0..rays {
        let part = prev.partition(r);
        let w = prev.weights_f64(r);
        let resampled = match rngs {
            Some(rngs) => importance_resample(&part, &w, n, padding, Some(&mut rngs[r])),
            None => importance_resample::<ChaCha8Rng>(&part, &w, n, padding, None),
        };
        out.extend_from_slice(&resampled.boundaries);
    }
    out
}

/// Renders a batch through all three stages, keeping what the reverse pass
/// needs. With `partitions` the sampling is replayed instead of drawn.
pub fn render_batch<T: Real>(
    params: &FieldParams<T>,
    batch: &RayBatch<'_, T>,
    cfg: &RenderConfig,
    want_analytic_normals: bool,
    partitions: Option<&StagePartitions>,
) -> Result<RenderTape<T>> {
    let n = batch.rays.len();
    let fc = &params.config;
    if batch.latent_slot.len() != n || batch.seeds.is_some_and(|s| s.len() != n) {
        return Err(Error::shape("ray batch: per-ray arrays disagree"));
    }
    if batch.latents.len() % fc.latent_dim != 0
        || batch
            .latent_slot
            .iter()
            .any(|&s| (s as usize + 1) * fc.latent_dim > batch.latents.len())
    {
        return Err(Error::shape("ray batch: latent slots out of range"));
    }
    let mut rngs: Option<Vec<ChaCha8Rng>> = batch
        .seeds
        .map(|seeds| seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect());

    let b0 = match partitions {
        Some(p) => p.stages[0].clone(),
        None => {
            let mut b = Vec::with_capacity(n * (cfg.stage1_samples + 1));
            for (r, ray) in batch.rays.iter().enumerate() {
                let part = match &mut rngs {
                    Some(rngs) => stratified_partition(ray, cfg.stage1_samples, Some(&mut rngs[r])),
                    None => stratified_partition::<ChaCha8Rng>(ray, cfg.stage1_samples, None),
                };
                b.extend_from_slice(&part.boundaries);
            }
            b
        }
    };
    let (s0, t0) = proposal_stage(params, batch, b0, cfg.stage1_samples, cfg);
    let b1 = match partitions {
        Some(p) => p.stages[1].clone(),
        None => resample_all(&s0, cfg.stage2_samples, cfg.resample_padding, &mut rngs),
    };
    let (s1, t1) = proposal_stage(params, batch, b1, cfg.stage2_samples, cfg);
    let b2 = match partitions {
        Some(p) => p.stages[2].clone(),
        None => resample_all(&s1, cfg.nerf_samples, cfg.resample_padding, &mut rngs),
    };

    let samples = cfg.nerf_samples;
    let (spatial, inside, means) =
        encode_stage::<T>(batch.rays, &b2, samples, fc.spatial_levels, cfg);
    let row_latent = row_latents(batch.latent_slot, samples);
    let vd = fc.view_dim();
    let mut view = vec![T::zero(); n * vd];
    for (r, ray) in batch.rays.iter().enumerate() {
        view_pe(&ray.direction, fc.view_levels, &mut view[r * vd..(r + 1) * vd])?;
    }
    let view_index: Vec<u32> = (0..n as u32)
        .flat_map(|r| std::iter::repeat(r).take(samples))
        .collect();
    let latents = Groups {
        values: batch.latents,
        dim: fc.latent_dim,
        index: &row_latent,
    };
    let nerf_tape = params.nerf_forward(
        &spatial,
        latents,
        Groups {
            values: &view,
            dim: vd,
            index: &view_index,
        },
    );
    let density: Vec<T> = nerf_tape
        .trunk
        .density
        .iter()
        .zip(&inside)
        .map(|(&d, &keep)| if keep { d } else { T::zero() })
        .collect();
    let (weights, trans_next) = stage_weights(&density, &b2, n, samples);
    let mut color = vec![T::zero(); n * 3];
    for r in 0..n {
        for i in 0..samples {
            let row = r * samples + i;
            for k in 0..3 {
                color[r * 3 + k] += weights[row] * nerf_tape.color[row * 3 + k];
            }
        }
    }
    let analytic =
        want_analytic_normals.then(|| analytic_normals(params, &means, latents, cfg.normal_step));

    Ok(RenderTape {
        rays: n,
        proposal: [s0, s1],
        proposal_tapes: [t0, t1],
        nerf: StageTape {
            samples,
            boundaries: b2,
            inside,
            row_latent,
            density,
            weights,
            trans_next,
        },
        nerf_tape,
        view,
        view_index,
        color,
        analytic,
    })
}

impl<T: Real> RenderTape<T> {
    /// f64 summary of ray `r`'s NeRF stage.
    pub fn output(&self, r: usize) -> RenderOutput {
        let s = self.nerf.samples;
        let rows = r * s..(r + 1) * s;
        let weights: Vec<f64> = self.nerf.weights[rows.clone()].iter().map(|w| w.f64()).collect();
        let to3 = |v: &[T], row: usize| [v[row * 3].f64(), v[row * 3 + 1].f64(), v[row * 3 + 2].f64()];
        let colors: Vec<[f64; 3]> = rows.clone().map(|row| to3(&self.nerf_tape.color, row)).collect();
        let normals: Vec<[f64; 3]> = rows.clone().map(|row| to3(&self.nerf_tape.normal, row)).collect();
        let mut out = summarize(&weights, &colors, Some(&normals), &self.nerf.partition(r));
        out.analytic_normals = self.analytic.as_ref().map(|a| {
            a[rows]
                .iter()
                .map(|e| [e.normal.x, e.normal.y, e.normal.z])
                .collect()
        });
        out
    }

    /// Reverse pass. Latent-slot gradients accumulate into `d_latents`
    /// (`slots × latent_dim`), parameter gradients into `grads` when given.
    pub fn backward(
        &self,
        params: &FieldParams<T>,
        batch: &RayBatch<'_, T>,
        cot: &RenderCotangents<T>,
        d_latents: &mut [T],
        mut grads: Option<&mut [T]>,
    ) {
        let fc = &params.config;
        let n = self.rays;
        let s = self.nerf.samples;
        let mut g = vec![T::zero(); n * s];
        let mut d_color = vec![T::zero(); n * s * 3];
        for r in 0..n {
            let dc = &cot.color[r * 3..r * 3 + 3];
            for i in 0..s {
                let row = r * s + i;
                let c = &self.nerf_tape.color[row * 3..row * 3 + 3];
                g[row] = cot.nerf_weights[row] + dc[0] * c[0] + dc[1] * c[1] + dc[2] * c[2];
                for k in 0..3 {
                    d_color[row * 3 + k] = self.nerf.weights[row] * dc[k];
                }
            }
        }
        let d_density = density_cotangent(&self.nerf, &g);
        let latents = Groups {
            values: batch.latents,
            dim: fc.latent_dim,
            index: &self.nerf.row_latent,
        };
        params.nerf_backward(
            &self.nerf_tape,
            latents,
            Groups {
                values: &self.view,
                dim: fc.view_dim(),
                index: &self.view_index,
            },
            &d_density,
            &d_color,
            &cot.predicted_normals,
            d_latents,
            grads.as_deref_mut(),
        );
        for k in 0..2 {
            let stage = &self.proposal[k];
            if cot.proposal_weights[k].iter().all(|v| *v == T::zero()) {
                continue;
            }
            let d_density = density_cotangent(stage, &cot.proposal_weights[k]);
            params.proposal_backward(
                &self.proposal_tapes[k],
                Groups {
                    values: batch.latents,
                    dim: fc.latent_dim,
                    index: &stage.row_latent,
                },
                &d_density,
                d_latents,
                grads.as_deref_mut(),
            );
        }
    }
}

fn density_cotangent<T: Real>(stage: &StageTape<T>, g: &[T]) -> Vec<T> {
    let s = stage.samples;
    let rays = stage.boundaries.len() / (s + 1);
    let mut d = vec![T::zero(); rays * s];
    for r in 0..rays {
        let rows = r * s..(r + 1) * s;
        compositing_backward(
            &stage.weights[rows.clone()],
            &stage.trans_next[rows.clone()],
            stage.ray_boundaries(r),
            &g[rows.clone()],
            &mut d[rows],
        );
    }
    for (v, keep) in d.iter_mut().zip(&stage.inside) {
        if !keep {
            *v = T::zero();
        }
    }
    d
}

/// The three sampling stages of one ray.
#[derive(Clone, Debug)]
pub struct RenderStages {
    pub stage1: (IntervalPartition, Vec<f64>),
    pub stage2: (IntervalPartition, Vec<f64>),
    pub stage3: (IntervalPartition, RenderOutput),
}

/// Renders one ray; `seed` enables jittered sampling.
pub fn render_ray<T: Real>(
    params: &FieldParams<T>,
    latent: &[T],
    ray: &Ray,
    cfg: &RenderConfig,
    seed: Option<u64>,
) -> Result<RenderStages> {
    let seeds = seed.map(|s| [s]);
    let batch = RayBatch {
        rays: std::slice::from_ref(ray),
        latents: latent,
        latent_slot: &[0],
        seeds: seeds.as_ref().map(|s| &s[..]),
    };
    let tape = render_batch(params, &batch, cfg, false, None)?;
    Ok(RenderStages {
        stage1: (tape.proposal[0].partition(0), tape.proposal[0].weights_f64(0)),
        stage2: (tape.proposal[1].partition(0), tape.proposal[1].weights_f64(0)),
        stage3: (tape.nerf.partition(0), tape.output(0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;

    fn tiny() -> FieldConfig {
        FieldConfig {
            spatial_levels: 2,
            view_levels: 1,
            latent_dim: 3,
            proposal_width: 6,
            proposal_depth: 2,
            nerf_width: 8,
            nerf_depth: 2,
            bottleneck_dim: 4,
            view_width: 5,
            density_bias: -1.0,
        }
    }

    /// Zero weights: density `softplus(bias)` everywhere, grey color.
    fn homogeneous(bias: f64) -> FieldParams<f64> {
        let mut p = FieldParams::<f64>::zeros(&tiny()).unwrap();
        for density in [p.layout.proposal.density, p.layout.nerf.density] {
            p.tensor_mut(density.bias)[0] = bias;
        }
        p
    }

    fn axis_ray() -> Ray {
        let half_diag = 3f64.sqrt();
        Ray {
            origin: Vec3::new(0.0, 0.0, 4.0),
            direction: -Vec3::z(),
            pixel_radius: 1e-3,
            near: 4.0 - half_diag,
            far: 4.0 + half_diag,
        }
    }

    fn cfg(samples: usize) -> RenderConfig {
        RenderConfig {
            stage1_samples: samples,
            stage2_samples: samples,
            nerf_samples: samples,
            ..Default::default()
        }
    }

    #[test]
    fn homogeneous_box_converges_to_the_closed_form() {
        let p = homogeneous(0.0);
        let sigma = 2f64.ln();
        let expected = 0.5 * (1.0 - (-sigma * 2.0).exp());
        let mut last = f64::INFINITY;
        for samples in [16, 32, 64, 128, 256] {
            let out = render_ray(&p, &[0.0; 3], &axis_ray(), &cfg(samples), None).unwrap();
            let err = (out.stage3.1.color[0] - expected).abs() / expected;
            assert!(err < last, "{samples} samples: {err} after {last}");
            last = err;
            if samples == 128 {
                assert!(err < 0.02, "{err}");
            }
        }
    }

    #[test]
    fn rays_missing_the_box_are_black() {
        let p = homogeneous(3.0);
        let mut ray = axis_ray();
        ray.origin.x = 5.0;
        let out = render_ray(&p, &[0.0; 3], &ray, &cfg(16), Some(4)).unwrap();
        assert_eq!(out.stage3.1.color, [0.0; 3]);
        assert_eq!(out.stage3.1.accumulated_opacity, 0.0);
    }

    #[test]
    fn sampling_is_reproducible_per_seed() {
        let p = FieldParams::<f64>::init(&tiny(), 2).unwrap();
        let latent = [0.1, 0.2, -0.3];
        let a = render_ray(&p, &latent, &axis_ray(), &cfg(16), Some(9)).unwrap();
        let b = render_ray(&p, &latent, &axis_ray(), &cfg(16), Some(9)).unwrap();
        let c = render_ray(&p, &latent, &axis_ray(), &cfg(16), Some(10)).unwrap();
        assert_eq!(a.stage3.0, b.stage3.0);
        assert_eq!(a.stage3.1.color, b.stage3.1.color);
        assert_ne!(a.stage1.0, c.stage1.0);
    }

    #[test]
    fn every_stage_partition_is_increasing_and_bounded() {
        let p = FieldParams::<f64>::init(&tiny(), 3).unwrap();
        let ray = axis_ray();
        let out = render_ray(&p, &[0.0; 3], &ray, &cfg(24), Some(1)).unwrap();
        for part in [&out.stage1.0, &out.stage2.0, &out.stage3.0] {
            assert!(part.is_strictly_increasing());
            assert!(part.boundaries[0] >= ray.near - 1e-12);
            assert!(*part.boundaries.last().unwrap() <= ray.far + 1e-12);
        }
    }

    #[test]
    fn initial_field_is_nearly_transparent() {
        let config = FieldConfig::default();
        let small = FieldConfig {
            nerf_width: 64,
            proposal_width: 32,
            latent_dim: 16,
            ..config
        };
        let p = FieldParams::<f64>::init(&small, 0).unwrap();
        let latent = vec![0.0; 16];
        // Longest chord through the box: a corner-to-corner diagonal.
        let dir = Vec3::new(-1.0, -1.0, -1.0).normalize();
        let origin = -dir * 4.0;
        let ray = Ray {
            origin,
            direction: dir,
            pixel_radius: 1e-3,
            near: 4.0 - 3f64.sqrt(),
            far: 4.0 + 3f64.sqrt(),
        };
        for r in [ray, axis_ray()] {
            let out = render_ray(&p, &latent, &r, &cfg(64), None).unwrap();
            assert!(out.stage3.1.accumulated_opacity < 0.5, "{}", out.stage3.1.accumulated_opacity);
        }
    }

    /// Replaying the sampling makes the render a smooth function of the
    /// parameters and codes; compare the reverse pass with central differences.
    #[test]
    fn backward_matches_finite_differences() {
        let config = tiny();
        let mut p = FieldParams::<f64>::init(&config, 11).unwrap();
        for t in p.layout.tensors.clone() {
            if !t.is_weight {
                for (j, v) in p.values[t.range()].iter_mut().enumerate() {
                    *v = 0.2 * ((t.offset + j) as f64 * 0.61).sin();
                }
            }
        }
        let rays = [
            axis_ray(),
            Ray {
                origin: Vec3::new(0.5, 0.2, 4.0),
                direction: Vec3::new(-0.1, -0.05, -1.0).normalize(),
                ..axis_ray()
            },
        ];
        let mut latents = vec![0.3, -0.1, 0.2, -0.4, 0.5, 0.1];
        let slots = [0u32, 1];
        let seeds = [5u64, 6];
        let rc = cfg(8);
        let first = render_batch(
            &p,
            &RayBatch {
                rays: &rays,
                latents: &latents,
                latent_slot: &slots,
                seeds: Some(&seeds),
            },
            &rc,
            false,
            None,
        )
        .unwrap();
        let parts = first.partitions();
        let mut cot = RenderCotangents::zeros(&first);
        cot.color = vec![0.7, -0.3, 0.5, 0.2, 0.9, -0.6];
        for (i, v) in cot.nerf_weights.iter_mut().enumerate() {
            *v = 0.1 * (i as f64).cos();
        }
        for (i, v) in cot.predicted_normals.iter_mut().enumerate() {
            *v = 0.05 * (i as f64 * 0.3).sin();
        }
        for k in 0..2 {
            for (i, v) in cot.proposal_weights[k].iter_mut().enumerate() {
                *v = 0.2 * ((i + k) as f64 * 0.9).sin();
            }
        }
        let objective = |p: &FieldParams<f64>, latents: &[f64]| {
            let batch = RayBatch {
                rays: &rays,
                latents,
                latent_slot: &slots,
                seeds: None,
            };
            let t = render_batch(p, &batch, &rc, false, Some(&parts)).unwrap();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            dot(&t.color, &cot.color)
                + dot(&t.nerf.weights, &cot.nerf_weights)
                + dot(&t.nerf_tape.normal, &cot.predicted_normals)
                + dot(&t.proposal[0].weights, &cot.proposal_weights[0])
                + dot(&t.proposal[1].weights, &cot.proposal_weights[1])
        };
        let mut grads = vec![0.0; p.len()];
        let mut d_latents = vec![0.0; latents.len()];
        let batch = RayBatch {
            rays: &rays,
            latents: &latents,
            latent_slot: &slots,
            seeds: None,
        };
        let tape = render_batch(&p, &batch, &rc, false, Some(&parts)).unwrap();
        tape.backward(&p, &batch, &cot, &mut d_latents, Some(&mut grads));
        let h = 1e-6;
        let close = |a: f64, n: f64| (a - n).abs() <= 1e-4 * a.abs().max(n.abs()).max(1e-4);
        for i in (0..p.len()).step_by(7) {
            let orig = p.values[i];
            p.values[i] = orig + h;
            let up = objective(&p, &latents);
            p.values[i] = orig - h;
            let down = objective(&p, &latents);
            p.values[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!(close(grads[i], numeric), "param {i}: {} vs {numeric}", grads[i]);
        }
        for i in 0..latents.len() {
            let orig = latents[i];
            latents[i] = orig + h;
            let up = objective(&p, &latents);
            latents[i] = orig - h;
            let down = objective(&p, &latents);
            latents[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!(close(d_latents[i], numeric), "latent {i}: {} vs {numeric}", d_latents[i]);
        }
    }
}
