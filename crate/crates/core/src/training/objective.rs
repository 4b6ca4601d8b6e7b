//! Rendering-based objectives and their gradients, evaluated over fixed
//! chunks of rays so results do not depend on scheduling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Ray;
use crate::losses::{
    interlevel_loss_grad, normal_consistency_grad, LossBreakdown, PatchPair, PerceptualMetric,
};
use crate::field::FieldParams;
use crate::real::Real;
use crate::renderer::{render_batch, RayBatch, RenderConfig, RenderCotangents, RenderTape};

/// Rays per rendering work item.
pub const RAY_CHUNK: usize = 64;

/// Rays with reference colours, each bound to a latent slot.
#[derive(Clone, Debug, Default)]
pub struct RayTargets {
    pub rays: Vec<Ray>,
    /// `rays × 3`.
    pub colors: Vec<f32>,
    pub slots: Vec<u32>,
    /// Per-ray sampling seeds.
    pub seeds: Vec<u64>,
}

impl RayTargets {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn push(&mut self, ray: Ray, color: [f32; 3], slot: u32, seed: u64) {
        self.rays.push(ray);
        self.colors.extend_from_slice(&color);
        self.slots.push(slot);
        self.seeds.push(seed);
    }

    fn range(&self, r: std::ops::Range<usize>) -> (&[Ray], &[f32], &[u32], &[u64]) {
        (
            &self.rays[r.clone()],
            &self.colors[r.start * 3..r.end * 3],
            &self.slots[r.clone()],
            &self.seeds[r],
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub lambda_prop: f64,
    pub lambda_normal: f64,
}

/// Gradients of one objective evaluation.
#[derive(Clone, Debug)]
pub struct StepGradients<T> {
    pub params: Option<Vec<T>>,
    /// `slots × latent_dim`.
    pub latents: Vec<T>,
}

struct Partial<T> {
    loss: LossBreakdown,
    params: Option<Vec<T>>,
    latents: Vec<T>,
}

/// Splits `0..n` into `parts` contiguous ranges of whole chunks.
fn part_ranges(n: usize, chunk: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let chunks = n.div_ceil(chunk);
    let parts = parts.clamp(1, chunks.max(1));
    (0..parts)
        .map(|p| {
            let c0 = chunks * p / parts;
            let c1 = chunks * (p + 1) / parts;
            (c0 * chunk).min(n)..(c1 * chunk).min(n)
        })
        .collect()
}

fn run_parts<T: Real, F>(
    n: usize,
    chunk: usize,
    threads: usize,
    params_len: usize,
    latents_len: usize,
    want_param_grads: bool,
    body: F,
) -> Result<(LossBreakdown, StepGradients<T>)>
where
    F: Fn(std::ops::Range<usize>, &mut LossBreakdown, Option<&mut [T]>, &mut [T]) -> Result<()>
        + Sync,
{
    let ranges = part_ranges(n, chunk, threads);
    let work = |range: std::ops::Range<usize>| -> Result<Partial<T>> {
        let mut p = Partial {
            loss: LossBreakdown::default(),
            params: want_param_grads.then(|| vec![T::zero(); params_len]),
            latents: vec![T::zero(); latents_len],
        };
        let mut start = range.start;
        while start < range.end {
            let end = (start + chunk).min(range.end);
            body(start..end, &mut p.loss, p.params.as_deref_mut(), &mut p.latents)?;
            start = end;
        }
        Ok(p)
    };
    let partials: Vec<Result<Partial<T>>> = if ranges.len() > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(ranges.len())
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| ranges.into_par_iter().map(work).collect())
    } else {
        ranges.into_iter().map(work).collect()
    };
    let mut loss = LossBreakdown::default();
    let mut grads = StepGradients {
        params: want_param_grads.then(|| vec![T::zero(); params_len]),
        latents: vec![T::zero(); latents_len],
    };
    for p in partials {
        let p = p?;
        loss.accumulate(&p.loss);
        if let (Some(dst), Some(src)) = (grads.params.as_mut(), p.params) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
        for (a, b) in grads.latents.iter_mut().zip(p.latents) {
            *a += b;
        }
    }
    Ok((loss, grads))
}

/// Adds the interlevel and normal-consistency terms of a rendered batch
/// (scaled by `1/n_total`) into `cot` and `loss`.
fn auxiliary_terms<T: Real>(
    tape: &RenderTape<T>,
    w: ObjectiveWeights,
    n_total: usize,
    cot: &mut RenderCotangents<T>,
    loss: &mut LossBreakdown,
) {
    let inv_n = 1.0 / n_total as f64;
    let s = tape.nerf.samples;
    for r in 0..tape.rays {
        let nerf_t = tape.nerf.ray_boundaries(r);
        let nerf_w = tape.nerf.ray_weights(r);
        if w.lambda_prop > 0.0 {
            for k in 0..2 {
                let stage = &tape.proposal[k];
                let ps = stage.samples;
                let v = interlevel_loss_grad(
                    nerf_t,
                    nerf_w,
                    stage.ray_boundaries(r),
                    stage.ray_weights(r),
                    w.lambda_prop * inv_n,
                    Some(&mut cot.proposal_weights[k][r * ps..(r + 1) * ps]),
                );
                loss.prop += v * inv_n;
            }
        }
        if w.lambda_normal > 0.0 {
            if let Some(analytic) = &tape.analytic {
                let rows = r * s..(r + 1) * s;
                let pred: Vec<[T; 3]> = rows
                    .clone()
                    .map(|i| {
                        let n = &tape.nerf_tape.normal[i * 3..i * 3 + 3];
                        [n[0], n[1], n[2]]
                    })
                    .collect();
                let an: Vec<[T; 3]> = analytic[rows.clone()]
                    .iter()
                    .map(|e| [T::of(e.normal.x), T::of(e.normal.y), T::of(e.normal.z)])
                    .collect();
                let valid: Vec<bool> = analytic[rows.clone()].iter().map(|e| !e.fallback).collect();
                let v = normal_consistency_grad(
                    nerf_w,
                    &pred,
                    &an,
                    Some(&valid),
                    w.lambda_normal * inv_n,
                    &mut cot.nerf_weights[rows.clone()],
                    &mut cot.predicted_normals[r * s * 3..(r + 1) * s * 3],
                );
                loss.normal += v * inv_n;
            }
        }
    }
}

/// Mean L1 colour error plus the weighted interlevel and normal terms over
/// a set of rays, with gradients for the parameters (when requested) and
/// the latent slots.
pub fn ray_objective<T: Real>(
    params: &FieldParams<T>,
    latents: &[T],
    targets: &RayTargets,
    render: &RenderConfig,
    weights: ObjectiveWeights,
    want_param_grads: bool,
    threads: usize,
) -> Result<(LossBreakdown, StepGradients<T>)> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::EmptyList("ray batch"));
    }
    let want_normals = weights.lambda_normal > 0.0;
    let (mut loss, grads) = run_parts(
        n,
        RAY_CHUNK,
        threads,
        params.len(),
        latents.len(),
        want_param_grads,
        |range, loss, pgrads, lgrads| {
            let (rays, colors, slots, seeds) = targets.range(range);
            let batch = RayBatch {
                rays,
                latents,
                latent_slot: slots,
                seeds: Some(seeds),
            };
            let tape = render_batch(params, &batch, render, want_normals, None)?;
            let mut cot = RenderCotangents::zeros(&tape);
            let k = 1.0 / (3 * n) as f64;
            for (i, (p, t)) in tape.color.iter().zip(colors).enumerate() {
                let d = p.f64() - *t as f64;
                loss.recon += d.abs() * k;
                if d != 0.0 {
                    cot.color[i] = T::of(k * d.signum());
                }
            }
            auxiliary_terms(&tape, weights, n, &mut cot, loss);
            tape.backward(params, &batch, &cot, lgrads, pgrads);
            Ok(())
        },
    )?;
    loss.lambda_prop = weights.lambda_prop;
    loss.lambda_normal = weights.lambda_normal;
    Ok((loss.finish(), grads))
}

/// A square image patch to reconstruct, bound to one latent slot.
#[derive(Clone, Debug)]
pub struct PatchTarget {
    pub size: usize,
    /// Row-major pixel rays.
    pub rays: Vec<Ray>,
    /// `size² × 3`.
    pub colors: Vec<f32>,
    pub slot: u32,
    pub seeds: Vec<u64>,
}

/// Mean over patches of `L_recon + λ · perceptual`, with latent gradients
/// only (parameters stay frozen).
pub fn patch_objective<T: Real>(
    params: &FieldParams<T>,
    latents: &[T],
    patches: &[PatchTarget],
    render: &RenderConfig,
    lambda_perceptual: f64,
    metric: &dyn PerceptualMetric,
    threads: usize,
) -> Result<(LossBreakdown, Vec<T>)> {
    let p = patches.len();
    if p == 0 {
        return Err(Error::EmptyList("patches"));
    }
    let (mut loss, grads) = run_parts::<T, _>(
        p,
        1,
        threads,
        0,
        latents.len(),
        false,
        |range, loss, _, lgrads| {
            for patch in &patches[range] {
                let slots = vec![patch.slot; patch.rays.len()];
                let batch = RayBatch {
                    rays: &patch.rays,
                    latents,
                    latent_slot: &slots,
                    seeds: Some(&patch.seeds),
                };
                let tape = render_batch(params, &batch, render, false, None)?;
                let mut cot = RenderCotangents::zeros(&tape);
                let m = patch.rays.len() * 3;
                let k = 1.0 / (m * p) as f64;
                let predicted: Vec<f64> = tape.color.iter().map(|v| v.f64()).collect();
                let reference: Vec<f64> = patch.colors.iter().map(|&v| v as f64).collect();
                let mut dperc = vec![0.0; m];
                let perc = metric.loss_grad(
                    PatchPair {
                        width: patch.size,
                        height: patch.size,
                        predicted: &predicted,
                        reference: &reference,
                    },
                    &mut dperc,
                )?;
                loss.perceptual += perc / p as f64;
                for i in 0..m {
                    let d = predicted[i] - reference[i];
                    loss.recon += d.abs() * k;
                    let g = if d != 0.0 { k * d.signum() } else { 0.0 };
                    cot.color[i] = T::of(g + lambda_perceptual * dperc[i] / p as f64);
                }
                tape.backward(params, &batch, &cot, lgrads, None);
            }
            Ok(())
        },
    )?;
    loss.lambda_perceptual = lambda_perceptual;
    Ok((loss.finish(), grads.latents))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn part_ranges_cover_whole_chunks() {
        let r = part_ranges(300, 64, 3);
        assert_eq!(r, vec![0..64, 64..192, 192..300]);
        assert_eq!(part_ranges(10, 64, 8), vec![0..10]);
        assert_eq!(part_ranges(128, 64, 1), vec![0..128]);
    }
}
