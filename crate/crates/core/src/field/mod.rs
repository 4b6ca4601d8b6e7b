//! Latent-conditioned proposal and NeRF networks.

mod checkpoint;
mod mlp;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use mlp::{Groups, NerfTape, TrunkTape};
pub use params::{
    FieldConfig, FieldParams, GradientBundle, LatentTable, Layout, LinearLayout, MlpLayout,
    ParamGroup, TensorInfo,
};

use crate::encoding::positional_encoding;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Proposal,
    Nerf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldOutput<T> {
    pub density: T,
    pub color: Option<[T; 3]>,
    pub predicted_normal: Option<[T; 3]>,
}

/// Evaluates one sample. `view` is required in NeRF mode.
pub fn field_eval<T: Real>(
    params: &FieldParams<T>,
    spatial: &[T],
    latent: &[T],
    view: Option<&[T]>,
    mode: Mode,
) -> Result<FieldOutput<T>> {
    let cfg = &params.config;
    check_len("spatial features", spatial.len(), cfg.spatial_dim())?;
    check_len("latent code", latent.len(), cfg.latent_dim)?;
    let latents = Groups {
        values: latent,
        dim: cfg.latent_dim,
        index: &[0],
    };
    match mode {
        Mode::Proposal => {
            let tape = params.proposal_forward(spatial, latents);
            Ok(FieldOutput {
                density: tape.density[0],
                color: None,
                predicted_normal: None,
            })
        }
        Mode::Nerf => {
            let view = view.ok_or_else(|| Error::shape("NeRF mode requires view features"))?;
            check_len("view features", view.len(), cfg.view_dim())?;
            let view = Groups {
                values: view,
                dim: cfg.view_dim(),
                index: &[0],
            };
            let tape = params.nerf_forward(spatial, latents, view);
            Ok(FieldOutput {
                density: tape.trunk.density[0],
                color: Some([tape.color[0], tape.color[1], tape.color[2]]),
                predicted_normal: Some([tape.normal[0], tape.normal[1], tape.normal[2]]),
            })
        }
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(format!("{what}: length {got}, expected {want}")));
    }
    Ok(())
}

/// A batch of field evaluations with its conditioning inputs.
#[derive(Clone, Debug)]
pub struct FieldBatch<T> {
    pub mode: Mode,
    /// `rows × spatial_dim`.
    pub spatial: Vec<T>,
    /// `groups × latent_dim` distinct latent inputs.
    pub latents: Vec<T>,
    /// Latent-table row of each latent group; gradients are reported per code.
    pub latent_codes: Vec<usize>,
    pub latent_index: Vec<u32>,
    /// `view_groups × view_dim`; empty in proposal mode.
    pub view: Vec<T>,
    pub view_index: Vec<u32>,
}

/// Cotangents of the field outputs; `color`/`normal` are `rows × 3` and
/// ignored in proposal mode.
#[derive(Clone, Debug)]
pub struct FieldCotangents<T> {
    pub density: Vec<T>,
    pub color: Vec<T>,
    pub normal: Vec<T>,
}

impl<T: Real> FieldBatch<T> {
    pub fn rows(&self, config: &FieldConfig) -> usize {
        self.spatial.len() / config.spatial_dim()
    }

    fn validate(&self, config: &FieldConfig) -> Result<usize> {
        let rows = self.rows(config);
        check_len("spatial batch", self.spatial.len(), rows * config.spatial_dim())?;
        check_len("latent index", self.latent_index.len(), rows)?;
        check_len(
            "latent codes",
            self.latent_codes.len() * config.latent_dim,
            self.latents.len(),
        )?;
        if self
            .latent_index
            .iter()
            .any(|&g| g as usize >= self.latent_codes.len())
        {
            return Err(Error::shape("latent index out of range"));
        }
        if self.mode == Mode::Nerf {
            check_len("view index", self.view_index.len(), rows)?;
            let groups = self.view.len() / config.view_dim();
            check_len("view batch", self.view.len(), groups * config.view_dim())?;
            if self.view_index.iter().any(|&g| g as usize >= groups) {
                return Err(Error::shape("view index out of range"));
            }
        }
        Ok(rows)
    }

    pub fn latent_groups(&self, config: &FieldConfig) -> Groups<'_, T> {
        Groups {
            values: &self.latents,
            dim: config.latent_dim,
            index: &self.latent_index,
        }
    }

    pub fn view_groups(&self, config: &FieldConfig) -> Groups<'_, T> {
        Groups {
            values: &self.view,
            dim: config.view_dim(),
            index: &self.view_index,
        }
    }
}

/// Exact reverse-mode gradients of `Σ cotangent · output` over the batch.
pub fn field_backward<T: Real>(
    params: &FieldParams<T>,
    batch: &FieldBatch<T>,
    cot: &FieldCotangents<T>,
) -> Result<GradientBundle<T>> {
    let cfg = &params.config;
    let rows = batch.validate(cfg)?;
    check_len("density cotangent", cot.density.len(), rows)?;
    let mut bundle = GradientBundle::zeros_like(params);
    let mut d_latents = vec![T::zero(); batch.latents.len()];
    let latents = batch.latent_groups(cfg);
    match batch.mode {
        Mode::Proposal => {
            let tape = params.proposal_forward(&batch.spatial, latents);
            params.proposal_backward(
                &tape,
                latents,
                &cot.density,
                &mut d_latents,
                Some(&mut bundle.params),
            );
        }
        Mode::Nerf => {
            check_len("color cotangent", cot.color.len(), rows * 3)?;
            check_len("normal cotangent", cot.normal.len(), rows * 3)?;
            let view = batch.view_groups(cfg);
            let tape = params.nerf_forward(&batch.spatial, latents, view);
            params.nerf_backward(
                &tape,
                latents,
                view,
                &cot.density,
                &cot.color,
                &cot.normal,
                &mut d_latents,
                Some(&mut bundle.params),
            );
        }
    }
    for (g, code) in batch.latent_codes.iter().enumerate() {
        let src = &d_latents[g * cfg.latent_dim..(g + 1) * cfg.latent_dim];
        let dst = bundle.latent_mut(*code, cfg.latent_dim);
        for (a, b) in dst.iter_mut().zip(src) {
            *a += *b;
        }
    }
    Ok(bundle)
}

/// Unit normal from the negated density gradient. `fallback` marks points
/// where the gradient vanished and `(0, 0, 1)` was returned instead.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalEstimate {
    pub normal: Vec3,
    pub fallback: bool,
}

pub const NORMAL_FALLBACK_THRESHOLD: f64 = 1e-8;

/// `-∇σ/‖∇σ‖` of the NeRF density by central differences with spacing
/// `step`, evaluated on zero-covariance encodings.
pub fn analytic_normal<T: Real>(
    params: &FieldParams<T>,
    position: &Vec3,
    latent: &[T],
    step: f64,
) -> NormalEstimate {
    analytic_normals(
        params,
        std::slice::from_ref(position),
        Groups {
            values: latent,
            dim: params.config.latent_dim,
            index: &[0],
        },
        step,
    )[0]
}

/// Batched [`analytic_normal`]; `latents.index` maps each position to a code.
pub fn analytic_normals<T: Real>(
    params: &FieldParams<T>,
    positions: &[Vec3],
    latents: Groups<'_, T>,
    step: f64,
) -> Vec<NormalEstimate> {
    assert!(step > 0.0, "analytic normal step must be positive");
    let levels = params.config.spatial_levels;
    let sd = params.config.spatial_dim();
    let n = positions.len();
    let mut spatial = vec![T::zero(); n * 6 * sd];
    let mut index = Vec::with_capacity(n * 6);
    for (i, p) in positions.iter().enumerate() {
        for axis in 0..3 {
            for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut q = *p;
                q[axis] += sign * step;
                let row = i * 6 + axis * 2 + s;
                positional_encoding(&q, levels, &mut spatial[row * sd..(row + 1) * sd]);
            }
            index.push(latents.index[i]);
            index.push(latents.index[i]);
        }
    }
    let density = params.nerf_density(
        &spatial,
        Groups {
            values: latents.values,
            dim: latents.dim,
            index: &index,
        },
    );
    density
        .chunks_exact(6)
        .map(|d| {
            let grad = Vec3::new(
                (d[0].f64() - d[1].f64()) / (2.0 * step),
                (d[2].f64() - d[3].f64()) / (2.0 * step),
                (d[4].f64() - d[5].f64()) / (2.0 * step),
            );
            let len = grad.norm();
            if len < NORMAL_FALLBACK_THRESHOLD || !len.is_finite() {
                NormalEstimate {
                    normal: Vec3::z(),
                    fallback: true,
                }
            } else {
                NormalEstimate {
                    normal: -grad / len,
                    fallback: false,
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::view_pe_vec;

    fn tiny() -> FieldConfig {
        FieldConfig {
            spatial_levels: 3,
            view_levels: 2,
            latent_dim: 4,
            proposal_width: 8,
            proposal_depth: 2,
            nerf_width: 8,
            nerf_depth: 2,
            bottleneck_dim: 6,
            view_width: 8,
            density_bias: -1.0,
        }
    }

    fn encode(p: [f64; 3], levels: usize) -> Vec<f64> {
        let mut out = vec![0.0; crate::encoding::spatial_dim(levels)];
        positional_encoding(&Vec3::from(p), levels, &mut out);
        out
    }

    #[test]
    fn parameter_count_matches_the_layout() {
        for cfg in [tiny(), FieldConfig::default()] {
            let layout = Layout::new(&cfg);
            assert_eq!(layout.total, cfg.parameter_count());
            assert_eq!(layout.tensors.iter().map(|t| t.len()).sum::<usize>(), layout.total);
        }
    }

    #[test]
    fn full_size_parameter_count() {
        // proposal 740_609, nerf trunk 11_617_281, bottleneck 262_400,
        // view layer 36_352, rgb head 387, normal head 3_075
        assert_eq!(FieldConfig::default().parameter_count(), 12_660_104);
        // with 1450 codes of width 512
        assert_eq!(FieldConfig::default().parameter_count() + 1450 * 512, 13_402_504);
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        let a = FieldParams::<f64>::init(&tiny(), 3).unwrap();
        assert_eq!(a, FieldParams::<f64>::init(&tiny(), 3).unwrap());
        assert_ne!(a.values, FieldParams::<f64>::init(&tiny(), 4).unwrap().values);
    }

    #[test]
    fn zero_weights_give_the_bias_density_and_grey() {
        let cfg = tiny();
        let p = FieldParams::<f64>::init(&cfg, 0).unwrap();
        let mut flat = FieldParams::<f64>::zeros(&cfg).unwrap();
        for density in [p.layout.proposal.density, p.layout.nerf.density] {
            flat.tensor_mut(density.bias)[0] = cfg.density_bias;
        }
        let view = view_pe_vec::<f64>(&Vec3::z(), cfg.view_levels).unwrap();
        let out = field_eval(&flat, &encode([0.2, -0.4, 0.1], 3), &[0.3; 4], Some(&view), Mode::Nerf).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((out.density - expected).abs() < 1e-15);
        assert_eq!(out.color, Some([0.5; 3]));
        let prop = field_eval(&flat, &encode([0.0; 3], 3), &[0.0; 4], None, Mode::Proposal).unwrap();
        assert!((prop.density - expected).abs() < 1e-15);
    }

    #[test]
    fn density_ignores_the_view_direction() {
        let cfg = tiny();
        let p = FieldParams::<f64>::init(&cfg, 1).unwrap();
        let x = encode([0.3, 0.1, -0.2], 3);
        let latent = [0.5, -0.2, 0.1, 0.9];
        let a = view_pe_vec::<f64>(&Vec3::z(), 2).unwrap();
        let b = view_pe_vec::<f64>(&Vec3::new(0.6, 0.0, 0.8), 2).unwrap();
        let oa = field_eval(&p, &x, &latent, Some(&a), Mode::Nerf).unwrap();
        let ob = field_eval(&p, &x, &latent, Some(&b), Mode::Nerf).unwrap();
        assert_eq!(oa.density, ob.density);
        assert_eq!(oa.predicted_normal, ob.predicted_normal);
        assert_ne!(oa.color, ob.color);
    }

    #[test]
    fn latent_conditioning_is_live() {
        let cfg = tiny();
        let p = FieldParams::<f64>::init(&cfg, 2).unwrap();
        let x = encode([0.1, 0.2, 0.3], 3);
        let view = view_pe_vec::<f64>(&Vec3::z(), 2).unwrap();
        let zero = field_eval(&p, &x, &[0.0; 4], Some(&view), Mode::Nerf).unwrap();
        let other = field_eval(&p, &x, &[0.7, -0.3, 0.2, 0.5], Some(&view), Mode::Nerf).unwrap();
        assert_ne!(zero.density, other.density);
        assert_ne!(zero.color, other.color);
        let pz = field_eval(&p, &x, &[0.0; 4], None, Mode::Proposal).unwrap();
        let po = field_eval(&p, &x, &[0.7, -0.3, 0.2, 0.5], None, Mode::Proposal).unwrap();
        assert_ne!(pz.density, po.density);
    }

    #[test]
    fn wrong_input_lengths_are_rejected() {
        let p = FieldParams::<f64>::init(&tiny(), 0).unwrap();
        let x = encode([0.0; 3], 3);
        assert!(field_eval(&p, &x[1..], &[0.0; 4], None, Mode::Proposal).is_err());
        assert!(field_eval(&p, &x, &[0.0; 3], None, Mode::Proposal).is_err());
        assert!(field_eval(&p, &x, &[0.0; 4], None, Mode::Nerf).is_err());
    }

    #[test]
    fn constant_field_normal_falls_back() {
        let cfg = tiny();
        let mut p = FieldParams::<f64>::zeros(&cfg).unwrap();
        let bias = p.layout.nerf.density.bias;
        p.tensor_mut(bias)[0] = 0.5;
        let n = analytic_normal(&p, &Vec3::new(0.1, 0.2, 0.3), &[0.0; 4], 1e-3);
        assert!(n.fallback);
        assert_eq!(n.normal, Vec3::z());
    }

    /// Density rising along one world axis: the normal points down that axis.
    #[test]
    fn linear_ramp_normal_points_against_the_gradient() {
        let cfg = FieldConfig {
            spatial_levels: 1,
            nerf_depth: 1,
            ..tiny()
        };
        let mut p = FieldParams::<f64>::zeros(&cfg).unwrap();
        let layer = p.layout.nerf.layers[0];
        // Feature 0 is sin(x); unit 0 computes sin(x) + 2.
        p.tensor_mut(layer.weight)[0] = 1.0;
        p.tensor_mut(layer.bias)[0] = 2.0;
        let head = p.layout.nerf.density;
        p.tensor_mut(head.weight)[0] = 1.0;
        let n = analytic_normal(&p, &Vec3::new(0.1, -0.3, 0.2), &[0.0; 4], 1e-3);
        assert!(!n.fallback);
        assert!((n.normal - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn analytic_normals_match_an_independent_difference_quotient() {
        let cfg = tiny();
        let p = FieldParams::<f64>::init(&cfg, 5).unwrap();
        let latent = [0.2, -0.1, 0.4, 0.0];
        let x = Vec3::new(0.2, 0.1, -0.3);
        let density = |q: Vec3| {
            p.nerf_density(
                &encode([q.x, q.y, q.z], 3),
                Groups {
                    values: &latent,
                    dim: 4,
                    index: &[0],
                },
            )[0]
        };
        let h = 1e-5;
        let g = Vec3::new(
            density(x + Vec3::x() * h) - density(x - Vec3::x() * h),
            density(x + Vec3::y() * h) - density(x - Vec3::y() * h),
            density(x + Vec3::z() * h) - density(x - Vec3::z() * h),
        ) / (2.0 * h);
        let n = analytic_normal(&p, &x, &latent, 1e-5);
        assert!((n.normal + g.normalize()).norm() < 1e-6);
    }

    /// Central differences of `Σ c·outputs` against [`field_backward`] for a
    /// spread of coordinates in every group and both latent codes.
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = tiny();
        let mut p = FieldParams::<f64>::init(&cfg, 7).unwrap();
        for (i, v) in p.values.iter_mut().enumerate() {
            if !p.layout.tensors.iter().any(|t| t.is_weight && t.range().contains(&i)) {
                *v += 0.1 * ((i as f64) * 0.37).sin();
            }
        }
        let rows = 5;
        let mut spatial = Vec::new();
        for r in 0..rows {
            spatial.extend(encode([0.1 * r as f64, -0.2 + 0.05 * r as f64, 0.3], 3));
        }
        let view = [Vec3::z(), Vec3::new(0.0, 0.6, 0.8)]
            .iter()
            .flat_map(|d| view_pe_vec::<f64>(d, 2).unwrap())
            .collect::<Vec<_>>();
        let batch = FieldBatch {
            mode: Mode::Nerf,
            spatial,
            latents: vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.0, 0.6],
            latent_codes: vec![3, 1],
            latent_index: vec![0, 1, 0, 1, 1],
            view,
            view_index: vec![0, 0, 1, 1, 0],
        };
        let cot = FieldCotangents {
            density: (0..rows).map(|i| 0.3 + 0.1 * i as f64).collect(),
            color: (0..rows * 3).map(|i| ((i as f64) * 0.7).cos()).collect(),
            normal: (0..rows * 3).map(|i| ((i as f64) * 1.3).sin()).collect(),
        };
        let objective = |p: &FieldParams<f64>, latents: &[f64]| {
            let tape = p.nerf_forward(
                &batch.spatial,
                Groups {
                    values: latents,
                    dim: 4,
                    index: &batch.latent_index,
                },
                batch.view_groups(&p.config),
            );
            let mut s = 0.0;
            for r in 0..rows {
                s += cot.density[r] * tape.trunk.density[r];
                for k in 0..3 {
                    s += cot.color[r * 3 + k] * tape.color[r * 3 + k];
                    s += cot.normal[r * 3 + k] * tape.normal[r * 3 + k];
                }
            }
            s
        };
        let grads = field_backward(&p, &batch, &cot).unwrap();
        let h = 1e-6;
        let check = |analytic: f64, numeric: f64, what: &str| {
            let scale = analytic.abs().max(numeric.abs()).max(1e-3);
            assert!((analytic - numeric).abs() / scale < 1e-4, "{what}: {analytic} vs {numeric}");
        };
        for group in ParamGroup::ALL {
            if matches!(group, ParamGroup::ProposalTrunk | ParamGroup::ProposalDensity) {
                continue;
            }
            for range in p.layout.group_ranges(group).collect::<Vec<_>>() {
                for i in range.step_by(3) {
                    let orig = p.values[i];
                    p.values[i] = orig + h;
                    let up = objective(&p, &batch.latents);
                    p.values[i] = orig - h;
                    let down = objective(&p, &batch.latents);
                    p.values[i] = orig;
                    check(grads.params[i], (up - down) / (2.0 * h), &format!("{group:?}[{i}]"));
                }
            }
        }
        for (g, code) in batch.latent_codes.iter().enumerate() {
            for j in 0..4 {
                let mut l = batch.latents.clone();
                l[g * 4 + j] += h;
                let up = objective(&p, &l);
                l[g * 4 + j] -= 2.0 * h;
                let down = objective(&p, &l);
                check(grads.latents[code][j], (up - down) / (2.0 * h), &format!("latent {code}"));
            }
        }
    }
}
