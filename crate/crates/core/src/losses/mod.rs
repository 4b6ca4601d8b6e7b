//! Objective terms for prior training, inversion and finetuning, each with
//! its gradient.

mod perceptual;

pub use perceptual::{patch_perceptual, PatchPair, PerceptualMetric, PyramidProxy};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::real::Real;

/// Per-term values of one objective evaluation and the multipliers used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub prop: f64,
    pub normal: f64,
    pub view_reg: f64,
    pub perceptual: f64,
    pub lambda_prop: f64,
    pub lambda_normal: f64,
    pub lambda_v: f64,
    pub lambda_perceptual: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn with_lambdas(prop: f64, normal: f64, v: f64, perceptual: f64) -> Self {
        LossBreakdown {
            lambda_prop: prop,
            lambda_normal: normal,
            lambda_v: v,
            lambda_perceptual: perceptual,
            ..Default::default()
        }
    }

    pub fn weighted_total(&self) -> f64 {
        self.recon
            + self.lambda_prop * self.prop
            + self.lambda_normal * self.normal
            + self.lambda_v * self.view_reg
            + self.lambda_perceptual * self.perceptual
    }

    /// Recomputes `total` from the terms.
    pub fn finish(mut self) -> Self {
        self.total = self.weighted_total();
        self
    }

    /// Adds the terms of `other` (same multipliers assumed).
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.recon += other.recon;
        self.prop += other.prop;
        self.normal += other.normal;
        self.view_reg += other.view_reg;
        self.perceptual += other.perceptual;
    }

    pub const TSV_HEADER: &'static str = "recon\tprop\tnormal\tview_reg\tperceptual\ttotal";

    pub fn tsv(&self) -> String {
        format!(
            "{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}",
            self.recon, self.prop, self.normal, self.view_reg, self.perceptual, self.total
        )
    }
}

/// Mean absolute error over all colour components.
pub fn recon_loss<T: Real>(predicted: &[T], reference: &[T]) -> Result<f64> {
    if predicted.len() != reference.len() {
        return Err(Error::shape(format!(
            "recon: {} predicted vs {} reference values",
            predicted.len(),
            reference.len()
        )));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = predicted
        .iter()
        .zip(reference)
        .map(|(a, b)| (a.f64() - b.f64()).abs())
        .sum();
    Ok(sum / predicted.len() as f64)
}

/// [`recon_loss`] and its gradient scaled by `scale`, added into `d_pred`.
pub fn recon_loss_grad<T: Real>(
    predicted: &[T],
    reference: &[T],
    scale: f64,
    d_pred: &mut [T],
) -> Result<f64> {
    let loss = recon_loss(predicted, reference)?;
    let k = scale / predicted.len().max(1) as f64;
    for ((d, a), b) in d_pred.iter_mut().zip(predicted).zip(reference) {
        let diff = a.f64() - b.f64();
        if diff != 0.0 {
            *d += T::of(k * diff.signum());
        }
    }
    Ok(loss)
}

/// Total proposal weight over proposal intervals overlapping each NeRF
/// interval.
fn interlevel_bounds<T: Real>(nerf_t: &[f64], prop_t: &[f64], prop_w: &[T]) -> Vec<(usize, usize, f64)> {
    let mut prefix = Vec::with_capacity(prop_w.len() + 1);
    prefix.push(0.0);
    for w in prop_w {
        prefix.push(prefix.last().unwrap() + w.f64());
    }
    let m = prop_w.len();
    nerf_t
        .windows(2)
        .map(|iv| {
            let (c, d) = (iv[0], iv[1]);
            // First proposal interval ending after c, one past the last starting before d.
            let lo = prop_t[1..].partition_point(|&b| b <= c);
            let hi = prop_t[..m].partition_point(|&a| a < d);
            if lo >= hi {
                (lo, lo, 0.0)
            } else {
                (lo, hi, prefix[hi] - prefix[lo])
            }
        })
        .collect()
}

/// `Σ_i max(0, w_i − bound_i)² / w_i` for one ray, with the NeRF weights
/// treated as constants. Intervals with `w_i = 0` contribute nothing.
pub fn interlevel_loss<T: Real>(
    nerf_partition: &[f64],
    nerf_weights: &[T],
    prop_partition: &[f64],
    prop_weights: &[T],
) -> f64 {
    interlevel_loss_grad(nerf_partition, nerf_weights, prop_partition, prop_weights, 0.0, None)
}

/// [`interlevel_loss`] with its gradient w.r.t. the proposal weights,
/// scaled by `scale` and added into `d_prop`.
pub fn interlevel_loss_grad<T: Real>(
    nerf_partition: &[f64],
    nerf_weights: &[T],
    prop_partition: &[f64],
    prop_weights: &[T],
    scale: f64,
    d_prop: Option<&mut [T]>,
) -> f64 {
    assert_eq!(nerf_partition.len(), nerf_weights.len() + 1, "nerf histogram shape");
    assert_eq!(prop_partition.len(), prop_weights.len() + 1, "proposal histogram shape");
    let bounds = interlevel_bounds(nerf_partition, prop_partition, prop_weights);
    let mut loss = 0.0;
    let mut diff = vec![0.0; prop_weights.len() + 1];
    for (w, &(lo, hi, bound)) in nerf_weights.iter().zip(&bounds) {
        let w = w.f64();
        if w <= 0.0 {
            continue;
        }
        let excess = w - bound;
        if excess > 0.0 {
            loss += excess * excess / w;
            let g = -2.0 * excess / w;
            diff[lo] += g;
            diff[hi] -= g;
        }
    }
    if let Some(d) = d_prop {
        let mut run = 0.0;
        for (j, dj) in d.iter_mut().enumerate() {
            run += diff[j];
            if run != 0.0 {
                *dj += T::of(scale * run);
            }
        }
    }
    loss
}

/// `Σ_i w_i ‖n_pred,i − n_an,i‖²` for one ray.
pub fn normal_consistency_loss<T: Real>(
    weights: &[T],
    predicted: &[[T; 3]],
    analytic: &[[T; 3]],
) -> Result<f64> {
    if predicted.len() != weights.len() || analytic.len() != weights.len() {
        return Err(Error::shape("normal consistency: lengths differ"));
    }
    Ok(weights
        .iter()
        .zip(predicted.iter().zip(analytic))
        .map(|(w, (p, a))| w.f64() * sq_dist(p, a))
        .sum())
}

fn sq_dist<T: Real>(p: &[T; 3], a: &[T; 3]) -> f64 {
    (0..3).map(|k| (p[k].f64() - a[k].f64()).powi(2)).sum()
}

/// Gradient of `scale ·` [`normal_consistency_loss`] w.r.t. weights and
/// predicted normals (flattened `n × 3`); the analytic side is constant.
/// Samples with `valid[i] == false` are skipped.
pub fn normal_consistency_grad<T: Real>(
    weights: &[T],
    predicted: &[[T; 3]],
    analytic: &[[T; 3]],
    valid: Option<&[bool]>,
    scale: f64,
    d_weights: &mut [T],
    d_predicted: &mut [T],
) -> f64 {
    let mut loss = 0.0;
    for i in 0..weights.len() {
        if valid.is_some_and(|v| !v[i]) {
            continue;
        }
        let w = weights[i].f64();
        let (p, a) = (&predicted[i], &analytic[i]);
        let sq = sq_dist(p, a);
        loss += w * sq;
        d_weights[i] += T::of(scale * sq);
        for k in 0..3 {
            d_predicted[i * 3 + k] += T::of(scale * 2.0 * w * (p[k].f64() - a[k].f64()));
        }
    }
    loss
}

/// Sum of squares of the view-branch weights (view layer and colour head,
/// biases excluded).
pub fn view_branch_reg<T: Real>(params: &FieldParams<T>) -> f64 {
    params
        .layout
        .view_branch_ranges()
        .flat_map(|r| params.values[r].iter())
        .map(|v| v.f64() * v.f64())
        .sum()
}

/// Adds `scale · ∂ view_branch_reg / ∂θ` into `grads`.
pub fn view_branch_reg_grad<T: Real>(params: &FieldParams<T>, scale: f64, grads: &mut [T]) -> f64 {
    let mut loss = 0.0;
    for r in params.layout.view_branch_ranges() {
        for i in r {
            let v = params.values[i].f64();
            loss += v * v;
            grads[i] += T::of(scale * 2.0 * v);
        }
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldConfig, ParamGroup};

    #[test]
    fn recon_reference_values() {
        assert_eq!(recon_loss(&[0.3, 0.2, 0.9], &[0.3, 0.2, 0.9]).unwrap(), 0.0);
        assert_eq!(recon_loss(&[0.0; 6], &[1.0; 6]).unwrap(), 1.0);
        let v = recon_loss(&[0.5, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((v - 0.5 / 3.0).abs() < 1e-15);
        assert!(recon_loss(&[0.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn interlevel_identical_histograms_vanish() {
        let t = [0.0, 0.5, 1.0, 1.5];
        let w = [0.2, 0.5, 0.1];
        assert!(interlevel_loss(&t, &w, &t, &w) < 1e-20);
    }

    #[test]
    fn interlevel_over_covering_proposal_vanishes() {
        let nerf_t = [0.0, 0.25, 0.5, 0.75, 1.0];
        let nerf_w = [0.1, 0.3, 0.2, 0.1];
        let prop_t = [0.0, 0.5, 1.0];
        let prop_w = [0.4, 0.3];
        assert_eq!(interlevel_loss(&nerf_t, &nerf_w, &prop_t, &prop_w), 0.0);
    }

    #[test]
    fn interlevel_hand_value() {
        let v = interlevel_loss(&[1.0, 2.0], &[0.5], &[0.0, 1.5, 3.0], &[0.3, 0.0]);
        assert!((v - 0.08).abs() < 1e-15);
    }

    #[test]
    fn interlevel_touching_intervals_do_not_overlap() {
        let v = interlevel_loss(&[1.0, 2.0], &[0.5], &[0.0, 1.0, 2.0, 3.0], &[0.9, 0.3, 0.9]);
        assert!((v - 0.08).abs() < 1e-15);
    }

    #[test]
    fn normal_consistency_reference_values() {
        let e1 = [1.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0];
        assert_eq!(normal_consistency_loss(&[0.4], &[e1], &[e1]).unwrap(), 0.0);
        assert_eq!(normal_consistency_loss(&[0.0, 0.0], &[e1, e2], &[e2, e1]).unwrap(), 0.0);
        assert!((normal_consistency_loss(&[0.5], &[e1], &[e2]).unwrap() - 1.0).abs() < 1e-15);
    }

    fn tiny() -> FieldParams<f64> {
        let cfg = FieldConfig {
            spatial_levels: 2,
            view_levels: 1,
            latent_dim: 2,
            proposal_width: 4,
            proposal_depth: 2,
            nerf_width: 4,
            nerf_depth: 2,
            bottleneck_dim: 3,
            view_width: 4,
            density_bias: -1.0,
        };
        FieldParams::zeros(&cfg).unwrap()
    }

    #[test]
    fn view_reg_covers_exactly_the_view_weights() {
        let mut p = tiny();
        assert_eq!(view_branch_reg(&p), 0.0);
        let first = p.layout.view_branch_ranges().next().unwrap().start;
        p.values[first] = 2.0;
        assert_eq!(view_branch_reg(&p), 4.0);
        let trunk = p.layout.group_ranges(ParamGroup::NerfTrunk).next().unwrap().start;
        p.values[trunk] = 3.0;
        assert_eq!(view_branch_reg(&p), 4.0);
        for t in &p.layout.tensors {
            if t.group == ParamGroup::RgbHead && !t.is_weight {
                p.values[t.offset] = 5.0;
            }
        }
        assert_eq!(view_branch_reg(&p), 4.0);
    }

    #[test]
    fn breakdown_total_recomposes() {
        let b = LossBreakdown {
            recon: 0.1,
            prop: 0.2,
            normal: 0.3,
            view_reg: 0.4,
            perceptual: 0.5,
            ..LossBreakdown::with_lambdas(1.0, 1e-3, 1e-4, 0.2)
        }
        .finish();
        assert_eq!(b.total, 0.1 + 0.2 + 1e-3 * 0.3 + 1e-4 * 0.4 + 0.2 * 0.5);
    }

    #[test]
    fn interlevel_gradient_matches_finite_differences() {
        let nerf_t = [0.0, 0.3, 0.45, 0.9, 1.2, 2.0];
        let nerf_w = [0.1, 0.5, 0.2, 0.15, 0.05];
        let prop_t = [0.0, 0.4, 0.7, 1.0, 1.5, 2.0];
        let mut prop_w = vec![0.05, 0.2, 0.1, 0.3, 0.02];
        let mut grad = vec![0.0; prop_w.len()];
        interlevel_loss_grad(&nerf_t, &nerf_w, &prop_t, &prop_w, 1.0, Some(&mut grad));
        let h = 1e-7;
        for j in 0..prop_w.len() {
            let orig = prop_w[j];
            prop_w[j] = orig + h;
            let up = interlevel_loss(&nerf_t, &nerf_w, &prop_t, &prop_w);
            prop_w[j] = orig - h;
            let down = interlevel_loss(&nerf_t, &nerf_w, &prop_t, &prop_w);
            prop_w[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!((grad[j] - numeric).abs() <= 1e-6 * numeric.abs().max(1.0), "{j}: {} vs {numeric}", grad[j]);
        }
        assert!(grad.iter().any(|g| *g != 0.0));
    }
}

