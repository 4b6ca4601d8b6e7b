use super::sampling::IntervalPartition;
use crate::error::{Error, Result};
use crate::real::Real;

/// Composited quantities of one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    /// `w_i = T_i · α_i`.
    pub weights: Vec<f64>,
    pub accumulated_opacity: f64,
    pub expected_depth: f64,
    /// Weighted sum of predicted normals (zero when none were supplied).
    pub normal_map_value: [f64; 3],
    /// Per-sample analytic normal targets, when requested.
    pub analytic_normals: Option<Vec<[f64; 3]>>,
}

pub const DEPTH_EPS: f64 = 1e-10;

/// Front-to-back weights. `trans_next[i]` is the transmittance after
/// sample `i`, `T_{i+1} = exp(-Σ_{j≤i} σ_j δ_j)`.
pub fn compositing_weights<T: Real>(
    densities: &[T],
    boundaries: &[f64],
    weights: &mut [T],
    trans_next: &mut [T],
) {
    let n = densities.len();
    debug_assert_eq!(boundaries.len(), n + 1);
    let mut optical = T::zero();
    let mut trans = T::one();
    for i in 0..n {
        let delta = T::of(boundaries[i + 1] - boundaries[i]);
        optical += densities[i] * delta;
        let next = (-optical).exp();
        weights[i] = trans - next;
        trans_next[i] = next;
        trans = next;
    }
}

/// Given `g_i = ∂L/∂w_i`, returns `∂L/∂σ_k = δ_k (g_k T_{k+1} − Σ_{i>k} g_i w_i)`.
pub fn compositing_backward<T: Real>(
    weights: &[T],
    trans_next: &[T],
    boundaries: &[f64],
    g: &[T],
    d_density: &mut [T],
) {
    let n = weights.len();
    let mut suffix = T::zero();
    for k in (0..n).rev() {
        let delta = T::of(boundaries[k + 1] - boundaries[k]);
        d_density[k] = delta * (g[k] * trans_next[k] - suffix);
        suffix += g[k] * weights[k];
    }
}

/// Alpha-composites per-interval densities and colors over `partition`
/// with a black background.
pub fn composite(
    densities: &[f64],
    colors: &[[f64; 3]],
    partition: &IntervalPartition,
) -> Result<RenderOutput> {
    composite_with_normals(densities, colors, None, partition)
}

pub fn composite_with_normals(
    densities: &[f64],
    colors: &[[f64; 3]],
    normals: Option<&[[f64; 3]]>,
    partition: &IntervalPartition,
) -> Result<RenderOutput> {
    let n = densities.len();
    if colors.len() != n || partition.len() != n || normals.is_some_and(|v| v.len() != n) {
        return Err(Error::shape(format!(
            "composite: {} densities, {} colors, {} intervals",
            n,
            colors.len(),
            partition.len()
        )));
    }
    if let Some((index, &value)) = densities
        .iter()
        .enumerate()
        .find(|(_, d)| !(**d >= 0.0))
    {
        return Err(Error::NegativeDensity { index, value });
    }
    let mut weights = vec![0.0; n];
    let mut trans_next = vec![0.0; n];
    compositing_weights(densities, &partition.boundaries, &mut weights, &mut trans_next);
    Ok(summarize(&weights, colors, normals, partition))
}

pub(crate) fn summarize(
    weights: &[f64],
    colors: &[[f64; 3]],
    normals: Option<&[[f64; 3]]>,
    partition: &IntervalPartition,
) -> RenderOutput {
    let mut color = [0.0; 3];
    let mut normal = [0.0; 3];
    let mut opacity = 0.0;
    let mut depth = 0.0;
    for (i, (w, t)) in weights.iter().zip(partition.midpoints()).enumerate() {
        for k in 0..3 {
            color[k] += w * colors[i][k];
            if let Some(ns) = normals {
                normal[k] += w * ns[i][k];
            }
        }
        opacity += w;
        depth += w * t;
    }
    RenderOutput {
        color,
        weights: weights.to_vec(),
        accumulated_opacity: opacity,
        expected_depth: depth / opacity.max(DEPTH_EPS),
        normal_map_value: normal,
        analytic_normals: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn partition(deltas: &[f64]) -> IntervalPartition {
        let mut b = vec![1.0];
        for d in deltas {
            b.push(b.last().unwrap() + d);
        }
        IntervalPartition { boundaries: b }
    }

    #[test]
    fn empty_space_is_black_and_transparent() {
        let out = composite(&[0.0; 4], &[[1.0, 1.0, 1.0]; 4], &partition(&[0.5; 4])).unwrap();
        assert_eq!(out.color, [0.0; 3]);
        assert_eq!(out.accumulated_opacity, 0.0);
    }

    #[test]
    fn opaque_first_sample_takes_everything() {
        let out = composite(
            &[100.0, 3.0],
            &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            &partition(&[0.5, 0.5]),
        )
        .unwrap();
        assert!((out.color[0] - 1.0).abs() < 1e-9);
        assert!(out.color[1].abs() < 1e-9);
        assert!((out.accumulated_opacity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn two_samples_match_hand_evaluation() {
        let out = composite(
            &[1.0, 2.0],
            &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            &partition(&[0.5, 0.5]),
        )
        .unwrap();
        let a1 = 1.0 - (-0.5f64).exp();
        let a2 = 1.0 - (-1.0f64).exp();
        assert!((out.color[0] - a1).abs() < 1e-12);
        assert!((out.color[1] - (1.0 - a1) * a2).abs() < 1e-12);
        assert_eq!(out.color[2], 0.0);
    }

    #[test]
    fn negative_density_is_an_error() {
        let err = composite(&[0.5, -1.0], &[[0.0; 3]; 2], &partition(&[1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::NegativeDensity { index: 1, .. }));
    }

    #[test]
    fn opaque_front_sample_occludes_the_rest() {
        let out = composite(&[1e4, 1.0, 5.0], &[[0.5; 3]; 3], &partition(&[0.1, 0.1, 0.1])).unwrap();
        assert!(out.weights[1] < 1e-12 && out.weights[2] < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let sigma = [0.7, 2.1, 0.0, 1.3];
        let b = partition(&[0.3, 0.2, 0.4, 0.25]).boundaries;
        let g = [0.9, -0.4, 1.7, 0.3];
        let loss = |s: &[f64]| {
            let mut w = [0.0; 4];
            let mut tn = [0.0; 4];
            compositing_weights(s, &b, &mut w, &mut tn);
            w.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut w = [0.0; 4];
        let mut tn = [0.0; 4];
        compositing_weights(&sigma, &b, &mut w, &mut tn);
        let mut ds = [0.0; 4];
        compositing_backward(&w, &tn, &b, &g, &mut ds);
        for k in 0..4 {
            let h = 1e-6;
            let mut p = sigma;
            p[k] += h;
            let mut m = sigma;
            m[k] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - ds[k]).abs() <= 1e-8 * fd.abs().max(1.0), "k={k}: {fd} vs {}", ds[k]);
        }
    }
}
