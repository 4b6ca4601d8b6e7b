//! Integrated positional encoding of frustum Gaussians and plain positional
//! encoding of view directions.
//!
//! Feature layout for `levels = L`: the first `3L` entries are sines ordered
//! level-major (`l * 3 + axis`), the next `3L` are the matching cosines.
//! View features append the raw direction after that.

use crate::error::{Error, Result};
use crate::geometry::{FrustumGaussian, Vec3};
use crate::real::Real;

pub fn spatial_dim(levels: usize) -> usize {
    6 * levels
}

pub fn view_dim(levels: usize) -> usize {
    6 * levels + 3
}

/// Expected sinusoids of `N(mean, diag_cov)`: `sin(2^l μ)·exp(-½ 4^l σ²)` and
/// the cosine counterpart, per axis.
pub fn integrated_pe<T: Real>(region: &FrustumGaussian, levels: usize, out: &mut [T]) {
    assert_eq!(out.len(), spatial_dim(levels), "integrated_pe: output length");
    let (sin_part, cos_part) = out.split_at_mut(3 * levels);
    for axis in 0..3 {
        let mu = region.mean[axis];
        let var = region.diag_cov[axis];
        let mut scale = 1.0;
        for l in 0..levels {
            let damp = (-0.5 * scale * scale * var).exp();
            let (s, c) = (scale * mu).sin_cos();
            sin_part[l * 3 + axis] = T::of(s * damp);
            cos_part[l * 3 + axis] = T::of(c * damp);
            scale *= 2.0;
        }
    }
}

pub fn integrated_pe_vec<T: Real>(region: &FrustumGaussian, levels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); spatial_dim(levels)];
    integrated_pe(region, levels, &mut out);
    out
}

/// Plain positional encoding of a point: the zero-covariance case.
pub fn positional_encoding<T: Real>(point: &Vec3, levels: usize, out: &mut [T]) {
    integrated_pe(
        &FrustumGaussian {
            mean: *point,
            diag_cov: Vec3::zeros(),
        },
        levels,
        out,
    );
}

/// Sin/cos of `2^l d` per axis followed by the raw direction.
pub fn view_pe<T: Real>(direction: &Vec3, levels: usize, out: &mut [T]) -> Result<()> {
    assert_eq!(out.len(), view_dim(levels), "view_pe: output length");
    let norm = direction.norm();
    if !((norm - 1.0).abs() <= 1e-6) {
        return Err(Error::NotUnit(norm));
    }
    positional_encoding(direction, levels, &mut out[..6 * levels]);
    for axis in 0..3 {
        out[6 * levels + axis] = T::of(direction[axis]);
    }
    Ok(())
}

pub fn view_pe_vec<T: Real>(direction: &Vec3, levels: usize) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); view_dim(levels)];
    view_pe(direction, levels, &mut out)?;
    Ok(out)
}
