//! Batched forward and reverse passes of the proposal and NeRF MLPs.
//!
//! Rows are samples. Inputs that are constant across many rows (the latent
//! code of an identity, the view encoding of a ray) are passed once per
//! group; their contribution `g·Wg` is computed per group and broadcast, which
//! is exactly equivalent to concatenating them onto every row.

use super::params::{FieldParams, LinearLayout, MlpLayout};
use crate::real::{gemm, sigmoid, softplus, Op, Real};

/// Per-group conditioning input: `values` is `groups × dim`, `index[row]`
/// picks the group of each row.
#[derive(Clone, Copy, Debug)]
pub struct Groups<'a, T> {
    pub values: &'a [T],
    pub dim: usize,
    pub index: &'a [u32],
}

impl<'a, T> Groups<'a, T> {
    pub fn count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.values.len() / self.dim
        }
    }
}

/// Activations retained for the reverse pass of one trunk.
#[derive(Clone, Debug)]
pub struct TrunkTape<T> {
    pub rows: usize,
    pub spatial: Vec<T>,
    pub acts: Vec<Vec<T>>,
    pub density_raw: Vec<T>,
    pub density: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct NerfTape<T> {
    pub trunk: TrunkTape<T>,
    pub bottleneck: Vec<T>,
    pub view_act: Vec<T>,
    pub color: Vec<T>,
    pub normal_raw: Vec<T>,
    pub normal: Vec<T>,
}

const NORMAL_EPS: f64 = 1e-8;

struct LinearRef<'a, T> {
    wx: &'a [T],
    wg: &'a [T],
    b: &'a [T],
    lin: LinearLayout,
}

fn linear_ref<'a, T: Real>(params: &'a FieldParams<T>, lin: LinearLayout) -> LinearRef<'a, T> {
    let w = params.tensor(lin.weight);
    let split = lin.x_dim * lin.out_dim;
    LinearRef {
        wx: &w[..split],
        wg: &w[split..],
        b: params.tensor(lin.bias),
        lin,
    }
}

/// `out = x·Wx + b (+ g[index]·Wg)`, `out` is `rows × out_dim`.
fn linear_forward<T: Real>(
    layer: &LinearRef<'_, T>,
    x: &[T],
    rows: usize,
    groups: Option<Groups<'_, T>>,
    out: &mut Vec<T>,
) {
    let LinearLayout {
        x_dim,
        g_dim,
        out_dim,
        ..
    } = layer.lin;
    out.clear();
    out.resize(rows * out_dim, T::zero());
    gemm(rows, x_dim, out_dim, T::one(), x, Op::N, layer.wx, Op::N, T::zero(), out);
    let group_bias = groups.map(|g| {
        debug_assert_eq!(g.dim, g_dim);
        let n = g.count();
        let mut gb = vec![T::zero(); n * out_dim];
        gemm(n, g_dim, out_dim, T::one(), g.values, Op::N, layer.wg, Op::N, T::zero(), &mut gb);
        (gb, g.index)
    });
    for (r, row) in out.chunks_exact_mut(out_dim).enumerate() {
        for (v, b) in row.iter_mut().zip(layer.b) {
            *v += *b;
        }
        if let Some((gb, index)) = &group_bias {
            let g = index[r] as usize;
            for (v, b) in row.iter_mut().zip(&gb[g * out_dim..(g + 1) * out_dim]) {
                *v += *b;
            }
        }
    }
}

/// Reverse pass of [`linear_forward`]. Accumulates parameter gradients when
/// `grads` is given, group gradients into `d_groups` (`groups × g_dim`), and
/// returns the input cotangent when `want_dx`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Real>(
    layer: &LinearRef<'_, T>,
    x: &[T],
    rows: usize,
    d_out: &[T],
    groups: Option<Groups<'_, T>>,
    d_groups: Option<&mut [T]>,
    grads: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let LinearLayout {
        weight,
        bias,
        x_dim,
        g_dim,
        out_dim,
    } = layer.lin;
    let _ = (weight, bias);
    let group_sums = groups.map(|g| {
        let mut sums = vec![T::zero(); g.count() * out_dim];
        for (r, row) in d_out.chunks_exact(out_dim).enumerate() {
            let k = g.index[r] as usize;
            for (s, d) in sums[k * out_dim..(k + 1) * out_dim].iter_mut().zip(row) {
                *s += *d;
            }
        }
        sums
    });
    if let Some(g_params) = grads {
        let (gw, gb) = g_params.split_at_mut((x_dim + g_dim) * out_dim);
        let (gwx, gwg) = gw.split_at_mut(x_dim * out_dim);
        gemm(x_dim, rows, out_dim, T::one(), x, Op::T, d_out, Op::N, T::one(), gwx);
        for row in d_out.chunks_exact(out_dim) {
            for (b, d) in gb.iter_mut().zip(row) {
                *b += *d;
            }
        }
        if let (Some(g), Some(sums)) = (groups, &group_sums) {
            gemm(g_dim, g.count(), out_dim, T::one(), g.values, Op::T, sums, Op::N, T::one(), gwg);
        }
    }
    if let (Some(g), Some(sums), Some(dg)) = (groups, &group_sums, d_groups) {
        gemm(g.count(), out_dim, g_dim, T::one(), sums, Op::N, layer.wg, Op::T, T::one(), dg);
    }
    want_dx.then(|| {
        let mut dx = vec![T::zero(); rows * x_dim];
        gemm(rows, out_dim, x_dim, T::one(), d_out, Op::N, layer.wx, Op::T, T::zero(), &mut dx);
        dx
    })
}

/// Gradient slice of the weight+bias pair of `lin` inside a flat gradient
/// buffer. Weight and bias tensors are adjacent in the layout.
fn grad_slice<'g, T: Real>(
    params: &FieldParams<T>,
    grads: &'g mut [T],
    lin: LinearLayout,
) -> &'g mut [T] {
    let start = params.layout.tensors[lin.weight].offset;
    let end = params.layout.tensors[lin.bias].range().end;
    &mut grads[start..end]
}

fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

fn trunk_forward<T: Real>(
    params: &FieldParams<T>,
    mlp: &MlpLayout,
    spatial: &[T],
    rows: usize,
    latents: Groups<'_, T>,
) -> TrunkTape<T> {
    let mut acts: Vec<Vec<T>> = Vec::with_capacity(mlp.layers.len());
    for (i, lin) in mlp.layers.iter().enumerate() {
        let layer = linear_ref(params, *lin);
        let mut out = Vec::new();
        let x = if i == 0 { spatial } else { &acts[i - 1] };
        linear_forward(&layer, x, rows, Some(latents), &mut out);
        relu_in_place(&mut out);
        acts.push(out);
    }
    let mut density_raw = Vec::new();
    let head = linear_ref(params, mlp.density);
    linear_forward(&head, acts.last().expect("depth >= 1"), rows, None, &mut density_raw);
    let density = density_raw.iter().map(|&r| softplus(r)).collect();
    TrunkTape {
        rows,
        spatial: spatial.to_vec(),
        acts,
        density_raw,
        density,
    }
}

/// Density only, without retaining activations.
fn trunk_density<T: Real>(
    params: &FieldParams<T>,
    mlp: &MlpLayout,
    spatial: &[T],
    rows: usize,
    latents: Groups<'_, T>,
) -> Vec<T> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, lin) in mlp.layers.iter().enumerate() {
        let layer = linear_ref(params, *lin);
        let x: &[T] = if i == 0 { spatial } else { &a };
        linear_forward(&layer, x, rows, Some(latents), &mut b);
        relu_in_place(&mut b);
        std::mem::swap(&mut a, &mut b);
    }
    let head = linear_ref(params, mlp.density);
    linear_forward(&head, &a, rows, None, &mut b);
    b.iter().map(|&r| softplus(r)).collect()
}

/// Reverse pass through the trunk given the cotangent of its last activation.
#[allow(clippy::too_many_arguments)]
fn trunk_backward<T: Real>(
    params: &FieldParams<T>,
    mlp: &MlpLayout,
    tape: &TrunkTape<T>,
    latents: Groups<'_, T>,
    mut d_h: Vec<T>,
    d_latents: &mut [T],
    mut grads: Option<&mut [T]>,
) {
    let rows = tape.rows;
    for (i, lin) in mlp.layers.iter().enumerate().rev() {
        let act = &tape.acts[i];
        for (d, a) in d_h.iter_mut().zip(act) {
            if *a <= T::zero() {
                *d = T::zero();
            }
        }
        let layer = linear_ref(params, *lin);
        let x = if i == 0 { &tape.spatial[..] } else { &tape.acts[i - 1][..] };
        let g = grads.as_deref_mut().map(|g| grad_slice(params, g, *lin));
        let dx = linear_backward(&layer, x, rows, &d_h, Some(latents), Some(d_latents), g, i > 0);
        if let Some(dx) = dx {
            d_h = dx;
        }
    }
}

/// Adds the density-head cotangent into `d_h`.
fn density_head_backward<T: Real>(
    params: &FieldParams<T>,
    mlp: &MlpLayout,
    tape: &TrunkTape<T>,
    d_density: &[T],
    d_h: &mut [T],
    grads: Option<&mut [T]>,
) {
    let d_raw: Vec<T> = tape
        .density_raw
        .iter()
        .zip(d_density)
        .map(|(&r, &d)| d * sigmoid(r))
        .collect();
    let head = linear_ref(params, mlp.density);
    let g = grads.map(|g| grad_slice(params, g, mlp.density));
    let last = tape.acts.last().expect("depth >= 1");
    let dx = linear_backward(&head, last, tape.rows, &d_raw, None, None, g, true)
        .expect("dx requested");
    for (a, b) in d_h.iter_mut().zip(dx) {
        *a += b;
    }
}

impl<T: Real> FieldParams<T> {
    pub fn proposal_forward(&self, spatial: &[T], latents: Groups<'_, T>) -> TrunkTape<T> {
        let rows = spatial.len() / self.config.spatial_dim();
        trunk_forward(self, &self.layout.proposal, spatial, rows, latents)
    }

    pub fn nerf_density(&self, spatial: &[T], latents: Groups<'_, T>) -> Vec<T> {
        let rows = spatial.len() / self.config.spatial_dim();
        trunk_density(self, &self.layout.nerf, spatial, rows, latents)
    }

    pub fn proposal_density(&self, spatial: &[T], latents: Groups<'_, T>) -> Vec<T> {
        let rows = spatial.len() / self.config.spatial_dim();
        trunk_density(self, &self.layout.proposal, spatial, rows, latents)
    }

    pub fn nerf_forward(
        &self,
        spatial: &[T],
        latents: Groups<'_, T>,
        view: Groups<'_, T>,
    ) -> NerfTape<T> {
        let layout = &self.layout;
        let rows = spatial.len() / self.config.spatial_dim();
        let trunk = trunk_forward(self, &layout.nerf, spatial, rows, latents);
        let h = trunk.acts.last().expect("depth >= 1");

        let mut bottleneck = Vec::new();
        linear_forward(&linear_ref(self, layout.bottleneck), h, rows, None, &mut bottleneck);
        let mut view_act = Vec::new();
        linear_forward(&linear_ref(self, layout.view), &bottleneck, rows, Some(view), &mut view_act);
        relu_in_place(&mut view_act);
        let mut color = Vec::new();
        linear_forward(&linear_ref(self, layout.rgb), &view_act, rows, None, &mut color);
        for c in &mut color {
            *c = sigmoid(*c);
        }
        let mut normal_raw = Vec::new();
        linear_forward(&linear_ref(self, layout.normal), h, rows, None, &mut normal_raw);
        let mut normal = normal_raw.clone();
        for n in normal.chunks_exact_mut(3) {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max(T::of(NORMAL_EPS));
            for v in n {
                *v /= len;
            }
        }
        NerfTape {
            trunk,
            bottleneck,
            view_act,
            color,
            normal_raw,
            normal,
        }
    }

    /// Reverse pass of the proposal MLP for density cotangents `d_density`.
    /// Latent gradients accumulate into `d_latents` (`groups × latent_dim`).
    pub fn proposal_backward(
        &self,
        tape: &TrunkTape<T>,
        latents: Groups<'_, T>,
        d_density: &[T],
        d_latents: &mut [T],
        mut grads: Option<&mut [T]>,
    ) {
        let mlp = &self.layout.proposal;
        let mut d_h = vec![T::zero(); tape.rows * mlp.density.x_dim];
        density_head_backward(self, mlp, tape, d_density, &mut d_h, grads.as_deref_mut());
        trunk_backward(self, mlp, tape, latents, d_h, d_latents, grads);
    }

    /// Reverse pass of the NeRF MLP. `d_color` and `d_normal` are `rows × 3`
    /// cotangents of the sigmoid color and the normalized predicted normal.
    #[allow(clippy::too_many_arguments)]
    pub fn nerf_backward(
        &self,
        tape: &NerfTape<T>,
        latents: Groups<'_, T>,
        view: Groups<'_, T>,
        d_density: &[T],
        d_color: &[T],
        d_normal: &[T],
        d_latents: &mut [T],
        mut grads: Option<&mut [T]>,
    ) {
        let layout = &self.layout;
        let rows = tape.trunk.rows;
        let h = tape.trunk.acts.last().expect("depth >= 1");

        let d_rgb_raw: Vec<T> = tape
            .color
            .iter()
            .zip(d_color)
            .map(|(&c, &d)| d * c * (T::one() - c))
            .collect();
        let rgb = linear_ref(self, layout.rgb);
        let g = grads.as_deref_mut().map(|g| grad_slice(self, g, layout.rgb));
        let mut d_view = linear_backward(&rgb, &tape.view_act, rows, &d_rgb_raw, None, None, g, true)
            .expect("dx requested");
        for (d, a) in d_view.iter_mut().zip(&tape.view_act) {
            if *a <= T::zero() {
                *d = T::zero();
            }
        }
        let view_layer = linear_ref(self, layout.view);
        let g = grads.as_deref_mut().map(|g| grad_slice(self, g, layout.view));
        // View-encoding gradients are not needed: directions are constants.
        let d_bottleneck = linear_backward(
            &view_layer,
            &tape.bottleneck,
            rows,
            &d_view,
            Some(view),
            None,
            g,
            true,
        )
        .expect("dx requested");
        let bottleneck = linear_ref(self, layout.bottleneck);
        let g = grads.as_deref_mut().map(|g| grad_slice(self, g, layout.bottleneck));
        let mut d_h = linear_backward(&bottleneck, h, rows, &d_bottleneck, None, None, g, true)
            .expect("dx requested");

        let mut d_normal_raw = vec![T::zero(); rows * 3];
        for ((dr, raw), (dn, n)) in d_normal_raw
            .chunks_exact_mut(3)
            .zip(tape.normal_raw.chunks_exact(3))
            .zip(d_normal.chunks_exact(3).zip(tape.normal.chunks_exact(3)))
        {
            let len = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2]).sqrt();
            if len > T::of(NORMAL_EPS) {
                let proj = dn[0] * n[0] + dn[1] * n[1] + dn[2] * n[2];
                for k in 0..3 {
                    dr[k] = (dn[k] - n[k] * proj) / len;
                }
            } else {
                for k in 0..3 {
                    dr[k] = dn[k] / T::of(NORMAL_EPS);
                }
            }
        }
        let normal = linear_ref(self, layout.normal);
        let g = grads.as_deref_mut().map(|g| grad_slice(self, g, layout.normal));
        let dx = linear_backward(&normal, h, rows, &d_normal_raw, None, None, g, true)
            .expect("dx requested");
        for (a, b) in d_h.iter_mut().zip(dx) {
            *a += b;
        }

        density_head_backward(
            self,
            &layout.nerf,
            &tape.trunk,
            d_density,
            &mut d_h,
            grads.as_deref_mut(),
        );
        trunk_backward(self, &layout.nerf, &tape.trunk, latents, d_h, d_latents, grads);
    }
}
