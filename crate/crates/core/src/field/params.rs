use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{spatial_dim, view_dim};
use crate::error::{Error, Result};
use crate::real::Real;

/// Network shapes. Defaults are the full-size prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub spatial_levels: usize,
    pub view_levels: usize,
    pub latent_dim: usize,
    pub proposal_width: usize,
    pub proposal_depth: usize,
    pub nerf_width: usize,
    pub nerf_depth: usize,
    pub bottleneck_dim: usize,
    pub view_width: usize,
    /// Initial density-head bias; density is `softplus(raw)`.
    pub density_bias: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            spatial_levels: 12,
            view_levels: 4,
            latent_dim: 512,
            proposal_width: 256,
            proposal_depth: 4,
            nerf_width: 1024,
            nerf_depth: 8,
            bottleneck_dim: 256,
            view_width: 128,
            density_bias: -4.0,
        }
    }
}

impl FieldConfig {
    pub fn spatial_dim(&self) -> usize {
        spatial_dim(self.spatial_levels)
    }

    pub fn view_dim(&self) -> usize {
        view_dim(self.view_levels)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("spatial_levels", self.spatial_levels),
            ("view_levels", self.view_levels),
            ("latent_dim", self.latent_dim),
            ("proposal_width", self.proposal_width),
            ("proposal_depth", self.proposal_depth),
            ("nerf_width", self.nerf_width),
            ("nerf_depth", self.nerf_depth),
            ("bottleneck_dim", self.bottleneck_dim),
            ("view_width", self.view_width),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("field.{name} must be positive")));
            }
        }
        if !self.density_bias.is_finite() {
            return Err(Error::Config("field.density_bias must be finite".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count of both MLPs and all heads.
    pub fn parameter_count(&self) -> usize {
        let (sd, vd, l) = (self.spatial_dim(), self.view_dim(), self.latent_dim);
        let trunk = |width: usize, depth: usize| {
            (sd + l) * width + width + (depth - 1) * ((width + l) * width + width) + width + 1
        };
        trunk(self.proposal_width, self.proposal_depth)
            + trunk(self.nerf_width, self.nerf_depth)
            + self.nerf_width * self.bottleneck_dim
            + self.bottleneck_dim
            + (self.bottleneck_dim + vd) * self.view_width
            + self.view_width
            + self.view_width * 3
            + 3
            + self.nerf_width * 3
            + 3
    }
}

/// Which part of the model a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    ProposalTrunk,
    ProposalDensity,
    NerfTrunk,
    NerfDensity,
    Bottleneck,
    ViewLayer,
    RgbHead,
    NormalHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::ProposalTrunk,
        ParamGroup::ProposalDensity,
        ParamGroup::NerfTrunk,
        ParamGroup::NerfDensity,
        ParamGroup::Bottleneck,
        ParamGroup::ViewLayer,
        ParamGroup::RgbHead,
        ParamGroup::NormalHead,
    ];

    /// Members of the view branch whose weights are penalised during fitting.
    pub fn is_view_branch(self) -> bool {
        matches!(self, ParamGroup::ViewLayer | ParamGroup::RgbHead)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub is_weight: bool,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// An affine layer `y = x·Wx + g·Wg + b`. The weight tensor stores `Wx` in
/// its first `x_dim` rows and the per-group conditioning block `Wg` below.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearLayout {
    pub weight: usize,
    pub bias: usize,
    pub x_dim: usize,
    pub g_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayout {
    pub layers: Vec<LinearLayout>,
    pub density: LinearLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
    pub proposal: MlpLayout,
    pub nerf: MlpLayout,
    pub bottleneck: LinearLayout,
    pub view: LinearLayout,
    pub rgb: LinearLayout,
    pub normal: LinearLayout,
}

impl Layout {
    pub fn new(config: &FieldConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut linear = |name: String, group: ParamGroup, x_dim: usize, g_dim: usize, out: usize| {
            let weight = tensors.len();
            tensors.push(TensorInfo {
                name: format!("{name}.weight"),
                group,
                rows: x_dim + g_dim,
                cols: out,
                offset: total,
                is_weight: true,
            });
            total += (x_dim + g_dim) * out;
            tensors.push(TensorInfo {
                name: format!("{name}.bias"),
                group,
                rows: 1,
                cols: out,
                offset: total,
                is_weight: false,
            });
            total += out;
            LinearLayout {
                weight,
                bias: weight + 1,
                x_dim,
                g_dim,
                out_dim: out,
            }
        };

        let sd = config.spatial_dim();
        let l = config.latent_dim;
        let mut trunk = |prefix: &str, width: usize, depth: usize, trunk_group, density_group| {
            let layers = (0..depth)
                .map(|i| {
                    let x_dim = if i == 0 { sd } else { width };
                    linear(format!("{prefix}.layer{i}"), trunk_group, x_dim, l, width)
                })
                .collect();
            let density = linear(format!("{prefix}.density"), density_group, width, 0, 1);
            MlpLayout { layers, density }
        };
        let proposal = trunk(
            "proposal",
            config.proposal_width,
            config.proposal_depth,
            ParamGroup::ProposalTrunk,
            ParamGroup::ProposalDensity,
        );
        let nerf = trunk(
            "nerf",
            config.nerf_width,
            config.nerf_depth,
            ParamGroup::NerfTrunk,
            ParamGroup::NerfDensity,
        );
        let bottleneck = linear(
            "nerf.bottleneck".into(),
            ParamGroup::Bottleneck,
            config.nerf_width,
            0,
            config.bottleneck_dim,
        );
        let view = linear(
            "nerf.view".into(),
            ParamGroup::ViewLayer,
            config.bottleneck_dim,
            config.view_dim(),
            config.view_width,
        );
        let rgb = linear("nerf.rgb".into(), ParamGroup::RgbHead, config.view_width, 0, 3);
        let normal = linear("nerf.normal".into(), ParamGroup::NormalHead, config.nerf_width, 0, 3);

        Layout {
            tensors,
            total,
            proposal,
            nerf,
            bottleneck,
            view,
            rgb,
            normal,
        }
    }

    /// Flat index ranges of the view-branch weights (biases excluded).
    pub fn view_branch_ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.tensors
            .iter()
            .filter(|t| t.group.is_view_branch() && t.is_weight)
            .map(|t| t.range())
    }

    pub fn group_ranges(&self, group: ParamGroup) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.tensors
            .iter()
            .filter(move |t| t.group == group)
            .map(|t| t.range())
    }
}

/// All network weights in one flat buffer, addressed through [`Layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams<T> {
    pub config: FieldConfig,
    pub layout: Arc<Layout>,
    pub values: Vec<T>,
}

impl<T: Real> FieldParams<T> {
    pub fn zeros(config: &FieldConfig) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(config));
        let values = vec![T::zero(); layout.total];
        Ok(FieldParams {
            config: config.clone(),
            layout,
            values,
        })
    }

    /// Glorot-uniform weights, zero biases, density-head biases at
    /// `config.density_bias`. Deterministic in `seed`.
    pub fn init(config: &FieldConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = params.layout.clone();
        for info in &layout.tensors {
            if !info.is_weight {
                continue;
            }
            let limit = (6.0 / (info.rows + info.cols) as f64).sqrt();
            for v in &mut params.values[info.range()] {
                *v = T::of(rng.gen_range(-limit..limit));
            }
        }
        for density in [layout.proposal.density, layout.nerf.density] {
            for v in params.tensor_mut(density.bias) {
                *v = T::of(config.density_bias);
            }
        }
        Ok(params)
    }

    pub fn tensor(&self, id: usize) -> &[T] {
        &self.values[self.layout.tensors[id].range()]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut [T] {
        let range = self.layout.tensors[id].range();
        &mut self.values[range]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> FieldParams<U> {
        FieldParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// One latent code per training identity, row-major `n × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable<T> {
    pub dim: usize,
    pub codes: Vec<T>,
}

impl<T: Real> LatentTable<T> {
    pub fn zeros(n: usize, dim: usize) -> Self {
        LatentTable {
            dim,
            codes: vec![T::zero(); n * dim],
        }
    }

    /// Codes drawn from `N(0, std²)`.
    pub fn random(n: usize, dim: usize, std: f64, seed: u64) -> Self {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        LatentTable {
            dim,
            codes: (0..n * dim).map(|_| T::of(normal.sample(&mut rng))).collect(),
        }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<T>]) -> Result<Self> {
        let mut codes = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::shape(format!("latent row of length {} != {dim}", r.len())));
            }
            codes.extend_from_slice(r);
        }
        Ok(LatentTable { dim, codes })
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.codes.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.codes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.codes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cast<U: Real>(&self) -> LatentTable<U> {
        LatentTable {
            dim: self.dim,
            codes: self.codes.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// Gradients mirroring [`FieldParams`] plus per-code latent gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle<T> {
    pub params: Vec<T>,
    pub latents: BTreeMap<usize, Vec<T>>,
}

impl<T: Real> GradientBundle<T> {
    pub fn zeros_like(params: &FieldParams<T>) -> Self {
        GradientBundle {
            params: vec![T::zero(); params.len()],
            latents: BTreeMap::new(),
        }
    }

    pub fn latent_mut(&mut self, code: usize, dim: usize) -> &mut Vec<T> {
        self.latents
            .entry(code)
            .or_insert_with(|| vec![T::zero(); dim])
    }

    /// Adds `other` into `self`. Associative up to float rounding; callers
    /// merge in a fixed order for reproducibility.
    pub fn merge(&mut self, other: &GradientBundle<T>) {
        assert_eq!(self.params.len(), other.params.len(), "merge: param shapes");
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            *a += *b;
        }
        for (code, g) in &other.latents {
            let dst = self.latent_mut(*code, g.len());
            for (a, b) in dst.iter_mut().zip(g) {
                *a += *b;
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for v in &mut self.params {
            *v *= k;
        }
        for g in self.latents.values_mut() {
            for v in g {
                *v *= k;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        let sq: f64 = self
            .params
            .iter()
            .chain(self.latents.values().flatten())
            .map(|v| v.f64() * v.f64())
            .sum();
        sq.sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.params
            .iter()
            .chain(self.latents.values().flatten())
            .all(|v| *v == T::zero())
    }
}
