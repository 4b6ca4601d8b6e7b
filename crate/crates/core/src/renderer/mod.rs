//! Interval sampling, volume compositing and hierarchical rendering.

mod composite;
mod image;
mod pipeline;
mod sampling;

pub use composite::{
    composite, composite_with_normals, compositing_backward, compositing_weights, RenderOutput,
    DEPTH_EPS,
};
pub use image::{render_image, RenderedImage, IMAGE_CHUNK};
pub use pipeline::{
    render_batch, render_ray, RayBatch, RenderConfig, RenderCotangents, RenderStages, RenderTape,
    StagePartitions, StageTape,
};
pub use sampling::{importance_resample, stratified_partition, IntervalPartition, MIN_GAP};
