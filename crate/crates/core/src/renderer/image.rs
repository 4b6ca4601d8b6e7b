use rayon::prelude::*;

use super::pipeline::{render_batch, RayBatch, RenderConfig};
use crate::data::FloatImage;
use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::geometry::{Camera, Ray};
use crate::real::Real;

/// Rays per work item. Fixed so results never depend on the thread count.
pub const IMAGE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub color: FloatImage,
    /// Expected depth replicated over the three channels.
    pub depth: FloatImage,
    /// Composited predicted normals mapped from `[-1, 1]` to `[0, 1]`.
    pub normal: FloatImage,
    pub opacity: Vec<f32>,
}

/// Deterministic render of every pixel of `camera` on `threads` workers.
pub fn render_image<T: Real>(
    params: &FieldParams<T>,
    latent: &[T],
    camera: &Camera,
    cfg: &RenderConfig,
    threads: usize,
) -> Result<RenderedImage> {
    camera.validate()?;
    let (w, h) = (camera.width as usize, camera.height as usize);
    let rays: Vec<Ray> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| camera.ray_for_pixel(x as f64, y as f64))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let chunks: Vec<Result<Vec<[f32; 8]>>> = pool.install(|| {
        rays.par_chunks(IMAGE_CHUNK)
            .map(|chunk| {
                let slots = vec![0u32; chunk.len()];
                let batch = RayBatch {
                    rays: chunk,
                    latents: latent,
                    latent_slot: &slots,
                    seeds: None,
                };
                let tape = render_batch(params, &batch, cfg, false, None)?;
                Ok((0..chunk.len())
                    .map(|r| {
                        let o = tape.output(r);
                        let n = o.normal_map_value;
                        [
                            o.color[0] as f32,
                            o.color[1] as f32,
                            o.color[2] as f32,
                            o.expected_depth as f32,
                            (0.5 * n[0] + 0.5) as f32,
                            (0.5 * n[1] + 0.5) as f32,
                            (0.5 * n[2] + 0.5) as f32,
                            o.accumulated_opacity as f32,
                        ]
                    })
                    .collect())
            })
            .collect()
    });
    let mut out = RenderedImage {
        color: FloatImage::new(w, h),
        depth: FloatImage::new(w, h),
        normal: FloatImage::new(w, h),
        opacity: Vec::with_capacity(w * h),
    };
    let mut i = 0;
    for chunk in chunks {
        for px in chunk? {
            let (x, y) = (i % w, i / w);
            out.color.set(x, y, [px[0], px[1], px[2]]);
            out.depth.set(x, y, [px[3]; 3]);
            out.normal.set(x, y, [px[4], px[5], px[6]]);
            out.opacity.push(px[7]);
            i += 1;
        }
    }
    Ok(out)
}
