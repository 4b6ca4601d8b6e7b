//! Synthetic multi-view data, image IO and image metrics.

mod image;
mod metrics;
mod store;
mod synthetic;

pub use image::{decode_pfm, encode_pfm, quantize, read_pfm, write_png, write_pfm, FloatImage};
pub use metrics::{psnr, ssim, PSNR_CAP};
pub use store::{format_keypoints, parse_keypoints, read_dataset, write_dataset};
pub use synthetic::{
    generate_dataset, identity_views, oracle_render_view, oracle_render_view_with, IdentityViews,
    Lighting, MultiViewDataset, Rig, Split, SyntheticIdentity, GENERATOR_VERSION,
};
