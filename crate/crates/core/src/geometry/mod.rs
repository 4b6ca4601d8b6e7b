//! Pinhole cameras, conical pixel rays and canonical-pose alignment.

mod camera;
mod procrustes;

pub use camera::{read_cameras, write_cameras, Camera, FrustumGaussian, Ray};
pub use procrustes::{
    align_scene, canonical_keypoints, estimate_similarity, Keypoint, KeypointSet,
    SimilarityTransform,
};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
