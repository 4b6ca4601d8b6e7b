//! Procedural head-like subjects with an exact ray-traced ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FloatImage;
use crate::geometry::{Camera, Keypoint, KeypointSet, Ray, Vec3};

pub const GENERATOR_VERSION: u32 = 1;

/// An ellipsoid centred at the origin with a striped albedo. The bump
/// amplitude scales a specular lobe so appearance depends on view direction.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticIdentity {
    pub semi_axes: Vec3,
    pub stripe_frequency: f64,
    pub stripe_phase: f64,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    pub bump_amplitude: f64,
    pub keypoints: KeypointSet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lighting {
    /// Unit direction towards the light.
    pub direction: Vec3,
    pub ambient: f64,
    pub shininess: f64,
}

impl Default for Lighting {
    fn default() -> Self {
        Lighting {
            direction: Vec3::new(0.3, -0.4, 1.0).normalize(),
            ambient: 0.3,
            shininess: 24.0,
        }
    }
}

/// Landmark directions from the centre, in the camera-facing (+z) half.
/// Image-up is world -y.
const KEYPOINT_DIRECTIONS: [[f64; 3]; 5] = [
    [-0.45, -0.3, 0.85],
    [0.45, -0.3, 0.85],
    [0.0, 0.0, 1.0],
    [0.0, 0.35, 0.9],
    [0.0, 0.75, 0.65],
];

/// Supersampling grid per pixel axis.
const SUBPIXELS: usize = 3;

impl SyntheticIdentity {
    pub fn new(
        semi_axes: Vec3,
        stripe_frequency: f64,
        stripe_phase: f64,
        color_a: [f64; 3],
        color_b: [f64; 3],
        bump_amplitude: f64,
    ) -> Self {
        let keypoints = KeypointSet::new(Keypoint::ALL.map(|k| {
            let d = Vec3::from(KEYPOINT_DIRECTIONS[k as usize]).normalize();
            surface_point(&semi_axes, &d)
        }));
        SyntheticIdentity {
            semi_axes,
            stripe_frequency,
            stripe_phase,
            color_a,
            color_b,
            bump_amplitude,
            keypoints,
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let semi_axes = Vec3::new(
            rng.gen_range(0.55..0.75),
            rng.gen_range(0.7..0.9),
            rng.gen_range(0.55..0.75),
        );
        let mut color = || {
            [
                rng.gen_range(0.2..0.95),
                rng.gen_range(0.2..0.95),
                rng.gen_range(0.2..0.95),
            ]
        };
        let color_a = color();
        let color_b = color();
        SyntheticIdentity::new(
            semi_axes,
            rng.gen_range(2.0..5.0),
            rng.gen_range(0.0..std::f64::consts::TAU),
            color_a,
            color_b,
            rng.gen_range(0.05..0.3),
        )
    }

    pub fn albedo(&self, p: &Vec3) -> [f64; 3] {
        let s = 0.5 + 0.5 * (self.stripe_frequency * (p.y + 0.3 * p.x) + self.stripe_phase).sin();
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = self.color_a[k] * (1.0 - s) + self.color_b[k] * s;
        }
        out
    }

    /// First intersection `(t, point, outward normal)` along the ray, if any.
    pub fn intersect(&self, origin: &Vec3, direction: &Vec3) -> Option<(f64, Vec3, Vec3)> {
        let inv2 = self.semi_axes.map(|a| 1.0 / (a * a));
        let a = direction.component_mul(direction).dot(&inv2);
        let b = 2.0 * origin.component_mul(direction).dot(&inv2);
        let c = origin.component_mul(origin).dot(&inv2) - 1.0;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        // Numerically stable pair of roots.
        let q = -0.5 * (b + b.signum() * sq);
        let (r0, r1) = (q / a, c / q);
        let (t0, t1) = if r0 < r1 { (r0, r1) } else { (r1, r0) };
        let t = if t0 > 0.0 { t0 } else if t1 > 0.0 { t1 } else { return None };
        let p = origin + direction * t;
        let n = p.component_mul(&inv2).normalize();
        Some((t, p, n))
    }

    /// Shaded radiance along a ray; black background.
    pub fn shade(&self, origin: &Vec3, direction: &Vec3, light: &Lighting) -> [f64; 3] {
        let Some((_, p, n)) = self.intersect(origin, direction) else {
            return [0.0; 3];
        };
        let albedo = self.albedo(&p);
        let diffuse = light.ambient + (1.0 - light.ambient) * n.dot(&light.direction).max(0.0);
        let half = (light.direction - direction).normalize();
        let specular = self.bump_amplitude * n.dot(&half).max(0.0).powf(light.shininess);
        albedo.map(|a| (a * diffuse + specular).clamp(0.0, 1.0))
    }
}

fn surface_point(semi_axes: &Vec3, d: &Vec3) -> Vec3 {
    let s = d.component_div(semi_axes).norm();
    d / s
}

/// Oracle render with the default light.
pub fn oracle_render_view(identity: &SyntheticIdentity, camera: &Camera) -> FloatImage {
    oracle_render_view_with(identity, camera, &Lighting::default())
}

/// Averages a fixed `3 × 3` grid of sub-pixel rays per pixel.
pub fn oracle_render_view_with(
    identity: &SyntheticIdentity,
    camera: &Camera,
    light: &Lighting,
) -> FloatImage {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut img = FloatImage::new(w, h);
    let n = SUBPIXELS as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..SUBPIXELS {
                for sx in 0..SUBPIXELS {
                    let ox = (sx as f64 + 0.5) / n - 0.5;
                    let oy = (sy as f64 + 0.5) / n - 0.5;
                    let ray: Ray = camera.ray_for_pixel(x as f64 + ox, y as f64 + oy);
                    let c = identity.shade(&ray.origin, &ray.direction, light);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let s = 1.0 / (n * n);
            img.set(x, y, acc.map(|v| (v * s) as f32));
        }
    }
    img
}

/// Camera placement shared by all generated views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rig {
    pub radius: f64,
    /// Largest angle between a camera and the +z axis, radians.
    pub max_polar: f64,
    /// Focal length as a multiple of image width.
    pub focal_factor: f64,
}

impl Default for Rig {
    fn default() -> Self {
        Rig {
            radius: 4.0,
            max_polar: 1.0,
            focal_factor: 1.75,
        }
    }
}

impl Rig {
    /// Near/far bracketing the canonical `[-1, 1]³` box.
    pub fn near_far(&self) -> (f64, f64) {
        let half_diag = 3f64.sqrt();
        (self.radius - half_diag, self.radius + half_diag)
    }

    /// Camera `k` of `n` on a Fibonacci spiral over the frontal cap.
    pub fn camera(&self, k: usize, n: usize, resolution: u32) -> Camera {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let cos_max = self.max_polar.cos();
        let z = 1.0 - (1.0 - cos_max) * (k as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let phi = golden * k as f64;
        let center = Vec3::new(r * phi.cos(), r * phi.sin(), z) * self.radius;
        self.camera_at(center, resolution)
    }

    pub fn camera_at(&self, center: Vec3, resolution: u32) -> Camera {
        let (near, far) = self.near_far();
        Camera::look_at(
            center,
            Vec3::zeros(),
            -Vec3::y(),
            self.focal_factor * resolution as f64,
            resolution,
            resolution,
            near,
            far,
        )
        .expect("rig cameras are valid")
    }

    /// Orbit of `n` cameras at fixed polar angle, for rendering paths.
    pub fn orbit(&self, n: usize, polar: f64, resolution: u32) -> Vec<Camera> {
        (0..n)
            .map(|k| {
                let phi = std::f64::consts::TAU * k as f64 / n as f64;
                let center =
                    Vec3::new(polar.sin() * phi.cos(), polar.sin() * phi.sin(), polar.cos())
                        * self.radius;
                self.camera_at(center, resolution)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Holdout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "holdout" => Some(Split::Holdout),
            _ => None,
        }
    }
}

/// One subject: its calibrated views and landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityViews {
    pub id: String,
    pub split: Split,
    /// Generator parameters, when known.
    pub identity: Option<SyntheticIdentity>,
    pub cameras: Vec<Camera>,
    pub images: Vec<FloatImage>,
    pub keypoints: KeypointSet,
}

impl IdentityViews {
    /// Oracle foreground masks (nonzero pixels).
    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.images.iter().map(|i| i.nonzero_mask()).collect()
    }

    pub fn mean_image(&self) -> FloatImage {
        let mut mean = FloatImage::new(self.images[0].width, self.images[0].height);
        for img in &self.images {
            for (m, v) in mean.data.iter_mut().zip(&img.data) {
                *m += v / self.images.len() as f32;
            }
        }
        mean
    }

    /// Keeps the listed views only.
    pub fn select_views(&self, views: &[usize]) -> IdentityViews {
        IdentityViews {
            cameras: views.iter().map(|&v| self.cameras[v].clone()).collect(),
            images: views.iter().map(|&v| self.images[v].clone()).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    pub seed: u64,
    pub generator_version: u32,
    pub identities: Vec<IdentityViews>,
}

impl MultiViewDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &IdentityViews)> {
        self.identities
            .iter()
            .enumerate()
            .filter(move |(_, v)| v.split == split)
    }

    pub fn mark_holdout(&mut self, indices: &[usize]) {
        for &i in indices {
            self.identities[i].split = Split::Holdout;
        }
    }

    /// Training identities only, in order.
    pub fn train_subset(&self) -> MultiViewDataset {
        MultiViewDataset {
            identities: self.split(Split::Train).map(|(_, v)| v.clone()).collect(),
            ..self.clone()
        }
    }
}

fn identity_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Deterministic synthetic dataset; every identity is in the train split.
pub fn generate_dataset(
    n_identities: usize,
    n_views: usize,
    resolution: u32,
    seed: u64,
) -> MultiViewDataset {
    assert!(n_identities >= 1 && n_views >= 1 && resolution >= 1, "counts must be positive");
    let rig = Rig::default();
    let cameras: Vec<Camera> = (0..n_views).map(|k| rig.camera(k, n_views, resolution)).collect();
    let identities = (0..n_identities)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(identity_seed(seed, i));
            let identity = SyntheticIdentity::sample(&mut rng);
            identity_views(format!("id_{i:03}"), identity, &cameras)
        })
        .collect();
    MultiViewDataset {
        seed,
        generator_version: GENERATOR_VERSION,
        identities,
    }
}

pub fn identity_views(id: String, identity: SyntheticIdentity, cameras: &[Camera]) -> IdentityViews {
    use rayon::prelude::*;
    let images = cameras
        .par_iter()
        .map(|c| oracle_render_view(&identity, c))
        .collect();
    IdentityViews {
        id,
        split: Split::Train,
        keypoints: identity.keypoints,
        identity: Some(identity),
        cameras: cameras.to_vec(),
        images,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(r: f64) -> SyntheticIdentity {
        SyntheticIdentity::new(Vec3::repeat(r), 3.0, 0.0, [0.8; 3], [0.8; 3], 0.0)
    }

    #[test]
    fn same_seed_gives_identical_data() {
        let a = generate_dataset(2, 3, 8, 7);
        let b = generate_dataset(2, 3, 8, 7);
        assert_eq!(a, b);
        assert_ne!(a.identities[0].images, generate_dataset(2, 3, 8, 8).identities[0].images);
    }

    #[test]
    fn thirteen_views_are_distinct_and_frontal() {
        let ds = generate_dataset(1, 13, 8, 1);
        let cams = &ds.identities[0].cameras;
        assert_eq!(cams.len(), 13);
        for (i, a) in cams.iter().enumerate() {
            assert!(a.center().z > 0.0);
            assert!(a.validate().is_ok());
            for b in &cams[i + 1..] {
                assert!((a.center() - b.center()).norm() > 1e-3);
            }
        }
    }

    #[test]
    fn keypoints_project_inside_every_view() {
        let ds = generate_dataset(3, 8, 64, 3);
        for idv in &ds.identities {
            for cam in &idv.cameras {
                for p in &idv.keypoints.points {
                    let (u, v) = cam.project(p).unwrap();
                    assert!((0.0..64.0).contains(&u) && (0.0..64.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn keypoints_lie_on_the_surface() {
        let id = SyntheticIdentity::sample(&mut ChaCha8Rng::seed_from_u64(2));
        for p in &id.keypoints.points {
            let q = p.component_div(&id.semi_axes).norm();
            assert!((q - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_rays_are_black() {
        let id = sphere(0.5);
        let c = id.shade(&Vec3::new(0.0, 2.0, 4.0), &Vec3::new(0.0, 0.0, -1.0), &Lighting::default());
        assert_eq!(c, [0.0; 3]);
    }

    #[test]
    fn center_hit_matches_the_quadratic_root() {
        let id = SyntheticIdentity::new(Vec3::new(0.6, 0.8, 0.7), 3.0, 0.0, [0.5; 3], [0.5; 3], 0.0);
        let cam = Rig::default().camera_at(Vec3::new(0.3, -0.2, 4.0), 65);
        let ray = cam.ray_for_pixel(32.0, 32.0);
        let (t, p, _) = id.intersect(&ray.origin, &ray.direction).unwrap();
        // Independent root: scale space so the ellipsoid is a unit sphere.
        let o = ray.origin.component_div(&id.semi_axes);
        let d = ray.direction.component_div(&id.semi_axes);
        let a = d.dot(&d);
        let b = 2.0 * o.dot(&d);
        let c = o.dot(&o) - 1.0;
        let expected = (-b - (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);
        assert!((t - expected).abs() < 1e-12);
        assert!((p - ray.at(expected)).norm() < 1e-12);
    }

    #[test]
    fn axial_light_sphere_is_rotationally_symmetric() {
        let id = sphere(0.7);
        let light = Lighting {
            direction: Vec3::z(),
            ..Lighting::default()
        };
        let cam = Rig::default().camera_at(Vec3::new(0.0, 0.0, 4.0), 32);
        let img = oracle_render_view_with(&id, &cam, &light);
        for y in 0..32 {
            for x in 0..32 {
                let a = img.get(x, y);
                for (u, v) in [(31 - x, y), (x, 31 - y), (y, x)] {
                    let b = img.get(u, v);
                    for k in 0..3 {
                        assert!((a[k] - b[k]).abs() < 1e-6, "({x},{y}) vs ({u},{v})");
                    }
                }
            }
        }
    }

    #[test]
    fn identities_differ_and_foreground_is_visible() {
        let ds = generate_dataset(4, 4, 16, 11);
        for i in 0..4 {
            let mi = ds.identities[i].mean_image();
            assert!(mi.nonzero_mask().iter().any(|&m| m));
            for j in i + 1..4 {
                let mj = ds.identities[j].mean_image();
                let d: f32 = mi.data.iter().zip(&mj.data).map(|(a, b)| (a - b) * (a - b)).sum();
                assert!(d > 0.0);
            }
        }
    }
}
