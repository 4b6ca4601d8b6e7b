use super::{Camera, Mat3, Vec3};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Keypoint {
    LeftEyeOuter = 0,
    RightEyeOuter = 1,
    Nose = 2,
    MouthCenter = 3,
    Chin = 4,
}

impl Keypoint {
    pub const ALL: [Keypoint; 5] = [
        Keypoint::LeftEyeOuter,
        Keypoint::RightEyeOuter,
        Keypoint::Nose,
        Keypoint::MouthCenter,
        Keypoint::Chin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Keypoint::LeftEyeOuter => "left_eye_outer",
            Keypoint::RightEyeOuter => "right_eye_outer",
            Keypoint::Nose => "nose",
            Keypoint::MouthCenter => "mouth_center",
            Keypoint::Chin => "chin",
        }
    }
}

/// The five facial landmarks used for canonical alignment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointSet {
    pub points: [Vec3; 5],
}

impl KeypointSet {
    pub fn new(points: [Vec3; 5]) -> Self {
        KeypointSet { points }
    }

    pub fn get(&self, k: Keypoint) -> Vec3 {
        self.points[k as usize]
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / 5.0
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// True when the points span less than a plane's worth of directions.
    pub fn is_collinear(&self) -> bool {
        let c = self.centroid();
        let mut scatter = Mat3::zeros();
        for p in &self.points {
            let d = p - c;
            scatter += d * d.transpose();
        }
        let sv = scatter.singular_values();
        let largest = sv.max();
        let mut sorted = [sv[0], sv[1], sv[2]];
        sorted.sort_by(|a, b| b.total_cmp(a));
        largest <= 0.0 || sorted[1] <= 1e-12 * largest
    }

    pub fn transformed(&self, t: &SimilarityTransform) -> KeypointSet {
        KeypointSet {
            points: self.points.map(|p| t.apply(&p)),
        }
    }
}

/// `x ↦ scale · rotation · x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        SimilarityTransform {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    /// Moves a camera rigidly with the scene; near/far scale with the scene.
    pub fn apply_to_camera(&self, camera: &Camera) -> Camera {
        Camera {
            rotation: self.rotation * camera.rotation,
            translation: self.apply(&camera.translation),
            near: camera.near * self.scale,
            far: camera.far * self.scale,
            ..camera.clone()
        }
    }
}

/// Least-squares similarity mapping `source` onto `target` (Umeyama).
pub fn estimate_similarity(
    source: &KeypointSet,
    target: &KeypointSet,
) -> Result<SimilarityTransform> {
    if !source.is_finite() || !target.is_finite() {
        return Err(Error::OutOfRange("non-finite keypoints".into()));
    }
    if source.is_collinear() {
        return Err(Error::DegenerateKeypoints);
    }
    let mu_x = source.centroid();
    let mu_y = target.centroid();
    let mut cov = Mat3::zeros();
    let mut var_x = 0.0;
    for (x, y) in source.points.iter().zip(&target.points) {
        let dx = x - mu_x;
        let dy = y - mu_y;
        cov += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= 5.0;
    var_x /= 5.0;

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut s = Mat3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let trace_ds: f64 = (0..3).map(|i| svd.singular_values[i] * s[(i, i)]).sum();
    let scale = trace_ds / var_x;
    if !(scale > 0.0) {
        return Err(Error::DegenerateKeypoints);
    }
    let translation = mu_y - rotation * mu_x * scale;
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// Per-keypoint, per-axis median. Even counts average the two middle values.
pub fn canonical_keypoints(sets: &[KeypointSet]) -> Result<KeypointSet> {
    if sets.is_empty() {
        return Err(Error::EmptyList("keypoint sets"));
    }
    let mut points = [Vec3::zeros(); 5];
    let mut column = Vec::with_capacity(sets.len());
    for (k, point) in points.iter_mut().enumerate() {
        for axis in 0..3 {
            column.clear();
            column.extend(sets.iter().map(|s| s.points[k][axis]));
            point[axis] = median(&mut column);
        }
    }
    Ok(KeypointSet { points })
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid]
            .iter()
            .copied()
            .max_by(f64::total_cmp)
            .expect("nonempty lower half");
        0.5 * (lower + upper)
    }
}

/// Moves cameras so the subject's keypoints land on the canonical ones.
pub fn align_scene(
    cameras: &[Camera],
    keypoints: &KeypointSet,
    canonical: &KeypointSet,
) -> Result<Vec<Camera>> {
    let transform = estimate_similarity(keypoints, canonical)?;
    Ok(cameras
        .iter()
        .map(|c| transform.apply_to_camera(c))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn face() -> KeypointSet {
        KeypointSet::new([
            Vec3::new(-0.35, 0.2, 0.6),
            Vec3::new(0.35, 0.2, 0.6),
            Vec3::new(0.0, 0.0, 0.85),
            Vec3::new(0.0, -0.3, 0.7),
            Vec3::new(0.0, -0.65, 0.45),
        ])
    }

    #[test]
    fn identical_sets_give_identity() {
        let t = estimate_similarity(&face(), &face()).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-9);
        assert!((t.rotation - Mat3::identity()).abs().max() < 1e-9);
        assert!(t.translation.norm() < 1e-9);
    }

    #[test]
    fn recovers_a_constructed_transform() {
        let truth = SimilarityTransform {
            scale: 2.0,
            rotation: Rotation3::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_2)
                .into_inner(),
            translation: Vec3::new(1.0, 2.0, 3.0),
        };
        let target = face().transformed(&truth);
        let t = estimate_similarity(&face(), &target).unwrap();
        assert!((t.scale - 2.0).abs() < 1e-9);
        assert!((t.rotation - truth.rotation).abs().max() < 1e-9);
        assert!((t.translation - truth.translation).abs().max() < 1e-9);
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let line = KeypointSet::new(std::array::from_fn(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.5)));
        assert!(matches!(
            estimate_similarity(&line, &face()),
            Err(Error::DegenerateKeypoints)
        ));
    }

    #[test]
    fn random_similarities_are_recovered_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let axis = Unit::new_normalize(Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            let truth = SimilarityTransform {
                scale: rng.gen_range(0.1..10.0),
                rotation: Rotation3::from_axis_angle(&axis, rng.gen_range(-3.1..3.1)).into_inner(),
                translation: Vec3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                ),
            };
            let t = estimate_similarity(&face(), &face().transformed(&truth)).unwrap();
            assert!((t.scale - truth.scale).abs() < 1e-9);
            assert!((t.rotation - truth.rotation).abs().max() < 1e-9);
            assert!((t.translation - truth.translation).abs().max() < 1e-9);
        }
    }

    #[test]
    fn median_of_one_three_and_permutations() {
        let base = face();
        assert_eq!(canonical_keypoints(&[base]).unwrap(), base);

        let with_nose_x = |x: f64| {
            let mut k = base;
            k.points[Keypoint::Nose as usize].x = x;
            k
        };
        let sets = [with_nose_x(5.0), with_nose_x(0.0), with_nose_x(1.0)];
        let canon = canonical_keypoints(&sets).unwrap();
        assert_eq!(canon.get(Keypoint::Nose).x, 1.0);
        let permuted = [sets[2], sets[0], sets[1]];
        assert_eq!(canonical_keypoints(&permuted).unwrap(), canon);

        assert!(matches!(canonical_keypoints(&[]), Err(Error::EmptyList(_))));
    }

    #[test]
    fn even_count_median_averages_middle_pair() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&mut v), 2.5);
    }

    fn cameras() -> Vec<Camera> {
        [Vec3::new(0.0, 0.0, 4.0), Vec3::new(2.0, 1.0, 3.0)]
            .iter()
            .map(|c| Camera::look_at(*c, Vec3::zeros(), Vec3::y(), 60.0, 16, 16, 2.0, 6.0).unwrap())
            .collect()
    }

    #[test]
    fn canonical_subject_leaves_cameras_unchanged() {
        let cams = cameras();
        let aligned = align_scene(&cams, &face(), &face()).unwrap();
        for (a, b) in aligned.iter().zip(&cams) {
            assert!((a.rotation - b.rotation).abs().max() < 1e-9);
            assert!((a.translation - b.translation).abs().max() < 1e-9);
            assert!((a.near - b.near).abs() < 1e-9 && (a.far - b.far).abs() < 1e-9);
        }
    }

    #[test]
    fn translated_subject_moves_cameras_back() {
        let cams = cameras();
        let shift = Vec3::new(0.0, 0.0, 1.0);
        let moved = KeypointSet::new(face().points.map(|p| p + shift));
        let aligned = align_scene(&cams, &moved, &face()).unwrap();
        for (a, b) in aligned.iter().zip(&cams) {
            assert!((a.translation - (b.translation - shift)).norm() < 1e-9);
        }
    }

    #[test]
    fn alignment_is_idempotent() {
        let cams = cameras();
        let truth = SimilarityTransform {
            scale: 1.3,
            rotation: Rotation3::from_euler_angles(0.1, -0.2, 0.3).into_inner(),
            translation: Vec3::new(0.2, -0.1, 0.4),
        };
        let subject = face().transformed(&truth);
        let once = align_scene(&cams, &subject, &face()).unwrap();
        let twice = align_scene(&once, &face(), &face()).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a.rotation - b.rotation).abs().max() < 1e-9);
            assert!((a.translation - b.translation).abs().max() < 1e-9);
            assert!((a.near - b.near).abs() < 1e-9);
        }
    }
}
