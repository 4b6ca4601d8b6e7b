use rand::Rng;

use crate::geometry::Ray;

/// Sorted interval boundaries `t_0 < … < t_K` along a ray.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalPartition {
    pub boundaries: Vec<f64>,
}

/// Minimum spacing kept between resampled boundaries.
pub const MIN_GAP: f64 = 1e-7;

impl IntervalPartition {
    pub fn len(&self) -> usize {
        self.boundaries.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn widths(&self) -> impl Iterator<Item = f64> + '_ {
        self.boundaries.windows(2).map(|w| w[1] - w[0])
    }

    pub fn midpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.boundaries.windows(2).map(|w| 0.5 * (w[0] + w[1]))
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.boundaries.windows(2).all(|w| w[1] > w[0])
    }
}

/// `n` equal strata between near and far. With an rng, each interior
/// boundary is jittered uniformly within the stratum centred on its grid
/// position; without one the grid itself is returned.
pub fn stratified_partition<R: Rng + ?Sized>(
    ray: &Ray,
    n: usize,
    rng: Option<&mut R>,
) -> IntervalPartition {
    stratified_between(ray.near, ray.far, n, rng)
}

pub(crate) fn stratified_between<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    n: usize,
    rng: Option<&mut R>,
) -> IntervalPartition {
    assert!(n >= 1, "stratified_partition needs n >= 1");
    let step = (far - near) / n as f64;
    let mut boundaries: Vec<f64> = (0..=n).map(|i| near + step * i as f64).collect();
    boundaries[n] = far;
    if let Some(rng) = rng {
        for (i, b) in boundaries.iter_mut().enumerate().take(n).skip(1) {
            *b = near + step * (i as f64 - 0.5 + rng.gen::<f64>());
        }
    }
    IntervalPartition { boundaries }
}

/// Inverse-CDF sampling of `n + 1` boundaries from the piecewise-constant
/// histogram `weights` over `partition`. A uniform density carrying
/// `padding` of the total mass keeps every region reachable; all-zero
/// weights fall back to uniform. Deterministic mode samples the CDF at
/// `(j + ½)/(n + 1)`, jittered mode at `(j + U_j)/(n + 1)`.
pub fn importance_resample<R: Rng + ?Sized>(
    partition: &IntervalPartition,
    weights: &[f64],
    n: usize,
    padding: f64,
    rng: Option<&mut R>,
) -> IntervalPartition {
    assert!(n >= 1, "importance_resample needs n >= 1");
    assert_eq!(weights.len(), partition.len(), "one weight per interval");
    let t = &partition.boundaries;
    let (lo, hi) = (t[0], t[t.len() - 1]);
    let span = hi - lo;
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let mass: Vec<f64> = if total > 0.0 && total.is_finite() {
        weights
            .iter()
            .zip(partition.widths())
            .map(|(w, d)| w.max(0.0) + padding * total * d / span)
            .collect()
    } else {
        partition.widths().collect()
    };
    let mut cdf = Vec::with_capacity(mass.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for m in &mass {
        acc += m;
        cdf.push(acc);
    }
    let norm = acc;

    let count = n + 1;
    let us: Vec<f64> = match rng {
        Some(rng) => (0..count)
            .map(|j| (j as f64 + rng.gen::<f64>()) / count as f64)
            .collect(),
        None => (0..count).map(|j| (j as f64 + 0.5) / count as f64).collect(),
    };

    let mut out = Vec::with_capacity(count);
    let mut k = 0;
    for u in us {
        let target = u * norm;
        while k + 1 < mass.len() && cdf[k + 1] <= target {
            k += 1;
        }
        let frac = if mass[k] > 0.0 {
            ((target - cdf[k]) / mass[k]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(t[k] + frac * (t[k + 1] - t[k]));
    }
    enforce_gap(&mut out, lo, hi);
    IntervalPartition { boundaries: out }
}

/// Makes boundaries strictly increasing by at least [`MIN_GAP`] while staying
/// inside `[lo, hi]` whenever the span allows it.
fn enforce_gap(b: &mut [f64], lo: f64, hi: f64) {
    b.sort_by(f64::total_cmp);
    for i in 1..b.len() {
        if b[i] < b[i - 1] + MIN_GAP {
            b[i] = b[i - 1] + MIN_GAP;
        }
    }
    let last = b.len() - 1;
    if b[last] > hi {
        b[last] = hi;
        for i in (0..last).rev() {
            if b[i] > b[i + 1] - MIN_GAP {
                b[i] = b[i + 1] - MIN_GAP;
            }
        }
    }
    if b[0] < lo {
        // Span too short for the requested count; keep order, accept overlap of the lower bound.
        b[0] = b[0].max(lo - MIN_GAP * b.len() as f64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ray(near: f64, far: f64) -> Ray {
        Ray {
            origin: Vec3::zeros(),
            direction: Vec3::z(),
            pixel_radius: 1e-3,
            near,
            far,
        }
    }

    type NoRng = ChaCha8Rng;

    #[test]
    fn single_stratum_spans_near_to_far() {
        let p = stratified_partition::<NoRng>(&ray(2.0, 5.0), 1, None);
        assert_eq!(p.boundaries, vec![2.0, 5.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = stratified_partition(&ray(2.0, 5.0), 1, Some(&mut rng));
        assert_eq!(p.boundaries, vec![2.0, 5.0]);
    }

    #[test]
    fn deterministic_strata_are_equal() {
        let p = stratified_partition::<NoRng>(&ray(0.0, 1.0), 4, None);
        assert_eq!(p.boundaries, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn jittered_partition_is_sorted_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = stratified_partition(&ray(1.0, 3.0), 16, Some(&mut rng));
            assert!(p.is_strictly_increasing());
            assert_eq!(p.boundaries[0], 1.0);
            assert_eq!(p.boundaries[16], 3.0);
        }
    }

    #[test]
    fn point_mass_concentrates_every_sample() {
        let base = stratified_partition::<NoRng>(&ray(0.0, 4.0), 4, None);
        let weights = [0.0, 0.0, 1.0, 0.0];
        let p = importance_resample::<NoRng>(&base, &weights, 32, 1e-3, None);
        assert_eq!(p.boundaries.len(), 33);
        assert!(p.boundaries.iter().all(|&t| (2.0..=3.0).contains(&t)));
        assert!(p.is_strictly_increasing());
    }

    #[test]
    fn jittered_point_mass_rarely_leaves_the_interval() {
        let base = stratified_partition::<NoRng>(&ray(0.0, 4.0), 4, None);
        let weights = [0.0, 0.0, 1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut outside = 0;
        let mut total = 0;
        for _ in 0..1000 {
            let p = importance_resample(&base, &weights, 32, 1e-3, Some(&mut rng));
            outside += p.boundaries.iter().filter(|&&t| !(2.0..=3.0).contains(&t)).count();
            total += p.boundaries.len();
        }
        // Padding carries 1e-3 of the mass.
        assert!((outside as f64 / total as f64) < 2e-3);
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let base = stratified_partition::<NoRng>(&ray(0.0, 1.0), 8, None);
        let p = importance_resample::<NoRng>(&base, &[0.0; 8], 4, 1e-3, None);
        let expected = [0.1, 0.3, 0.5, 0.7, 0.9];
        for (a, b) in p.boundaries.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_is_enforced_for_degenerate_masses() {
        let base = IntervalPartition {
            boundaries: vec![0.0, 1e-9, 1.0],
        };
        let p = importance_resample::<NoRng>(&base, &[1.0, 0.0], 8, 0.0, None);
        assert!(p.boundaries.windows(2).all(|w| w[1] - w[0] >= MIN_GAP * 0.999));
    }
}
