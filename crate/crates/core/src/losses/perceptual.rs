use crate::error::{Error, Result};

/// Predicted and reference RGB patches, row-major and channel-interleaved.
#[derive(Clone, Copy, Debug)]
pub struct PatchPair<'a> {
    pub width: usize,
    pub height: usize,
    pub predicted: &'a [f64],
    pub reference: &'a [f64],
}

/// A differentiable patch distance. `loss_grad` returns the loss and
/// writes `∂loss/∂predicted` into `grad`.
pub trait PerceptualMetric: Send + Sync {
    fn loss(&self, pair: PatchPair<'_>) -> Result<f64>;
    fn loss_grad(&self, pair: PatchPair<'_>, grad: &mut [f64]) -> Result<f64>;
}

/// Multi-scale structural comparison: on every level of a per-channel
/// Gaussian pyramid, the mean L1 distance of the values and of the Sobel
/// gradient magnitudes, averaged over all terms.
#[derive(Clone, Copy, Debug)]
pub struct PyramidProxy {
    /// Downsampling steps after the full-resolution level.
    pub octaves: usize,
}

impl Default for PyramidProxy {
    fn default() -> Self {
        PyramidProxy { octaves: 3 }
    }
}

pub const MIN_PATCH: usize = 8;
const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
const GRAD_EPS: f64 = 1e-8;

pub fn patch_perceptual(pair: PatchPair<'_>) -> Result<f64> {
    PyramidProxy::default().loss(pair)
}

#[derive(Clone, Debug)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn at(&self, x: isize, y: isize) -> usize {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        y * self.w + x
    }
}

/// Blur with the 5-tap binomial (clamped borders), keep even pixels.
fn downsample(p: &Plane) -> Plane {
    let (w2, h2) = (p.w.div_ceil(2), p.h.div_ceil(2));
    let mut v = vec![0.0; w2 * h2];
    for y in 0..h2 {
        for x in 0..w2 {
            let mut acc = 0.0;
            for (j, ky) in BINOMIAL.iter().enumerate() {
                for (i, kx) in BINOMIAL.iter().enumerate() {
                    acc += ky * kx * p.v[p.at(2 * x as isize + i as isize - 2, 2 * y as isize + j as isize - 2)];
                }
            }
            v[y * w2 + x] = acc;
        }
    }
    Plane { w: w2, h: h2, v }
}

fn downsample_adjoint(g: &Plane, w: usize, h: usize) -> Vec<f64> {
    let src = Plane {
        w,
        h,
        v: vec![0.0; w * h],
    };
    let mut out = src.v.clone();
    for y in 0..g.h {
        for x in 0..g.w {
            let gv = g.v[y * g.w + x];
            if gv == 0.0 {
                continue;
            }
            for (j, ky) in BINOMIAL.iter().enumerate() {
                for (i, kx) in BINOMIAL.iter().enumerate() {
                    out[src.at(2 * x as isize + i as isize - 2, 2 * y as isize + j as isize - 2)] += ky * kx * gv;
                }
            }
        }
    }
    out
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

fn sobel(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; p.w * p.h];
    let mut gy = vec![0.0; p.w * p.h];
    for y in 0..p.h {
        for x in 0..p.w {
            let (mut ax, mut ay) = (0.0, 0.0);
            for j in 0..3 {
                for i in 0..3 {
                    let v = p.v[p.at(x as isize + i as isize - 1, y as isize + j as isize - 1)];
                    ax += SOBEL_X[j][i] * v;
                    ay += SOBEL_X[i][j] * v;
                }
            }
            gx[y * p.w + x] = ax;
            gy[y * p.w + x] = ay;
        }
    }
    (gx, gy)
}

fn sobel_adjoint(p: &Plane, dgx: &[f64], dgy: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.w * p.h];
    for y in 0..p.h {
        for x in 0..p.w {
            let (a, b) = (dgx[y * p.w + x], dgy[y * p.w + x]);
            for j in 0..3 {
                for i in 0..3 {
                    out[p.at(x as isize + i as isize - 1, y as isize + j as isize - 1)] +=
                        SOBEL_X[j][i] * a + SOBEL_X[i][j] * b;
                }
            }
        }
    }
    out
}

fn channel(data: &[f64], w: usize, h: usize, c: usize) -> Plane {
    Plane {
        w,
        h,
        v: data.iter().skip(c).step_by(3).copied().collect(),
    }
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl PyramidProxy {
    fn check(&self, pair: &PatchPair<'_>) -> Result<()> {
        let n = pair.width * pair.height * 3;
        if pair.predicted.len() != n || pair.reference.len() != n {
            return Err(Error::shape("perceptual: patch sizes differ"));
        }
        if pair.width < MIN_PATCH || pair.height < MIN_PATCH {
            return Err(Error::TooSmall(format!(
                "perceptual patches must be at least {MIN_PATCH}x{MIN_PATCH}, got {}x{}",
                pair.width, pair.height
            )));
        }
        Ok(())
    }

    fn evaluate(&self, pair: PatchPair<'_>, mut grad: Option<&mut [f64]>) -> Result<f64> {
        self.check(&pair)?;
        let levels = self.octaves + 1;
        let terms = (3 * levels * 2) as f64;
        let mut total = 0.0;
        for c in 0..3 {
            let mut pa = vec![channel(pair.predicted, pair.width, pair.height, c)];
            let mut pb = vec![channel(pair.reference, pair.width, pair.height, c)];
            for _ in 0..self.octaves {
                pa.push(downsample(pa.last().unwrap()));
                pb.push(downsample(pb.last().unwrap()));
            }
            // Gradient w.r.t. each level of the predicted pyramid.
            let mut dlev: Vec<Vec<f64>> = pa.iter().map(|p| vec![0.0; p.v.len()]).collect();
            for l in 0..levels {
                let (a, b) = (&pa[l], &pb[l]);
                let n = a.v.len() as f64;
                let mut value = 0.0;
                for (i, (x, y)) in a.v.iter().zip(&b.v).enumerate() {
                    value += (x - y).abs();
                    dlev[l][i] += sign(x - y) / (n * terms);
                }
                let (ax, ay) = sobel(a);
                let (bx, by) = sobel(b);
                let mut dgx = vec![0.0; a.v.len()];
                let mut dgy = vec![0.0; a.v.len()];
                for i in 0..a.v.len() {
                    let ma = (ax[i] * ax[i] + ay[i] * ay[i] + GRAD_EPS).sqrt();
                    let mb = (bx[i] * bx[i] + by[i] * by[i] + GRAD_EPS).sqrt();
                    value += (ma - mb).abs();
                    let s = sign(ma - mb) / (n * terms);
                    dgx[i] = s * ax[i] / ma;
                    dgy[i] = s * ay[i] / ma;
                }
                total += value / n;
                if grad.is_some() {
                    for (d, g) in dlev[l].iter_mut().zip(sobel_adjoint(a, &dgx, &dgy)) {
                        *d += g;
                    }
                }
            }
            if let Some(grad) = grad.as_deref_mut() {
                for l in (1..levels).rev() {
                    let g = Plane {
                        w: pa[l].w,
                        h: pa[l].h,
                        v: std::mem::take(&mut dlev[l]),
                    };
                    for (d, v) in dlev[l - 1].iter_mut().zip(downsample_adjoint(&g, pa[l - 1].w, pa[l - 1].h)) {
                        *d += v;
                    }
                }
                for (i, v) in dlev[0].iter().enumerate() {
                    grad[i * 3 + c] = *v;
                }
            }
        }
        Ok(total / terms)
    }
}

impl PerceptualMetric for PyramidProxy {
    fn loss(&self, pair: PatchPair<'_>) -> Result<f64> {
        self.evaluate(pair, None)
    }

    fn loss_grad(&self, pair: PatchPair<'_>, grad: &mut [f64]) -> Result<f64> {
        if grad.len() != pair.predicted.len() {
            return Err(Error::shape("perceptual gradient buffer"));
        }
        self.evaluate(pair, Some(grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth(w: usize, h: usize, shift: usize) -> Vec<f64> {
        let mut img = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let u = (x + shift) as f64;
                img.extend([
                    0.5 + 0.3 * (u * 0.3).sin(),
                    0.4 + 0.2 * (y as f64 * 0.25 + u * 0.1).cos(),
                    0.6,
                ]);
            }
        }
        img
    }

    fn pair<'a>(w: usize, h: usize, a: &'a [f64], b: &'a [f64]) -> PatchPair<'a> {
        PatchPair {
            width: w,
            height: h,
            predicted: a,
            reference: b,
        }
    }

    #[test]
    fn identical_patches_score_zero() {
        let a = smooth(16, 16, 0);
        assert_eq!(patch_perceptual(pair(16, 16, &a, &a)).unwrap(), 0.0);
    }

    #[test]
    fn shift_scores_below_noise() {
        let a = smooth(32, 32, 0);
        let b = smooth(32, 32, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.gen()).collect();
        let shifted = patch_perceptual(pair(32, 32, &a, &b)).unwrap();
        let noisy = patch_perceptual(pair(32, 32, &a, &noise)).unwrap();
        assert!(shifted > 0.0 && shifted < noisy, "{shifted} vs {noisy}");
    }

    #[test]
    fn proxy_is_symmetric() {
        let a = smooth(12, 10, 0);
        let b = smooth(12, 10, 2);
        let ab = patch_perceptual(pair(12, 10, &a, &b)).unwrap();
        let ba = patch_perceptual(pair(12, 10, &b, &a)).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn small_patches_are_rejected() {
        let a = vec![0.0; 7 * 8 * 3];
        assert!(matches!(patch_perceptual(pair(7, 8, &a, &a)), Err(Error::TooSmall(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (w, h) = (10, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let reference: Vec<f64> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let mut predicted: Vec<f64> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let mut grad = vec![0.0; predicted.len()];
        PyramidProxy::default()
            .loss_grad(pair(w, h, &predicted, &reference), &mut grad)
            .unwrap();
        let step = 1e-6;
        for i in (0..predicted.len()).step_by(5) {
            let orig = predicted[i];
            predicted[i] = orig + step;
            let up = patch_perceptual(pair(w, h, &predicted, &reference)).unwrap();
            predicted[i] = orig - step;
            let down = patch_perceptual(pair(w, h, &predicted, &reference)).unwrap();
            predicted[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            assert!((grad[i] - numeric).abs() <= 1e-4 * numeric.abs().max(1e-3), "{i}: {} vs {numeric}", grad[i]);
        }
    }
}
