use super::FloatImage;
use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;

/// PSNR in dB over all channels of the masked pixels (all pixels without a
/// mask), dynamic range 1.
pub fn psnr(a: &FloatImage, b: &FloatImage, mask: Option<&[bool]>) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "psnr: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if mask.is_some_and(|m| m.len() != a.pixels()) {
        return Err(Error::shape("psnr: mask size"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (pa, pb)) in a.data.chunks_exact(3).zip(b.data.chunks_exact(3)).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for k in 0..3 {
            let d = pa[k] as f64 - pb[k] as f64;
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::EmptyList("psnr mask"));
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of a `w × h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let ow = w + 1 - n;
    let oh = h + 1 - n;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM over the valid region of an 11×11 Gaussian window (σ = 1.5),
/// averaged over the three channels.
pub fn ssim(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape("ssim: image shapes differ"));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::TooSmall(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a.data.iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data.iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, ow, oh) = filter_valid(&x, w, h, &k);
        let (my, ..) = filter_valid(&y, w, h, &k);
        let (sxx, ..) = filter_valid(&xx, w, h, &k);
        let (syy, ..) = filter_valid(&yy, w, h, &k);
        let (sxy, ..) = filter_valid(&xy, w, h, &k);
        let mut acc = 0.0;
        for i in 0..ow * oh {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> FloatImage {
        let mut img = FloatImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = 0.5 + 0.4 * ((x as f32 * 0.7).sin() * (y as f32 * 0.4).cos());
                img.set(x, y, [v, 1.0 - v * 0.5, v * v]);
            }
        }
        img
    }

    #[test]
    fn psnr_reference_values() {
        let a = FloatImage::filled(4, 4, [0.0; 3]);
        assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP);
        let b = FloatImage::filled(4, 4, [1.0; 3]);
        assert!(psnr(&a, &b, None).unwrap().abs() < 1e-12);
        let c = FloatImage::filled(4, 4, [0.1; 3]);
        assert!((psnr(&a, &c, None).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn psnr_is_symmetric_and_masked() {
        let a = textured(12, 12);
        let mut b = a.clone();
        b.set(0, 0, [0.0; 3]);
        assert_eq!(psnr(&a, &b, None).unwrap(), psnr(&b, &a, None).unwrap());
        let mut mask = vec![true; 144];
        mask[0] = false;
        assert_eq!(psnr(&a, &b, Some(&mask)).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &FloatImage::new(3, 3), None).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = textured(16, 14);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut b = a.clone();
        for v in b.data.iter_mut().step_by(5) {
            *v *= 0.8;
        }
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn ssim_of_negative_is_below_zero() {
        let a = textured(16, 16);
        let mut neg = a.clone();
        for v in &mut neg.data {
            *v = 1.0 - *v;
        }
        assert!(ssim(&a, &neg).unwrap() < 0.0);
    }

    #[test]
    fn ssim_of_constants_is_the_luminance_term() {
        let a = FloatImage::filled(11, 11, [0.2; 3]);
        let b = FloatImage::filled(11, 11, [0.6; 3]);
        let c1 = 1e-4;
        let (x, y) = (0.2f32 as f64, 0.6f32 as f64);
        let expected = (2.0 * x * y + c1) / (x * x + y * y + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = FloatImage::new(10, 20);
        assert!(matches!(ssim(&a, &a), Err(Error::TooSmall(_))));
    }
}
