use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image of 32-bit floats, rows top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize) -> Self {
        FloatImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = FloatImage::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(FloatImage {
            width,
            height,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &FloatImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rec. 601 luma per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    pub fn mean_luminance(&self) -> f64 {
        let l = self.luminance();
        l.iter().sum::<f64>() / l.len().max(1) as f64
    }

    /// Pixels with any nonzero channel.
    pub fn nonzero_mask(&self) -> Vec<bool> {
        self.data
            .chunks_exact(3)
            .map(|p| p.iter().any(|&v| v != 0.0))
            .collect()
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> FloatImage {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut out = FloatImage::new(w, h);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * 3;
            out.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        out
    }
}

/// Encodes a PFM (`PF`, little-endian, rows bottom to top).
pub fn encode_pfm(image: &FloatImage) -> Vec<u8> {
    let mut out = format!("PF\n{} {}\n-1.0\n", image.width, image.height).into_bytes();
    out.reserve(image.data.len() * 4);
    for y in (0..image.height).rev() {
        let row = &image.data[y * image.width * 3..(y + 1) * image.width * 3];
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes colour (`PF`) or greyscale (`Pf`) PFM of either byte order;
/// greyscale is replicated into three channels.
pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<FloatImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        let t = std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ascii header")?;
        Ok(t.to_string())
    };
    let channels = match token()?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(format!("unknown PFM tag {other:?}")),
    };
    let width: usize = token()?.parse().map_err(|_| "bad width")?;
    let height: usize = token()?.parse().map_err(|_| "bad height")?;
    let scale: f64 = token()?.parse().map_err(|_| "bad scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err("bad scale".into());
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("truncated header".into());
    }
    let body = &bytes[pos + 1..];
    let expected = width * height * channels * 4;
    if body.len() != expected {
        return Err(format!("expected {expected} data bytes, found {}", body.len()));
    }
    let little = scale < 0.0;
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let mut img = FloatImage::new(width, height);
    for y in 0..height {
        let src_row = height - 1 - y;
        for x in 0..width {
            let src = (src_row * width + x) * channels;
            let rgb = if channels == 3 {
                [values[src], values[src + 1], values[src + 2]]
            } else {
                [values[src]; 3]
            };
            img.set(x, y, rgb);
        }
    }
    Ok(img)
}

pub fn write_pfm(path: &Path, image: &FloatImage) -> Result<()> {
    std::fs::write(path, encode_pfm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<FloatImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes).map_err(|reason| Error::malformed(path, reason))
}

/// 8-bit quantization with clamping and round-half-up.
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) as f64 };
    (v * 255.0 + 0.5).floor() as u8
}

pub fn write_png(path: &Path, image: &FloatImage) -> Result<()> {
    let bytes: Vec<u8> = image.data.iter().map(|&v| quantize(v)).collect();
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, bytes)
        .ok_or_else(|| Error::shape("png buffer size"))?;
    let mut encoded = Vec::new();
    buf.write_to(
        &mut std::io::Cursor::new(&mut encoded),
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::malformed(path, e.to_string()))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encoded).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FloatImage {
        let mut img = FloatImage::new(3, 2);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f32 * 0.05;
        }
        img.data[4] = f32::from_bits(1);
        img.data[5] = -0.0;
        img
    }

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let img = sample();
        let back = decode_pfm(&encode_pfm(&img)).unwrap();
        let bits = |i: &FloatImage| i.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&img));
        assert_eq!((back.width, back.height), (3, 2));
    }

    #[test]
    fn pfm_rows_are_stored_bottom_up() {
        let mut img = FloatImage::new(1, 2);
        img.set(0, 0, [1.0, 1.0, 1.0]);
        let bytes = encode_pfm(&img);
        let body = &bytes[bytes.len() - 24..];
        assert_eq!(&body[..4], &0f32.to_le_bytes());
        assert_eq!(&body[12..16], &1f32.to_le_bytes());
    }

    #[test]
    fn big_endian_and_greyscale_are_read() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.25f32.to_be_bytes());
        bytes.extend_from_slice(&0.75f32.to_be_bytes());
        let img = decode_pfm(&bytes).unwrap();
        assert_eq!(img.get(0, 0), [0.25; 3]);
        assert_eq!(img.get(1, 0), [0.75; 3]);
    }

    #[test]
    fn truncated_pfm_is_malformed() {
        let bytes = encode_pfm(&sample());
        assert!(decode_pfm(&bytes[..5]).is_err());
        assert!(decode_pfm(&bytes[..bytes.len() - 2]).is_err());
        assert!(decode_pfm(b"P6\n1 1\n255\n").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pfm");
        std::fs::write(&path, b"PF\n4").unwrap();
        assert!(matches!(read_pfm(&path), Err(Error::MalformedFile { .. })));
    }

    #[test]
    fn png_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(2.0), 255);
        assert_eq!(quantize(-1.0), 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.png");
        write_png(&path, &FloatImage::filled(2, 2, [0.5; 3])).unwrap();
        let decoded = image::open(&path).unwrap().to_rgb8();
        assert!(decoded.pixels().all(|p| p.0 == [128, 128, 128]));
    }
}
