//! Versioned little-endian checkpoint format.
//!
//! ```text
//! magic "FACEPRIO" | u32 version | config echo (9 × u32, f64 density_bias)
//! u64 parameter count | f32 × count (layout order)
//! u64 code count | u32 code dim | f32 × count·dim
//! ```

use std::path::Path;

use super::params::{FieldConfig, FieldParams, LatentTable};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FACEPRIO";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: FieldParams<f32>,
    pub latents: LatentTable<f32>,
}

fn config_words(c: &FieldConfig) -> [usize; 9] {
    [
        c.spatial_levels,
        c.view_levels,
        c.latent_dim,
        c.proposal_width,
        c.proposal_depth,
        c.nerf_width,
        c.nerf_depth,
        c.bottleneck_dim,
        c.view_width,
    ]
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let params = &ckpt.params;
    let mut out = Vec::with_capacity(64 + 4 * (params.len() + ckpt.latents.codes.len()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for w in config_words(&params.config) {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&params.config.density_bias.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(ckpt.latents.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ckpt.latents.dim as u32).to_le_bytes());
    for v in &ckpt.latents.codes {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("size overflow")?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mut words = [0usize; 9];
    for w in &mut words {
        *w = r.u32()? as usize;
    }
    let config = FieldConfig {
        spatial_levels: words[0],
        view_levels: words[1],
        latent_dim: words[2],
        proposal_width: words[3],
        proposal_depth: words[4],
        nerf_width: words[5],
        nerf_depth: words[6],
        bottleneck_dim: words[7],
        view_width: words[8],
        density_bias: r.f64()?,
    };
    let mut params = FieldParams::<f32>::zeros(&config).map_err(|e| e.to_string())?;
    let count = r.u64()? as usize;
    if count != params.len() {
        return Err(format!(
            "parameter count {count} does not match config ({})",
            params.len()
        ));
    }
    params.values = r.f32s(count)?;
    let n_codes = r.u64()? as usize;
    let dim = r.u32()? as usize;
    if dim != config.latent_dim {
        return Err(format!("latent dim {dim} != config {}", config.latent_dim));
    }
    let codes = r.f32s(n_codes.checked_mul(dim).ok_or("size overflow")?)?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(Checkpoint {
        params,
        latents: LatentTable { dim, codes },
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|reason| Error::malformed(path, reason))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FieldConfig {
        FieldConfig {
            spatial_levels: 2,
            view_levels: 1,
            latent_dim: 3,
            proposal_width: 4,
            proposal_depth: 2,
            nerf_width: 5,
            nerf_depth: 2,
            bottleneck_dim: 3,
            view_width: 4,
            density_bias: -1.0,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut params = FieldParams::<f32>::init(&tiny(), 9).unwrap();
        params.values[0] = f32::from_bits(0x7f7f_ffff);
        params.values[1] = -0.0;
        params.values[2] = f32::from_bits(1);
        let ckpt = Checkpoint {
            params,
            latents: LatentTable::random(4, 3, 0.5, 1),
        };
        let decoded = decode_checkpoint(&encode_checkpoint(&ckpt)).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&decoded.params.values), bits(&ckpt.params.values));
        assert_eq!(bits(&decoded.latents.codes), bits(&ckpt.latents.codes));
        assert_eq!(decoded.params.config, ckpt.params.config);
    }

    #[test]
    fn truncated_or_corrupt_files_are_rejected() {
        let ckpt = Checkpoint {
            params: FieldParams::<f32>::init(&tiny(), 1).unwrap(),
            latents: LatentTable::zeros(2, 3),
        };
        let bytes = encode_checkpoint(&ckpt);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
