//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.txt
//! <root>/<id>/cameras.txt
//! <root>/<id>/keypoints.txt
//! <root>/<id>/cam_<k>.pfm
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::image::{read_pfm, write_pfm};
use super::synthetic::{IdentityViews, MultiViewDataset, Split, SyntheticIdentity};
use crate::error::{Error, Result};
use crate::geometry::{read_cameras, write_cameras, Keypoint, KeypointSet, Vec3};

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn format_keypoints(k: &KeypointSet) -> String {
    let mut s = String::from("# name x y z\n");
    for kp in Keypoint::ALL {
        let p = k.get(kp);
        writeln!(s, "{} {:?} {:?} {:?}", kp.name(), p.x, p.y, p.z).unwrap();
    }
    s
}

pub fn parse_keypoints(text: &str) -> std::result::Result<KeypointSet, String> {
    let mut points = [None; 5];
    for line in text.lines() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 4 {
            return Err(format!("expected `name x y z`, got {line:?}"));
        }
        let kp = Keypoint::ALL
            .into_iter()
            .find(|k| k.name() == tok[0])
            .ok_or_else(|| format!("unknown keypoint {:?}", tok[0]))?;
        let mut v = [0.0; 3];
        for i in 0..3 {
            v[i] = tok[i + 1].parse().map_err(|_| format!("bad number {:?}", tok[i + 1]))?;
        }
        points[kp as usize] = Some(Vec3::from(v));
    }
    let mut out = [Vec3::zeros(); 5];
    for (i, p) in points.iter().enumerate() {
        out[i] = p.ok_or_else(|| format!("missing keypoint {}", Keypoint::ALL[i].name()))?;
    }
    Ok(KeypointSet::new(out))
}

fn format_identity(s: &SyntheticIdentity) -> String {
    let a = s.semi_axes;
    let mut fields = vec![a.x, a.y, a.z, s.stripe_frequency, s.stripe_phase];
    fields.extend(s.color_a);
    fields.extend(s.color_b);
    fields.push(s.bump_amplitude);
    fields.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

fn parse_identity(tok: &[&str]) -> std::result::Result<SyntheticIdentity, String> {
    let v: Vec<f64> = tok
        .iter()
        .map(|t| t.parse().map_err(|_| format!("bad number {t:?}")))
        .collect::<std::result::Result<_, _>>()?;
    if v.len() != 12 {
        return Err(format!("identity needs 12 parameters, got {}", v.len()));
    }
    Ok(SyntheticIdentity::new(
        Vec3::new(v[0], v[1], v[2]),
        v[3],
        v[4],
        [v[5], v[6], v[7]],
        [v[8], v[9], v[10]],
        v[11],
    ))
}

/// Writes the dataset under `root`, creating directories as needed.
pub fn write_dataset(root: &Path, ds: &MultiViewDataset) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = String::from("# synthetic multi-view dataset\n");
    writeln!(manifest, "generator_version {}", ds.generator_version).unwrap();
    writeln!(manifest, "seed {}", ds.seed).unwrap();
    for idv in &ds.identities {
        write!(manifest, "identity {} {} {}", idv.id, idv.split.name(), idv.images.len()).unwrap();
        if let Some(s) = &idv.identity {
            write!(manifest, " {}", format_identity(s)).unwrap();
        }
        manifest.push('\n');
        let dir = root.join(&idv.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_cameras(&dir.join("cameras.txt"), &idv.cameras)?;
        write_text(&dir.join("keypoints.txt"), &format_keypoints(&idv.keypoints))?;
        for (k, img) in idv.images.iter().enumerate() {
            write_pfm(&dir.join(format!("cam_{k}.pfm")), img)?;
        }
    }
    write_text(&root.join("manifest.txt"), &manifest)
}

pub fn read_dataset(root: &Path) -> Result<MultiViewDataset> {
    let manifest_path = root.join("manifest.txt");
    let text = read_text(&manifest_path)?;
    let bad = |reason: String| Error::malformed(&manifest_path, reason);
    let mut seed = None;
    let mut version = None;
    let mut identities = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok[0] {
            "generator_version" if tok.len() == 2 => {
                version = Some(tok[1].parse().map_err(|_| bad("bad version".into()))?)
            }
            "seed" if tok.len() == 2 => {
                seed = Some(tok[1].parse().map_err(|_| bad("bad seed".into()))?)
            }
            "identity" if tok.len() >= 4 => {
                let id = tok[1].to_string();
                let split = Split::parse(tok[2]).ok_or_else(|| bad(format!("bad split {:?}", tok[2])))?;
                let views: usize = tok[3].parse().map_err(|_| bad("bad view count".into()))?;
                let identity = if tok.len() > 4 {
                    Some(parse_identity(&tok[4..]).map_err(bad)?)
                } else {
                    None
                };
                let dir = root.join(&id);
                let cameras = read_cameras(&dir.join("cameras.txt"))?;
                if cameras.len() != views {
                    return Err(bad(format!("{id}: {} cameras for {views} views", cameras.len())));
                }
                let kp_path = dir.join("keypoints.txt");
                let keypoints = parse_keypoints(&read_text(&kp_path)?)
                    .map_err(|r| Error::malformed(&kp_path, r))?;
                let mut images = Vec::with_capacity(views);
                for (k, cam) in cameras.iter().enumerate() {
                    let path = dir.join(format!("cam_{k}.pfm"));
                    let img = read_pfm(&path)?;
                    if img.width != cam.width as usize || img.height != cam.height as usize {
                        return Err(Error::malformed(&path, "image size differs from camera"));
                    }
                    images.push(img);
                }
                identities.push(IdentityViews {
                    id,
                    split,
                    identity,
                    cameras,
                    images,
                    keypoints,
                });
            }
            _ => return Err(bad(format!("unrecognised line {line:?}"))),
        }
    }
    Ok(MultiViewDataset {
        seed: seed.ok_or_else(|| bad("missing seed".into()))?,
        generator_version: version.ok_or_else(|| bad("missing generator_version".into()))?,
        identities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    #[test]
    fn dataset_round_trips_through_disk() {
        let mut ds = generate_dataset(2, 3, 8, 5);
        ds.mark_holdout(&[1]);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn missing_keypoint_is_reported() {
        let text = format_keypoints(&generate_dataset(1, 1, 4, 0).identities[0].keypoints);
        let cut: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(parse_keypoints(&cut).unwrap_err().contains("chin"));
    }
}
