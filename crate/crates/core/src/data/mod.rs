//! Dataset ingestion, synthetic pairs and batching.

pub mod image;
pub mod pfm;
pub mod synth;

use std::path::{Path, PathBuf};

use esm_tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::DisparityMap;
use crate::error::{Error, Result};

pub use self::image::{read_disparity_png16, read_rgb, write_disparity_png16, write_rgb};
pub use pfm::{read_pfm, write_pfm};
pub use synth::generate_random_dot_pair;

/// Writes through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    esm_tensor::io::write_atomic(path, bytes).map_err(|e| match e {
        TensorError::Io(io) => Error::io(path, io),
        other => Error::Tensor(other),
    })
}

#[derive(Clone, Debug)]
pub struct StereoSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    /// `[1, H, W]` at full resolution.
    pub gt: DisparityMap<f32>,
    pub id: String,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.left.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[2]
    }

    fn check(&self) -> Result<()> {
        let s = self.left.shape();
        if s.len() != 3 || s[0] != 3 || self.right.shape() != s || self.gt.data.shape() != [1, s[1], s[2]] {
            return Err(Error::Invalid(format!(
                "sample {}: left {:?}, right {:?} and ground truth {:?} disagree",
                self.id,
                s,
                self.right.shape(),
                self.gt.data.shape()
            )));
        }
        if !self.left.all_finite() || !self.right.all_finite() {
            return Err(Error::Invalid(format!("sample {}: non-finite image values", self.id)));
        }
        Ok(())
    }
}

/// Pixels supervised and scored: ground truth present and `0 < d < d_max`.
pub fn evaluation_mask(gt: &DisparityMap<f32>, d_max: usize) -> Vec<bool> {
    let dm = d_max as f32;
    gt.data.data().iter().zip(&gt.valid).map(|(&d, &v)| v && d > 0.0 && d < dm).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub left: PathBuf,
    pub right: PathBuf,
    pub gt: PathBuf,
}

impl ManifestEntry {
    /// File stem of the left image.
    pub fn id(&self) -> String {
        self.left.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

/// Three whitespace-separated paths per line; `#` starts a comment. Relative
/// paths are resolved against the manifest's directory.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Invalid(format!("manifest line {}: expected 3 paths, found {}", n + 1, parts.len())));
        }
        let p = |s: &str| {
            let p = PathBuf::from(s);
            if p.is_absolute() { p } else { base.join(p) }
        };
        out.push(ManifestEntry { left: p(parts[0]), right: p(parts[1]), gt: p(parts[2]) });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base).map_err(|e| Error::data(path, e.to_string()))
}

/// Writes entries relative to the manifest's directory when possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut text = String::from("# left right ground-truth\n");
    for e in entries {
        text.push_str(&format!("{} {} {}\n", rel(&e.left), rel(&e.right), rel(&e.gt)));
    }
    write_atomic(path, text.as_bytes())
}

/// Ground truth from `.pfm` (non-finite or negative values invalid) or 16-bit
/// `.png` (zero invalid).
pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<DisparityMap<f32>> {
    let path = path.as_ref();
    let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
    match ext.as_str() {
        "pfm" => {
            let img = read_pfm(path)?;
            let valid = img.data.iter().map(|v| v.is_finite() && *v >= 0.0).collect();
            let data = img.data.iter().map(|&v| if v.is_finite() { v } else { 0.0 }).collect();
            Ok(DisparityMap { data: Tensor::new(data, &[1, img.height, img.width])?, scale: 1, valid })
        }
        "png" => read_disparity_png16(path),
        _ => Err(Error::data(path, "ground truth must be .pfm or 16-bit .png")),
    }
}

pub fn load_sample(entry: &ManifestEntry) -> Result<StereoSample> {
    let sample = StereoSample {
        left: read_rgb(&entry.left)?,
        right: read_rgb(&entry.right)?,
        gt: read_ground_truth(&entry.gt)?,
        id: entry.id(),
    };
    sample.check().map_err(|e| Error::data(&entry.left, e.to_string()))?;
    Ok(sample)
}

/// Stacked crops ready for the network.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, h, w]`.
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    /// `[B, h, w]`.
    pub gt: DisparityMap<f32>,
    pub ids: Vec<String>,
    /// `(y, x)` crop offset per sample.
    pub offsets: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Crop {
    /// Uniform random offset per sample, drawn from the batch seed.
    Random,
    Center,
}

/// Crops every sample to `height × width` with one offset shared by its
/// left, right and ground-truth maps.
pub fn make_batch(samples: &[&StereoSample], height: usize, width: usize, crop: Crop, seed: u64) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if height % 16 != 0 || width % 16 != 0 || height == 0 || width == 0 {
        return Err(Error::Invalid(format!("crop {height}x{width} must be positive multiples of 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = samples.len();
    let plane = height * width;
    let mut left = Vec::with_capacity(b * 3 * plane);
    let mut right = Vec::with_capacity(b * 3 * plane);
    let mut gt = Vec::with_capacity(b * plane);
    let mut valid = Vec::with_capacity(b * plane);
    let mut offsets = Vec::with_capacity(b);
    for s in samples {
        s.check()?;
        let (sh, sw) = (s.height(), s.width());
        if height > sh || width > sw {
            return Err(Error::Invalid(format!("crop {height}x{width} larger than sample {} ({sh}x{sw})", s.id)));
        }
        let (oy, ox) = match crop {
            Crop::Random => (rng.random_range(0..=sh - height), rng.random_range(0..=sw - width)),
            Crop::Center => ((sh - height) / 2, (sw - width) / 2),
        };
        offsets.push((oy, ox));
        for c in 0..3 {
            for y in 0..height {
                let row = (c * sh + oy + y) * sw + ox;
                left.extend_from_slice(&s.left.data()[row..row + width]);
                right.extend_from_slice(&s.right.data()[row..row + width]);
            }
        }
        for y in 0..height {
            let row = (oy + y) * sw + ox;
            gt.extend_from_slice(&s.gt.data.data()[row..row + width]);
            valid.extend_from_slice(&s.gt.valid[row..row + width]);
        }
    }
    Ok(Batch {
        left: Tensor::new(left, &[b, 3, height, width])?,
        right: Tensor::new(right, &[b, 3, height, width])?,
        gt: DisparityMap { data: Tensor::new(gt, &[b, height, width])?, scale: 1, valid },
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        let text = "# header\nl.png r.png g.pfm\n\n/abs/l.png r2.png g2.png # trailing\n";
        let m = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].left, PathBuf::from("/data/l.png"));
        assert_eq!(m[1].left, PathBuf::from("/abs/l.png"));
        assert!(parse_manifest("a b\n", Path::new(".")).is_err());
    }

    #[test]
    fn full_size_crop_is_identity_and_crops_align() {
        let s = generate_random_dot_pair(32, 64, 8, 8, 5).unwrap();
        let b = make_batch(&[&s], 32, 64, Crop::Random, 1).unwrap();
        assert_eq!(b.left.to_vec(), s.left.to_vec());
        assert_eq!(b.gt.data.to_vec(), s.gt.data.to_vec());
        let b = make_batch(&[&s], 16, 32, Crop::Random, 7).unwrap();
        let (oy, ox) = b.offsets[0];
        assert_eq!(b.gt.data.data()[0], s.gt.data.data()[oy * 64 + ox]);
        assert_eq!(b.left.data()[0], s.left.data()[oy * 64 + ox]);
        assert!(make_batch(&[&s], 48, 64, Crop::Center, 0).is_err());
    }
}
