//! PNG images: RGB inputs, 16-bit disparity ground truth and 8-bit
//! visualizations.

use std::io::Cursor;
use std::path::Path;

use esm_tensor::Tensor;
use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::aggregate::DisparityMap;
use crate::error::{Error, Result};

/// 16-bit ground truth stores `round(d * 256)`; 0 marks a missing value.
pub const PNG16_SCALE: f64 = 256.0;

fn open(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::data(path, e.to_string()))
}

/// RGB image as `[3, H, W]` with values in `[0, 1]`.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = open(path)?.to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c].clamp(0.0, 1.0);
        }
    }
    Ok(Tensor::new(data, &[3, h, w])?)
}

/// Writes a `[3, H, W]` image in `[0, 1]` as 8-bit RGB.
pub fn write_rgb(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let mut bytes = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes[(y * w + x) * 3 + c] = (d[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    write_rgb8(path, w, h, bytes)
}

/// Writes interleaved 8-bit RGB bytes as PNG.
pub fn write_rgb8(path: impl AsRef<Path>, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    let path = path.as_ref();
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(width as u32, height as u32, bytes).ok_or_else(|| Error::Shape("rgb buffer size".into()))?;
    encode_and_write(path, DynamicImage::ImageRgb8(buf))
}

fn encode_and_write(path: &Path, img: DynamicImage) -> Result<()> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::data(path, e.to_string()))?;
    super::write_atomic(path, &out.into_inner())
}

/// Decodes a 16-bit grayscale disparity PNG into a `[1, H, W]` map.
pub fn read_disparity_png16(path: impl AsRef<Path>) -> Result<DisparityMap<f32>> {
    let path = path.as_ref();
    let img = match open(path)? {
        DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(Error::data(
                path,
                format!("disparity PNG must be 16-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u16> = img.into_raw();
    let data = raw.iter().map(|&r| (r as f64 / PNG16_SCALE) as f32).collect();
    let valid = raw.iter().map(|&r| r != 0).collect();
    Ok(DisparityMap { data: Tensor::new(data, &[1, h, w])?, scale: 1, valid })
}

/// Encodes disparities as `round(d * 256)`, invalid pixels as 0.
pub fn write_disparity_png16(path: impl AsRef<Path>, map: &DisparityMap<f32>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (map.height(), map.width());
    let raw: Vec<u16> = map
        .data
        .data()
        .iter()
        .zip(&map.valid)
        .map(|(&d, &v)| if v { (d as f64 * PNG16_SCALE).round().clamp(1.0, u16::MAX as f64) as u16 } else { 0 })
        .collect();
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Shape("disparity buffer size".into()))?;
    encode_and_write(path, DynamicImage::ImageLuma16(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png16_round_trip_with_known_raws() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.png");
        let raws: Vec<u16> = vec![0, 512, 1, 65535, 256, 384];
        let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(3, 2, raws.clone()).unwrap();
        DynamicImage::ImageLuma16(buf).save(&p).unwrap();
        let m = read_disparity_png16(&p).unwrap();
        assert_eq!(m.data.shape(), &[1, 2, 3]);
        assert_eq!(m.data.to_vec(), vec![0.0, 2.0, 1.0 / 256.0, 65535.0 / 256.0, 1.0, 1.5]);
        assert_eq!(m.valid, vec![false, true, true, true, true, true]);
        let q = dir.path().join("back.png");
        write_disparity_png16(&q, &m).unwrap();
        let again = read_disparity_png16(&q).unwrap();
        assert_eq!(again.data.to_vec(), m.data.to_vec());
    }

    #[test]
    fn eight_bit_ground_truth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt8.png");
        let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(2, 1, vec![1, 2]).unwrap();
        DynamicImage::ImageLuma8(buf).save(&p).unwrap();
        let err = read_disparity_png16(&p).unwrap_err().to_string();
        assert!(err.contains("16-bit"), "{err}");
    }

    #[test]
    fn rgb_round_trip_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.png");
        let v: Vec<f32> = (0..3 * 4 * 5).map(|i| (i * 4) as f32 / 255.0).collect();
        let t = Tensor::new(v.clone(), &[3, 4, 5]).unwrap();
        write_rgb(&p, &t).unwrap();
        let back = read_rgb(&p).unwrap();
        for (a, b) in back.data().iter().zip(&v) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
