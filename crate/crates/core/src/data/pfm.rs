//! Single-channel PFM (`Pf`) disparity files.
//!
//! Header: `Pf`, `<width> <height>`, `<scale>`, each newline terminated. A
//! negative scale marks little-endian samples. Rows are stored bottom to top.

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PfmError {
    #[error("not a PFM file (magic {0:?})")]
    BadMagic(String),
    #[error("three-channel PFM (`PF`) is not supported, expected single-channel `Pf`")]
    UnsupportedChannels,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("scale must be non-zero")]
    ZeroScale,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first.
    pub data: Vec<f32>,
    /// Absolute value of the header scale.
    pub scale: f32,
}

/// Reads one whitespace-delimited header token; the byte after it is consumed.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> std::result::Result<&'a str, PfmError> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(PfmError::BadHeader("unexpected end of header".into()));
    }
    let tok = std::str::from_utf8(&bytes[start..*pos]).map_err(|_| PfmError::BadHeader("non-ASCII header".into()))?;
    *pos += 1;
    Ok(tok)
}

pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<PfmImage, PfmError> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos).map_err(|_| PfmError::BadMagic(String::new()))?;
    match magic {
        "Pf" => {}
        "PF" => return Err(PfmError::UnsupportedChannels),
        m => return Err(PfmError::BadMagic(m.chars().take(8).collect())),
    }
    let num = |t: &str, what: &str| t.parse::<usize>().map_err(|_| PfmError::BadHeader(format!("bad {what} {t:?}")));
    let width = num(token(bytes, &mut pos)?, "width")?;
    let height = num(token(bytes, &mut pos)?, "height")?;
    let st = token(bytes, &mut pos)?;
    let scale: f32 = st.parse().map_err(|_| PfmError::BadHeader(format!("bad scale {st:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(PfmError::ZeroScale);
    }
    if width == 0 || height == 0 {
        return Err(PfmError::BadHeader(format!("empty image {width}x{height}")));
    }
    let little = scale < 0.0;
    let expected = width * height * 4;
    let payload = bytes.get(pos.min(bytes.len())..).unwrap_or(&[]);
    if payload.len() < expected {
        return Err(PfmError::Truncated { expected, found: payload.len() });
    }
    let mut data = vec![0f32; width * height];
    for (i, chunk) in payload[..expected].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (i / width, i % width);
        data[(height - 1 - row) * width + col] = v;
    }
    Ok(PfmImage { width, height, data, scale: scale.abs() })
}

/// Little-endian encoding with scale 1.
pub fn encode_pfm(data: &[f32], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(data.len(), width * height, "pfm data length");
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(data.len() * 4);
    for row in (0..height).rev() {
        for v in &data[row * width..(row + 1) * width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<PfmImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes).map_err(|e| Error::data(path, e.to_string()))
}

/// Atomic write (temporary file, then rename).
pub fn write_pfm(path: impl AsRef<Path>, data: &[f32], width: usize, height: usize) -> Result<()> {
    let path = path.as_ref();
    super::write_atomic(path, &encode_pfm(data, width, height))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_little_endian_file() {
        let mut bytes = b"Pf\n2 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let img = decode_pfm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.data, vec![1.5, -2.0]);
    }

    #[test]
    fn big_endian_and_bottom_up_rows() {
        let mut bytes = b"Pf\n1 2\n1.0\n".to_vec();
        bytes.extend_from_slice(&7.0f32.to_be_bytes());
        bytes.extend_from_slice(&9.0f32.to_be_bytes());
        // the first stored row is the bottom one
        assert_eq!(decode_pfm(&bytes).unwrap().data, vec![9.0, 7.0]);
    }

    #[test]
    fn distinct_errors() {
        assert_eq!(decode_pfm(b"PF\n1 1\n-1\n\0\0\0\0\0\0\0\0\0\0\0\0"), Err(PfmError::UnsupportedChannels));
        assert!(matches!(decode_pfm(b"P6\n1 1\n255\n"), Err(PfmError::BadMagic(_))));
        assert_eq!(decode_pfm(b"Pf\n1 1\n0\n\0\0\0\0"), Err(PfmError::ZeroScale));
        assert_eq!(decode_pfm(b"Pf\n2 1\n-1\n\0\0\0\0"), Err(PfmError::Truncated { expected: 8, found: 4 }));
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let data: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin() * 1e3).collect();
        let back = decode_pfm(&encode_pfm(&data, 6, 4)).unwrap();
        assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
