//! Flat little-endian tensor files.
//!
//! Layout:
//!
//! ```text
//! magic    4 bytes  "ESMT"
//! version  u32      1
//! dtype    u32      1 = f32, 2 = f64
//! rank     u32
//! shape    rank x u64
//! data     product(shape) elements, little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::tensor::{check_shape, Tensor};

pub const MAGIC: &[u8; 4] = b"ESMT";
pub const VERSION: u32 = 1;

fn format_err<S: Into<String>>(msg: S) -> TensorError {
    TensorError::Format(msg.into())
}

/// Encodes raw values with the given shape.
pub fn encode<T: Element>(data: &[T], shape: &[usize]) -> Result<Vec<u8>> {
    check_shape(shape, data.len())?;
    let mut out = Vec::with_capacity(16 + 8 * shape.len() + data.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.code().to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &s in shape {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    out.extend_from_slice(&T::to_le_bytes_vec(data));
    Ok(out)
}

/// Decodes `(values, shape)`; the stored dtype must be `T`.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<(Vec<T>, Vec<usize>)> {
    let mut r = bytes;
    let mut word = [0u8; 4];
    let mut take4 = |r: &mut &[u8], what: &str| -> Result<[u8; 4]> {
        r.read_exact(&mut word).map_err(|_| format_err(format!("truncated header ({what})")))?;
        Ok(word)
    };
    if &take4(&mut r, "magic")? != MAGIC {
        return Err(format_err("bad magic, expected \"ESMT\""));
    }
    let version = u32::from_le_bytes(take4(&mut r, "version")?);
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let code = u32::from_le_bytes(take4(&mut r, "dtype")?);
    let dtype = DType::from_code(code).ok_or_else(|| format_err(format!("unknown dtype code {code}")))?;
    if dtype != T::DTYPE {
        return Err(format_err(format!("stored dtype {} but {} requested", dtype.name(), T::DTYPE.name())));
    }
    let rank = u32::from_le_bytes(take4(&mut r, "rank")?) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| format_err("truncated shape"))?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let need = n * dtype.size();
    if r.len() != need {
        return Err(format_err(format!("payload has {} bytes, shape {shape:?} needs {need}", r.len())));
    }
    let data = T::from_le_bytes_slice(r);
    check_shape(&shape, data.len())?;
    Ok((data, shape))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

impl<T: Element> Tensor<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(self.data(), self.shape()).expect("tensor shapes are valid")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (data, shape) = decode(bytes)?;
        Tensor::new(data, &shape)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
