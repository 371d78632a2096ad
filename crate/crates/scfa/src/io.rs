//! Binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `SCFA`                            |
//! | 4      | 4    | version, `u32` = 1                      |
//! | 8      | 1    | bytes per element, 4 or 8               |
//! | 9      | 32   | extents `B, H, T, D` as `u64`           |
//! | 41     | ...  | IEEE-754 values in head-major order     |

use std::fs;
use std::path::Path;

use scfa_core::{Element, Layout, Precision, Shape4, Tensor4};

pub const MAGIC: &[u8; 4] = b"SCFA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 41;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("byte {offset}: {message}")]
    Malformed { offset: u64, message: String },
}

fn malformed(offset: usize, message: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        offset: offset as u64,
        message: message.into(),
    }
}

/// A tensor of either stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor4<f32>),
    F64(Tensor4<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> Shape4 {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            AnyTensor::F32(_) => Precision::F32,
            AnyTensor::F64(_) => Precision::F64,
        }
    }

    /// The tensor at 64-bit, widening 32-bit values exactly.
    pub fn to_f64(&self) -> Tensor4<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.clone(),
        }
    }
}

impl From<Tensor4<f32>> for AnyTensor {
    fn from(t: Tensor4<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor4<f64>> for AnyTensor {
    fn from(t: Tensor4<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

pub fn encode<T: Element>(tensor: &Tensor4<T>) -> Vec<u8> {
    let s = tensor.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + s.numel() * T::PRECISION.bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::PRECISION.bytes() as u8);
    for extent in [s.batch, s.heads, s.len, s.dim] {
        out.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    for &x in tensor.to_layout(Layout::HeadMajor).data() {
        x.extend_le(&mut out);
    }
    out
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"))
}

fn decode_values<T: Element>(shape: Shape4, payload: &[u8]) -> Result<Tensor4<T>, FormatError> {
    let width = T::PRECISION.bytes();
    let data: Vec<T> = payload.chunks_exact(width).map(T::from_le).collect();
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(malformed(HEADER_LEN + i * width, "non-finite value"));
    }
    Tensor4::from_vec(shape, Layout::HeadMajor, data).map_err(|e| malformed(HEADER_LEN, e.to_string()))
}

/// Parses a complete file image. Nothing is returned unless every byte
/// checks out.
pub fn decode(bytes: &[u8]) -> Result<AnyTensor, FormatError> {
    if bytes.len() < HEADER_LEN {
        return Err(malformed(
            bytes.len(),
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(malformed(0, "bad magic, expected \"SCFA\""));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice"));
    if version != VERSION {
        return Err(malformed(4, format!("unsupported version {version}")));
    }
    let precision = match bytes[8] {
        4 => Precision::F32,
        8 => Precision::F64,
        other => return Err(malformed(8, format!("element width {other} is neither 4 nor 8"))),
    };
    let mut extents = [0usize; 4];
    for (i, e) in extents.iter_mut().enumerate() {
        let at = 9 + 8 * i;
        let v = read_u64(bytes, at);
        *e = usize::try_from(v)
            .ok()
            .filter(|&x| x >= 1)
            .ok_or_else(|| malformed(at, format!("invalid extent {v}")))?;
    }
    let shape = Shape4::new(extents[0], extents[1], extents[2], extents[3]).map_err(|e| malformed(9, e.to_string()))?;
    let expected = extents
        .iter()
        .try_fold(precision.bytes(), |acc, &e| acc.checked_mul(e))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| malformed(9, "extents overflow the addressable size"))?;
    if bytes.len() < expected {
        return Err(malformed(
            bytes.len(),
            format!(
                "truncated data: file has {} bytes, extents need {expected}",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(malformed(
            expected,
            format!("{} trailing bytes", bytes.len() - expected),
        ));
    }
    let payload = &bytes[HEADER_LEN..];
    Ok(match precision {
        Precision::F32 => AnyTensor::F32(decode_values(shape, payload)?),
        Precision::F64 => AnyTensor::F64(decode_values(shape, payload)?),
    })
}

pub fn write_tensor<T: Element>(path: impl AsRef<Path>, tensor: &Tensor4<T>) -> Result<(), FormatError> {
    let path = path.as_ref();
    fs::write(path, encode(tensor)).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor, FormatError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
