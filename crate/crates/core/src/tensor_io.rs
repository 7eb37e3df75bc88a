//! Binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes       | content                                  |
//! |-------------|------------------------------------------|
//! | 0..4        | magic `VSCI`                             |
//! | 4           | format version (currently 1)             |
//! | 5           | dtype code: 0 = float32, 1 = float64     |
//! | 6           | ndim                                     |
//! | 7..7+4*ndim | dims, `u32` each                         |
//! | rest        | row-major payload                        |

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::cube::VideoCube;
use crate::error::{Error, Result};
use crate::sensing::{DeadPixelPolicy, Measurement, SensingMask};

pub const MAGIC: &[u8; 4] = b"VSCI";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "float32",
            Dtype::F64 => "float64",
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dtype: Dtype,
    pub array: ArrayD<f64>,
}

pub fn encode(array: &ArrayD<f64>, dtype: Dtype) -> Result<Vec<u8>> {
    if array.ndim() > u8::MAX as usize {
        return Err(Error::invalid("tensor has too many dimensions"));
    }
    let mut out = Vec::with_capacity(7 + 4 * array.ndim() + array.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(array.ndim() as u8);
    for &d in array.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in array.iter() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<StoredTensor> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < 7 {
        return Err(truncated(7));
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version: bytes[4],
        });
    }
    let dtype = Dtype::from_code(bytes[5]).ok_or(Error::UnknownDtype {
        path: path.to_path_buf(),
        code: bytes[5],
    })?;
    let ndim = bytes[6] as usize;
    let header = 7 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + count * dtype.size();
    if bytes.len() != expected {
        return Err(truncated(expected));
    }
    let payload = &bytes[header..];
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    let array = ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|_| truncated(expected))?;
    Ok(StoredTensor { dtype, array })
}

pub fn write_tensor(path: impl AsRef<Path>, array: &ArrayD<f64>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(array, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<StoredTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads a tensor and requires it to have been stored as `dtype`.
pub fn read_tensor_as(path: impl AsRef<Path>, dtype: Dtype) -> Result<ArrayD<f64>> {
    let path = path.as_ref();
    let stored = read_tensor(path)?;
    if stored.dtype != dtype {
        return Err(Error::DtypeMismatch {
            path: path.to_path_buf(),
            expected: dtype.name(),
            found: stored.dtype.name(),
        });
    }
    Ok(stored.array)
}

fn expect_ndim(path: &Path, array: &ArrayD<f64>, ndim: usize) -> Result<()> {
    if array.ndim() != ndim {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("expected a {ndim}-d tensor, found shape {:?}", array.shape()),
        });
    }
    Ok(())
}

fn read_3d(path: &Path) -> Result<Array3<f64>> {
    let array = read_tensor(path)?.array;
    expect_ndim(path, &array, 3)?;
    Ok(array.into_dimensionality().expect("checked ndim"))
}

/// Cubes are stored as `[frames, height, width]` float64.
pub fn write_cube(path: impl AsRef<Path>, cube: &VideoCube) -> Result<()> {
    write_tensor(path, &cube.data().clone().into_dyn(), Dtype::F64)
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<VideoCube> {
    VideoCube::from_array(read_3d(path.as_ref())?)
}

/// Measurements are stored as `[height, width]` float64; noise metadata lives
/// in a sidecar written by the caller.
pub fn write_measurement(path: impl AsRef<Path>, y: &Measurement) -> Result<()> {
    write_tensor(path, &y.data.clone().into_dyn(), Dtype::F64)
}

pub fn read_measurement(path: impl AsRef<Path>) -> Result<Measurement> {
    let path = path.as_ref();
    let array = read_tensor(path)?.array;
    expect_ndim(path, &array, 2)?;
    let data: Array2<f64> = array.into_dimensionality().expect("checked ndim");
    Ok(Measurement::noiseless(data))
}

/// Masks are stored as their `[frames, height, width]` modulation values.
pub fn write_mask(path: impl AsRef<Path>, mask: &SensingMask) -> Result<()> {
    write_tensor(path, &mask.frames().clone().into_dyn(), Dtype::F64)
}

pub fn read_mask(path: impl AsRef<Path>, policy: DeadPixelPolicy) -> Result<SensingMask> {
    SensingMask::new(read_3d(path.as_ref())?, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn round_trip_preserves_values() {
        let a = array![[1.5, -2.25], [3.0e-300, f64::MAX]].into_dyn();
        let bytes = encode(&a, Dtype::F64).unwrap();
        let back = decode(&bytes, p()).unwrap();
        assert_eq!(back.dtype, Dtype::F64);
        assert_eq!(back.array, a);
        assert_eq!(encode(&back.array, Dtype::F64).unwrap(), bytes);
    }

    #[test]
    fn header_layout_is_fixed() {
        let a = array![[1.0f64, 2.0, 3.0]].into_dyn();
        let bytes = encode(&a, Dtype::F32).unwrap();
        assert_eq!(&bytes[..7], &[b'V', b'S', b'C', b'I', 1, 0, 2]);
        assert_eq!(&bytes[7..15], &[1, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 15 + 3 * 4);
        assert_eq!(&bytes[15..19], &1.0f32.to_le_bytes());
    }

    #[test]
    fn float32_storage_rounds_values() {
        let a = array![0.1f64, 0.2].into_dyn();
        let back = decode(&encode(&a, Dtype::F32).unwrap(), p()).unwrap();
        assert_eq!(back.dtype, Dtype::F32);
        assert_eq!(back.array[0], 0.1f32 as f64);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = encode(&array![1.0].into_dyn(), Dtype::F64).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, p()), Err(Error::BadMagic { .. })));
        assert!(matches!(decode(b"VS", p()), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn payload_length_mismatch_is_truncation() {
        let bytes = encode(&array![[1.0, 2.0], [3.0, 4.0]].into_dyn(), Dtype::F64).unwrap();
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(short, p()), Err(Error::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long, p()), Err(Error::Truncated { .. })));
        assert!(matches!(decode(&bytes[..9], p()), Err(Error::Truncated { .. })));
    }

    #[test]
    fn unknown_dtype_and_version_are_rejected() {
        let mut bytes = encode(&array![1.0].into_dyn(), Dtype::F64).unwrap();
        bytes[5] = 7;
        assert!(matches!(decode(&bytes, p()), Err(Error::UnknownDtype { code: 7, .. })));
        bytes[5] = 1;
        bytes[4] = 9;
        assert!(matches!(decode(&bytes, p()), Err(Error::UnsupportedVersion { .. })));
    }

    #[test]
    fn typed_read_reports_dtype_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vsci");
        write_tensor(&path, &array![1.0, 2.0].into_dyn(), Dtype::F32).unwrap();
        assert!(matches!(
            read_tensor_as(&path, Dtype::F64),
            Err(Error::DtypeMismatch { .. })
        ));
        assert_eq!(read_tensor_as(&path, Dtype::F32).unwrap().len(), 2);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_tensor("/nonexistent/x.vsci"), Err(Error::Io { .. })));
    }
}
