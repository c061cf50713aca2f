//! DTEN tensor container.
//!
//! Layout: `b"DTEN"`, version byte `0x01`, dtype byte (`0x00` f32, `0x01`
//! f64), ndim byte, `ndim` little-endian `u32` extents, then the row-major
//! little-endian payload. No padding, no footer.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diff::{DType, Scalar, Tensor};

use super::DataError;

pub const MAGIC: &[u8; 4] = b"DTEN";
pub const VERSION: u8 = 0x01;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let dtype = T::DTYPE;
    let mut out = Vec::with_capacity(7 + 4 * t.dims().len() + t.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.tag());
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.to_le_bytes_vec(&mut out);
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>, DataError> {
    let bad = |offset: usize, reason: String| DataError::Format {
        path: None,
        offset,
        reason,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(bad(0, "expected magic \"DTEN\"".into()));
    }
    if bytes.len() < 7 {
        return Err(bad(bytes.len(), "truncated header".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(4, format!("unsupported version {:#04x}", bytes[4])));
    }
    let dtype = DType::from_tag(bytes[5]).ok_or_else(|| bad(5, format!("unknown dtype {:#04x}", bytes[5])))?;
    if dtype != T::DTYPE {
        return Err(bad(
            5,
            format!("dtype mismatch: file holds {dtype:?}, expected {:?}", T::DTYPE),
        ));
    }
    let ndim = bytes[6] as usize;
    let header = 7 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad(
            bytes.len(),
            format!("truncated extents: need {header} header bytes"),
        ));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|k| {
            let o = 7 + 4 * k;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        })
        .collect();
    let n: usize = dims.iter().product();
    let size = dtype.size();
    let expected = header + n * size;
    if bytes.len() < expected {
        return Err(bad(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(bad(expected, "trailing bytes after payload".into()));
    }
    let data = bytes[header..].chunks_exact(size).map(T::from_le_slice).collect();
    Tensor::new(dims, data).map_err(|e| bad(6, e.to_string()))
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<(), DataError> {
    let bytes = encode(t);
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| DataError::io(path, e))
}

pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode(&bytes).map_err(|e| e.at(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.0]).unwrap();
        let b = encode(&t);
        let mut expected = b"DTEN".to_vec();
        expected.extend_from_slice(&[0x01, 0x00, 0x02, 2, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, expected);
    }

    #[test]
    fn scalar_roundtrips() {
        let t = Tensor::scalar(3.25f64);
        let b = encode(&t);
        assert_eq!(b.len(), 7 + 8);
        assert_eq!(decode::<f64>(&b).unwrap(), t);
    }

    #[test]
    fn bad_magic_names_expectation() {
        let mut b = encode(&Tensor::scalar(1.0f32));
        b[0] = b'X';
        let err = decode::<f32>(&b).unwrap_err();
        assert!(err.to_string().contains("DTEN"), "{err}");
        assert!(matches!(err, DataError::Format { offset: 0, .. }));
    }

    #[test]
    fn truncation_and_dtype_mismatch() {
        let b = encode(&Tensor::vector(vec![1.0f32, 2.0, 3.0]));
        let err = decode::<f32>(&b[..b.len() - 2]).unwrap_err();
        assert!(matches!(err, DataError::Format { offset, .. } if offset == b.len() - 2));
        let err = decode::<f64>(&b).unwrap_err();
        assert!(matches!(err, DataError::Format { offset: 5, .. }));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_identical(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|k| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(k as u32) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode::<f32>(&encode(&t)).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
