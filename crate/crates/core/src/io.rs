//! On-disk formats: LTSR tensors, PGM images, JSON helpers.
//!
//! LTSR v1 layout: magic `LTSR`, version byte (1), dtype byte (1 = f64,
//! 2 = f32), rank byte, then rank little-endian u32 extents, then the
//! elements little-endian in row-major order. Every tensor the pipeline
//! persists goes through this format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

const MAGIC: &[u8; 4] = b"LTSR";
const VERSION: u8 = 1;

pub fn write_tensor<S: Scalar>(path: &Path, tensor: &TensorBase<S>) -> Result<()> {
    if !tensor.is_finite() {
        return Err(Error::NonFinite(format!("tensor written to {}", path.display())));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(7 + 4 * tensor.shape().len());
    header.extend_from_slice(MAGIC);
    header.push(VERSION);
    header.push(S::LTSR_DTYPE);
    header.push(tensor.shape().len() as u8);
    for &dim in tensor.shape() {
        if dim > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!("axis {} exceeds u32", dim)));
        }
        header.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    let elem = std::mem::size_of::<S>();
    let mut buf = Vec::with_capacity(tensor.numel() * elem);
    for &v in tensor.data() {
        match S::LTSR_DTYPE {
            1 => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
            _ => buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor<S: Scalar>(path: &Path) -> Result<TensorBase<S>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

    if bytes.len() < 7 {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic, not an LTSR file"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(path, format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != S::LTSR_DTYPE {
        return Err(Error::format(
            path,
            format!("dtype code {} does not match requested element type", bytes[5]),
        ));
    }
    let rank = bytes[6] as usize;
    if rank == 0 {
        return Err(Error::format(path, "rank 0 tensor"));
    }
    let dims_end = 7 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::format(path, "truncated dimension list"));
    }
    let mut shape = Vec::with_capacity(rank);
    for axis in 0..rank {
        let off = 7 + 4 * axis;
        let dim = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(Error::format(path, "zero-length axis"));
        }
        shape.push(dim);
    }
    let numel: usize = shape.iter().product();
    let elem = std::mem::size_of::<S>();
    let expected = dims_end + numel * elem;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {}", bytes.len() - dims_end, numel * elem),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    match S::LTSR_DTYPE {
        1 => {
            for chunk in bytes[dims_end..].chunks_exact(8) {
                data.push(S::of(f64::from_le_bytes(chunk.try_into().unwrap())));
            }
        }
        _ => {
            for chunk in bytes[dims_end..].chunks_exact(4) {
                data.push(S::of(f64::from(f32::from_le_bytes(chunk.try_into().unwrap()))));
            }
        }
    }
    TensorBase::new(&shape, data)
}

/// Writes an 8-bit binary PGM (P5) image.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "pgm {}x{} wants {} pixels, got {}",
            width,
            height,
            width * height,
            pixels.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{} {}\n255\n", width, height).map_err(|e| Error::io(path, e))?;
    w.write_all(pixels).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Json { path: path.into(), cause: e })?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Json { path: path.into(), cause: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ltsr");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let t = TensorBase::new(&[2, 3, 4], data).unwrap();
        write_tensor(&path, &t).unwrap();
        let back: TensorBase<f64> = read_tensor(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn f32_round_trip_uses_dtype_two() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t32.ltsr");
        let t = TensorBase::<f32>::new(&[3], vec![1.0, -2.5, 0.125]).unwrap();
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes[5], 2);
        let back: TensorBase<f32> = read_tensor(&path).unwrap();
        assert_eq!(t, back);
        // Reading with the wrong element type is refused, not coerced.
        assert!(read_tensor::<f64>(&path).is_err());
    }

    #[test]
    fn header_layout_matches_the_spec() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ltsr");
        let t = TensorBase::<f64>::new(&[2, 5], vec![0.0; 10]).unwrap();
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"LTSR");
        assert_eq!(bytes[4], 1); // version
        assert_eq!(bytes[5], 1); // f64 dtype
        assert_eq!(bytes[6], 2); // rank
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[11..15].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), 15 + 10 * 8);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ltsr");
        std::fs::write(&path, b"LTSRx").unwrap();
        assert!(read_tensor::<f64>(&path).is_err());
        std::fs::write(&path, b"NOPE\x01\x01\x01\x02\x00\x00\x00").unwrap();
        assert!(read_tensor::<f64>(&path).is_err());
        // Truncated payload.
        let good = TensorBase::<f64>::new(&[4], vec![1.0; 4]).unwrap();
        write_tensor(&path, &good).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_tensor::<f64>(&path).is_err());
    }

    #[test]
    fn non_finite_tensors_are_not_written() {
        let dir = tempfile::tempdir().unwrap();
        let t = TensorBase::<f64>::new(&[2], vec![1.0, f64::NAN]).unwrap();
        assert!(write_tensor(&dir.path().join("nan.ltsr"), &t).is_err());
    }

    #[test]
    fn pgm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        write_pgm(&path, 3, 2, &[0, 128, 255, 1, 2, 3]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 128, 255, 1, 2, 3]);
    }
}
