//! `SSF1` feature files: 4-byte magic, frame count and dimension as
//! little-endian `u32`, then `m * d` little-endian `f32` values row-major.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"SSF1";
pub const HEADER_LEN: usize = 12;

/// One utterance: an `m x d` frame matrix plus ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub utterance_id: String,
    pub speaker_id: String,
    pub frames: Tensor,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

pub fn encode_features(frames: &Tensor) -> Result<Vec<u8>> {
    if !frames.is_finite() {
        return Err(Error::contract("refusing to write non-finite features"));
    }
    let m = u32::try_from(frames.rows()).map_err(|_| Error::contract("too many frames"))?;
    let d = u32::try_from(frames.cols()).map_err(|_| Error::contract("dimension too large"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * frames.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&m.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for &v in frames.data() {
        let v32 = v as f32;
        if !v32.is_finite() {
            return Err(Error::contract("feature value overflows f32"));
        }
        out.extend_from_slice(&v32.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic, expected SSF1"));
    }
    let m = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = m
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(path, "header extents overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "file is {} bytes, header implies {expected} ({m} frames x {d} dims)",
                bytes.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(m * d);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::format(
                path,
                format!("non-finite value at frame {}, dim {}", i / d, i % d),
            ));
        }
        data.push(f64::from(v));
    }
    Tensor::new(m, d, data)
}

pub fn write_features(path: &Path, frames: &Tensor) -> Result<()> {
    let bytes = encode_features(frames)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
    decode_features(&bytes, path)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn round_trip_is_bit_identical_at_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::from_fn(5, 13, |_, _| f64::from(rng.random_range(-3.0f32..3.0)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ssf");
        write_features(&path, &t).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 12 + 4 * 5 * 13);
        let back = read_features(&path).unwrap();
        assert_eq!(back, t);
        write_features(&path, &back).unwrap();
        assert_eq!(read_features(&path).unwrap(), t);
    }

    #[test]
    fn empty_file_is_valid() {
        let bytes = encode_features(&Tensor::zeros(0, 13)).unwrap();
        assert_eq!(bytes.len(), 12);
        let t = decode_features(&bytes, Path::new("x")).unwrap();
        assert_eq!(t.shape(), [0, 13]);
    }

    #[test]
    fn size_mismatch_rejected() {
        let mut bytes = encode_features(&Tensor::zeros(2, 3)).unwrap();
        bytes.pop();
        assert!(matches!(
            decode_features(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
        bytes.extend_from_slice(&[0, 0, 0, 0, 0]);
        assert!(decode_features(&bytes, Path::new("x")).is_err());
        assert!(decode_features(&bytes[..7], Path::new("x")).is_err());
    }

    #[test]
    fn bad_magic_and_nan_rejected() {
        let mut bytes = encode_features(&Tensor::zeros(1, 2)).unwrap();
        bytes[0] = b'X';
        let err = decode_features(&bytes, Path::new("f.ssf")).unwrap_err();
        assert!(err.to_string().contains("magic"));
        let mut bytes = encode_features(&Tensor::zeros(1, 2)).unwrap();
        bytes[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_features(&bytes, Path::new("x")).is_err());
        assert!(encode_features(&Tensor::filled(1, 1, f64::INFINITY)).is_err());
    }
}
