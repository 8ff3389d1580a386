//! `SSCK` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SSCK" | version u32 | kind str | config str | stage u8 | step u64 | seed u64 | rng_pos u128
//! | blob count u32 | { name str | rows u32 | cols u32 | rows*cols f32 } ...
//! ```
//!
//! where `str` is a u32 byte length followed by UTF-8 bytes. Values are stored
//! as 32-bit floats, so a reload rounds parameters to single precision.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the blobs belong to, e.g. `"sparsespeech"` or `"probe"`.
    pub kind: String,
    /// Echo of the configuration the run used, as TOML.
    pub config: String,
    pub stage: u8,
    pub step: u64,
    pub seed: u64,
    /// Word position of the training random stream.
    pub rng_pos: u128,
    pub blobs: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn blob(&self, name: &str) -> Option<&Tensor> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind)?;
        put_str(&mut out, &self.config)?;
        out.push(self.stage);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.rng_pos.to_le_bytes());
        out.extend_from_slice(&len_u32(self.blobs.len())?.to_le_bytes());
        for (name, t) in &self.blobs {
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    op: "checkpoint blob",
                });
            }
            put_str(&mut out, name)?;
            out.extend_from_slice(&len_u32(t.rows())?.to_le_bytes());
            out.extend_from_slice(&len_u32(t.cols())?.to_le_bytes());
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.fail("bad magic, not an SSCK checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(&format!("unsupported checkpoint version {version}")));
        }
        let kind = r.string()?;
        let config = r.string()?;
        let stage = r.take(1)?[0];
        let step = r.u64()?;
        let seed = r.u64()?;
        let rng_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| r.fail("blob size overflows"))?;
            let raw = r.take(n)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(r.fail(&format!("blob `{name}` holds non-finite values")));
            }
            blobs.push((name, Tensor::new(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes after last blob"));
        }
        Ok(Checkpoint {
            kind,
            config,
            stage,
            step,
            seed,
            rng_pos,
            blobs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::decode(&bytes, path)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n)
        .map_err(|_| Error::contract(format!("length {n} does not fit the checkpoint format")))
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend_from_slice(&len_u32(s.len())?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: &str) -> Error {
        Error::format(self.path, format!("{detail} (at byte {})", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail("string is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: "sparsespeech".into(),
            config: "seed = 3\n".into(),
            stage: 2,
            step: 41,
            seed: 3,
            rng_pos: 1 << 70,
            blobs: vec![
                (
                    "a".into(),
                    Tensor::from_fn(2, 3, |r, c| r as f64 - 0.25 * c as f64),
                ),
                ("b".into(), Tensor::scalar(1.5)),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let bytes = ck.encode().unwrap();
        assert_eq!(&bytes[..4], b"SSCK");
        let back = Checkpoint::decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.blob("b").unwrap().item(), 1.5);
    }

    #[test]
    fn values_are_rounded_to_single_precision() {
        let mut ck = sample();
        ck.blobs = vec![("x".into(), Tensor::scalar(0.1))];
        let back = Checkpoint::decode(&ck.encode().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back.blobs[0].1.item(), 0.1f32 as f64);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().encode().unwrap();
        for cut in [0, 3, 10, bytes.len() - 1] {
            let err = Checkpoint::decode(&bytes[..cut], Path::new("ck")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "{err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad, Path::new("ck")).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::decode(&long, Path::new("ck")).is_err());
    }
}
