//! Binary container for named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "CRATCKPT"
//! version   u32
//! meta_len  u64, then meta_len bytes of UTF-8 (free-form, JSON by convention)
//! count     u64
//! count x { name_len u32, name bytes, rows u64, cols u64, rows*cols f64 }
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Array2;

pub const MAGIC: &[u8; 8] = b"CRATCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub arrays: Vec<(String, Array2)>,
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.metadata.len() as u64).to_le_bytes())?;
        w.write_all(self.metadata.as_bytes())?;
        w.write_all(&(self.arrays.len() as u64).to_le_bytes())?;
        for (name, arr) in &self.arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(arr.rows() as u64).to_le_bytes())?;
            w.write_all(&(arr.cols() as u64).to_le_bytes())?;
            for v in arr.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = read_len(r, "metadata")?;
        let mut meta = vec![0u8; meta_len];
        read_exact(r, &mut meta)?;
        let metadata = String::from_utf8(meta)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;

        let count = read_len(r, "array count")?;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = u32::from_le_bytes(read_array(r)?) as usize;
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let rows = read_len(r, "rows")?;
            let cols = read_len(r, "cols")?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` shape overflows")))?;
            let mut data = Vec::with_capacity(n.min(1 << 24));
            for _ in 0..n {
                data.push(f64::from_le_bytes(read_array(r)?));
            }
            arrays.push((name, Array2::from_vec(rows, cols, data)?));
        }
        Ok(Self { metadata, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref())?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_len(r: &mut impl Read, what: &str) -> Result<usize> {
    let v = u64::from_le_bytes(read_array(r)?);
    usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} too large")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            metadata: r#"{"k":6}"#.into(),
            arrays: vec![
                (
                    "a".into(),
                    Array2::from_rows(&[vec![1.0, -0.0, f64::MIN_POSITIVE]]),
                ),
                ("empty".into(), Array2::zeros(0, 5)),
                ("b".into(), Array2::scalar(std::f64::consts::PI)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.metadata, ck.metadata);
        assert_eq!(back.arrays[0].1.data()[1].to_bits(), (-0.0_f64).to_bits());
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::read_from(&mut &bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
        let mut future = bytes;
        future[8] = 99;
        let err = Checkpoint::read_from(&mut future.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
