//! Fixed-layout binary checkpoint of `(x, y, z, t)`.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic   8 bytes  "CBSOCKPT"
//! version u32      = 1
//! flags   u32      = 0
//! t       u64
//! d_x     u64
//! d_y     u64
//! d_z     u64
//! x       d_x * f64
//! y       d_y * f64
//! z       d_z * f64
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamVector;

pub const MAGIC: &[u8; 8] = b"CBSOCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub t: u64,
    pub x: ParamVector,
    pub y: ParamVector,
    pub z: ParamVector,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + 8 * (self.x.dim() + self.y.dim() + self.z.dim()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&self.t.to_le_bytes());
        for p in [&self.x, &self.y, &self.z] {
            out.extend_from_slice(&(p.dim() as u64).to_le_bytes());
        }
        for p in [&self.x, &self.y, &self.z] {
            for v in p.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 48 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let t = u64_at(16);
        let dims = [u64_at(24) as usize, u64_at(32) as usize, u64_at(40) as usize];
        let need = 48 + 8 * dims.iter().sum::<usize>();
        if bytes.len() != need {
            return Err(Error::Checkpoint(format!(
                "length {} does not match header ({need})",
                bytes.len()
            )));
        }
        let mut off = 48;
        let mut take = |d: usize| {
            let v: Vec<f64> = (0..d)
                .map(|i| f64::from_le_bytes(bytes[off + 8 * i..off + 8 * i + 8].try_into().unwrap()))
                .collect();
            off += 8 * d;
            ParamVector::new(v)
        };
        let x = take(dims[0])?;
        let y = take(dims[1])?;
        let z = take(dims[2])?;
        Ok(Self { t, x, y, z })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            t: 42,
            x: ParamVector::new(vec![1.5, -2.0]).unwrap(),
            y: ParamVector::new(vec![0.1, 0.2, 0.3]).unwrap(),
            z: ParamVector::new(vec![f64::MIN_POSITIVE]).unwrap(),
        }
    }

    #[test]
    fn layout_is_fixed() {
        let b = sample().to_bytes();
        assert_eq!(&b[..8], b"CBSOCKPT");
        assert_eq!(b.len(), 48 + 8 * 6);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 42);
        assert_eq!(f64::from_le_bytes(b[48..56].try_into().unwrap()), 1.5);
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), sample());
    }

    #[test]
    fn rejects_corruption() {
        let mut b = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        b[8] = 9;
        assert!(Checkpoint::from_bytes(&b).is_err());
        assert!(Checkpoint::from_bytes(b"short").is_err());
    }
}
