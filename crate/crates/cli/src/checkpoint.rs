//! Binary solver checkpoints. Little-endian throughout:
//!
//! ```text
//! magic "KLDCKPT\0" | version u32 | label (u32 len + utf8) | config hash [32]
//! | step u64 | array count u32 | per array: u64 len + f64 values | sha256 of all before [32]
//! ```
//! Values are stored bit for bit, so a resumed run continues exactly.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::output::write_bytes;
use crate::CliError;

const MAGIC: &[u8; 8] = b"KLDCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Which solver wrote it, e.g. `twopi/hfb`.
    pub label: String,
    pub config_hash: [u8; 32],
    pub step: u64,
    pub arrays: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let n: usize = self.arrays.iter().map(|a| 8 + 8 * a.len()).sum();
        let mut b = Vec::with_capacity(64 + self.label.len() + n + 32);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.label.len() as u32).to_le_bytes());
        b.extend_from_slice(self.label.as_bytes());
        b.extend_from_slice(&self.config_hash);
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            b.extend_from_slice(&(a.len() as u64).to_le_bytes());
            for v in a {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = Sha256::digest(&b);
        b.extend_from_slice(&sum);
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CliError> {
        let bad = |m: &str| CliError::Config(format!("checkpoint: {m}"));
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { b: body, at: 8 };
        if r.u32().ok_or_else(|| bad("truncated"))? != VERSION {
            return Err(bad("unsupported version"));
        }
        let ll = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let label = String::from_utf8(r.take(ll).ok_or_else(|| bad("truncated"))?.to_vec())
            .map_err(|_| bad("label is not UTF-8"))?;
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32).ok_or_else(|| bad("truncated"))?);
        let step = r.u64().ok_or_else(|| bad("truncated"))?;
        let count = r.u32().ok_or_else(|| bad("truncated"))?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u64().ok_or_else(|| bad("truncated"))? as usize;
            let raw =
                r.take(len.checked_mul(8).ok_or_else(|| bad("corrupt length"))?).ok_or_else(|| bad("truncated"))?;
            arrays.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
        }
        if r.at != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { label, config_hash, step, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        write_bytes(path, &self.encode()).map(|_| ())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let b = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::decode(&b)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n)?;
        let s = self.b.get(self.at..end)?;
        self.at = end;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_le_bytes(s.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|s| u64::from_le_bytes(s.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            label: "twopi/hfb".into(),
            config_hash: [7; 32],
            step: 500,
            arrays: vec![vec![1.0, -0.0, f64::MIN_POSITIVE, f64::NAN], vec![], vec![3.5]],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let d = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(d.label, c.label);
        assert_eq!(d.step, 500);
        for (a, b) in d.arrays.iter().zip(&c.arrays) {
            assert_eq!(
                a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut b = sample().encode();
        b[30] ^= 1;
        assert!(Checkpoint::decode(&b).is_err());
        let b = sample().encode();
        assert!(Checkpoint::decode(&b[..b.len() - 1]).is_err());
        assert!(Checkpoint::decode(b"hello").is_err());
    }
}
