//! Binary checkpoint, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `RGBXCKPT` |
//! | 4     | u32 format version (1) |
//! | 20    | u32 levels, base_channels, blocks_per_level, in_channels, out_channels |
//! | 1     | u8 block kind: 0 ReZero, 1 BN |
//! | 8     | u64 parameter value count P |
//! | 8·P   | f64 parameter values, tensors in declaration order, row-major |
//! | 8     | u64 running-stat value count R |
//! | 8·R   | f64 per norm layer: C means then C variances |
//!
//! Nothing may follow. See `docs/checkpoint-format.md` for the parameter
//! declaration order.

use std::path::Path;

use super::{BlockKind, NetConfig, Network};
use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RGBXCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {} (wanted {n} more)", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self) -> std::result::Result<Vec<f64>, String> {
        let n = self.u64()? as usize;
        let bytes = self.take(n.checked_mul(8).ok_or("count overflow")?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl<T: Real> Network<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + 8 * self.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            c.levels,
            c.base_channels,
            c.blocks_per_level,
            c.in_channels,
            c.out_channels,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(match c.block_kind {
            BlockKind::ReZero => 0,
            BlockKind::BN => 1,
        });
        out.extend_from_slice(&(self.parameter_count() as u64).to_le_bytes());
        for p in &self.params {
            for &v in p.data() {
                out.extend_from_slice(&to_f64(v).to_le_bytes());
            }
        }
        let running = self.flat_running();
        out.extend_from_slice(&(running.len() as u64).to_le_bytes());
        for v in running {
            out.extend_from_slice(&to_f64(v).to_le_bytes());
        }
        out
    }

    /// Parses a checkpoint; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).map_err(bad)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32().map_err(bad)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32().map_err(bad)? as usize;
        }
        let block_kind = match r.take(1).map_err(bad)?[0] {
            0 => BlockKind::ReZero,
            1 => BlockKind::BN,
            k => return Err(bad(format!("unknown block kind {k}"))),
        };
        let config = NetConfig {
            levels: dims[0],
            base_channels: dims[1],
            blocks_per_level: dims[2],
            in_channels: dims[3],
            out_channels: dims[4],
            block_kind,
        };
        config.validate().map_err(|e| bad(e.to_string()))?;
        let params: Vec<T> = r.f64s().map_err(bad)?.into_iter().map(lit).collect();
        let running: Vec<T> = r.f64s().map_err(bad)?.into_iter().map(lit).collect();
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Self::from_parts(config, &params, &running).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn round_trip_is_bitwise() {
        let mut net =
            Network::<f64>::new(NetConfig::toy().with_block_kind(BlockKind::BN), 7).unwrap();
        net.running[1].mean[2] = 0.25;
        let bytes = net.to_bytes();
        let back = Network::<f64>::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.running_stats(), net.running_stats());
        assert_eq!(back.to_bytes(), bytes);
        let input = Tensor::full(vec![1, 5, 4, 4], 0.3);
        assert_eq!(
            back.predict_tensor(input.clone()).unwrap(),
            net.predict_tensor(input).unwrap()
        );
    }

    #[test]
    fn header_layout() {
        let bytes = Network::<f64>::new(NetConfig::toy(), 0).unwrap().to_bytes();
        assert_eq!(&bytes[..8], b"RGBXCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(bytes[32], 0);
        assert_eq!(u64::from_le_bytes(bytes[33..41].try_into().unwrap()), 9510);
        assert_eq!(bytes.len(), 41 + 8 * 9510 + 8);
    }

    #[test]
    fn malformed_input_is_a_format_error() {
        let bytes = Network::<f64>::new(NetConfig::toy(), 0).unwrap().to_bytes();
        let p = Path::new("x.ckpt");
        for bad in [
            &bytes[..20],
            &bytes[..bytes.len() - 1],
            b"NOTACKPT0000".as_slice(),
        ] {
            let err = Network::<f64>::from_bytes(bad, p).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{err}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Network::<f64>::from_bytes(&extra, p).is_err());
    }
}
