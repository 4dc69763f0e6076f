//! Binary checkpoint of a network's configuration and posteriors.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "BSEG"  u16 version
//! u32 in_channels, u32 base_channels, u32 depth, u32 latent_dim,
//! u8 skip_connections, u8 bayesian_weights
//! u32 tensor count, then per tensor:
//!     u32 name length, name bytes (UTF-8), u32 rank, u32 × rank extents,
//!     f64 × len means, f64 × len log-variances
//! u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::network::{NetConfig, Param, SegNet};
use crate::variational::GaussianVariational;

pub const MAGIC: &[u8; 4] = b"BSEG";
pub const VERSION: u16 = 1;

pub fn encode_checkpoint(net: &SegNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let c = net.config();
    for v in [c.in_channels, c.base_channels, c.depth, c.latent_dim] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(c.skip_connections as u8);
    out.push(c.bayesian_weights as u8);
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.posterior.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for grid in [&p.posterior.mean, &p.posterior.log_var] {
            for v in grid.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedFile)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or(Error::TruncatedFile)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn flag(v: u8) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::ConfigShapeMismatch(format!(
            "invalid boolean byte {v}"
        ))),
    }
}

/// Validates magic, checksum and version, then rebuilds the network.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<SegNet> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile);
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 4 + 2 + 4 {
        return Err(Error::TruncatedFile);
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut r = Reader {
        bytes: payload,
        pos: 4,
    };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let config = NetConfig {
        in_channels: r.u32()? as usize,
        base_channels: r.u32()? as usize,
        depth: r.u32()? as usize,
        latent_dim: r.u32()? as usize,
        skip_connections: flag(r.u8()?)?,
        bayesian_weights: flag(r.u8()?)?,
    };
    config
        .validate()
        .map_err(|e| Error::ConfigShapeMismatch(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::ConfigShapeMismatch("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mean = Grid::new(&shape, r.f64s(len)?)?;
        let log_var = Grid::new(&shape, r.f64s(len)?)?;
        params.push(Param {
            name,
            posterior: GaussianVariational::new(mean, log_var)?,
        });
    }
    if r.pos != payload.len() {
        return Err(Error::ConfigShapeMismatch(format!(
            "{} trailing bytes after the last tensor",
            payload.len() - r.pos
        )));
    }
    SegNet::from_params(config, params)
}

pub fn save_checkpoint(net: &SegNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SegNet> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and requires it to match `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &NetConfig) -> Result<SegNet> {
    let net = load_checkpoint(path)?;
    if net.config() != expected {
        return Err(Error::ConfigShapeMismatch(format!(
            "checkpoint has {:?}, expected {:?}",
            net.config(),
            expected
        )));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SegNet {
        let cfg = NetConfig {
            base_channels: 2,
            depth: 1,
            latent_dim: 2,
            ..NetConfig::default()
        };
        SegNet::new(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let net = tiny();
        let back = decode_checkpoint(&encode_checkpoint(&net)).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn any_flipped_byte_is_caught() {
        let bytes = encode_checkpoint(&tiny());
        for i in [6, 20, bytes.len() / 2, bytes.len() - 5] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(
                matches!(decode_checkpoint(&bad), Err(Error::ChecksumMismatch { .. })),
                "byte {i}"
            );
        }
    }

    #[test]
    fn version_is_checked_after_checksum() {
        let mut bytes = encode_checkpoint(&tiny());
        bytes.truncate(bytes.len() - 4);
        bytes[4] = 9;
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::VersionMismatch {
                found: 9,
                expected: 1
            })
        ));
    }

    #[test]
    fn wrong_magic_and_truncation() {
        assert!(matches!(
            decode_checkpoint(b"XXXX\x01\x00abcd"),
            Err(Error::BadMagic)
        ));
        assert!(matches!(
            decode_checkpoint(b"BS"),
            Err(Error::TruncatedFile)
        ));
    }
}
