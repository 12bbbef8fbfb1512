//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "RSRB" | version | entry count
//! per entry: name length | name (UTF-8) | rank | extents... | f32 payload
//! CRC32 of every preceding byte
//! ```

use std::io;
use std::path::Path;

use thiserror::Error;

use crate::network::{Network, NetworkConfig, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RSRB";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("malformed entry: {0}")]
    Malformed(String),
    #[error("{0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn u32_of(n: usize, what: &str) -> u32 {
    u32::try_from(n).unwrap_or_else(|_| panic!("{what} {n} does not fit the checkpoint format"))
}

pub fn encode(params: &ParamSet<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(params.len(), "entry count").to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&u32_of(name.len(), "name length").to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.rank(), "rank").to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "extent").to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet<f32>, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(if bytes.len() < 4 && MAGIC.starts_with(bytes) {
            CheckpointError::Truncated(bytes.len())
        } else {
            CheckpointError::Magic
        });
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: extents {shape:?} overflow")))?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        if entries.iter().any(|(n, _): &(String, _)| *n == name) {
            return Err(CheckpointError::Malformed(format!("duplicate entry {name}")));
        }
        entries.push((name, t));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(ParamSet::new(entries))
}

pub fn save(path: &Path, params: &ParamSet<f32>) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet<f32>, CheckpointError> {
    decode(&std::fs::read(path)?)
}

/// Loads a checkpoint into a network of the given configuration. A manifest
/// mismatch lists every missing, unexpected or reshaped tensor.
pub fn load_network(path: &Path, config: NetworkConfig) -> Result<Network<f32>, CheckpointError> {
    Network::from_params(config, load(path)?).map_err(CheckpointError::Manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::RegionModule;

    fn small() -> NetworkConfig {
        NetworkConfig {
            hidden_width: 8,
            score_hidden: 4,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let net = Network::<f32>::new(small(), 3).unwrap();
        let mut params = net.params().clone();
        // awkward values must survive too
        params.tensor_mut(0).data_mut()[..4].copy_from_slice(&[-0.0, f32::MIN_POSITIVE / 2.0, f32::MAX, 1e-38]);
        let back = decode(&encode(&params)).unwrap();
        assert_eq!(back.manifest(), params.manifest());
        for ((_, a), (_, b)) in back.iter().zip(params.iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(Network::<f32>::new(small(), 1).unwrap().params());
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode(&flipped), Err(CheckpointError::Crc { .. })));
        for cut in [0, 2, 10, 100, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(CheckpointError::Magic)));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(decode(&version), Err(CheckpointError::Version(9))));
    }

    #[test]
    fn manifest_mismatch_is_itemized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save(&path, Network::<f32>::new(small(), 1).unwrap().params()).unwrap();
        let other = NetworkConfig {
            n_maps: 3,
            hidden_width: 9,
            ..small()
        };
        let msg = load_network(&path, other).unwrap_err().to_string();
        assert!(msg.contains("shape of region.conv2.weight"), "{msg}");
        assert!(msg.contains("shape of value.fc1.mu_w"), "{msg}");
        let off = NetworkConfig {
            region: RegionModule::Off,
            ..small()
        };
        let msg = load_network(&path, off).unwrap_err().to_string();
        assert!(msg.contains("unexpected region.conv1.weight"), "{msg}");
        assert!(load_network(&path, small()).is_ok());
    }
}
