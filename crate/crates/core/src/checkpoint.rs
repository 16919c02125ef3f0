//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic "SPKD" | u32 version | u32 spec_len | spec JSON (spec_len bytes)
//! u32 spec_hash (CRC32 of the JSON) | u64 seed | u32 epoch | u32 n_tensors
//! n_tensors × { u32 name_len | name | u32 rank | rank × u32 dims | f32 data }
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Momentum buffers are stored as tensors named `momentum/<param>`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ConvNetSpec, Network};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"SPKD";
pub const FORMAT_VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";
// magic + version + spec_len + hash + seed + epoch + count + crc
const MIN_LEN: usize = 4 + 4 + 4 + 4 + 8 + 4 + 4 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub network: Network<T>,
    pub seed: u64,
    pub epoch: u32,
    /// Optimizer velocity, one tensor per parameter, if saved.
    pub momentum: Option<Vec<Tensor<T>>>,
}

impl<T: Float> Checkpoint<T> {
    pub fn new(network: Network<T>, seed: u64, epoch: u32) -> Self {
        Checkpoint {
            network,
            seed,
            epoch,
            momentum: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.network.spec().to_json();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        put_u32(&mut buf, spec.len() as u32);
        buf.extend_from_slice(spec.as_bytes());
        put_u32(&mut buf, crc32fast::hash(spec.as_bytes()));
        buf.extend_from_slice(&self.seed.to_le_bytes());
        put_u32(&mut buf, self.epoch);

        let mut tensors: Vec<(String, &Tensor<T>)> =
            self.network.named_params().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(m) = &self.momentum {
            for ((name, _), t) in self.network.named_params().zip(m) {
                tensors.push((format!("{MOMENTUM_PREFIX}{name}"), t));
            }
        }
        put_u32(&mut buf, tensors.len() as u32);
        for (name, t) in tensors {
            put_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut buf, d as u32);
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_f32().to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        put_u32(&mut buf, crc);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MIN_LEN {
            return Err(Error::Truncated(format!("{} bytes is shorter than any checkpoint", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Version("missing SPKD magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let spec_len = r.u32()? as usize;
        let spec_bytes = r.take(spec_len)?;
        let hash = r.u32()?;
        if hash != crc32fast::hash(spec_bytes) {
            return Err(Error::Version("architecture hash does not match the stored spec".into()));
        }
        let spec: ConvNetSpec = serde_json::from_slice(spec_bytes)
            .map_err(|e| Error::Version(format!("unreadable architecture spec: {e}")))?;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let epoch = r.u32()?;
        let count = r.u32()? as usize;

        let mut params = Vec::new();
        let mut momentum = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Version("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Truncated("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            let t = Tensor::new(&dims, data).map_err(|e| Error::Version(format!("tensor {name}: {e}")))?;
            match name.strip_prefix(MOMENTUM_PREFIX) {
                Some(base) => momentum.push((base.to_string(), t)),
                None => params.push((name, t)),
            }
        }
        if r.pos != body.len() {
            return Err(Error::Version(format!("{} trailing bytes after tensors", body.len() - r.pos)));
        }
        let network = Network::from_parts(&spec, params)?;
        let momentum = if momentum.is_empty() {
            None
        } else {
            if momentum.len() != network.params().len()
                || momentum.iter().zip(network.named_params()).any(|((mn, mt), (pn, pt))| mn != pn || mt.shape() != pt.shape())
            {
                return Err(Error::Version("momentum buffers do not match parameters".into()));
            }
            Some(momentum.into_iter().map(|(_, t)| t).collect())
        };
        Ok(Checkpoint {
            network,
            seed,
            epoch,
            momentum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Save just the network weights.
pub fn save<T: Float>(net: &Network<T>, path: &Path) -> Result<()> {
    Checkpoint::new(net.clone(), 0, 0).save(path)
}

pub fn load<T: Float>(path: &Path) -> Result<Network<T>> {
    Ok(Checkpoint::load(path)?.network)
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Truncated(format!("needed {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ConvNetSpec {
        ConvNetSpec {
            depth_blocks: 1,
            width: 1,
            num_classes: 3,
            input_size: 8,
            base_width: 2,
        }
    }

    fn sample() -> Checkpoint<f32> {
        let net = Network::build(&spec(), 5).unwrap();
        let momentum = net.params().iter().map(|p| p.map(|v| v * 0.5)).collect();
        Checkpoint {
            network: net,
            seed: 5,
            epoch: 12,
            momentum: Some(momentum),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn truncation_and_corruption() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, 40] {
            let err = Checkpoint::<f32>::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checksum { .. }), "cut {cut}: {err}");
        }
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..10]), Err(Error::Truncated(_))));

        let mut flipped = bytes.clone();
        flipped[60] ^= 0x40;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&flipped), Err(Error::Checksum { .. })));
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        body
    }

    #[test]
    fn version_errors() {
        let bytes = sample().to_bytes();
        let body = bytes[..bytes.len() - 4].to_vec();

        let mut v2 = body.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&reseal(v2)), Err(Error::Version(_))));

        // tamper with the stored spec hash
        let spec_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        let mut bad_hash = body.clone();
        bad_hash[12 + spec_len] ^= 1;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&reseal(bad_hash)), Err(Error::Version(_))));

        // a consistent spec that no longer matches the stored tensors
        let other = ConvNetSpec { num_classes: 4, ..spec() }.to_json();
        assert_eq!(other.len(), spec_len);
        let mut swapped = body.clone();
        swapped[12..12 + spec_len].copy_from_slice(other.as_bytes());
        swapped[12 + spec_len..16 + spec_len].copy_from_slice(&crc32fast::hash(other.as_bytes()).to_le_bytes());
        assert!(matches!(Checkpoint::<f32>::from_bytes(&reseal(swapped)), Err(Error::Version(_))));
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"SPKD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        let spec_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[12..12 + spec_len]).unwrap();
        assert_eq!(serde_json::from_str::<ConvNetSpec>(json).unwrap(), spec());
    }
}
