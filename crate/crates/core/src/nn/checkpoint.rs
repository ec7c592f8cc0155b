//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "WNETCKPT"
//! version      u32      1
//! input_size   u32
//! channels     u32
//! k            u32
//! depth        u32
//! base_chans   u32
//! separable    u8
//! batch_norm   u8
//! dropout_p    f64
//! iteration    u64      completed training iterations
//! seed         u64
//! count        u32      number of tensors
//! per tensor:  name_len u32, name (utf-8), len u64, len x f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::wnet::{WNet, WNetConfig};
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const MAGIC: &[u8; 8] = b"WNETCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: WNetConfig,
    pub iteration: u64,
    pub seed: u64,
    pub tensors: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn capture(net: &mut WNet<f32>, iteration: u64, seed: u64) -> Self {
        let tensors = net
            .slots()
            .into_iter()
            .map(|(_, s)| (s.name, s.value.clone()))
            .collect();
        Self {
            config: net.config,
            iteration,
            seed,
            tensors,
        }
    }

    pub fn restore(&self) -> Result<WNet<f32>> {
        let mut net = WNet::<f32>::build(self.config, &mut Rng::new(self.seed))?;
        let wide: Vec<(String, Vec<f64>)> = self
            .tensors
            .iter()
            .map(|(n, v)| (n.clone(), v.iter().map(|x| *x as f64).collect()))
            .collect();
        net.import(&wide)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [c.input_size, c.channels, c.k, c.depth, c.base_channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(c.separable as u8);
        out.push(c.batch_norm as u8);
        out.extend_from_slice(&c.dropout_p.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, data) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let separable = r.take(1)?[0] != 0;
        let batch_norm = r.take(1)?[0] != 0;
        let dropout_p = f64::from_le_bytes(r.array()?);
        let config = WNetConfig {
            input_size: dims[0],
            channels: dims[1],
            k: dims[2],
            depth: dims[3],
            base_channels: dims[4],
            separable,
            batch_norm,
            dropout_p,
        };
        config.validate()?;
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| {
                Error::Checkpoint("tensor length overflows".into())
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((name, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            iteration,
            seed,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WNetConfig {
        WNetConfig {
            input_size: 8,
            depth: 2,
            base_channels: 2,
            k: 3,
            ..WNetConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut net = WNet::<f32>::build(small(), &mut Rng::new(4)).unwrap();
        net.encoder.down[0].bn_a.as_mut().unwrap().running_mean[0] = 0.25;
        let ck = Checkpoint::capture(&mut net, 17, 4);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(ck, back);
        let mut restored = back.restore().unwrap();
        assert_eq!(restored.export(), net.export());
    }

    #[test]
    fn bad_version_and_magic_rejected() {
        let mut net = WNet::<f32>::build(small(), &mut Rng::new(4)).unwrap();
        let mut bytes = Checkpoint::capture(&mut net, 0, 4).to_bytes();
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncation_rejected() {
        let mut net = WNet::<f32>::build(small(), &mut Rng::new(4)).unwrap();
        let bytes = Checkpoint::capture(&mut net, 0, 4).to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
    }
}
