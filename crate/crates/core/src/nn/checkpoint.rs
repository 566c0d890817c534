//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"HECK"
//! version    u32 (= 1)
//! seed       u64
//! count      u32                      number of networks
//! per network:
//!   name     u32 length + UTF-8 bytes
//!   input    u32 channels, u32 height, u32 width
//!   layers   u32 count, then per layer:
//!              u8 kind (0 conv, 1 fully-connected), u8 activation (0 relu, 1 sigmoid, 2 linear)
//!              conv: u32 in, u32 out, u32 kernel, u32 stride
//!              fc:   u32 in, u32 out, u32 0, u32 0
//!   params   u64 count, then f32 values
//! ```

use std::path::Path;

use thiserror::Error;

use super::{Activation, LayerKind, LayerSpec, Network, NnError, ParamSet, Shape};

const MAGIC: &[u8; 4] = b"HECK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no network named {0:?}")]
    MissingNetwork(String),
    #[error(transparent)]
    Network(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedNetwork {
    pub name: String,
    pub network: Network,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub networks: Vec<NamedNetwork>,
}

impl Checkpoint {
    pub fn single(name: &str, network: Network, seed: u64) -> Self {
        Self {
            seed,
            networks: vec![NamedNetwork {
                name: name.to_string(),
                network,
            }],
        }
    }

    pub fn get(&self, name: &str) -> Result<&Network, CheckpointError> {
        self.networks
            .iter()
            .find(|n| n.name == name)
            .map(|n| &n.network)
            .ok_or_else(|| CheckpointError::MissingNetwork(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_u32(&mut out, self.networks.len());
        for named in &self.networks {
            put_u32(&mut out, named.name.len());
            out.extend_from_slice(named.name.as_bytes());
            let net = &named.network;
            let input = net.input_shape();
            put_u32(&mut out, input.channels);
            put_u32(&mut out, input.height);
            put_u32(&mut out, input.width);
            put_u32(&mut out, net.layers().len());
            for layer in net.layers() {
                let (kind, dims) = match layer.kind {
                    LayerKind::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                    } => (0u8, [in_channels, out_channels, kernel, stride]),
                    LayerKind::Dense { in_dim, out_dim } => (1u8, [in_dim, out_dim, 0, 0]),
                };
                out.push(kind);
                out.push(layer.activation.code());
                for d in dims {
                    put_u32(&mut out, d);
                }
            }
            out.extend_from_slice(&(net.param_count() as u64).to_le_bytes());
            for v in &net.params().values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut networks = Vec::with_capacity(count.min(16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Malformed("network name is not UTF-8".into()))?
                .to_string();
            let input = Shape::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let n_layers = r.u32()? as usize;
            let mut layers = Vec::with_capacity(n_layers.min(64));
            for _ in 0..n_layers {
                let kind = r.u8()?;
                let activation = Activation::from_code(r.u8()?)
                    .ok_or_else(|| CheckpointError::Malformed("unknown activation".into()))?;
                let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
                let layer = match kind {
                    0 => LayerSpec::conv(dims[0], dims[1], dims[2], dims[3], activation),
                    1 => LayerSpec::dense(dims[0], dims[1], activation),
                    k => return Err(CheckpointError::Malformed(format!("unknown layer kind {k}"))),
                };
                layers.push(layer);
            }
            let n_params = r.u64()? as usize;
            let raw = r.take(n_params.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let network = Network::with_params(input, layers, ParamSet { values })?;
            networks.push(NamedNetwork { name, network });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Self { seed, networks })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
