//! Binary checkpoint: header, architecture, then named little-endian f32 tensors.
//!
//! ```text
//! magic "AMCKPT\0\0" | schema u32 | arch hash u64 | arch json len u32 | arch json
//! | tensor count u32 | { name len u16 | name | ndim u8 | dims u32* | f32 data }*
//! ```

use super::{Architecture, Network, Real};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"AMCKPT\0\0";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint schema version {found} (this build reads {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint architecture hash {found:016x} does not match {expected:016x}")]
    ConfigMismatch { found: u64, expected: u64 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn from_params<T: Real>(net: &Network, params: &[T]) -> Self {
        Self {
            arch: net.arch.clone(),
            params: params.iter().map(|&x| x.f64() as f32).collect(),
        }
    }

    pub fn params_as<T: Real>(&self) -> Vec<T> {
        self.params.iter().map(|&x| T::c(x as f64)).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let net = Network::new(self.arch.clone());
        if net.n_params != self.params.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} parameters for an architecture of {}",
                self.params.len(),
                net.n_params
            )));
        }
        let json = serde_json::to_vec(&self.arch).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&SCHEMA_VERSION.to_le_bytes())?;
        w.write_all(&self.arch.hash().to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(net.specs.len() as u32).to_le_bytes())?;
        for spec in &net.specs {
            w.write_all(&(spec.name.len() as u16).to_le_bytes())?;
            w.write_all(spec.name.as_bytes())?;
            w.write_all(&[spec.shape.len() as u8])?;
            for &d in &spec.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(4 * spec.len());
            for &x in &self.params[spec.offset..spec.offset + spec.len()] {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != SCHEMA_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: SCHEMA_VERSION,
            });
        }
        let mut h = [0u8; 8];
        r.read_exact(&mut h)?;
        let hash = u64::from_le_bytes(h);
        let len = read_u32(&mut r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let arch: Architecture =
            serde_json::from_slice(&json).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if arch.hash() != hash {
            return Err(CheckpointError::ConfigMismatch {
                found: hash,
                expected: arch.hash(),
            });
        }
        let net = Network::new(arch.clone());
        let count = read_u32(&mut r)? as usize;
        if count != net.specs.len() {
            return Err(CheckpointError::Malformed(format!("{count} tensors, expected {}", net.specs.len())));
        }
        let mut params = vec![0f32; net.n_params];
        for spec in &net.specs {
            let mut nl = [0u8; 2];
            r.read_exact(&mut nl)?;
            let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
            r.read_exact(&mut name)?;
            if name != spec.name.as_bytes() {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {:?} where {} was expected",
                    String::from_utf8_lossy(&name),
                    spec.name
                )));
            }
            let mut nd = [0u8; 1];
            r.read_exact(&mut nd)?;
            let mut shape = Vec::with_capacity(nd[0] as usize);
            for _ in 0..nd[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            if shape != spec.shape {
                return Err(CheckpointError::Malformed(format!("shape mismatch for {}", spec.name)));
            }
            let mut buf = vec![0u8; 4 * spec.len()];
            r.read_exact(&mut buf)?;
            for (dst, c) in params[spec.offset..spec.offset + spec.len()]
                .iter_mut()
                .zip(buf.chunks_exact(4))
            {
                *dst = f32::from_le_bytes(c.try_into().unwrap());
            }
        }
        Ok(Self { arch, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let f = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(f))
    }

    /// Verifies the checkpoint was produced for `expected`.
    pub fn ensure_arch(&self, expected: &Architecture) -> Result<(), CheckpointError> {
        if &self.arch == expected {
            Ok(())
        } else {
            Err(CheckpointError::ConfigMismatch {
                found: self.arch.hash(),
                expected: expected.hash(),
            })
        }
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
