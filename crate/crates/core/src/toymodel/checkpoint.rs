use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::encoder::{ElectraPair, EncoderConfig, TinyEncoder};
use super::tensor::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"RKGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint holds {found} data, expected {expected}")]
    Dtype { found: String, expected: &'static str },
    #[error("bad manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    encoder: EncoderConfig,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Layout: magic, version (u32 LE), dtype tag (u32 LE length + bytes),
/// manifest JSON (u64 LE length + bytes), then every tensor's data in
/// manifest order as little-endian values of the tagged width.
pub fn write_pair<T: Scalar, W: Write>(pair: &ElectraPair<T>, mut w: W) -> Result<(), CheckpointError> {
    let tensors: Vec<(&str, &Tensor<T>)> = pair
        .generator
        .params
        .iter()
        .map(|t| ("gen.", t))
        .chain(pair.discriminator.params.iter().map(|t| ("disc.", t)))
        .collect();
    let manifest = Manifest {
        encoder: pair.generator.cfg,
        tensors: tensors
            .iter()
            .map(|(p, t)| Entry {
                name: format!("{p}{}", t.name),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(T::DTYPE.len() as u32).to_le_bytes())?;
    w.write_all(T::DTYPE.as_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in tensors {
        for &v in &t.data {
            match T::DTYPE {
                "f32" => w.write_all(&(v.as_f64() as f32).to_le_bytes())?,
                _ => w.write_all(&v.as_f64().to_le_bytes())?,
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_pair<T: Scalar, R: Read>(mut r: R) -> Result<ElectraPair<T>, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut tag = vec![0u8; read_u32(&mut r)? as usize];
    r.read_exact(&mut tag)?;
    let tag = String::from_utf8_lossy(&tag).into_owned();
    if tag != T::DTYPE {
        return Err(CheckpointError::Dtype {
            found: tag,
            expected: T::DTYPE,
        });
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut gen = Vec::new();
    let mut disc = Vec::new();
    for entry in manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = if T::DTYPE == "f32" {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                f32::from_le_bytes(b) as f64
            } else {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                f64::from_le_bytes(b)
            };
            data.push(T::c(v));
        }
        let (dest, name) = if let Some(name) = entry.name.strip_prefix("gen.") {
            (&mut gen, name)
        } else if let Some(name) = entry.name.strip_prefix("disc.") {
            (&mut disc, name)
        } else {
            return Err(CheckpointError::Manifest(format!(
                "tensor `{}` has no model prefix",
                entry.name
            )));
        };
        dest.push(Tensor {
            name: name.to_string(),
            shape: entry.shape,
            data,
        });
    }
    let reference = TinyEncoder::<T>::new(manifest.encoder, 0);
    for (side, params) in [("gen", &gen), ("disc", &disc)] {
        let ok = params.len() == reference.params.len()
            && params
                .iter()
                .zip(&reference.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape);
        if !ok {
            return Err(CheckpointError::Manifest(format!(
                "{side} tensors do not match the encoder layout"
            )));
        }
    }
    Ok(ElectraPair {
        generator: TinyEncoder::from_params(manifest.encoder, gen),
        discriminator: TinyEncoder::from_params(manifest.encoder, disc),
    })
}

pub fn save<T: Scalar>(pair: &ElectraPair<T>, path: &Path) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    let mut w = io::BufWriter::new(file);
    write_pair(pair, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<ElectraPair<T>, CheckpointError> {
    read_pair(io::BufReader::new(std::fs::File::open(path)?))
}
