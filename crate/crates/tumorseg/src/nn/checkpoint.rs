//! Binary checkpoints for trained networks.
//!
//! Layout: magic `TSCK`, a `u32` format version, a `u64` JSON header length,
//! the JSON header (network kind, typed config, training state, parameter
//! names/shapes), then every parameter tensor as little-endian `f64` in
//! header order. Loading fills an existing parameter store by name so the
//! file does not depend on construction order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::disc::{Discriminator, DiscriminatorConfig};
use super::unet::{UNet, UNetConfig};
use super::Params;

const MAGIC: &[u8; 4] = b"TSCK";
const FORMAT_VERSION: u32 = 1;
const MAX_HEADER_BYTES: u64 = 16 << 20;

/// Network kind tags stored in checkpoints.
pub const KIND_SEGMENTER: &str = "segmenter";
pub const KIND_GENERATOR: &str = "generator";
pub const KIND_DISCRIMINATOR: &str = "discriminator";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    /// The network's own config, serialized so a loader can rebuild the
    /// exact architecture.
    pub config: serde_json::Value,
    /// Free-form training provenance (epoch, step, losses…); never needed
    /// to run the network.
    pub training_state: serde_json::Value,
}

impl CheckpointMeta {
    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Data(format!("checkpoint config mismatch: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    #[serde(flatten)]
    meta: CheckpointMeta,
    params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, params: &Params) -> Result<()> {
    let header = Header {
        version: FORMAT_VERSION,
        meta: meta.clone(),
        params: params
            .iter()
            .map(|(name, value)| ParamRecord {
                name: name.to_owned(),
                shape: value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, value) in params.iter() {
        for &v in value.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read the header and fill `params` by name. Every stored tensor must
/// exist with a matching shape, and every live tensor must be covered.
pub fn load_checkpoint(path: &Path, expected_kind: &str, params: &mut Params) -> Result<CheckpointMeta> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = read_header(path, &mut r)?;
    if header.meta.kind != expected_kind {
        return Err(Error::Data(format!(
            "checkpoint holds a {} network, expected {expected_kind}",
            header.meta.kind
        )));
    }
    if header.params.len() != params.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} tensors, network has {}",
            header.params.len(),
            params.len()
        )));
    }
    for record in &header.params {
        let n: usize = record.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let target = params.by_name_mut(&record.name).ok_or_else(|| {
            Error::Data(format!("checkpoint tensor {} not in network", record.name))
        })?;
        if target.shape() != record.shape.as_slice() {
            return Err(Error::Data(format!(
                "tensor {} shape {:?} does not match network shape {:?}",
                record.name,
                record.shape,
                target.shape()
            )));
        }
        *target = ArrayD::from_shape_vec(record.shape.clone(), data)
            .expect("length matches shape product");
    }
    Ok(header.meta)
}

fn read_header(path: &Path, r: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8).map_err(|e| Error::io(path, e))?;
    let len = u64::from_le_bytes(buf8);
    if len > MAX_HEADER_BYTES {
        return Err(Error::Data(format!("implausible header size {len}")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&json).map_err(|e| Error::Data(format!("corrupt header: {e}")))
}

fn meta_for<C: Serialize>(kind: &str, config: &C, training_state: serde_json::Value) -> CheckpointMeta {
    CheckpointMeta {
        kind: kind.to_owned(),
        config: serde_json::to_value(config).expect("config serializes"),
        training_state,
    }
}

/// Save a U-Net under the given kind tag (segmenter or generator).
pub fn save_unet(path: &Path, net: &UNet, kind: &str, training_state: serde_json::Value) -> Result<()> {
    save_checkpoint(path, &meta_for(kind, &net.cfg, training_state), &net.params)
}

/// Rebuild a U-Net from its stored config and weights.
pub fn load_unet(path: &Path, expected_kind: &str) -> Result<(UNet, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = read_header(path, &mut r)?;
    drop(r);
    let cfg: UNetConfig = header.meta.config_as()?;
    let mut net = UNet::build(cfg, 0)?;
    let meta = load_checkpoint(path, expected_kind, &mut net.params)?;
    Ok((net, meta))
}

pub fn save_disc(path: &Path, net: &Discriminator, training_state: serde_json::Value) -> Result<()> {
    save_checkpoint(
        path,
        &meta_for(KIND_DISCRIMINATOR, &net.cfg, training_state),
        &net.params,
    )
}

pub fn load_disc(path: &Path) -> Result<(Discriminator, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = read_header(path, &mut r)?;
    drop(r);
    let cfg: DiscriminatorConfig = header.meta.config_as()?;
    let mut net = Discriminator::build(cfg, 0)?;
    let meta = load_checkpoint(path, KIND_DISCRIMINATOR, &mut net.params)?;
    Ok((net, meta))
}
