//! Binary checkpoint format for parameters and frozen prototypes.
//!
//! Layout, in order:
//!
//! 1. magic `b"TPNCKPT1"` (8 bytes)
//! 2. header length `H` as little-endian `u32`
//! 3. `H` bytes of UTF-8 JSON: the network config, a tensor directory
//!    (`name`, `shape`, `offset`, `count`, offsets counted in f64 elements),
//!    and optional prototype metadata
//! 4. the payload: every tensor's data as little-endian `f64`, at its
//!    directory offset
//!
//! Prototype matrices ride along as tensors named `proto.s`, `proto.t`, and
//! `proto.st`; parameter names never contain a `proto.` prefix.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{NetworkConfig, Parameters};
use crate::proto::{DomainTag, PrototypeSet};
use crate::tensor::Tensor;
use crate::trainer::FrozenPrototypes;

const MAGIC: &[u8; 8] = b"TPNCKPT1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    net: NetworkConfig,
    tensors: Vec<TensorMeta>,
    prototypes: Option<ProtoMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct ProtoMeta {
    classes: usize,
    t_substituted: Vec<bool>,
}

/// Writes parameters (and, when given, frozen prototypes) to `path`.
pub fn save_checkpoint(
    path: &Path,
    params: &Parameters,
    frozen: Option<&FrozenPrototypes>,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let push = |name: &str, t: &Tensor, tensors: &mut Vec<TensorMeta>, payload: &mut Vec<f64>| {
        tensors.push(TensorMeta {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
            count: t.numel(),
        });
        payload.extend_from_slice(t.data());
    };

    for (name, t) in params.iter() {
        push(name, t, &mut tensors, &mut payload);
    }
    let prototypes = frozen.map(|f| {
        push("proto.s", &f.s.centroids, &mut tensors, &mut payload);
        push("proto.t", &f.t.centroids, &mut tensors, &mut payload);
        push("proto.st", &f.st.centroids, &mut tensors, &mut payload);
        ProtoMeta {
            classes: f.s.classes(),
            t_substituted: f.t_substituted.clone(),
        }
    });

    let header = Header {
        version: VERSION,
        net: params.config().clone(),
        tensors,
        prototypes,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Config(format!("checkpoint header serialization: {}", e)))?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header_json.len() as u32).to_le_bytes())?;
    out.write_all(&header_json)?;
    for v in &payload {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint back; the prototype block is `None` when the file holds
/// parameters only.
pub fn load_checkpoint(path: &Path) -> Result<(Parameters, Option<FrozenPrototypes>)> {
    let format_err = |offset: u64, detail: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        detail,
    };

    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::open(path, e))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(format_err(bytes.len() as u64, "file too short".to_string()));
    }
    if &bytes[..8] != MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", &bytes[..8])));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start {
        return Err(format_err(8, format!("header length {} exceeds file", header_len)));
    }
    let header: Header = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| format_err(12, format!("header JSON: {}", e)))?;
    if header.version != VERSION {
        return Err(format_err(12, format!("unsupported version {}", header.version)));
    }

    let payload_bytes = &bytes[payload_start..];
    if payload_bytes.len() % 8 != 0 {
        return Err(format_err(
            payload_start as u64,
            "payload is not a whole number of f64 values".to_string(),
        ));
    }
    let payload: Vec<f64> = payload_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut params = Parameters::empty(header.net.clone());
    let mut proto_tensors: Vec<(String, Tensor)> = Vec::new();
    for meta in &header.tensors {
        let end = meta.offset.checked_add(meta.count).ok_or_else(|| {
            format_err(payload_start as u64, format!("tensor {} offset overflow", meta.name))
        })?;
        if end > payload.len() {
            return Err(format_err(
                (payload_start + meta.offset * 8) as u64,
                format!(
                    "tensor {} needs {} values, payload holds {}",
                    meta.name,
                    end,
                    payload.len()
                ),
            ));
        }
        let tensor = Tensor::new(meta.shape.clone(), payload[meta.offset..end].to_vec())
            .map_err(|e| format_err(12, format!("tensor {}: {}", meta.name, e)))?;
        if meta.name.starts_with("proto.") {
            proto_tensors.push((meta.name.clone(), tensor));
        } else {
            params.insert(&meta.name, tensor);
        }
    }

    let frozen = match header.prototypes {
        None => None,
        Some(meta) => {
            let find = |name: &str| -> Result<Tensor> {
                proto_tensors
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| format_err(12, format!("missing tensor {}", name)))
            };
            let all_valid = vec![true; meta.classes];
            Some(FrozenPrototypes {
                s: PrototypeSet {
                    centroids: find("proto.s")?,
                    valid: all_valid.clone(),
                    domain: DomainTag::Source,
                },
                t: PrototypeSet {
                    centroids: find("proto.t")?,
                    valid: all_valid.clone(),
                    domain: DomainTag::TargetPseudo,
                },
                st: PrototypeSet {
                    centroids: find("proto.st")?,
                    valid: all_valid,
                    domain: DomainTag::Combined,
                },
                t_substituted: meta.t_substituted,
            })
        }
    };
    Ok((params, frozen))
}
