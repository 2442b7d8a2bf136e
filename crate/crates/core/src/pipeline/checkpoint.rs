//! Binary model files: magic, format version, a JSON header with the
//! configuration, vocabularies and a parameter manifest, then every
//! parameter as little-endian `f64`s in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, TrainConfig};
use crate::corpus::Vocabs;
use crate::error::{Error, Result};
use crate::nn::LrGroup;

pub const MAGIC: &[u8; 4] = b"NHG1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    training: TrainConfig,
    vocabs: Vocabs,
    params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in values from the start of the data section.
    offset: usize,
    group: LrGroup,
    trainable: bool,
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut offset = 0;
    let params = model
        .store
        .iter()
        .map(|(_, p)| {
            let e = ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
                group: p.group,
                trainable: p.trainable,
            };
            offset += p.value.len();
            e
        })
        .collect();
    let header = Header {
        config: model.config,
        training: model.training,
        vocabs: model.vocabs.clone(),
        params,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated file: missing {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<Model> {
    let magic = take(&mut bytes, 4, "magic bytes")
        .map_err(|_| Error::Version("file too short to be a checkpoint".into()))?;
    if magic != MAGIC {
        return Err(Error::Version(format!(
            "bad magic bytes {magic:?}, not a checkpoint"
        )));
    }
    let version = u32::from_le_bytes(
        take(&mut bytes, 4, "format version")?
            .try_into()
            .expect("4 bytes"),
    );
    if version != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint format {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(
        take(&mut bytes, 8, "header length")?
            .try_into()
            .expect("8 bytes"),
    );
    let len =
        usize::try_from(len).map_err(|_| Error::Checkpoint("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(&mut bytes, len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let mut model = Model::new(header.config, header.training, header.vocabs, 0)?;
    if header.params.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{} stored parameters, model has {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let total: usize = header
        .params
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != 8 * total {
        let what = if bytes.len() < 8 * total {
            "truncated"
        } else {
            "oversized"
        };
        return Err(Error::Checkpoint(format!(
            "{what} data section: {} bytes for {total} values",
            bytes.len()
        )));
    }
    for entry in &header.params {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        let p = model.store.get_mut(id);
        if p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, expected {:?}",
                entry.name,
                entry.shape,
                p.value.shape()
            )));
        }
        p.group = entry.group;
        p.trainable = entry.trainable;
        let n = p.value.len();
        let src = bytes
            .get(8 * entry.offset..8 * (entry.offset + n))
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "parameter {} lies outside the data section",
                    entry.name
                ))
            })?;
        for (dst, chunk) in p.value.data_mut().iter_mut().zip(src.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
