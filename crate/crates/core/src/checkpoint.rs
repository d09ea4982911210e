//! Binary checkpoint container.
//!
//! ```text
//! magic      8 bytes   "SACKPT01"
//! header_len u64 LE
//! header     JSON { format_version, config, special_tokens, tensors: [{name, shape}] }
//! payload    every tensor in header order, f64 little-endian, row-major
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::{CLS, MASK, PAD, SEP};
use crate::error::{Error, Result};
use crate::model::{build_model, EncoderModel, ModelConfig};

const MAGIC: &[u8; 8] = b"SACKPT01";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    special_tokens: [(String, usize); 4],
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(model: &EncoderModel, mut w: W) -> Result<()> {
    let params = model.named_params();
    let header = Header {
        format_version: 1,
        config: model.config.clone(),
        special_tokens: [
            ("[PAD]".into(), PAD),
            ("[MASK]".into(), MASK),
            ("[CLS]".into(), CLS),
            ("[SEP]".into(), SEP),
        ],
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in &params {
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<EncoderModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format_version != 1 {
        return Err(Error::Format(format!("unsupported checkpoint version {}", header.format_version)));
    }
    let mut model = build_model(&header.config, 0)?;
    {
        let mut params = model.named_params_mut();
        if params.len() != header.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} tensors, model has {}",
                header.tensors.len(),
                params.len()
            )));
        }
        for ((name, t), entry) in params.iter_mut().zip(&header.tensors) {
            if *name != entry.name || t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{}` {:?} does not match model tensor `{name}` {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            let mut buf = vec![0u8; t.numel() * 8];
            r.read_exact(&mut buf)?;
            for (v, chunk) in t.data_mut().iter_mut().zip(buf.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok(model)
}
