//! Checkpoints are safetensors files. Parameters are stored as
//! `param.<name>`, Adam moments as `adam.m.<name>` / `adam.v.<name>`, all in
//! float32. Everything else (format version, network config, iteration,
//! optimizer step, caller-supplied extras) lives as one JSON string under
//! the `bikanet` metadata key, which keeps the file byte-deterministic.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{Bikanet, NetConfig};
use crate::error::{Error, Result};
use crate::nn::Adam;

pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "bikanet";

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: NetConfig,
    iteration: u64,
    adam_step: u64,
    adam_betas: (f64, f64),
    #[serde(default)]
    extra: serde_json::Value,
}

pub struct Checkpoint {
    pub net: Bikanet,
    pub adam: Adam,
    pub iteration: u64,
    pub extra: serde_json::Value,
}

fn f32_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    net: &Bikanet,
    adam: &Adam,
    iteration: u64,
    extra: &serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, var) in net.params().iter() {
        blobs.push((format!("param.{name}"), var.dims().to_vec(), f32_bytes(var.as_tensor())?));
        if let (Some(m), Some(v)) = (adam.first.get(name), adam.second.get(name)) {
            blobs.push((format!("adam.m.{name}"), m.dims().to_vec(), f32_bytes(m)?));
            blobs.push((format!("adam.v.{name}"), v.dims().to_vec(), f32_bytes(v)?));
        }
    }
    let views = blobs
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: net.config().clone(),
        iteration,
        adam_step: adam.step,
        adam_betas: (adam.beta1, adam.beta2),
        extra: extra.clone(),
    };
    let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&header)?)]);
    let bytes =
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn view_tensor(view: &TensorView<'_>, dtype: DType) -> Result<Tensor> {
    if view.dtype() != Dtype::F32 {
        return Err(Error::Checkpoint(format!("unsupported tensor dtype {:?}", view.dtype())));
    }
    let data: Vec<f32> = view
        .data()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(data, view.shape(), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Loads a checkpoint into a network of the given dtype.
pub fn load_checkpoint(path: impl AsRef<Path>, dtype: DType) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(bad)?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing header", path.display())))?;
    let header: Header = serde_json::from_str(text)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(bad)?;
    let net = Bikanet::new(header.config, dtype, 0)?;
    let mut adam = Adam::new(header.adam_betas.0, header.adam_betas.1);
    adam.step = header.adam_step;
    let mut seen = 0usize;
    for (name, view) in st.tensors() {
        if let Some(p) = name.strip_prefix("param.") {
            net.params().set(p, &view_tensor(&view, dtype)?)?;
            seen += 1;
        } else if let Some(p) = name.strip_prefix("adam.m.") {
            adam.first.insert(p.to_string(), view_tensor(&view, dtype)?);
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            adam.second.insert(p.to_string(), view_tensor(&view, dtype)?);
        } else {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
    }
    if seen != net.params().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {seen} parameters, the network has {}",
            net.params().len()
        )));
    }
    Ok(Checkpoint {
        net,
        adam,
        iteration: header.iteration,
        extra: header.extra,
    })
}
