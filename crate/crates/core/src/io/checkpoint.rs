use std::path::Path;

use super::{read_framed, write_framed, Reader, Writer};
use crate::classifier::{Classifier, ClassifierArch};
use crate::denoiser::{Denoiser, DenoiserArch};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ACTGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Decoded checkpoint: model kind, architecture JSON and named weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub arch_json: String,
    pub params: ParamSet,
}

/// Payload: kind string, architecture JSON (both u32 length + bytes), u32
/// tensor count, the shape table (per tensor: name, u32 ndim, u64 dims),
/// then every tensor's values as row-major f64 in table order.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(ckpt.kind.as_bytes());
    w.bytes(ckpt.arch_json.as_bytes());
    w.u32(ckpt.params.len() as u32);
    for (name, t) in ckpt.params.iter() {
        w.bytes(name.as_bytes());
        w.u32(t.ndim() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
    }
    for t in ckpt.params.tensors() {
        w.f64s(t.data());
    }
    write_framed(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &w.buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let payload = read_framed(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let mut r = Reader::new(&payload, path);
    let kind = r.string()?;
    let arch_json = r.string()?;
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        table.push((name, shape));
    }
    let mut params = ParamSet::new();
    for (name, shape) in table {
        let n = shape.iter().product();
        let t = Tensor::new(&shape, r.f64s(n)?).map_err(|e| r.fail(e.to_string()))?;
        if params.index_of(&name).is_ok() {
            return Err(r.fail(format!("duplicate tensor `{name}`")));
        }
        params.push(&name, t);
    }
    r.finish()?;
    Ok(Checkpoint { kind, arch_json, params })
}

fn expect_kind(path: &Path, ckpt: &Checkpoint, kind: &str) -> Result<()> {
    if ckpt.kind != kind {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected a {kind} checkpoint, found {}", ckpt.kind),
        });
    }
    Ok(())
}

pub fn save_denoiser(path: &Path, model: &Denoiser) -> Result<()> {
    save_checkpoint(
        path,
        &Checkpoint {
            kind: "denoiser".into(),
            arch_json: serde_json::to_string(&model.arch)?,
            params: model.params.clone(),
        },
    )
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    let ckpt = load_checkpoint(path)?;
    expect_kind(path, &ckpt, "denoiser")?;
    let arch: DenoiserArch = serde_json::from_str(&ckpt.arch_json)?;
    Denoiser::from_params(arch, ckpt.params)
}

pub fn save_classifier(path: &Path, model: &Classifier) -> Result<()> {
    save_checkpoint(
        path,
        &Checkpoint {
            kind: "classifier".into(),
            arch_json: serde_json::to_string(&model.arch)?,
            params: model.params.clone(),
        },
    )
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    let ckpt = load_checkpoint(path)?;
    expect_kind(path, &ckpt, "classifier")?;
    let arch: ClassifierArch = serde_json::from_str(&ckpt.arch_json)?;
    Classifier::from_params(arch, ckpt.params)
}
