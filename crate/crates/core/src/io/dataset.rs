use std::path::Path;

use super::{read_framed, write_framed, Reader, Writer};
use crate::data::{Sample, ShapeDatasetSpec};
use crate::error::Result;
use crate::numerics::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"ACTGDSET";
pub const DATASET_VERSION: u32 = 1;

/// Writes `samples` together with the spec that produced them.
///
/// Payload: spec as JSON (u32 length + bytes), u64 sample count, then per
/// sample: u32 label, u8 atypical flag, u32 C, u32 H, u32 W, C*H*W f64
/// image values, H*W f64 mask values.
pub fn save_dataset(path: &Path, spec: &ShapeDatasetSpec, samples: &[Sample]) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(serde_json::to_string(spec)?.as_bytes());
    w.u64(samples.len() as u64);
    for s in samples {
        let shape = s.image.shape();
        w.u32(s.label as u32);
        w.u8(s.atypical as u8);
        for &d in shape {
            w.u32(d as u32);
        }
        w.f64s(s.image.data());
        w.f64s(s.gt_mask.data());
    }
    write_framed(path, DATASET_MAGIC, DATASET_VERSION, &w.buf)
}

pub fn load_dataset(path: &Path) -> Result<(ShapeDatasetSpec, Vec<Sample>)> {
    let payload = read_framed(path, DATASET_MAGIC, DATASET_VERSION)?;
    let mut r = Reader::new(&payload, path);
    let spec: ShapeDatasetSpec = serde_json::from_slice(r.bytes()?)?;
    let n = r.u64()?;
    let mut samples = Vec::new();
    for _ in 0..n {
        let label = r.u32()? as usize;
        let atypical = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(r.fail(format!("bad atypical flag {other}"))),
        };
        let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let image = Tensor::new(&[c, h, w], r.f64s(c * h * w)?).map_err(|e| r.fail(e.to_string()))?;
        let gt_mask = Tensor::new(&[1, h, w], r.f64s(h * w)?).map_err(|e| r.fail(e.to_string()))?;
        samples.push(Sample {
            image,
            label,
            gt_mask,
            atypical,
        });
    }
    r.finish()?;
    Ok((spec, samples))
}
