//! Binary checkpoints with a JSON sidecar.
//!
//! Layout (little endian): the magic `MODCKPT1`, a `u32` entry count, then per entry a
//! `u16` name length, the UTF-8 name, a `u8` dtype code (0 = f32, 1 = f64), a `u8`
//! rank, `rank` `u32` dims and the raw payload.

use std::fs;
use std::path::{Path, PathBuf};

use modtune_autodiff::{DType, Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{LoraConfig, ModConfig, ModelConfig};
use crate::error::{CoreError, Result};
use crate::lora;
use crate::mod_head::ModHead;
use crate::model::TransformerModel;

pub const MAGIC: &[u8; 8] = b"MODCKPT1";
pub const META_FORMAT: &str = "modtune.checkpoint/1";

/// One stored tensor, still in its on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEntry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl RawEntry {
    pub fn to_tensor<T: Float>(&self) -> Result<Tensor<T>> {
        let width = self.dtype.size_of();
        let data: Vec<T> = match self.dtype {
            DType::F32 => self.payload.chunks_exact(width).map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
            DType::F64 => self.payload.chunks_exact(width).map(|c| T::from_f64(f64::read_le(c))).collect(),
        };
        Ok(Tensor::new(self.dims.clone(), data)?)
    }
}

pub fn encode<T: Float>(entries: &[(&str, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(entries.len()).map_err(|_| CoreError::Format("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| CoreError::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        let rank = u8::try_from(t.rank()).map_err(|_| CoreError::Format(format!("rank of {name} too large")))?;
        out.push(rank);
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| CoreError::Format(format!("dim of {name} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<RawEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CoreError::Format("bad magic".into()));
    }
    let count = u32::from_le_bytes(r.array()?) as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name =
            std::str::from_utf8(r.take(len)?).map_err(|_| CoreError::Format("entry name is not UTF-8".into()))?.to_string();
        let [code, rank] = r.array::<2>()?;
        let dtype = DType::from_code(code).ok_or_else(|| CoreError::Format(format!("{name}: unknown dtype {code}")))?;
        let dims: Vec<usize> = (0..rank).map(|_| r.array().map(|b| u32::from_le_bytes(b) as usize)).collect::<Result<_>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let size = numel
            .and_then(|n| n.checked_mul(dtype.size_of()))
            .ok_or_else(|| CoreError::Format(format!("{name}: dims overflow")))?;
        let payload = r.take(size)?.to_vec();
        entries.push(RawEntry { name, dtype, dims, payload });
    }
    if r.pos != bytes.len() {
        return Err(CoreError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CoreError::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}

/// Everything needed to rebuild the module structure around the stored tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub dtype: String,
    pub model: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub mod_head: Option<ModConfig>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes every parameter of `model` to `path` and the configuration to its sidecar.
pub fn save<T: Float>(path: &Path, model: &TransformerModel<T>, head: Option<&ModHead>) -> Result<()> {
    let entries: Vec<(&str, &Tensor<T>)> = model.params.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    let bytes = encode(&entries)?;
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))?;
    let meta = CheckpointMeta {
        format: META_FORMAT.into(),
        dtype: match T::DTYPE {
            DType::F32 => "f32".into(),
            DType::F64 => "f64".into(),
        },
        model: model.config().clone(),
        lora: model.lora_config().cloned(),
        mod_head: head.map(|h| h.config().clone()),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| CoreError::io(&side, e))?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| CoreError::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format != META_FORMAT {
        return Err(CoreError::Format(format!("unsupported checkpoint format {:?}", meta.format)));
    }
    Ok(meta)
}

/// Rebuilds the model (and head, if one was saved) and fills in the stored values.
/// Every stored tensor must match a parameter by name and shape, and vice versa.
pub fn load<T: Float>(path: &Path) -> Result<(TransformerModel<T>, Option<ModHead>)> {
    let meta = read_meta(path)?;
    let mut model = TransformerModel::<T>::new(meta.model.clone())?;
    if let Some(l) = meta.lora.clone() {
        lora::inject(&mut model, l)?;
    }
    let head = meta.mod_head.clone().map(|c| ModHead::attach(&mut model, c)).transpose()?;
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let entries = decode(&bytes)?;
    if entries.len() != model.params.len() {
        return Err(CoreError::Format(format!(
            "checkpoint holds {} tensors, the configured model has {}",
            entries.len(),
            model.params.len()
        )));
    }
    for e in &entries {
        let id = model.params.id(&e.name).ok_or_else(|| CoreError::Format(format!("unexpected tensor {}", e.name)))?;
        let t = e.to_tensor::<T>()?;
        if t.dims() != model.params.value(id).dims() {
            return Err(CoreError::Format(format!(
                "{}: stored dims {:?}, expected {:?}",
                e.name,
                t.dims(),
                model.params.value(id).dims()
            )));
        }
        *model.params.value_mut(id) = t;
    }
    Ok((model, head))
}

/// Copies the base parameters of `src` into `dst` by name (both must share a config).
pub fn copy_base<T: Float>(src: &TransformerModel<T>, dst: &mut TransformerModel<T>) -> Result<()> {
    if src.config() != dst.config() {
        return Err(CoreError::Config("base model configurations differ".into()));
    }
    for (_, p) in dst.params.iter_mut() {
        if p.group == crate::params::ParamGroup::Base {
            p.value = src.params.get(&p.name).expect("same layout").value.clone();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&[("ab", &t)]).unwrap();
        let mut expect = b"MODCKPT1".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u16.to_le_bytes());
        expect.extend(b"ab");
        expect.extend([0u8, 2]);
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].to_tensor::<f32>().unwrap(), t);
    }

    #[test]
    fn corrupt_input_rejected() {
        let t = Tensor::<f64>::ones(vec![3]);
        let bytes = encode(&[("x", &t)]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
