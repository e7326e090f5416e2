//! Bit-exact binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"AUXN"
//! version u16
//! config  u32 length + UTF-8 JSON of the ModelConfig
//! count   u32 tensor count
//! tensor* u32 name length + UTF-8 name
//!         u8  rank
//!         u32 dims (rank of them)
//!         u8  element width in bytes (4 or 8)
//!         raw little-endian element data
//! crc     u32 CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Writes go to a temp file in the same directory and are renamed into
//! place, so an interrupted save never leaves a torn checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::write_atomic;
use crate::model::{build_model, Model, ModelConfig};
use crate::tensor::{Element, Tensor};

pub const MAGIC: [u8; 4] = *b"AUXN";
pub const VERSION: u16 = 1;

/// CRC-32 (IEEE 802.3, reflected 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

fn named_tensors<T: Element>(model: &Model<T>) -> Vec<(String, &Tensor<T>)> {
    let mut out = Vec::new();
    for (i, block) in model.blocks.iter().enumerate() {
        let l = i + 1;
        out.push((format!("block_{l}.conv.weight"), &block.conv.weights));
        out.push((format!("block_{l}.conv.bias"), &block.conv.bias));
        out.push((format!("block_{l}.bn.gamma"), &block.bn.gamma));
        out.push((format!("block_{l}.bn.beta"), &block.bn.beta));
        out.push((format!("block_{l}.bn.running_mean"), &block.bn.running_mean));
        out.push((format!("block_{l}.bn.running_var"), &block.bn.running_var));
        if let Some(proj) = &block.shortcut {
            out.push((format!("block_{l}.shortcut.weight"), &proj.weights));
            out.push((format!("block_{l}.shortcut.bias"), &proj.bias));
        }
    }
    for (k, head) in model.heads.iter().enumerate() {
        out.push((format!("head_{}.fc.weight", k + 1), &head.fc.weights));
        out.push((format!("head_{}.fc.bias", k + 1), &head.fc.bias));
    }
    out
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Serializes the model (parameters, running statistics, and config).
pub fn save_checkpoint<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let config_json = serde_json::to_string(&model.config)?;
    push_str(&mut buf, &config_json);
    let tensors = named_tensors(model);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        push_str(&mut buf, &name);
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(T::WIDTH);
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    write_atomic(path, &buf)
}

struct RawTensor {
    dims: Vec<usize>,
    width: u8,
    bytes: Vec<u8>,
}

struct RawCheckpoint {
    config: ModelConfig,
    tensors: BTreeMap<String, RawTensor>,
    width: u8,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte offset {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

fn parse_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 2 + 4 {
        return Err(Error::Checkpoint(format!(
            "{}: file too short ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32(body);
    if stored_crc != computed {
        return Err(Error::Checkpoint(format!(
            "{}: CRC mismatch (stored {stored_crc:#010x}, computed {computed:#010x})",
            path.display()
        )));
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version}, this build reads version {VERSION}",
            path.display()
        )));
    }
    let config_json = r.string("config")?;
    let config: ModelConfig = serde_json::from_str(&config_json)?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    let mut width = 0u8;
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")? as usize);
        }
        let w = r.u8("element width")?;
        if w != 4 && w != 8 {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has element width {w}, expected 4 or 8"
            )));
        }
        if width == 0 {
            width = w;
        } else if width != w {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' width {w} differs from file width {width}"
            )));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * w as usize, "tensor data")?.to_vec();
        if tensors
            .insert(
                name.clone(),
                RawTensor {
                    dims,
                    width: w,
                    bytes: raw,
                },
            )
            .is_some()
        {
            return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensor data",
            body.len() - r.pos
        )));
    }
    if width == 0 {
        width = 4;
    }
    Ok(RawCheckpoint {
        config,
        tensors,
        width,
    })
}

fn tensor_from_raw<T: Element>(name: &str, raw: &RawTensor) -> Result<Tensor<T>> {
    debug_assert_eq!(raw.width, T::WIDTH);
    let w = T::WIDTH as usize;
    let data: Vec<T> = raw.bytes.chunks_exact(w).map(T::read_le).collect();
    Tensor::from_vec(raw.dims.clone(), data)
        .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))
}

fn assemble<T: Element>(raw: RawCheckpoint) -> Result<Model<T>> {
    let mut model: Model<T> = build_model(&raw.config)?;
    let mut used = 0usize;
    {
        let expected = named_tensors(&model)
            .into_iter()
            .map(|(name, t)| (name, t.shape().to_vec()))
            .collect::<Vec<_>>();
        for (name, shape) in &expected {
            let rt = raw.tensors.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor '{name}' for this topology"))
            })?;
            if &rt.dims != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, topology wants {shape:?}",
                    rt.dims
                )));
            }
            used += 1;
        }
        if used != raw.tensors.len() {
            let expected_names: Vec<&String> = expected.iter().map(|(n, _)| n).collect();
            let extra: Vec<&String> = raw
                .tensors
                .keys()
                .filter(|k| !expected_names.contains(k))
                .collect();
            return Err(Error::Checkpoint(format!(
                "checkpoint carries tensors the topology does not: {extra:?}"
            )));
        }
    }
    for (i, block) in model.blocks.iter_mut().enumerate() {
        let l = i + 1;
        block.conv.weights = tensor_from_raw(
            &format!("block_{l}.conv.weight"),
            &raw.tensors[&format!("block_{l}.conv.weight")],
        )?;
        block.conv.bias = tensor_from_raw(
            &format!("block_{l}.conv.bias"),
            &raw.tensors[&format!("block_{l}.conv.bias")],
        )?;
        block.bn.gamma = tensor_from_raw(
            &format!("block_{l}.bn.gamma"),
            &raw.tensors[&format!("block_{l}.bn.gamma")],
        )?;
        block.bn.beta = tensor_from_raw(
            &format!("block_{l}.bn.beta"),
            &raw.tensors[&format!("block_{l}.bn.beta")],
        )?;
        block.bn.running_mean = tensor_from_raw(
            &format!("block_{l}.bn.running_mean"),
            &raw.tensors[&format!("block_{l}.bn.running_mean")],
        )?;
        block.bn.running_var = tensor_from_raw(
            &format!("block_{l}.bn.running_var"),
            &raw.tensors[&format!("block_{l}.bn.running_var")],
        )?;
        if let Some(proj) = block.shortcut.as_mut() {
            proj.weights = tensor_from_raw(
                &format!("block_{l}.shortcut.weight"),
                &raw.tensors[&format!("block_{l}.shortcut.weight")],
            )?;
            proj.bias = tensor_from_raw(
                &format!("block_{l}.shortcut.bias"),
                &raw.tensors[&format!("block_{l}.shortcut.bias")],
            )?;
        }
    }
    for (k, head) in model.heads.iter_mut().enumerate() {
        head.fc.weights = tensor_from_raw(
            &format!("head_{}.fc.weight", k + 1),
            &raw.tensors[&format!("head_{}.fc.weight", k + 1)],
        )?;
        head.fc.bias = tensor_from_raw(
            &format!("head_{}.fc.bias", k + 1),
            &raw.tensors[&format!("head_{}.fc.bias", k + 1)],
        )?;
    }
    Ok(model)
}

/// Loads a checkpoint at a known precision; the file's element width must
/// match `T`.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Model<T>> {
    let raw = parse_checkpoint(path)?;
    if raw.width != T::WIDTH {
        return Err(Error::Checkpoint(format!(
            "{}: file stores {}-byte elements, requested precision uses {}",
            path.display(),
            raw.width,
            T::WIDTH
        )));
    }
    assemble(raw)
}

/// A model of whichever precision the checkpoint stores.
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

pub fn load_checkpoint_any(path: &Path) -> Result<AnyModel> {
    let raw = parse_checkpoint(path)?;
    match raw.width {
        4 => Ok(AnyModel::F32(assemble(raw)?)),
        8 => Ok(AnyModel::F64(assemble(raw)?)),
        w => Err(Error::Checkpoint(format!("unsupported element width {w}"))),
    }
}
