//! Checkpoint container I/O and LoRA adapter expansion.
//!
//! The on-disk layout is safetensors-compatible: an 8-byte little-endian
//! header length, a UTF-8 JSON table mapping tensor names to dtype / shape /
//! data offsets (plus an optional `__metadata__` string map), then raw
//! little-endian row-major tensor data addressed relative to the end of the
//! header. Writes are canonical — lexicographic tensor order, 8-byte-aligned
//! data offsets, header padded with spaces to an 8-byte boundary — so equal
//! checkpoints always serialize to identical bytes.

mod lora;

pub use lora::{expand_lora, LoraAdapter, LoraPair};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::tensor::{DType, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("truncated file: need {needed} bytes at offset {offset}, file has {actual}")]
    Truncated {
        offset: u64,
        needed: u64,
        actual: u64,
    },
    #[error("malformed header JSON at byte 8: {0}")]
    MalformedHeader(String),
    #[error("header entry for {name:?}: {reason}")]
    BadEntry { name: String, reason: String },
    #[error("unknown dtype {dtype:?} for tensor {name:?} in header starting at byte 8")]
    UnknownDtype { name: String, dtype: String },
    #[error(
        "tensor {name:?}: offsets [{begin}, {end}) inconsistent with shape {shape:?} ({expected} bytes)"
    )]
    OffsetSizeMismatch {
        name: String,
        begin: u64,
        end: u64,
        shape: Vec<usize>,
        expected: u64,
    },
    #[error(
        "tensor {name:?}: data offsets [{begin}, {end}) overlap or run out of order (previous end {prev_end}, data section {data_len} bytes)"
    )]
    BadOffsets {
        name: String,
        begin: u64,
        end: u64,
        prev_end: u64,
        data_len: u64,
    },
    #[error("data section is {actual} bytes but the header's final offset is {expected}")]
    DataLengthMismatch { expected: u64, actual: u64 },
    #[error("tensor {name:?} holds a non-finite value at element {index}")]
    NonFiniteValue { name: String, index: usize },
    #[error("tensor name may not be empty")]
    EmptyName,
    #[error("need at least {needed} checkpoints, got {got}")]
    NotEnoughCheckpoints { needed: usize, got: usize },
    #[error("lora adapter: {0}")]
    Lora(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One model's weights: an ordered name → tensor map plus free-form string
/// metadata. Iteration order is always lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), CheckpointError> {
        let name = name.into();
        if name.is_empty() {
            return Err(CheckpointError::EmptyName);
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }
}

/// Parse and validate a checkpoint file.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    read_checkpoint_bytes(&bytes)
}

pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let file_len = bytes.len() as u64;
    if file_len < 8 {
        return Err(CheckpointError::Truncated {
            offset: 0,
            needed: 8,
            actual: file_len,
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let header_end = 8u64
        .checked_add(header_len)
        .filter(|&e| e <= file_len)
        .ok_or(CheckpointError::Truncated {
            offset: 8,
            needed: header_len,
            actual: file_len - 8,
        })?;

    let header: Value = serde_json::from_slice(&bytes[8..header_end as usize])
        .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    let table = header
        .as_object()
        .ok_or_else(|| CheckpointError::MalformedHeader("top level is not an object".into()))?;

    let data = &bytes[header_end as usize..];
    let data_len = data.len() as u64;

    let mut ckpt = Checkpoint::new();
    let mut entries: Vec<(String, DType, Vec<usize>, u64, u64)> = Vec::new();
    for (name, value) in table {
        if name == "__metadata__" {
            let map = value.as_object().ok_or_else(|| CheckpointError::BadEntry {
                name: name.clone(),
                reason: "__metadata__ must be a string map".into(),
            })?;
            for (k, v) in map {
                let s = v.as_str().ok_or_else(|| CheckpointError::BadEntry {
                    name: name.clone(),
                    reason: format!("metadata value for {k:?} is not a string"),
                })?;
                ckpt.metadata.insert(k.clone(), s.to_string());
            }
            continue;
        }
        if name.is_empty() {
            return Err(CheckpointError::EmptyName);
        }
        entries.push(parse_entry(name, value)?);
    }

    // BTreeMap-backed JSON objects iterate lexicographically, which is also
    // the canonical layout order; offsets must be monotone and disjoint.
    let mut prev_end = 0u64;
    let mut final_end = 0u64;
    for (name, dtype, shape, begin, end) in &entries {
        if *begin > *end || *begin < prev_end || *end > data_len {
            return Err(CheckpointError::BadOffsets {
                name: name.clone(),
                begin: *begin,
                end: *end,
                prev_end,
                data_len,
            });
        }
        prev_end = *end;
        final_end = *end;
        let raw = &data[*begin as usize..*end as usize];
        let tensor = decode_tensor(name, *dtype, shape.clone(), raw)?;
        ckpt.insert(name.clone(), tensor)?;
    }
    if final_end != data_len {
        return Err(CheckpointError::DataLengthMismatch {
            expected: final_end,
            actual: data_len,
        });
    }
    Ok(ckpt)
}

fn parse_entry(
    name: &str,
    value: &Value,
) -> Result<(String, DType, Vec<usize>, u64, u64), CheckpointError> {
    let bad = |reason: &str| CheckpointError::BadEntry {
        name: name.to_string(),
        reason: reason.to_string(),
    };
    let obj = value.as_object().ok_or_else(|| bad("entry is not an object"))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing dtype string"))?;
    let dtype = DType::parse(dtype_str).ok_or_else(|| CheckpointError::UnknownDtype {
        name: name.to_string(),
        dtype: dtype_str.to_string(),
    })?;
    let shape_val = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape array"))?;
    let mut shape = Vec::with_capacity(shape_val.len());
    for v in shape_val {
        let ext = v.as_u64().ok_or_else(|| bad("shape extent is not a non-negative integer"))?;
        shape.push(ext as usize);
    }
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing data_offsets array"))?;
    if offsets.len() != 2 {
        return Err(bad("data_offsets must have exactly two elements"));
    }
    let begin = offsets[0].as_u64().ok_or_else(|| bad("begin offset is not an integer"))?;
    let end = offsets[1].as_u64().ok_or_else(|| bad("end offset is not an integer"))?;

    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| bad("shape element count overflows"))?;
    let expected = (count as u64)
        .checked_mul(dtype.size_bytes() as u64)
        .ok_or_else(|| bad("byte length overflows"))?;
    if end.saturating_sub(begin) != expected {
        return Err(CheckpointError::OffsetSizeMismatch {
            name: name.to_string(),
            begin,
            end,
            shape,
            expected,
        });
    }
    Ok((name.to_string(), dtype, shape, begin, end))
}

fn decode_tensor(
    name: &str,
    dtype: DType,
    shape: Vec<usize>,
    raw: &[u8],
) -> Result<Tensor, CheckpointError> {
    let count = shape.iter().product::<usize>();
    let mut data = Vec::with_capacity(count);
    match dtype {
        DType::F16 => {
            for chunk in raw.chunks_exact(2) {
                let bits = u16::from_le_bytes([chunk[0], chunk[1]]);
                data.push(f64::from(half::f16::from_bits(bits)));
            }
        }
        DType::BF16 => {
            for chunk in raw.chunks_exact(2) {
                let bits = u16::from_le_bytes([chunk[0], chunk[1]]);
                data.push(f64::from(half::bf16::from_bits(bits)));
            }
        }
        DType::F32 => {
            for chunk in raw.chunks_exact(4) {
                data.push(f64::from(f32::from_le_bytes(chunk.try_into().unwrap())));
            }
        }
        DType::F64 => {
            for chunk in raw.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Tensor::new(shape, dtype, data).map_err(|e| match e {
        TensorError::NonFinite { index, .. } => CheckpointError::NonFiniteValue {
            name: name.to_string(),
            index,
        },
        other => CheckpointError::Tensor(other),
    })
}

/// Serialize canonically; equal checkpoints produce identical bytes.
pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let bytes = checkpoint_to_bytes(ckpt);
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&bytes).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    // Lay out data in lexicographic name order with 8-byte-aligned begins.
    let mut table = Map::new();
    if !ckpt.metadata.is_empty() {
        let meta: Map<String, Value> = ckpt
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        table.insert("__metadata__".to_string(), Value::Object(meta));
    }

    let mut payload: Vec<(u64, Vec<u8>)> = Vec::new();
    let mut cursor = 0u64;
    for (name, tensor) in ckpt.iter() {
        let raw = encode_tensor(tensor);
        let begin = cursor;
        let end = begin + raw.len() as u64;
        table.insert(
            name.clone(),
            json!({
                "dtype": tensor.dtype().as_str(),
                "shape": tensor.shape(),
                "data_offsets": [begin, end],
            }),
        );
        payload.push((begin, raw));
        cursor = end.div_ceil(8) * 8;
    }
    // The final tensor is not padded: the header's last offset is exactly
    // the data section length.
    let data_len = payload.last().map(|(b, raw)| b + raw.len() as u64).unwrap_or(0);

    let mut header = serde_json::to_vec(&Value::Object(table)).expect("header serialization");
    while !(8 + header.len()).is_multiple_of(8) {
        header.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header.len() + data_len as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (begin, raw) in payload {
        while (out.len() - 8 - header.len()) < begin as usize {
            out.push(0);
        }
        out.extend_from_slice(&raw);
    }
    out
}

/// Downcast to the recorded dtype (round-to-nearest-even) and emit LE bytes.
fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    let mut raw = Vec::with_capacity(tensor.element_count() * tensor.dtype().size_bytes());
    match tensor.dtype() {
        DType::F16 => {
            for &v in tensor.data() {
                raw.extend_from_slice(&half::f16::from_f64(v).to_bits().to_le_bytes());
            }
        }
        DType::BF16 => {
            for &v in tensor.data() {
                raw.extend_from_slice(&half::bf16::from_f64(v).to_bits().to_le_bytes());
            }
        }
        DType::F32 => {
            for &v in tensor.data() {
                raw.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in tensor.data() {
                raw.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    raw
}

/// Key/shape/dtype agreement findings across a set of checkpoints.
/// Index 0 is the reference (conventionally the base model).
#[derive(Debug, Clone, Default)]
pub struct CompatReport {
    /// Keys present in every checkpoint with matching shape and dtype.
    pub shared: Vec<String>,
    /// Per checkpoint index, keys of the union it lacks.
    pub missing: Vec<(usize, Vec<String>)>,
    /// Keys present everywhere but with conflicting shape or dtype.
    pub mismatches: Vec<CompatMismatch>,
}

#[derive(Debug, Clone)]
pub struct CompatMismatch {
    pub key: String,
    pub reference_shape: Vec<usize>,
    pub reference_dtype: DType,
    pub other_index: usize,
    pub other_shape: Vec<usize>,
    pub other_dtype: DType,
}

impl std::fmt::Display for CompatMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "key {:?}: checkpoint 0 has {:?} {}, checkpoint {} has {:?} {}",
            self.key,
            self.reference_shape,
            self.reference_dtype.as_str(),
            self.other_index,
            self.other_shape,
            self.other_dtype.as_str()
        )
    }
}

/// Compare ≥ 2 checkpoints; merging accepts only the shared, shape-consistent
/// key set this reports.
pub fn validate_compat(checkpoints: &[&Checkpoint]) -> Result<CompatReport, CheckpointError> {
    if checkpoints.len() < 2 {
        return Err(CheckpointError::NotEnoughCheckpoints {
            needed: 2,
            got: checkpoints.len(),
        });
    }
    let mut union: BTreeMap<&String, ()> = BTreeMap::new();
    for c in checkpoints {
        for k in c.keys() {
            union.insert(k, ());
        }
    }
    let mut report = CompatReport::default();
    for (idx, c) in checkpoints.iter().enumerate() {
        let missing: Vec<String> = union
            .keys()
            .filter(|k| !c.contains(k))
            .map(|k| (*k).clone())
            .collect();
        if !missing.is_empty() {
            report.missing.push((idx, missing));
        }
    }
    'keys: for key in union.keys() {
        let mut reference: Option<&Tensor> = None;
        for (idx, c) in checkpoints.iter().enumerate() {
            let Some(t) = c.get(key) else { continue 'keys };
            match reference {
                None => reference = Some(t),
                Some(r) => {
                    if r.shape() != t.shape() || r.dtype() != t.dtype() {
                        report.mismatches.push(CompatMismatch {
                            key: (*key).clone(),
                            reference_shape: r.shape().to_vec(),
                            reference_dtype: r.dtype(),
                            other_index: idx,
                            other_shape: t.shape().to_vec(),
                            other_dtype: t.dtype(),
                        });
                        continue 'keys;
                    }
                }
            }
        }
        report.shared.push((*key).clone());
    }
    Ok(report)
}
