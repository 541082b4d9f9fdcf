//! Whole-model compression.
//!
//! Reads safetensors files (`u64` LE header length, JSON header, data region)
//! or headerless raw files described by a sidecar JSON with the same schema,
//! and packs them into a `ZTNA` archive:
//!
//! ```text
//! "ZTNA" | version u16 | manifest_len u64 | manifest JSON | blobs
//! ```
//!
//! The manifest lists segments in file order. Tensor segments point at a
//! per-tensor `ZTNC` container; verbatim segments (the safetensors header,
//! alignment gaps, tensors of dtypes we do not split) are copied as-is, so the
//! archive always reassembles the exact source file.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::container::{compress_tensor, decompress_tensor, CompressOptions, StreamKind};
use crate::error::{Error, Result};
use crate::formats::FloatFormat;
use crate::report::ratio;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"ZTNA";
pub const ARCHIVE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<u64>,
    /// `[begin, end)` relative to the start of the data region.
    pub data_offsets: (u64, u64),
}

impl TensorEntry {
    pub fn byte_len(&self) -> u64 {
        self.data_offsets.1 - self.data_offsets.0
    }

    pub fn element_count(&self) -> u64 {
        self.shape.iter().product()
    }

    /// Split format for this dtype, when it is one the codec compresses.
    pub fn float_format(&self) -> Option<FloatFormat> {
        match self.dtype.as_str() {
            "BF16" => Some(FloatFormat::Bf16),
            "F8_E4M3" => Some(FloatFormat::Fp8E4M3),
            "F8_E5M2" => Some(FloatFormat::Fp8E5M2),
            _ => None,
        }
    }
}

fn dtype_size(dtype: &str) -> Option<u64> {
    Some(match dtype {
        "BOOL" | "U8" | "I8" | "F8_E4M3" | "F8_E5M2" => 1,
        "BF16" | "F16" | "I16" | "U16" => 2,
        "F32" | "I32" | "U32" => 4,
        "F64" | "I64" | "U64" => 8,
        _ => return None,
    })
}

/// A parsed model file.
#[derive(Debug, Clone)]
pub struct Model {
    pub bytes: Vec<u8>,
    /// Offset of the data region (0 for raw files).
    pub data_start: usize,
    /// Entries in header order, including those of unsupported dtypes.
    pub entries: Vec<TensorEntry>,
    pub metadata: Option<Value>,
}

impl Model {
    pub fn parse_safetensors(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Corrupt(
                "safetensors file shorter than its length prefix".into(),
            ));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let header_end = 8u64
            .checked_add(n)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::Corrupt(format!("header length {n} exceeds file")))?
            as usize;
        let header: Map<String, Value> = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::Corrupt(format!("safetensors header: {e}")))?;
        let (entries, metadata) = parse_header(header)?;
        let model = Model {
            data_start: header_end,
            bytes,
            entries,
            metadata,
        };
        model.validate()?;
        Ok(model)
    }

    /// A headerless file whose tensors are described by `sidecar`, a JSON
    /// object in the safetensors header schema.
    pub fn parse_raw(bytes: Vec<u8>, sidecar: &str) -> Result<Self> {
        let header: Map<String, Value> = serde_json::from_str(sidecar)
            .map_err(|e| Error::InvalidInput(format!("sidecar: {e}")))?;
        let (entries, metadata) = parse_header(header)?;
        let model = Model {
            bytes,
            data_start: 0,
            entries,
            metadata,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let data_len = (self.bytes.len() - self.data_start) as u64;
        let mut ranges: Vec<(u64, u64, &str)> = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let (begin, end) = e.data_offsets;
            if begin > end || end > data_len {
                return Err(Error::Corrupt(format!(
                    "tensor {:?} range [{begin}, {end}) outside data region of {data_len} bytes",
                    e.name
                )));
            }
            if let Some(size) = dtype_size(&e.dtype) {
                if e.element_count() * size != e.byte_len() {
                    return Err(Error::Corrupt(format!(
                        "tensor {:?}: {} bytes for shape {:?} of {}",
                        e.name,
                        e.byte_len(),
                        e.shape,
                        e.dtype
                    )));
                }
            }
            ranges.push((begin, end, &e.name));
        }
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Corrupt(format!(
                    "tensors {:?} and {:?} overlap",
                    w[0].2, w[1].2
                )));
            }
        }
        Ok(())
    }

    pub fn tensor_bytes(&self, entry: &TensorEntry) -> &[u8] {
        let start = self.data_start + entry.data_offsets.0 as usize;
        &self.bytes[start..self.data_start + entry.data_offsets.1 as usize]
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&TensorEntry, &[u8])> {
        self.entries.iter().map(move |e| (e, self.tensor_bytes(e)))
    }

    /// Names of tensors whose dtype is not one the codec splits.
    pub fn unsupported(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.float_format().is_none())
            .map(|e| e.name.as_str())
            .collect()
    }
}

fn parse_header(header: Map<String, Value>) -> Result<(Vec<TensorEntry>, Option<Value>)> {
    let mut entries = Vec::with_capacity(header.len());
    let mut metadata = None;
    for (name, v) in header {
        if name == "__metadata__" {
            metadata = Some(v);
            continue;
        }
        #[derive(Deserialize)]
        struct Raw {
            dtype: String,
            shape: Vec<u64>,
            data_offsets: (u64, u64),
        }
        let raw: Raw = serde_json::from_value(v)
            .map_err(|e| Error::Corrupt(format!("tensor {name:?}: {e}")))?;
        entries.push(TensorEntry {
            name,
            dtype: raw.dtype,
            shape: raw.shape,
            data_offsets: raw.data_offsets,
        });
    }
    Ok((entries, metadata))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<Model> {
    Model::parse_safetensors(std::fs::read(path)?)
}

pub fn read_raw_model(path: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<Model> {
    Model::parse_raw(std::fs::read(path)?, &std::fs::read_to_string(sidecar)?)
}

/// Serializes tensors as a safetensors file, in the given order, with the
/// header padded by spaces to an 8-byte boundary.
pub fn write_model(
    tensors: &[(&str, &str, &[u64], &[u8])],
    metadata: Option<&Value>,
) -> Result<Vec<u8>> {
    let mut header = Map::new();
    if let Some(m) = metadata {
        header.insert("__metadata__".into(), m.clone());
    }
    let mut offset = 0u64;
    for &(name, dtype, shape, data) in tensors {
        let end = offset + data.len() as u64;
        header.insert(
            name.to_string(),
            serde_json::json!({ "dtype": dtype, "shape": shape, "data_offsets": [offset, end] }),
        );
        offset = end;
    }
    let mut json = serde_json::to_vec(&Value::Object(header))?;
    while (8 + json.len()) % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for &(_, _, _, data) in tensors {
        out.extend_from_slice(data);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Verbatim {
        file_offset: u64,
        length: u64,
        blob_offset: u64,
    },
    Tensor {
        name: String,
        dtype: String,
        format: FloatFormat,
        file_offset: u64,
        original_size: u64,
        blob_offset: u64,
        blob_length: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub version: u16,
    pub source_size: u64,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub name: String,
    pub dtype: String,
    pub original_bytes: u64,
    pub compressed_bytes: u64,
    pub ratio: f64,
    pub exponent_ratio: f64,
    pub sign_mantissa_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveReport {
    pub tensors: Vec<TensorReport>,
    /// Tensors stored verbatim because their dtype is not split.
    pub skipped: Vec<String>,
    pub verbatim_bytes: u64,
    pub tensor_original_bytes: u64,
    pub tensor_compressed_bytes: u64,
    /// Size-weighted mean of the per-tensor ratios.
    pub tensor_ratio: f64,
    pub source_bytes: u64,
    pub archive_bytes: u64,
    pub file_ratio: f64,
}

/// Compresses every supported tensor of `model` into one archive.
pub fn compress_model(model: &Model, opts: &CompressOptions) -> Result<(Vec<u8>, ArchiveReport)> {
    let mut order: Vec<&TensorEntry> = model.entries.iter().collect();
    order.sort_by_key(|e| e.data_offsets);

    let inner = CompressOptions {
        threads: None,
        ..*opts
    };
    let compressed: Vec<Option<(Vec<u8>, TensorReport)>> = opts.run(|| {
        order
            .par_iter()
            .map(|e| -> Result<_> {
                let Some(format) = e.float_format() else {
                    return Ok(None);
                };
                let data = model.tensor_bytes(e);
                let (container, report) = compress_tensor(data, format, &inner)?;
                let stream_ratio = |kind| report.stream(kind).map_or(1.0, |s| s.ratio);
                Ok(Some((
                    container,
                    TensorReport {
                        name: e.name.clone(),
                        dtype: e.dtype.clone(),
                        original_bytes: data.len() as u64,
                        compressed_bytes: report.compressed_bytes,
                        ratio: report.ratio,
                        exponent_ratio: stream_ratio(StreamKind::Exponent),
                        sign_mantissa_ratio: stream_ratio(StreamKind::SignMantissa),
                    },
                )))
            })
            .collect::<Result<Vec<_>>>()
    })??;

    // (file range, container) in file order; gaps and unsplit tensors have no container.
    let mut plan: Vec<(u64, u64, Option<usize>)> = Vec::new();
    let mut cursor = 0u64;
    let mut tensors = Vec::new();
    let mut skipped = Vec::new();
    for (i, (e, result)) in order.iter().zip(&compressed).enumerate() {
        let begin = model.data_start as u64 + e.data_offsets.0;
        let end = model.data_start as u64 + e.data_offsets.1;
        match result {
            Some((_, report)) => {
                if begin > cursor {
                    plan.push((cursor, begin, None));
                }
                plan.push((begin, end, Some(i)));
                tensors.push(report.clone());
                cursor = end;
            }
            None => {
                log::warn!(
                    "tensor {:?} has unsupported dtype {}; stored verbatim",
                    e.name,
                    e.dtype
                );
                skipped.push(e.name.clone());
            }
        }
    }
    if (model.bytes.len() as u64) > cursor {
        plan.push((cursor, model.bytes.len() as u64, None));
    }

    let mut segments = Vec::with_capacity(plan.len());
    let mut blobs: Vec<&[u8]> = Vec::with_capacity(plan.len());
    let mut blob_offset = 0u64;
    let mut verbatim_bytes = 0u64;
    for (from, to, tensor) in plan {
        match tensor {
            None => {
                segments.push(Segment::Verbatim {
                    file_offset: from,
                    length: to - from,
                    blob_offset,
                });
                blobs.push(&model.bytes[from as usize..to as usize]);
                blob_offset += to - from;
                verbatim_bytes += to - from;
            }
            Some(i) => {
                let e = order[i];
                let container = &compressed[i]
                    .as_ref()
                    .expect("planned tensors were compressed")
                    .0;
                segments.push(Segment::Tensor {
                    name: e.name.clone(),
                    dtype: e.dtype.clone(),
                    format: e.float_format().expect("compressed tensors have a format"),
                    file_offset: from,
                    original_size: to - from,
                    blob_offset,
                    blob_length: container.len() as u64,
                });
                blobs.push(container);
                blob_offset += container.len() as u64;
            }
        }
    }

    let manifest = ArchiveManifest {
        version: ARCHIVE_VERSION,
        source_size: model.bytes.len() as u64,
        segments,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(14 + json.len() + blob_offset as usize);
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for b in blobs {
        out.extend_from_slice(b);
    }

    let tensor_original_bytes: u64 = tensors.iter().map(|t| t.original_bytes).sum();
    let tensor_compressed_bytes: u64 = tensors.iter().map(|t| t.compressed_bytes).sum();
    let report = ArchiveReport {
        tensors,
        skipped,
        verbatim_bytes,
        tensor_original_bytes,
        tensor_compressed_bytes,
        tensor_ratio: ratio(tensor_compressed_bytes, tensor_original_bytes),
        source_bytes: model.bytes.len() as u64,
        archive_bytes: out.len() as u64,
        file_ratio: ratio(out.len() as u64, model.bytes.len() as u64),
    };
    Ok((out, report))
}

/// A parsed archive: manifest plus the blob area.
pub struct Archive<'a> {
    pub manifest: ArchiveManifest,
    blobs: &'a [u8],
}

impl<'a> Archive<'a> {
    pub fn parse(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < 14 {
            return Err(Error::Truncated {
                needed: 14,
                available: bytes.len(),
            });
        }
        if &bytes[..4] != ARCHIVE_MAGIC {
            return Err(Error::BadMagic { expected: "ZTNA" });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != ARCHIVE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let len = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let end = 14u64
            .checked_add(len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or(Error::Truncated {
                needed: 14usize.saturating_add(len as usize),
                available: bytes.len(),
            })? as usize;
        let manifest: ArchiveManifest = serde_json::from_slice(&bytes[14..end])
            .map_err(|e| Error::Corrupt(format!("archive manifest: {e}")))?;
        let blobs = &bytes[end..];
        let mut expected_file = 0u64;
        let mut expected_blob = 0u64;
        for s in &manifest.segments {
            let (file_offset, file_len, blob_offset, blob_len) = match s {
                Segment::Verbatim {
                    file_offset,
                    length,
                    blob_offset,
                } => (*file_offset, *length, *blob_offset, *length),
                Segment::Tensor {
                    file_offset,
                    original_size,
                    blob_offset,
                    blob_length,
                    ..
                } => (*file_offset, *original_size, *blob_offset, *blob_length),
            };
            if file_offset != expected_file || blob_offset != expected_blob {
                return Err(Error::Corrupt("archive segments are not contiguous".into()));
            }
            expected_file += file_len;
            expected_blob += blob_len;
        }
        if expected_file != manifest.source_size {
            return Err(Error::Corrupt(
                "archive segments do not cover the source file".into(),
            ));
        }
        if expected_blob != blobs.len() as u64 {
            return Err(if expected_blob > blobs.len() as u64 {
                Error::Truncated {
                    needed: end + expected_blob as usize,
                    available: bytes.len(),
                }
            } else {
                Error::Corrupt("trailing bytes after archive blobs".into())
            });
        }
        Ok(Archive { manifest, blobs })
    }

    fn blob(&self, offset: u64, len: u64) -> &'a [u8] {
        &self.blobs[offset as usize..(offset + len) as usize]
    }

    /// Reassembles the original file.
    pub fn extract(&self) -> Result<Vec<u8>> {
        let parts: Vec<Vec<u8>> = self
            .manifest
            .segments
            .par_iter()
            .map(|s| match s {
                Segment::Verbatim {
                    length,
                    blob_offset,
                    ..
                } => Ok(self.blob(*blob_offset, *length).to_vec()),
                Segment::Tensor {
                    name,
                    original_size,
                    blob_offset,
                    blob_length,
                    ..
                } => {
                    let data = decompress_tensor(self.blob(*blob_offset, *blob_length))
                        .map_err(|e| Error::Corrupt(format!("tensor {name:?}: {e}")))?;
                    if data.len() as u64 != *original_size {
                        return Err(Error::Corrupt(format!(
                            "tensor {name:?} decoded to the wrong size"
                        )));
                    }
                    Ok(data)
                }
            })
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(self.manifest.source_size as usize);
        for p in parts {
            out.extend_from_slice(&p);
        }
        Ok(out)
    }

    /// Decodes one tensor by name without touching the others.
    pub fn tensor(&self, name: &str) -> Result<Vec<u8>> {
        for s in &self.manifest.segments {
            if let Segment::Tensor {
                name: n,
                blob_offset,
                blob_length,
                ..
            } = s
            {
                if n == name {
                    return decompress_tensor(self.blob(*blob_offset, *blob_length));
                }
            }
        }
        Err(Error::InvalidInput(format!(
            "no compressed tensor named {name:?}"
        )))
    }

    pub fn container(&self, name: &str) -> Option<&'a [u8]> {
        self.manifest.segments.iter().find_map(|s| match s {
            Segment::Tensor {
                name: n,
                blob_offset,
                blob_length,
                ..
            } if n == name => Some(self.blob(*blob_offset, *blob_length)),
            _ => None,
        })
    }
}

pub fn is_archive(bytes: &[u8]) -> bool {
    bytes.starts_with(ARCHIVE_MAGIC)
}

pub fn decompress_archive(bytes: &[u8]) -> Result<Vec<u8>> {
    Archive::parse(bytes)?.extract()
}
