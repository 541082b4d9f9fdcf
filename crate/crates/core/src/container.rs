//! The `ZTNC` chunked container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! header (25 bytes)
//!   magic "ZTNC" | version u16 | format u8 | flags u8 | chunk_size u32
//!   | stream_count u8 | element_count u64 | aux u32
//! stream directory, per stream
//!   kind u8 | original_len u64
//!   per chunk: flag u8 | codebook_len u16 | comp_len u32 | orig_len u32 | crc32 u32
//! payloads, in directory order
//!   per chunk: codebook bytes (codebook_len) then coded bytes (comp_len)
//! ```
//!
//! The chunk count of a stream is `ceil(original_len / chunk_size)`. `aux`
//! holds the CRC32 of the base checkpoint in delta containers and is zero
//! otherwise. Every chunk carries its own codebook, so any chunk decodes
//! without touching the others.
//!
//! E5M2 streams are zero-extended to whole bytes. When the split encoding of
//! such a tensor would come out larger than the input, the container instead
//! holds a single raw `elements` stream with the original bytes.

use std::fmt;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::{self, Decision};
use crate::error::{Error, Result};
use crate::formats::{self, BitPlanes, FloatFormat};
use crate::report::{CompressionReport, StreamReport};

pub const MAGIC: &[u8; 4] = b"ZTNC";
pub const VERSION: u16 = 1;
pub const DEFAULT_CHUNK_SIZE: usize = 256 * 1024;
pub const HEADER_LEN: usize = 25;
pub const STREAM_HEADER_LEN: usize = 9;
pub const CHUNK_ENTRY_LEN: usize = 15;

pub const FLAG_DELTA: u8 = 0x01;

/// What a container holds, stored in the header's format byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContainerFormat {
    Bf16,
    Fp8E4M3,
    Fp8E5M2,
    Mxfp4,
    Nvfp4,
}

impl ContainerFormat {
    pub fn id(self) -> u8 {
        match self {
            ContainerFormat::Bf16 => 1,
            ContainerFormat::Fp8E4M3 => 2,
            ContainerFormat::Fp8E5M2 => 3,
            ContainerFormat::Mxfp4 => 4,
            ContainerFormat::Nvfp4 => 5,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Ok(match id {
            1 => ContainerFormat::Bf16,
            2 => ContainerFormat::Fp8E4M3,
            3 => ContainerFormat::Fp8E5M2,
            4 => ContainerFormat::Mxfp4,
            5 => ContainerFormat::Nvfp4,
            other => return Err(Error::Corrupt(format!("unknown format id {other}"))),
        })
    }

    pub fn float_format(self) -> Option<FloatFormat> {
        match self {
            ContainerFormat::Bf16 => Some(FloatFormat::Bf16),
            ContainerFormat::Fp8E4M3 => Some(FloatFormat::Fp8E4M3),
            ContainerFormat::Fp8E5M2 => Some(FloatFormat::Fp8E5M2),
            ContainerFormat::Mxfp4 | ContainerFormat::Nvfp4 => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ContainerFormat::Bf16 => "bf16",
            ContainerFormat::Fp8E4M3 => "fp8-e4m3",
            ContainerFormat::Fp8E5M2 => "fp8-e5m2",
            ContainerFormat::Mxfp4 => "mxfp4",
            ContainerFormat::Nvfp4 => "nvfp4",
        }
    }
}

impl From<FloatFormat> for ContainerFormat {
    fn from(f: FloatFormat) -> Self {
        match f {
            FloatFormat::Bf16 => ContainerFormat::Bf16,
            FloatFormat::Fp8E4M3 => ContainerFormat::Fp8E4M3,
            FloatFormat::Fp8E5M2 => ContainerFormat::Fp8E5M2,
            FloatFormat::Fp4E2M1 => ContainerFormat::Mxfp4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Exponent,
    SignMantissa,
    Scale,
    RawNibbles,
    /// Whole elements stored verbatim, used when splitting would expand.
    Elements,
}

impl StreamKind {
    pub fn id(self) -> u8 {
        match self {
            StreamKind::Exponent => 0,
            StreamKind::SignMantissa => 1,
            StreamKind::Scale => 2,
            StreamKind::RawNibbles => 3,
            StreamKind::Elements => 4,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Ok(match id {
            0 => StreamKind::Exponent,
            1 => StreamKind::SignMantissa,
            2 => StreamKind::Scale,
            3 => StreamKind::RawNibbles,
            4 => StreamKind::Elements,
            other => return Err(Error::Corrupt(format!("unknown stream kind {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Exponent => "exponent",
            StreamKind::SignMantissa => "sign_mantissa",
            StreamKind::Scale => "scale",
            StreamKind::RawNibbles => "raw_nibbles",
            StreamKind::Elements => "elements",
        }
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressOptions {
    pub chunk_size: usize,
    /// Worker count for chunk jobs; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl Default for CompressOptions {
    fn default() -> Self {
        CompressOptions {
            chunk_size: DEFAULT_CHUNK_SIZE,
            threads: None,
        }
    }
}

impl CompressOptions {
    pub fn with_chunk_size(chunk_size: usize) -> Self {
        CompressOptions {
            chunk_size,
            ..Default::default()
        }
    }

    pub(crate) fn run<T: Send>(&self, job: impl FnOnce() -> T + Send) -> Result<T> {
        match self.threads {
            None => Ok(job()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
                Ok(pool.install(job))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub format: ContainerFormat,
    pub flags: u8,
    pub chunk_size: u32,
    pub stream_count: u8,
    pub element_count: u64,
    pub aux: u32,
}

impl ContainerHeader {
    pub fn is_delta(&self) -> bool {
        self.flags & FLAG_DELTA != 0
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.format.id());
        out.push(self.flags);
        out.extend_from_slice(&self.chunk_size.to_le_bytes());
        out.push(self.stream_count);
        out.extend_from_slice(&self.element_count.to_le_bytes());
        out.extend_from_slice(&self.aux.to_le_bytes());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChunkFlag {
    Raw,
    Huffman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkEntry {
    pub flag: ChunkFlag,
    pub codebook_len: u16,
    pub comp_len: u32,
    pub orig_len: u32,
    pub crc32: u32,
}

impl ChunkEntry {
    fn stored_len(&self) -> usize {
        self.codebook_len as usize + self.comp_len as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamDirectory {
    pub kind: StreamKind,
    pub original_len: u64,
    pub chunks: Vec<ChunkEntry>,
}

/// How chunks of a stream may be stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ChunkPolicy {
    Auto,
    ForceRaw,
}

pub(crate) struct StreamInput<'a> {
    pub kind: StreamKind,
    pub data: &'a [u8],
    pub policy: ChunkPolicy,
}

struct EncodedChunk {
    entry: ChunkEntry,
    bytes: Vec<u8>,
}

fn encode_chunk(data: &[u8], policy: ChunkPolicy) -> EncodedChunk {
    let crc32 = crc32fast::hash(data);
    let raw = || EncodedChunk {
        entry: ChunkEntry {
            flag: ChunkFlag::Raw,
            codebook_len: 0,
            comp_len: data.len() as u32,
            orig_len: data.len() as u32,
            crc32,
        },
        bytes: data.to_vec(),
    };
    if policy == ChunkPolicy::ForceRaw || data.is_empty() {
        return raw();
    }
    let h = entropy::histogram(data);
    let cb = entropy::build_codebook(&h).expect("nonempty chunk has a nonempty histogram");
    if entropy::should_compress(&h, &cb, cb.serialized_len()) == Decision::Raw {
        return raw();
    }
    let mut bytes = entropy::serialize_codebook(&cb);
    let codebook_len = bytes.len() as u16;
    let enc = entropy::encode(data, &cb).expect("codebook built from the chunk covers it");
    bytes.extend_from_slice(&enc.payload);
    EncodedChunk {
        entry: ChunkEntry {
            flag: ChunkFlag::Huffman,
            codebook_len,
            comp_len: enc.payload.len() as u32,
            orig_len: data.len() as u32,
            crc32,
        },
        bytes,
    }
}

/// Chunks, codes and serializes a set of streams.
pub(crate) fn write_container(
    format: ContainerFormat,
    flags: u8,
    aux: u32,
    element_count: u64,
    original_bytes: u64,
    streams: &[StreamInput<'_>],
    opts: &CompressOptions,
) -> Result<(Vec<u8>, CompressionReport)> {
    if opts.chunk_size == 0 || opts.chunk_size > u32::MAX as usize {
        return Err(Error::InvalidInput(format!(
            "chunk size {} out of range",
            opts.chunk_size
        )));
    }
    let chunk_size = opts.chunk_size;

    let jobs: Vec<(usize, &[u8], ChunkPolicy)> = streams
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.data.chunks(chunk_size).map(move |c| (i, c, s.policy)))
        .collect();
    let encoded: Vec<EncodedChunk> = opts.run(|| {
        jobs.par_iter()
            .map(|&(_, data, policy)| encode_chunk(data, policy))
            .collect()
    })?;

    let header = ContainerHeader {
        format,
        flags,
        chunk_size: chunk_size as u32,
        stream_count: streams.len() as u8,
        element_count,
        aux,
    };
    let dir_len: usize = streams
        .iter()
        .map(|s| STREAM_HEADER_LEN + CHUNK_ENTRY_LEN * s.data.len().div_ceil(chunk_size))
        .sum();
    let payload_len: usize = encoded.iter().map(|c| c.bytes.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + dir_len + payload_len);
    header.write(&mut out);

    let mut cursor = 0;
    let mut stream_reports = Vec::with_capacity(streams.len());
    for s in streams {
        let n_chunks = s.data.len().div_ceil(chunk_size);
        let chunks = &encoded[cursor..cursor + n_chunks];
        cursor += n_chunks;

        out.push(s.kind.id());
        out.extend_from_slice(&(s.data.len() as u64).to_le_bytes());
        for c in chunks {
            out.push(match c.entry.flag {
                ChunkFlag::Raw => 0,
                ChunkFlag::Huffman => 1,
            });
            out.extend_from_slice(&c.entry.codebook_len.to_le_bytes());
            out.extend_from_slice(&c.entry.comp_len.to_le_bytes());
            out.extend_from_slice(&c.entry.orig_len.to_le_bytes());
            out.extend_from_slice(&c.entry.crc32.to_le_bytes());
        }
        let compressed: usize = chunks.iter().map(|c| c.bytes.len()).sum();
        let huffman_chunks = chunks
            .iter()
            .filter(|c| c.entry.flag == ChunkFlag::Huffman)
            .count();
        stream_reports.push(StreamReport::new(
            s.kind,
            s.data,
            compressed as u64,
            huffman_chunks,
            n_chunks - huffman_chunks,
        ));
    }
    for c in &encoded {
        out.extend_from_slice(&c.bytes);
    }

    let report = CompressionReport::new(
        format.name(),
        element_count,
        original_bytes,
        out.len() as u64,
        (HEADER_LEN + dir_len) as u64,
        stream_reports,
    );
    Ok((out, report))
}

/// A parsed, validated view over container bytes.
#[derive(Debug, Clone)]
pub struct Container<'a> {
    pub header: ContainerHeader,
    pub streams: Vec<StreamDirectory>,
    bytes: &'a [u8],
    /// Byte range of each stream's payload area.
    payload_ranges: Vec<Range<usize>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                needed: end,
                available: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl<'a> Container<'a> {
    /// Parses the header and directory and checks that the payload area has
    /// exactly the advertised size.
    pub fn parse(bytes: &'a [u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic { expected: "ZTNC" });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let format = ContainerFormat::from_id(r.u8()?)?;
        let flags = r.u8()?;
        let chunk_size = r.u32()?;
        let stream_count = r.u8()?;
        let element_count = r.u64()?;
        let aux = r.u32()?;
        if chunk_size == 0 {
            return Err(Error::Corrupt("chunk size is zero".into()));
        }
        let header = ContainerHeader {
            format,
            flags,
            chunk_size,
            stream_count,
            element_count,
            aux,
        };

        let mut streams = Vec::with_capacity(stream_count as usize);
        for _ in 0..stream_count {
            let kind = StreamKind::from_id(r.u8()?)?;
            let original_len = r.u64()?;
            let n_chunks = original_len.div_ceil(u64::from(chunk_size));
            if n_chunks as usize > bytes.len() / CHUNK_ENTRY_LEN + 1 {
                return Err(Error::Truncated {
                    needed: (n_chunks as usize).saturating_mul(CHUNK_ENTRY_LEN),
                    available: bytes.len(),
                });
            }
            let mut chunks = Vec::with_capacity(n_chunks as usize);
            let mut remaining = original_len;
            for index in 0..n_chunks as usize {
                let flag = match r.u8()? {
                    0 => ChunkFlag::Raw,
                    1 => ChunkFlag::Huffman,
                    other => {
                        return Err(Error::CorruptChunk {
                            stream: kind,
                            chunk: index,
                            detail: format!("unknown chunk flag {other}"),
                        })
                    }
                };
                let entry = ChunkEntry {
                    flag,
                    codebook_len: r.u16()?,
                    comp_len: r.u32()?,
                    orig_len: r.u32()?,
                    crc32: r.u32()?,
                };
                let expected = remaining.min(u64::from(chunk_size));
                let bad = if u64::from(entry.orig_len) != expected {
                    Some(format!(
                        "chunk length {} (expected {expected})",
                        entry.orig_len
                    ))
                } else if flag == ChunkFlag::Raw
                    && (entry.comp_len != entry.orig_len || entry.codebook_len != 0)
                {
                    Some("raw chunk with coded lengths".to_string())
                } else if flag == ChunkFlag::Huffman && entry.codebook_len < 4 {
                    Some(format!("codebook length {}", entry.codebook_len))
                } else {
                    None
                };
                if let Some(detail) = bad {
                    return Err(Error::CorruptChunk {
                        stream: kind,
                        chunk: index,
                        detail,
                    });
                }
                remaining -= expected;
                chunks.push(entry);
            }
            streams.push(StreamDirectory {
                kind,
                original_len,
                chunks,
            });
        }

        let mut payload_ranges = Vec::with_capacity(streams.len());
        let mut pos = r.pos;
        for s in &streams {
            let len: usize = s.chunks.iter().map(ChunkEntry::stored_len).sum();
            payload_ranges.push(pos..pos + len);
            pos += len;
        }
        if pos > bytes.len() {
            return Err(Error::Truncated {
                needed: pos,
                available: bytes.len(),
            });
        }
        if pos < bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after payloads",
                bytes.len() - pos
            )));
        }
        Ok(Container {
            header,
            streams,
            bytes,
            payload_ranges,
        })
    }

    /// Bytes taken by the header and all stream directories.
    pub fn metadata_len(&self) -> usize {
        self.payload_ranges
            .first()
            .map_or(self.bytes.len(), |r| r.start)
    }

    fn stream_index(&self, kind: StreamKind) -> Result<usize> {
        self.streams
            .iter()
            .position(|s| s.kind == kind)
            .ok_or(Error::MissingStream(kind))
    }

    pub fn stream(&self, kind: StreamKind) -> Result<&StreamDirectory> {
        Ok(&self.streams[self.stream_index(kind)?])
    }

    pub fn chunk_count(&self, kind: StreamKind) -> Result<usize> {
        Ok(self.stream(kind)?.chunks.len())
    }

    /// Decodes one chunk and verifies its checksum.
    pub fn decode_chunk(&self, kind: StreamKind, index: usize) -> Result<Vec<u8>> {
        let si = self.stream_index(kind)?;
        let dir = &self.streams[si];
        let entry = dir.chunks.get(index).ok_or(Error::OutOfRange {
            index,
            count: dir.chunks.len(),
        })?;
        let start = self.payload_ranges[si].start
            + dir.chunks[..index]
                .iter()
                .map(ChunkEntry::stored_len)
                .sum::<usize>();
        self.decode_entry(
            kind,
            index,
            entry,
            &self.bytes[start..start + entry.stored_len()],
        )
    }

    fn decode_entry(
        &self,
        kind: StreamKind,
        index: usize,
        entry: &ChunkEntry,
        stored: &[u8],
    ) -> Result<Vec<u8>> {
        let corrupt = |e: Error| Error::CorruptChunk {
            stream: kind,
            chunk: index,
            detail: e.to_string(),
        };
        let data = match entry.flag {
            ChunkFlag::Raw => stored.to_vec(),
            ChunkFlag::Huffman => {
                let (cb_bytes, payload) = stored.split_at(entry.codebook_len as usize);
                let cb = entropy::deserialize_codebook(cb_bytes).map_err(corrupt)?;
                entropy::decode_padded(payload, &cb, entry.orig_len as usize).map_err(corrupt)?
            }
        };
        if crc32fast::hash(&data) != entry.crc32 {
            return Err(Error::Checksum {
                stream: kind,
                chunk: index,
            });
        }
        Ok(data)
    }

    /// Decodes a whole stream, chunks in parallel.
    pub fn decode_stream(&self, kind: StreamKind) -> Result<Vec<u8>> {
        let si = self.stream_index(kind)?;
        let dir = &self.streams[si];
        let mut slices = Vec::with_capacity(dir.chunks.len());
        let mut pos = self.payload_ranges[si].start;
        for entry in &dir.chunks {
            slices.push(&self.bytes[pos..pos + entry.stored_len()]);
            pos += entry.stored_len();
        }
        let parts: Vec<Vec<u8>> = dir
            .chunks
            .par_iter()
            .zip(slices.par_iter())
            .enumerate()
            .map(|(i, (entry, stored))| self.decode_entry(kind, i, entry, stored))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(dir.original_len as usize);
        for p in parts {
            out.extend_from_slice(&p);
        }
        Ok(out)
    }
}

/// Splits a BF16/FP8 tensor into exponent and sign+mantissa streams and
/// stores both in a container.
pub fn compress_tensor(
    raw: &[u8],
    format: FloatFormat,
    opts: &CompressOptions,
) -> Result<(Vec<u8>, CompressionReport)> {
    compress_planes(raw, format, 0, 0, opts)
}

pub(crate) fn compress_planes(
    raw: &[u8],
    format: FloatFormat,
    flags: u8,
    aux: u32,
    opts: &CompressOptions,
) -> Result<(Vec<u8>, CompressionReport)> {
    let planes = formats::split(raw, format)?;
    let streams = [
        StreamInput {
            kind: StreamKind::Exponent,
            data: &planes.exponent_stream,
            policy: ChunkPolicy::Auto,
        },
        StreamInput {
            kind: StreamKind::SignMantissa,
            data: &planes.sign_mantissa_stream,
            policy: ChunkPolicy::Auto,
        },
    ];
    let (bytes, report) = write_container(
        format.into(),
        flags,
        aux,
        planes.element_count as u64,
        raw.len() as u64,
        &streams,
        opts,
    )?;
    // E5M2 streams are zero-extended to whole bytes, so raw chunks plus
    // codebooks can add up to more than the input. Keep the worst case at
    // input size plus metadata.
    let split_len = planes.exponent_stream.len() + planes.sign_mantissa_stream.len();
    let elements_container_len = HEADER_LEN
        + STREAM_HEADER_LEN
        + CHUNK_ENTRY_LEN * raw.len().div_ceil(opts.chunk_size)
        + raw.len();
    if split_len > raw.len() && bytes.len() > elements_container_len {
        let elements = [StreamInput {
            kind: StreamKind::Elements,
            data: raw,
            policy: ChunkPolicy::ForceRaw,
        }];
        return write_container(
            format.into(),
            flags,
            aux,
            planes.element_count as u64,
            raw.len() as u64,
            &elements,
            opts,
        );
    }
    Ok((bytes, report))
}

/// Restores the exact bytes passed to [`compress_tensor`].
pub fn decompress_tensor(bytes: &[u8]) -> Result<Vec<u8>> {
    let c = Container::parse(bytes)?;
    c.decode_tensor()
}

impl Container<'_> {
    pub(crate) fn decode_tensor(&self) -> Result<Vec<u8>> {
        let format = self.header.format.float_format().ok_or_else(|| {
            Error::InvalidInput(format!(
                "{} container holds an fp4 tensor; use decompress_fp4",
                self.header.format.name()
            ))
        })?;
        let n = usize::try_from(self.header.element_count)
            .map_err(|_| Error::Corrupt("element count overflows".into()))?;
        if let [dir] = self.streams.as_slice() {
            if dir.kind == StreamKind::Elements {
                if Some(dir.original_len) != format.element_bytes().map(|b| (n * b) as u64) {
                    return Err(Error::Corrupt(format!(
                        "elements stream length does not match {n} elements"
                    )));
                }
                return self.decode_stream(StreamKind::Elements);
            }
        }
        let expected = BitPlanes::stream_len(format, n) as u64;
        for kind in [StreamKind::Exponent, StreamKind::SignMantissa] {
            if self.stream(kind)?.original_len != expected {
                return Err(Error::Corrupt(format!(
                    "{kind} stream length does not match {n} elements"
                )));
            }
        }
        let planes = BitPlanes {
            format,
            element_count: n,
            exponent_stream: self.decode_stream(StreamKind::Exponent)?,
            sign_mantissa_stream: self.decode_stream(StreamKind::SignMantissa)?,
            pad_elements: if format == FloatFormat::Fp8E4M3 {
                n % 2
            } else {
                0
            },
        };
        formats::merge(&planes)
    }
}

/// Random access to one chunk of one stream.
pub fn decode_chunk(bytes: &[u8], kind: StreamKind, index: usize) -> Result<Vec<u8>> {
    Container::parse(bytes)?.decode_chunk(kind, index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bytes(n: usize, seed: u64) -> Vec<u8> {
        let mut v = vec![0u8; n];
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
        v
    }

    #[test]
    fn header_layout() {
        let (bytes, _) = compress_tensor(
            &[0x80, 0x3f],
            FloatFormat::Bf16,
            &CompressOptions::with_chunk_size(4096),
        )
        .unwrap();
        assert_eq!(&bytes[..4], b"ZTNC");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], ContainerFormat::Bf16.id());
        assert_eq!(bytes[7], 0);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4096);
        assert_eq!(bytes[12], 2);
        assert_eq!(u64::from_le_bytes(bytes[13..21].try_into().unwrap()), 1);
        assert_eq!(bytes[HEADER_LEN], StreamKind::Exponent.id());
    }

    #[test]
    fn zeros_compress_below_bound() {
        let raw = vec![0u8; 1 << 20];
        let (bytes, report) =
            compress_tensor(&raw, FloatFormat::Bf16, &CompressOptions::default()).unwrap();
        // Each of 4 chunks codes 262144 symbols at one bit plus a 4-byte codebook.
        let expected = HEADER_LEN + 2 * (STREAM_HEADER_LEN + 2 * CHUNK_ENTRY_LEN) + 4 * (4 + 32768);
        assert_eq!(bytes.len(), expected);
        assert!(report.ratio < 0.15);
        assert_eq!(decompress_tensor(&bytes).unwrap(), raw);
    }

    #[test]
    fn uniform_random_stays_raw() {
        let raw = random_bytes(1 << 20, 1);
        let (bytes, report) =
            compress_tensor(&raw, FloatFormat::Bf16, &CompressOptions::default()).unwrap();
        assert!(report.ratio <= 1.01);
        for s in &report.streams {
            assert_eq!(s.huffman_chunks, 0);
        }
        assert_eq!(decompress_tensor(&bytes).unwrap(), raw);
    }

    #[test]
    fn report_sizes_add_up() {
        let raw = random_bytes(10_000, 2)
            .iter()
            .map(|b| b & 0x83)
            .collect::<Vec<_>>();
        let (bytes, report) = compress_tensor(
            &raw,
            FloatFormat::Fp8E4M3,
            &CompressOptions::with_chunk_size(1000),
        )
        .unwrap();
        let streams: u64 = report.streams.iter().map(|s| s.compressed_bytes).sum();
        assert_eq!(streams + report.overhead_bytes, bytes.len() as u64);
        assert_eq!(report.compressed_bytes, bytes.len() as u64);
        assert_eq!(
            Container::parse(&bytes).unwrap().metadata_len() as u64,
            report.overhead_bytes
        );
    }

    #[test]
    fn chunks_slice_the_stream() {
        let raw: Vec<u8> = (0..5000u32).map(|i| (i % 7) as u8 | 0x30).collect();
        let (bytes, _) = compress_tensor(
            &raw,
            FloatFormat::Fp8E5M2,
            &CompressOptions::with_chunk_size(2048),
        )
        .unwrap();
        let c = Container::parse(&bytes).unwrap();
        for kind in [StreamKind::Exponent, StreamKind::SignMantissa] {
            let full = c.decode_stream(kind).unwrap();
            assert_eq!(c.chunk_count(kind).unwrap(), 3);
            let mut joined = Vec::new();
            for i in 0..3 {
                let chunk = c.decode_chunk(kind, i).unwrap();
                let start = i * 2048;
                assert_eq!(chunk, full[start..(start + 2048).min(full.len())]);
                joined.extend(chunk);
            }
            assert_eq!(joined, full);
            assert!(matches!(
                c.decode_chunk(kind, 3),
                Err(Error::OutOfRange { index: 3, count: 3 })
            ));
        }
    }

    #[test]
    fn flipped_payload_bit_names_chunk() {
        let raw = vec![0u8; 8192];
        let (mut bytes, _) = compress_tensor(
            &raw,
            FloatFormat::Bf16,
            &CompressOptions::with_chunk_size(1024),
        )
        .unwrap();
        // last chunk of the sign+mantissa stream is the final payload
        let last = bytes.len() - 1;
        bytes[last] ^= 0x10;
        match decompress_tensor(&bytes) {
            Err(Error::Checksum { stream, chunk })
            | Err(Error::CorruptChunk { stream, chunk, .. }) => {
                assert_eq!(stream, StreamKind::SignMantissa);
                assert_eq!(chunk, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn raw_chunk_bit_flip_is_checksum_error() {
        let raw = random_bytes(8192, 9);
        let (mut bytes, _) = compress_tensor(
            &raw,
            FloatFormat::Bf16,
            &CompressOptions::with_chunk_size(1024),
        )
        .unwrap();
        let c = Container::parse(&bytes).unwrap();
        assert!(c.streams[1].chunks.iter().all(|e| e.flag == ChunkFlag::Raw));
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(
            decompress_tensor(&bytes),
            Err(Error::Checksum {
                stream: StreamKind::SignMantissa,
                chunk: 3
            })
        ));
    }

    #[test]
    fn truncation_and_header_damage() {
        let raw = random_bytes(3000, 4);
        let (bytes, _) = compress_tensor(
            &raw,
            FloatFormat::Bf16,
            &CompressOptions::with_chunk_size(512),
        )
        .unwrap();
        for cut in [0, 3, 10, HEADER_LEN + 3, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(
                    decompress_tensor(&bytes[..cut]),
                    Err(Error::Truncated { .. })
                ),
                "cut at {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decompress_tensor(&bad),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decompress_tensor(&bad),
            Err(Error::UnsupportedVersion(9))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decompress_tensor(&extra).unwrap_err().is_corruption());
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let raw: Vec<u8> = random_bytes(300_000, 8).iter().map(|b| b & 0x8f).collect();
        let one = compress_tensor(
            &raw,
            FloatFormat::Bf16,
            &CompressOptions {
                chunk_size: 8192,
                threads: Some(1),
            },
        )
        .unwrap()
        .0;
        let four = compress_tensor(
            &raw,
            FloatFormat::Bf16,
            &CompressOptions {
                chunk_size: 8192,
                threads: Some(4),
            },
        )
        .unwrap()
        .0;
        assert_eq!(one, four);
    }

    #[test]
    fn empty_tensor_roundtrips() {
        let (bytes, report) =
            compress_tensor(&[], FloatFormat::Fp8E4M3, &CompressOptions::default()).unwrap();
        assert_eq!(report.original_bytes, 0);
        assert!(decompress_tensor(&bytes).unwrap().is_empty());
    }

    #[test]
    fn zero_chunk_size_rejected() {
        assert!(compress_tensor(
            &[0, 0],
            FloatFormat::Bf16,
            &CompressOptions::with_chunk_size(0)
        )
        .is_err());
    }

    #[test]
    fn e5m2_never_expands_past_metadata() {
        for (len, chunk) in [(1 << 20, DEFAULT_CHUNK_SIZE), (37, 4), (1000, 1)] {
            let raw = random_bytes(len, 9);
            let opts = CompressOptions::with_chunk_size(chunk);
            let (bytes, report) = compress_tensor(&raw, FloatFormat::Fp8E5M2, &opts).unwrap();
            assert!(report.compressed_bytes <= report.original_bytes + report.overhead_bytes);
            assert_eq!(report.streams.len(), 1);
            assert_eq!(report.streams[0].kind, StreamKind::Elements);
            assert_eq!(decompress_tensor(&bytes).unwrap(), raw);
        }
        // skewed e5m2 still splits
        let raw: Vec<u8> = random_bytes(50_000, 10)
            .iter()
            .map(|b| 0x38 | (b & 0x83))
            .collect();
        let (_, report) =
            compress_tensor(&raw, FloatFormat::Fp8E5M2, &CompressOptions::default()).unwrap();
        assert!(report.stream(StreamKind::Exponent).is_some());
        assert!(report.ratio < 0.6);
    }
}
