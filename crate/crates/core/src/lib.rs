//! Lossless compression for low-precision neural-network tensors.
//!
//! Floating-point elements are split into an exponent stream and a
//! sign+mantissa stream ([`formats`]), each stream is cut into fixed-size
//! chunks and Huffman coded per chunk with raw fallback ([`entropy`],
//! [`container`]). On top of that sit XOR deltas between checkpoints
//! ([`delta`]), block-scaled FP4 tensors whose scale stream is coded
//! ([`fp4`]), streaming K/V-cache sessions with static codebooks
//! ([`kvcache`]) and whole-model archives ([`ingest`]).
//!
//! ```
//! use ztnc::{compress_tensor, decompress_tensor, CompressOptions, FloatFormat};
//!
//! let raw = vec![0u8; 4096];
//! let (container, report) = compress_tensor(&raw, FloatFormat::Bf16, &CompressOptions::default())?;
//! assert!(report.ratio < 0.2);
//! assert_eq!(decompress_tensor(&container)?, raw);
//! # Ok::<(), ztnc::Error>(())
//! ```

pub mod container;
pub mod delta;
pub mod entropy;
mod error;
pub mod formats;
pub mod fp4;
pub mod ingest;
pub mod kvcache;
pub mod report;
pub mod synth;

pub use container::{
    compress_tensor, decode_chunk, decompress_tensor, CompressOptions, Container, ContainerFormat,
    StreamKind, DEFAULT_CHUNK_SIZE,
};
pub use delta::{apply_delta, compress_delta, xor_delta};
pub use error::{Error, Result};
pub use formats::{merge, split, BitPlanes, FloatFormat};
pub use fp4::{
    compress_fp4, decompress_fp4, regroup_bits_experiment, Fp4Layout, Fp4Scheme, Fp4Tensor,
};
pub use kvcache::{decode_session, KvConfig, KvDecoder, KvSession, RebuildDecision};
pub use report::{CompressionReport, StreamReport};

/// Runs the full compression pipeline and returns only the report.
pub fn profile(
    raw: &[u8],
    format: FloatFormat,
    opts: &CompressOptions,
) -> Result<CompressionReport> {
    compress_tensor(raw, format, opts).map(|(_, report)| report)
}
