//! Compression reports. All ratios are compressed size over original size.

use serde::{Deserialize, Serialize};

use crate::container::StreamKind;
use crate::entropy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolCount {
    pub symbol: u8,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub kind: StreamKind,
    pub original_bytes: u64,
    /// Codebooks plus coded (or raw) payload bytes for this stream.
    pub compressed_bytes: u64,
    pub ratio: f64,
    pub entropy_bits_per_symbol: f64,
    pub top_symbols: Vec<SymbolCount>,
    pub huffman_chunks: usize,
    pub raw_chunks: usize,
}

impl StreamReport {
    pub(crate) fn new(
        kind: StreamKind,
        data: &[u8],
        compressed_bytes: u64,
        huffman_chunks: usize,
        raw_chunks: usize,
    ) -> Self {
        let h = entropy::histogram(data);
        StreamReport {
            kind,
            original_bytes: data.len() as u64,
            compressed_bytes,
            ratio: ratio(compressed_bytes, data.len() as u64),
            entropy_bits_per_symbol: entropy::entropy_bits_per_symbol(&h).unwrap_or(0.0),
            top_symbols: h
                .top(8)
                .into_iter()
                .map(|(symbol, count)| SymbolCount { symbol, count })
                .collect(),
            huffman_chunks,
            raw_chunks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub format: String,
    pub element_count: u64,
    pub original_bytes: u64,
    /// Whole container size, headers and directories included.
    pub compressed_bytes: u64,
    /// Header plus stream directory bytes.
    pub overhead_bytes: u64,
    pub ratio: f64,
    pub streams: Vec<StreamReport>,
}

impl CompressionReport {
    pub(crate) fn new(
        format: &str,
        element_count: u64,
        original_bytes: u64,
        compressed_bytes: u64,
        overhead_bytes: u64,
        streams: Vec<StreamReport>,
    ) -> Self {
        CompressionReport {
            format: format.to_string(),
            element_count,
            original_bytes,
            compressed_bytes,
            overhead_bytes,
            ratio: ratio(compressed_bytes, original_bytes),
            streams,
        }
    }

    pub fn stream(&self, kind: StreamKind) -> Option<&StreamReport> {
        self.streams.iter().find(|s| s.kind == kind)
    }
}

/// `compressed / original`, defined as 1.0 for empty inputs.
pub fn ratio(compressed: u64, original: u64) -> f64 {
    if original == 0 {
        1.0
    } else {
        compressed as f64 / original as f64
    }
}
