//! Block-scaled FP4 tensors (MXFP4, NVFP4).
//!
//! Only the scale stream is entropy coded. The packed 4-bit payload is stored
//! byte-for-byte: regrouping its bits into bytes does not expose enough
//! redundancy to pay for a codebook, which [`regroup_bits_experiment`] lets
//! callers measure on their own data.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::container::{
    write_container, ChunkPolicy, CompressOptions, Container, ContainerFormat, StreamInput,
    StreamKind,
};
use crate::entropy;
use crate::error::{Error, Result};
use crate::formats::FloatFormat;
use crate::report::{ratio, CompressionReport, SymbolCount};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fp4Scheme {
    Mxfp4,
    Nvfp4,
}

impl Fp4Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Fp4Scheme::Mxfp4 => "mxfp4",
            Fp4Scheme::Nvfp4 => "nvfp4",
        }
    }
}

impl fmt::Display for Fp4Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fp4Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mxfp4" => Ok(Fp4Scheme::Mxfp4),
            "nvfp4" => Ok(Fp4Scheme::Nvfp4),
            other => Err(Error::InvalidInput(format!("unknown fp4 scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleFormat {
    /// Power-of-two scale, `2^(bits - 127)`; 0xff is NaN.
    E8M0,
    Fp8E4M3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fp4Layout {
    pub scheme: Fp4Scheme,
    pub block_size: usize,
    pub scale_format: ScaleFormat,
    pub element_format: FloatFormat,
}

impl Fp4Layout {
    pub const MXFP4: Fp4Layout = Fp4Layout {
        scheme: Fp4Scheme::Mxfp4,
        block_size: 32,
        scale_format: ScaleFormat::E8M0,
        element_format: FloatFormat::Fp4E2M1,
    };

    pub const NVFP4: Fp4Layout = Fp4Layout {
        scheme: Fp4Scheme::Nvfp4,
        block_size: 16,
        scale_format: ScaleFormat::Fp8E4M3,
        element_format: FloatFormat::Fp4E2M1,
    };

    pub fn for_scheme(scheme: Fp4Scheme) -> Self {
        match scheme {
            Fp4Scheme::Mxfp4 => Self::MXFP4,
            Fp4Scheme::Nvfp4 => Self::NVFP4,
        }
    }

    pub fn scale_count(&self, element_count: usize) -> usize {
        element_count.div_ceil(self.block_size)
    }

    /// Value of one scale byte.
    pub fn scale_value(&self, bits: u8) -> f64 {
        match self.scale_format {
            ScaleFormat::E8M0 if bits == 0xff => f64::NAN,
            ScaleFormat::E8M0 => 2f64.powi(i32::from(bits) - 127),
            ScaleFormat::Fp8E4M3 => {
                crate::formats::decode_value(u32::from(bits), FloatFormat::Fp8E4M3)
            }
        }
    }

    /// Element count implied by a combined payload-then-scales buffer of
    /// `len` bytes, assuming whole blocks.
    pub fn elements_in_combined(&self, len: usize) -> Option<usize> {
        // n/2 + n/B = len  =>  n = 2B·len / (B + 2)
        let b = self.block_size;
        let num = 2 * b * len;
        num.is_multiple_of(b + 2)
            .then_some(num / (b + 2))
            .filter(|n| n % b == 0)
    }
}

/// Packed FP4 codes (two per byte, first element in the high nibble) and
/// one scale byte per block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fp4Tensor {
    pub nibbles: Vec<u8>,
    pub element_count: usize,
    pub scales: Vec<u8>,
    pub layout: Fp4Layout,
}

impl Fp4Tensor {
    pub fn new(
        nibbles: Vec<u8>,
        element_count: usize,
        scales: Vec<u8>,
        layout: Fp4Layout,
    ) -> Result<Self> {
        let t = Fp4Tensor {
            nibbles,
            element_count,
            scales,
            layout,
        };
        t.validate()?;
        Ok(t)
    }

    /// Packs one code per element (low 4 bits used), padding an odd tail with 0.
    pub fn from_codes(codes: &[u8], scales: Vec<u8>, layout: Fp4Layout) -> Result<Self> {
        let nibbles = codes
            .chunks(2)
            .map(|p| ((p[0] & 0xf) << 4) | p.get(1).map_or(0, |c| c & 0xf))
            .collect();
        Self::new(nibbles, codes.len(), scales, layout)
    }

    pub fn codes(&self) -> Vec<u8> {
        self.nibbles
            .iter()
            .flat_map(|b| [b >> 4, b & 0xf])
            .take(self.element_count)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layout.block_size == 0 {
            return Err(Error::InvalidInput("block size is zero".into()));
        }
        if self.nibbles.len() != self.element_count.div_ceil(2) {
            return Err(Error::InvalidInput(format!(
                "{} payload bytes cannot hold exactly {} fp4 elements",
                self.nibbles.len(),
                self.element_count
            )));
        }
        let scales = self.layout.scale_count(self.element_count);
        if self.scales.len() != scales {
            return Err(Error::InvalidInput(format!(
                "{} scales for {} elements in blocks of {} (expected {scales})",
                self.scales.len(),
                self.element_count,
                self.layout.block_size
            )));
        }
        Ok(())
    }

    /// Dequantized values, for diagnostics.
    pub fn values(&self) -> Vec<f64> {
        self.codes()
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let scale = self
                    .layout
                    .scale_value(self.scales[i / self.layout.block_size]);
                crate::formats::decode_value(u32::from(c), FloatFormat::Fp4E2M1) * scale
            })
            .collect()
    }
}

pub fn compress_fp4(t: &Fp4Tensor, opts: &CompressOptions) -> Result<(Vec<u8>, CompressionReport)> {
    t.validate()?;
    let format = match t.layout.scheme {
        Fp4Scheme::Mxfp4 => ContainerFormat::Mxfp4,
        Fp4Scheme::Nvfp4 => ContainerFormat::Nvfp4,
    };
    if t.layout != Fp4Layout::for_scheme(t.layout.scheme) {
        return Err(Error::InvalidInput(format!(
            "non-standard {} layout cannot be stored",
            t.layout.scheme
        )));
    }
    let streams = [
        StreamInput {
            kind: StreamKind::RawNibbles,
            data: &t.nibbles,
            policy: ChunkPolicy::ForceRaw,
        },
        StreamInput {
            kind: StreamKind::Scale,
            data: &t.scales,
            policy: ChunkPolicy::Auto,
        },
    ];
    write_container(
        format,
        0,
        0,
        t.element_count as u64,
        (t.nibbles.len() + t.scales.len()) as u64,
        &streams,
        opts,
    )
}

pub fn decompress_fp4(bytes: &[u8]) -> Result<Fp4Tensor> {
    let c = Container::parse(bytes)?;
    let layout = match c.header.format {
        ContainerFormat::Mxfp4 => Fp4Layout::MXFP4,
        ContainerFormat::Nvfp4 => Fp4Layout::NVFP4,
        other => {
            return Err(Error::InvalidInput(format!(
                "{} container does not hold an fp4 tensor",
                other.name()
            )))
        }
    };
    let n = usize::try_from(c.header.element_count)
        .map_err(|_| Error::Corrupt("element count overflows".into()))?;
    let nibbles = c.decode_stream(StreamKind::RawNibbles)?;
    let scales = c.decode_stream(StreamKind::Scale)?;
    Fp4Tensor::new(nibbles, n, scales, layout)
        .map_err(|e| Error::Corrupt(format!("fp4 container inconsistent: {e}")))
}

/// Outcome of regrouping FP4 bits into bytes and pricing them with Huffman.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegroupReport {
    pub bits_per_element: u32,
    pub elements_used: usize,
    pub regrouped_bytes: usize,
    pub entropy_bits_per_symbol: f64,
    /// Coded payload plus one serialized codebook for the whole stream.
    pub huffman_bytes: usize,
    pub ratio: f64,
    pub top_symbols: Vec<SymbolCount>,
}

/// Takes the top `bits_per_element` bits of each FP4 code (sign first) and
/// concatenates them across `8 / bits_per_element` consecutive elements into
/// one byte, first element in the most significant position. A trailing
/// partial group is dropped.
pub fn regroup_bits_experiment(
    nibbles: &[u8],
    element_count: usize,
    bits_per_element: u32,
) -> Result<(Vec<u8>, RegroupReport)> {
    if !matches!(bits_per_element, 1 | 2 | 4) {
        return Err(Error::InvalidInput(format!(
            "bits per element must be 1, 2 or 4, got {bits_per_element}"
        )));
    }
    if element_count > nibbles.len() * 2 {
        return Err(Error::InvalidInput(format!(
            "{element_count} elements do not fit in {} bytes",
            nibbles.len()
        )));
    }
    let per_byte = (8 / bits_per_element) as usize;
    let groups = element_count / per_byte;
    let code = |i: usize| {
        let b = nibbles[i / 2];
        if i.is_multiple_of(2) {
            b >> 4
        } else {
            b & 0xf
        }
    };
    let stream: Vec<u8> = (0..groups)
        .map(|g| {
            (0..per_byte).fold(0u8, |acc, k| {
                let top = code(g * per_byte + k) >> (4 - bits_per_element);
                (acc << bits_per_element) | top
            })
        })
        .collect();

    let h = entropy::histogram(&stream);
    let (entropy_bits, huffman_bytes) = if stream.is_empty() {
        (0.0, 0)
    } else {
        let cb = entropy::build_codebook(&h)?;
        let bits = cb.encoded_bits(&h)?;
        (
            entropy::entropy_bits_per_symbol(&h)?,
            bits.div_ceil(8) as usize + cb.serialized_len(),
        )
    };
    let report = RegroupReport {
        bits_per_element,
        elements_used: groups * per_byte,
        regrouped_bytes: stream.len(),
        entropy_bits_per_symbol: entropy_bits,
        huffman_bytes,
        ratio: ratio(huffman_bytes as u64, stream.len() as u64),
        top_symbols: h
            .top(8)
            .into_iter()
            .map(|(symbol, count)| SymbolCount { symbol, count })
            .collect(),
    };
    Ok((stream, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layouts() {
        assert_eq!(Fp4Layout::MXFP4.block_size, 32);
        assert_eq!(Fp4Layout::NVFP4.block_size, 16);
        assert_eq!(Fp4Layout::MXFP4.scale_value(127), 1.0);
        assert_eq!(Fp4Layout::MXFP4.scale_value(130), 8.0);
        assert!(Fp4Layout::MXFP4.scale_value(0xff).is_nan());
        assert_eq!(Fp4Layout::NVFP4.scale_value(0x38), 1.0);
        assert_eq!(
            Fp4Layout::NVFP4.elements_in_combined(16 * 8 / 2 + 8),
            Some(128)
        );
        assert_eq!(Fp4Layout::MXFP4.elements_in_combined(17), Some(32));
        assert_eq!(Fp4Layout::MXFP4.elements_in_combined(18), None);
    }

    #[test]
    fn regroup_packs_top_bits_in_order() {
        // top-2 bits 00, 01, 10, 11 -> codes 0b0011, 0b0110, 0b1001, 0b1111
        let t = Fp4Tensor::from_codes(
            &[0b0011, 0b0110, 0b1001, 0b1111],
            vec![127],
            Fp4Layout::MXFP4,
        )
        .unwrap();
        let (stream, report) = regroup_bits_experiment(&t.nibbles, 4, 2).unwrap();
        assert_eq!(stream, vec![0x1b]);
        assert_eq!(report.elements_used, 4);
    }

    #[test]
    fn regroup_drops_partial_group() {
        let (stream, report) = regroup_bits_experiment(&[0xff, 0xff, 0xf0], 5, 2).unwrap();
        assert_eq!(stream, vec![0xff]);
        assert_eq!(report.elements_used, 4);
        let (stream, _) = regroup_bits_experiment(&[0xff], 2, 2).unwrap();
        assert!(stream.is_empty());
    }

    #[test]
    fn regroup_identical_elements_compress() {
        let nibbles = vec![0x55u8; 4096];
        let (stream, report) = regroup_bits_experiment(&nibbles, 8192, 2).unwrap();
        assert!(stream.iter().all(|&b| b == 0b0101_0101));
        assert!(report.ratio < 0.15);
    }

    #[test]
    fn regroup_rejects_bad_width() {
        assert!(regroup_bits_experiment(&[0], 2, 3).is_err());
    }

    #[test]
    fn constant_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 32 * 4096;
        let codes: Vec<u8> = (0..n).map(|_| rng.random_range(0..16u8)).collect();
        let t = Fp4Tensor::from_codes(&codes, vec![120; n / 32], Fp4Layout::MXFP4).unwrap();
        let (c, report) = compress_fp4(&t, &CompressOptions::default()).unwrap();
        assert!(report.stream(StreamKind::Scale).unwrap().ratio < 0.15);
        assert_eq!(report.stream(StreamKind::RawNibbles).unwrap().ratio, 1.0);
        assert_eq!(decompress_fp4(&c).unwrap(), t);
    }

    #[test]
    fn nibble_payload_stored_verbatim() {
        let mut nibbles = vec![0u8; 800];
        ChaCha8Rng::seed_from_u64(2).fill_bytes(&mut nibbles);
        let t = Fp4Tensor::new(nibbles.clone(), 1600, vec![0x38; 100], Fp4Layout::NVFP4).unwrap();
        let (c, _) = compress_fp4(&t, &CompressOptions::default()).unwrap();
        let container = Container::parse(&c).unwrap();
        let start = container.metadata_len();
        assert_eq!(&c[start..start + nibbles.len()], &nibbles[..]);
    }

    #[test]
    fn ragged_tail_roundtrip() {
        let codes: Vec<u8> = (0..37u8).map(|i| i % 16).collect();
        let t = Fp4Tensor::from_codes(&codes, vec![1, 2, 3], Fp4Layout::NVFP4).unwrap();
        assert_eq!(t.nibbles.len(), 19);
        assert_eq!(t.nibbles[18] & 0xf, 0);
        let (c, _) = compress_fp4(&t, &CompressOptions::with_chunk_size(7)).unwrap();
        let back = decompress_fp4(&c).unwrap();
        assert_eq!(back.codes(), codes);
        assert_eq!(back, t);
    }

    #[test]
    fn inconsistent_counts_rejected() {
        assert!(Fp4Tensor::new(vec![0; 8], 16, vec![0; 2], Fp4Layout::NVFP4).is_err());
        assert!(Fp4Tensor::new(vec![0; 7], 16, vec![0; 1], Fp4Layout::NVFP4).is_err());
    }

    #[test]
    fn truncated_container_rejected() {
        let t = Fp4Tensor::from_codes(&[1; 64], vec![127, 127], Fp4Layout::MXFP4).unwrap();
        let (c, _) = compress_fp4(&t, &CompressOptions::default()).unwrap();
        assert!(matches!(
            decompress_fp4(&c[..c.len() - 1]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn values_dequantize() {
        // code 0b0010 = 1.0, scale 2^3
        let t = Fp4Tensor::from_codes(&[0b0010, 0b1111], vec![130], Fp4Layout::MXFP4).unwrap();
        assert_eq!(t.values(), vec![8.0, -48.0]);
    }
}
