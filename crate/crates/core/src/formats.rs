//! Floating-point bit layouts and the exponent / sign+mantissa stream split.
//!
//! Splitting never looks at numeric values: it only moves bit fields around,
//! so every byte pattern (NaNs, infinities, negative zero) survives a
//! split/merge round trip unchanged.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element encodings understood by the codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FloatFormat {
    Bf16,
    Fp8E4M3,
    Fp8E5M2,
    Fp4E2M1,
}

impl FloatFormat {
    pub const ALL: [FloatFormat; 4] = [
        FloatFormat::Bf16,
        FloatFormat::Fp8E4M3,
        FloatFormat::Fp8E5M2,
        FloatFormat::Fp4E2M1,
    ];

    pub const fn sign_bits(self) -> u32 {
        1
    }

    pub const fn exponent_bits(self) -> u32 {
        match self {
            FloatFormat::Bf16 => 8,
            FloatFormat::Fp8E4M3 => 4,
            FloatFormat::Fp8E5M2 => 5,
            FloatFormat::Fp4E2M1 => 2,
        }
    }

    pub const fn mantissa_bits(self) -> u32 {
        match self {
            FloatFormat::Bf16 => 7,
            FloatFormat::Fp8E4M3 => 3,
            FloatFormat::Fp8E5M2 => 2,
            FloatFormat::Fp4E2M1 => 1,
        }
    }

    pub const fn bias(self) -> i32 {
        match self {
            FloatFormat::Bf16 => 127,
            FloatFormat::Fp8E4M3 => 7,
            FloatFormat::Fp8E5M2 => 15,
            FloatFormat::Fp4E2M1 => 1,
        }
    }

    pub const fn element_bits(self) -> u32 {
        match self {
            FloatFormat::Bf16 => 16,
            FloatFormat::Fp8E4M3 | FloatFormat::Fp8E5M2 => 8,
            FloatFormat::Fp4E2M1 => 4,
        }
    }

    /// Storage bytes per element for the byte-addressable formats.
    pub const fn element_bytes(self) -> Option<usize> {
        match self {
            FloatFormat::Bf16 => Some(2),
            FloatFormat::Fp8E4M3 | FloatFormat::Fp8E5M2 => Some(1),
            FloatFormat::Fp4E2M1 => None,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            FloatFormat::Bf16 => "bf16",
            FloatFormat::Fp8E4M3 => "fp8-e4m3",
            FloatFormat::Fp8E5M2 => "fp8-e5m2",
            FloatFormat::Fp4E2M1 => "fp4-e2m1",
        }
    }

    /// Number of stored elements in `byte_len` bytes, rejecting partial elements.
    pub fn element_count(self, byte_len: usize) -> Result<usize> {
        let element_bytes = self.element_bytes().ok_or_else(|| {
            Error::InvalidInput("fp4 payloads are handled by the fp4 module".into())
        })?;
        if !byte_len.is_multiple_of(element_bytes) {
            return Err(Error::Size {
                len: byte_len,
                element_bytes,
            });
        }
        Ok(byte_len / element_bytes)
    }
}

impl fmt::Display for FloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FloatFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bf16" => Ok(FloatFormat::Bf16),
            "fp8-e4m3" | "e4m3" | "f8_e4m3" => Ok(FloatFormat::Fp8E4M3),
            "fp8-e5m2" | "e5m2" | "f8_e5m2" => Ok(FloatFormat::Fp8E5M2),
            "fp4-e2m1" | "e2m1" => Ok(FloatFormat::Fp4E2M1),
            other => Err(Error::InvalidInput(format!("unknown format {other:?}"))),
        }
    }
}

/// The two byte streams produced by [`split`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlanes {
    pub format: FloatFormat,
    pub element_count: usize,
    pub exponent_stream: Vec<u8>,
    pub sign_mantissa_stream: Vec<u8>,
    /// 1 when an odd E4M3 element count left a zero pad nibble at the end.
    pub pad_elements: usize,
}

impl BitPlanes {
    /// Expected byte length of each stream for `element_count` elements.
    pub fn stream_len(format: FloatFormat, element_count: usize) -> usize {
        match format {
            FloatFormat::Fp8E4M3 => element_count.div_ceil(2),
            _ => element_count,
        }
    }
}

/// Splits raw little-endian tensor bytes into exponent and sign+mantissa streams.
///
/// * BF16: one exponent byte (bits 14..7) and one `sign << 7 | mantissa` byte per element.
/// * E4M3: 4-bit fields of consecutive element pairs share a byte, first element
///   in the high nibble.
/// * E5M2: each 5-bit exponent and each 3-bit `sign << 2 | mantissa` gets its own byte.
pub fn split(raw: &[u8], format: FloatFormat) -> Result<BitPlanes> {
    let n = format.element_count(raw.len())?;
    let (exponent_stream, sign_mantissa_stream, pad_elements) = match format {
        FloatFormat::Bf16 => {
            let mut exp = Vec::with_capacity(n);
            let mut sm = Vec::with_capacity(n);
            for pair in raw.chunks_exact(2) {
                let v = u16::from_le_bytes([pair[0], pair[1]]);
                exp.push((v >> 7) as u8);
                sm.push((((v >> 15) as u8) << 7) | (v & 0x7f) as u8);
            }
            (exp, sm, 0)
        }
        FloatFormat::Fp8E4M3 => {
            let len = n.div_ceil(2);
            let mut exp = Vec::with_capacity(len);
            let mut sm = Vec::with_capacity(len);
            for pair in raw.chunks(2) {
                let (e0, s0) = e4m3_fields(pair[0]);
                let (e1, s1) = pair.get(1).map_or((0, 0), |&b| e4m3_fields(b));
                exp.push((e0 << 4) | e1);
                sm.push((s0 << 4) | s1);
            }
            (exp, sm, n % 2)
        }
        FloatFormat::Fp8E5M2 => {
            let exp = raw.iter().map(|&b| (b >> 2) & 0x1f).collect();
            let sm = raw.iter().map(|&b| ((b >> 7) << 2) | (b & 0x3)).collect();
            (exp, sm, 0)
        }
        FloatFormat::Fp4E2M1 => unreachable!("rejected by element_count"),
    };
    Ok(BitPlanes {
        format,
        element_count: n,
        exponent_stream,
        sign_mantissa_stream,
        pad_elements,
    })
}

#[inline]
fn e4m3_fields(b: u8) -> (u8, u8) {
    ((b >> 3) & 0xf, ((b >> 7) << 3) | (b & 0x7))
}

/// Inverse of [`split`]. Pad nibbles are ignored.
pub fn merge(planes: &BitPlanes) -> Result<Vec<u8>> {
    let n = planes.element_count;
    let format = planes.format;
    let element_bytes = format
        .element_bytes()
        .ok_or_else(|| Error::InvalidInput("fp4 payloads are handled by the fp4 module".into()))?;
    let expected = BitPlanes::stream_len(format, n);
    for (name, stream) in [
        ("exponent", &planes.exponent_stream),
        ("sign_mantissa", &planes.sign_mantissa_stream),
    ] {
        if stream.len() != expected {
            return Err(Error::Corrupt(format!(
                "{name} stream has {} bytes, expected {expected} for {n} {format} elements",
                stream.len()
            )));
        }
    }
    let expected_pad = if format == FloatFormat::Fp8E4M3 {
        n % 2
    } else {
        0
    };
    if planes.pad_elements != expected_pad {
        return Err(Error::Corrupt(format!(
            "pad element count {} inconsistent with {n} elements",
            planes.pad_elements
        )));
    }

    let exp = &planes.exponent_stream;
    let sm = &planes.sign_mantissa_stream;
    let mut out = Vec::with_capacity(n * element_bytes);
    match format {
        FloatFormat::Bf16 => {
            for (&e, &s) in exp.iter().zip(sm) {
                let v = (u16::from(s >> 7) << 15) | (u16::from(e) << 7) | u16::from(s & 0x7f);
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        FloatFormat::Fp8E4M3 => {
            for (i, (&e, &s)) in exp.iter().zip(sm).enumerate() {
                out.push(e4m3_join(e >> 4, s >> 4));
                if 2 * i + 1 < n {
                    out.push(e4m3_join(e & 0xf, s & 0xf));
                }
            }
        }
        FloatFormat::Fp8E5M2 => {
            for (&e, &s) in exp.iter().zip(sm) {
                if e > 0x1f || s > 0x7 {
                    return Err(Error::Corrupt(format!(
                        "e5m2 field out of range (exponent {e:#x}, sign+mantissa {s:#x})"
                    )));
                }
                out.push(((s >> 2) << 7) | (e << 2) | (s & 0x3));
            }
        }
        FloatFormat::Fp4E2M1 => unreachable!(),
    }
    Ok(out)
}

#[inline]
fn e4m3_join(exp: u8, sm: u8) -> u8 {
    ((sm >> 3) << 7) | (exp << 3) | (sm & 0x7)
}

/// Numeric value of one element bit pattern. Used for reports only.
pub fn decode_value(bits: u32, format: FloatFormat) -> f64 {
    let m_bits = format.mantissa_bits();
    let e_bits = format.exponent_bits();
    let mant = bits & ((1 << m_bits) - 1);
    let exp = (bits >> m_bits) & ((1 << e_bits) - 1);
    let sign = if (bits >> (m_bits + e_bits)) & 1 == 1 {
        -1.0
    } else {
        1.0
    };
    let exp_max = (1 << e_bits) - 1;
    let mant_max = (1 << m_bits) - 1;

    match format {
        FloatFormat::Fp8E4M3 if exp == exp_max && mant == mant_max => return f64::NAN,
        FloatFormat::Bf16 | FloatFormat::Fp8E5M2 if exp == exp_max => {
            return if mant == 0 {
                sign * f64::INFINITY
            } else {
                f64::NAN
            };
        }
        _ => {}
    }
    let scale = f64::from(1u32 << m_bits);
    let bias = format.bias();
    if exp == 0 {
        sign * 2f64.powi(1 - bias) * (f64::from(mant) / scale)
    } else {
        sign * 2f64.powi(exp as i32 - bias) * (1.0 + f64::from(mant) / scale)
    }
}
