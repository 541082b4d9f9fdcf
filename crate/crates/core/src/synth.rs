//! Synthetic tensors for tests, benchmarks and `kv-bench`.
//!
//! The conversions here round to nearest-even and saturate; they exist to
//! produce realistic bit patterns, not as a production quantizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::fp4::{Fp4Layout, Fp4Scheme, Fp4Tensor};

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize, mean: f32, std_dev: f32) -> Vec<f32> {
    let normal = Normal::new(mean, std_dev).expect("finite, non-negative std dev");
    (0..n).map(|_| normal.sample(rng)).collect()
}

pub fn f32_to_bf16(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return ((bits >> 16) as u16) | 0x40;
    }
    let round = 0x7fff + ((bits >> 16) & 1);
    (bits.wrapping_add(round) >> 16) as u16
}

/// Little-endian BF16 bytes.
pub fn to_bf16_bytes(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| f32_to_bf16(v).to_le_bytes())
        .collect()
}

/// Saturating conversion to FP8 E4M3 (max 448, no infinities).
pub fn f32_to_e4m3(x: f32) -> u8 {
    if x.is_nan() {
        return 0x7f;
    }
    let sign = if x.is_sign_negative() { 0x80 } else { 0 };
    let a = x.abs();
    if a >= 448.0 {
        return sign | 0x7e;
    }
    if a < 2f32.powi(-6) {
        // subnormal grid has step 2^-9; 8 steps round up into the first normal
        let m = (f64::from(a) * 512.0).round_ties_even() as u8;
        return sign | m;
    }
    let e = ((a.to_bits() >> 23) & 0xff) as i32 - 127;
    let frac = f64::from(a) / 2f64.powi(e) - 1.0;
    let mut m = (frac * 8.0).round_ties_even() as i32;
    let mut e = e;
    if m == 8 {
        m = 0;
        e += 1;
    }
    let bits = (((e + 7) << 3) | m).min(0x7e);
    sign | bits as u8
}

pub fn to_e4m3_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().map(|&v| f32_to_e4m3(v)).collect()
}

const E2M1_MAGNITUDES: [f32; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

/// Nearest E2M1 code (ties to even code), saturating at ±6.
pub fn f32_to_e2m1(x: f32) -> u8 {
    let sign = if x.is_sign_negative() { 0x8 } else { 0 };
    let a = x.abs();
    if a.is_nan() || a >= 6.0 {
        return sign | 0x7;
    }
    let mut best = 0usize;
    for (i, &m) in E2M1_MAGNITUDES.iter().enumerate().skip(1) {
        let d = (a - m).abs();
        let db = (a - E2M1_MAGNITUDES[best]).abs();
        if d < db || (d == db && i % 2 == 0) {
            best = i;
        }
    }
    sign | best as u8
}

/// Block-quantizes values into FP4 codes with per-block scales.
///
/// MXFP4 uses a power-of-two scale `2^(floor(log2(absmax)) - 2)` so the block
/// maximum lands in [4, 8); NVFP4 uses `absmax / 6` rounded to E4M3.
pub fn quantize_fp4(values: &[f32], scheme: Fp4Scheme) -> Fp4Tensor {
    let layout = Fp4Layout::for_scheme(scheme);
    let mut codes = Vec::with_capacity(values.len());
    let mut scales = Vec::with_capacity(layout.scale_count(values.len()));
    for block in values.chunks(layout.block_size) {
        let absmax = block.iter().fold(0f32, |m, v| m.max(v.abs()));
        let (scale_bits, scale) = match scheme {
            Fp4Scheme::Mxfp4 => {
                let exp = if absmax > 0.0 {
                    (((absmax.to_bits() >> 23) & 0xff) as i32 - 127 - 2).clamp(-127, 127)
                } else {
                    0
                };
                ((exp + 127) as u8, 2f32.powi(exp))
            }
            Fp4Scheme::Nvfp4 => {
                let bits = f32_to_e4m3(absmax / 6.0);
                (bits, layout.scale_value(bits) as f32)
            }
        };
        scales.push(scale_bits);
        for &v in block {
            codes.push(if scale > 0.0 {
                f32_to_e2m1(v / scale)
            } else {
                0
            });
        }
    }
    Fp4Tensor::from_codes(&codes, scales, layout).expect("quantizer emits consistent counts")
}
