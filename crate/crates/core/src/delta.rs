//! XOR deltas between two BF16 checkpoints of the same shape.
//!
//! The delta is the positionwise XOR of the two buffers, compressed as an
//! ordinary BF16 tensor. Unchanged parameters XOR to zero, so both streams of
//! a delta between nearby checkpoints are dominated by the zero symbol.

use rayon::prelude::*;

use crate::container::{self, CompressOptions, Container, FLAG_DELTA};
use crate::error::{Error, Result};
use crate::formats::FloatFormat;
use crate::report::CompressionReport;

const XOR_BLOCK: usize = 1 << 16;

pub fn xor_delta(base: &[u8], next: &[u8]) -> Result<Vec<u8>> {
    if base.len() != next.len() {
        return Err(Error::LengthMismatch {
            expected: base.len(),
            actual: next.len(),
        });
    }
    let mut out = vec![0u8; base.len()];
    out.par_chunks_mut(XOR_BLOCK)
        .zip(base.par_chunks(XOR_BLOCK).zip(next.par_chunks(XOR_BLOCK)))
        .for_each(|(o, (a, b))| {
            for ((o, a), b) in o.iter_mut().zip(a).zip(b) {
                *o = a ^ b;
            }
        });
    Ok(out)
}

/// Compresses `next` relative to `base`. The container carries the delta
/// flag and the CRC32 of `base` so a mismatched base is caught on apply.
pub fn compress_delta(
    base: &[u8],
    next: &[u8],
    opts: &CompressOptions,
) -> Result<(Vec<u8>, CompressionReport)> {
    let delta = xor_delta(base, next)?;
    container::compress_planes(
        &delta,
        FloatFormat::Bf16,
        FLAG_DELTA,
        crc32fast::hash(base),
        opts,
    )
}

/// Rebuilds the newer checkpoint from `base` and a delta container.
pub fn apply_delta(base: &[u8], delta_container: &[u8]) -> Result<Vec<u8>> {
    let c = Container::parse(delta_container)?;
    if !c.header.is_delta() {
        return Err(Error::InvalidInput("container is not a delta".into()));
    }
    let expected = c.header.element_count as usize * 2;
    if base.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: base.len(),
        });
    }
    if crc32fast::hash(base) != c.header.aux {
        return Err(Error::BaseMismatch);
    }
    let delta = c.decode_tensor()?;
    xor_delta(base, &delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::StreamKind;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn checkpoint(n: usize, seed: u64) -> Vec<u8> {
        let mut v = vec![0u8; n * 2];
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
        v
    }

    #[test]
    fn xor_basics() {
        let base = [0x3f, 0x80];
        assert_eq!(xor_delta(&base, &[0x3f, 0x81]).unwrap(), vec![0x00, 0x01]);
        assert_eq!(xor_delta(&base, &base).unwrap(), vec![0, 0]);
        let next = [0x12, 0x34];
        let d = xor_delta(&base, &next).unwrap();
        assert_eq!(xor_delta(&base, &d).unwrap(), next);
        assert!(xor_delta(&base, &[1]).is_err());
    }

    #[test]
    fn identical_checkpoints() {
        let base = checkpoint(1 << 19, 1);
        let (c, report) = compress_delta(&base, &base, &CompressOptions::default()).unwrap();
        assert!(report.ratio < 0.15);
        assert_eq!(apply_delta(&base, &c).unwrap(), base);
    }

    #[test]
    fn sparse_lsb_flips() {
        let base = checkpoint(1 << 19, 2);
        let mut next = base.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..base.len() / 2 {
            if rng.random_bool(0.01) {
                next[2 * i] ^= 1;
            }
        }
        let (c, report) = compress_delta(&base, &next, &CompressOptions::default()).unwrap();
        let exp = report.stream(StreamKind::Exponent).unwrap();
        assert_eq!(exp.top_symbols[0].symbol, 0);
        assert_eq!(exp.top_symbols.len(), 1);
        assert!(report.ratio < 0.30, "ratio {}", report.ratio);
        assert_eq!(apply_delta(&base, &c).unwrap(), next);
    }

    #[test]
    fn wrong_base_rejected() {
        let base = checkpoint(1000, 4);
        let next = checkpoint(1000, 5);
        let (c, _) = compress_delta(&base, &next, &CompressOptions::default()).unwrap();
        assert!(matches!(
            apply_delta(&base[..100], &c),
            Err(Error::LengthMismatch {
                expected: 2000,
                actual: 100
            })
        ));
        let other = checkpoint(1000, 6);
        assert!(matches!(apply_delta(&other, &c), Err(Error::BaseMismatch)));
    }

    #[test]
    fn plain_container_is_not_a_delta() {
        let (c, _) =
            container::compress_tensor(&[0, 0], FloatFormat::Bf16, &CompressOptions::default())
                .unwrap();
        assert!(apply_delta(&[0, 0], &c).is_err());
    }

    #[test]
    fn odd_length_rejected() {
        assert!(compress_delta(&[1, 2, 3], &[1, 2, 3], &CompressOptions::default()).is_err());
    }
}
