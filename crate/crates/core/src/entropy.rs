//! Canonical Huffman coding over byte symbols.
//!
//! Code lengths come from package-merge with a 15-bit cap, so a codebook is
//! always optimal among prefix codes no deeper than [`MAX_CODE_LEN`]. Codewords
//! are assigned canonically in (length, symbol) order and packed
//! most-significant-bit first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_CODE_LEN: u8 = 15;

/// Chunks whose coded size (payload plus codebook) is not below this fraction
/// of the original are stored raw.
pub const FALLBACK_THRESHOLD: f64 = 0.98;

/// Bits resolved by one lookup in the decode table; longer codes take the slow path.
const TABLE_BITS: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub counts: [u64; 256],
    pub total: u64,
}

impl Default for Histogram {
    fn default() -> Self {
        Histogram {
            counts: [0; 256],
            total: 0,
        }
    }
}

impl Histogram {
    pub fn from_counts(counts: [u64; 256]) -> Self {
        let total = counts.iter().sum();
        Histogram { counts, total }
    }

    /// Adds `other` into `self`. Histograms of partitions merge associatively.
    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
        self.total += other.total;
    }

    pub fn present_symbols(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Up to `k` most frequent symbols, ties broken by ascending symbol.
    pub fn top(&self, k: usize) -> Vec<(u8, u64)> {
        let mut v: Vec<(u8, u64)> = (0..=255u8)
            .zip(self.counts.iter().copied())
            .filter(|&(_, c)| c > 0)
            .collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.truncate(k);
        v
    }
}

pub fn histogram(data: &[u8]) -> Histogram {
    let mut counts = [0u64; 256];
    for &b in data {
        counts[b as usize] += 1;
    }
    Histogram {
        counts,
        total: data.len() as u64,
    }
}

/// Shannon entropy in bits per symbol.
pub fn entropy_bits_per_symbol(h: &Histogram) -> Result<f64> {
    if h.total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let total = h.total as f64;
    Ok(h.counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0))
}

/// A canonical prefix code over byte symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codebook {
    lengths: [u8; 256],
    codes: [u16; 256],
}

impl Codebook {
    /// Builds the canonical code for the given lengths after checking that
    /// they form a complete prefix code (or the single-symbol length-1 code).
    pub fn from_lengths(lengths: [u8; 256]) -> Result<Self> {
        let present: Vec<u8> = lengths.iter().copied().filter(|&l| l > 0).collect();
        if present.is_empty() {
            return Err(Error::Corrupt("codebook has no symbols".into()));
        }
        if let Some(&l) = present.iter().find(|&&l| l > MAX_CODE_LEN) {
            return Err(Error::Corrupt(format!(
                "code length {l} exceeds {MAX_CODE_LEN}"
            )));
        }
        let kraft: u64 = present.iter().map(|&l| 1u64 << (MAX_CODE_LEN - l)).sum();
        let single = present.len() == 1 && present[0] == 1;
        if kraft != 1 << MAX_CODE_LEN && !single {
            return Err(Error::Corrupt(format!(
                "code lengths violate the Kraft equality ({kraft}/{})",
                1u64 << MAX_CODE_LEN
            )));
        }
        Ok(Codebook {
            lengths,
            codes: canonical_codes(&lengths),
        })
    }

    pub fn lengths(&self) -> &[u8; 256] {
        &self.lengths
    }

    pub fn length(&self, symbol: u8) -> u8 {
        self.lengths[symbol as usize]
    }

    pub fn code(&self, symbol: u8) -> Option<u16> {
        (self.lengths[symbol as usize] > 0).then(|| self.codes[symbol as usize])
    }

    pub fn max_len(&self) -> u8 {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    pub fn present_symbols(&self) -> usize {
        self.lengths.iter().filter(|&&l| l > 0).count()
    }

    /// Exact encoded size in bits of data with histogram `h`, or the first
    /// symbol that has no code.
    pub fn encoded_bits(&self, h: &Histogram) -> Result<u64> {
        let mut bits = 0u64;
        for (s, &c) in h.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            match self.lengths[s] {
                0 => return Err(Error::SymbolAbsent(s as u8)),
                l => bits += c * u64::from(l),
            }
        }
        Ok(bits)
    }

    /// Size of [`serialize_codebook`] output.
    pub fn serialized_len(&self) -> usize {
        2 + 2 * self.present_symbols()
    }
}

fn canonical_codes(lengths: &[u8; 256]) -> [u16; 256] {
    let mut order: Vec<u8> = (0..=255u8).filter(|&s| lengths[s as usize] > 0).collect();
    order.sort_by_key(|&s| (lengths[s as usize], s));
    let mut codes = [0u16; 256];
    let mut code: u32 = 0;
    let mut prev_len = 0u8;
    for (i, &s) in order.iter().enumerate() {
        let len = lengths[s as usize];
        if i > 0 {
            code = (code + 1) << (len - prev_len);
        } else {
            code <<= len;
        }
        codes[s as usize] = code as u16;
        prev_len = len;
    }
    codes
}

/// Optimal length-limited prefix code for `h`.
///
/// A single present symbol gets length 1.
pub fn build_codebook(h: &Histogram) -> Result<Codebook> {
    if h.total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let mut leaves: Vec<(u64, u8)> = (0..=255u8)
        .map(|s| (h.counts[s as usize], s))
        .filter(|&(c, _)| c > 0)
        .collect();
    leaves.sort_unstable();

    let mut lengths = [0u8; 256];
    if leaves.len() == 1 {
        lengths[leaves[0].1 as usize] = 1;
    } else {
        let weights: Vec<u64> = leaves.iter().map(|&(w, _)| w).collect();
        for (&(_, s), len) in leaves.iter().zip(package_merge(&weights, MAX_CODE_LEN)) {
            lengths[s as usize] = len;
        }
    }
    Codebook::from_lengths(lengths)
}

#[derive(Clone, Copy)]
enum Item {
    Leaf(usize),
    Package(usize),
}

/// Code lengths for weights sorted ascending (at least two of them).
///
/// Coin-collector formulation: each level merges the original leaves with
/// pairs packaged from the level below; the cheapest `2n - 2` items of the
/// last level decide how many times each leaf is counted. Equal weights put
/// leaves before packages, and leaves keep their input order.
fn package_merge(weights: &[u64], max_len: u8) -> Vec<u8> {
    let n = weights.len();
    debug_assert!(n >= 2 && n <= 1 << max_len);
    let keep = 2 * n - 2;

    let mut levels: Vec<Vec<(u64, Item)>> = Vec::with_capacity(max_len as usize);
    levels.push(
        weights
            .iter()
            .enumerate()
            .map(|(i, &w)| (w, Item::Leaf(i)))
            .take(keep)
            .collect(),
    );
    for _ in 1..max_len {
        let prev = levels.last().expect("level 0 exists");
        let mut packages = prev
            .chunks_exact(2)
            .enumerate()
            .map(|(k, pair)| (pair[0].0 + pair[1].0, Item::Package(2 * k)))
            .peekable();
        let mut leaves = weights.iter().enumerate().peekable();
        let mut next = Vec::with_capacity(keep);
        while next.len() < keep {
            let take_leaf = match (leaves.peek(), packages.peek()) {
                (Some(&(_, &lw)), Some(&(pw, _))) => lw <= pw,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            if take_leaf {
                let (i, &w) = leaves.next().expect("peeked");
                next.push((w, Item::Leaf(i)));
            } else {
                next.push(packages.next().expect("peeked"));
            }
        }
        levels.push(next);
    }

    let mut lengths = vec![0u8; n];
    let top = levels.len() - 1;
    let mut stack: Vec<(usize, usize)> =
        (0..keep.min(levels[top].len())).map(|i| (top, i)).collect();
    while let Some((level, idx)) = stack.pop() {
        match levels[level][idx].1 {
            Item::Leaf(i) => lengths[i] += 1,
            Item::Package(first) => {
                stack.push((level - 1, first));
                stack.push((level - 1, first + 1));
            }
        }
    }
    lengths
}

/// Huffman-coded bits.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedStream {
    pub payload: Vec<u8>,
    pub bit_count: u64,
    pub symbol_count: usize,
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    fn with_capacity(bytes: usize) -> Self {
        BitWriter {
            out: Vec::with_capacity(bytes),
            acc: 0,
            filled: 0,
        }
    }

    #[inline]
    fn put(&mut self, code: u16, len: u8) {
        self.acc = (self.acc << len) | u64::from(code);
        self.filled += u32::from(len);
        while self.filled >= 8 {
            self.filled -= 8;
            self.out.push((self.acc >> self.filled) as u8);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.out.push((self.acc << (8 - self.filled)) as u8);
        }
        self.out
    }
}

pub fn encode(data: &[u8], cb: &Codebook) -> Result<EncodedStream> {
    let bit_count = cb.encoded_bits(&histogram(data))?;
    let mut w = BitWriter::with_capacity(bit_count.div_ceil(8) as usize);
    for &s in data {
        w.put(cb.codes[s as usize], cb.lengths[s as usize]);
    }
    let payload = w.finish();
    debug_assert_eq!(payload.len() as u64, bit_count.div_ceil(8));
    Ok(EncodedStream {
        payload,
        bit_count,
        symbol_count: data.len(),
    })
}

/// Table-driven canonical decoder built from a codebook.
struct Decoder {
    /// `symbol << 4 | len`, or 0 when the prefix needs more than `TABLE_BITS` bits.
    table: Vec<u16>,
    first_code: [u32; 16],
    count: [u32; 16],
    offset: [u32; 16],
    sorted: Vec<u8>,
}

impl Decoder {
    fn new(cb: &Codebook) -> Self {
        let mut sorted: Vec<u8> = (0..=255u8).filter(|&s| cb.length(s) > 0).collect();
        sorted.sort_by_key(|&s| (cb.length(s), s));
        let mut count = [0u32; 16];
        for &s in &sorted {
            count[cb.length(s) as usize] += 1;
        }
        let mut first_code = [0u32; 16];
        let mut offset = [0u32; 16];
        let mut code = 0u32;
        let mut idx = 0u32;
        for len in 1..16 {
            first_code[len] = code;
            offset[len] = idx;
            code = (code + count[len]) << 1;
            idx += count[len];
        }
        let mut table = vec![0u16; 1 << TABLE_BITS];
        for &s in &sorted {
            let len = u32::from(cb.length(s));
            if len <= TABLE_BITS {
                let base = (u32::from(cb.codes[s as usize]) << (TABLE_BITS - len)) as usize;
                let entry = (u16::from(s) << 4) | len as u16;
                table[base..base + (1 << (TABLE_BITS - len))].fill(entry);
            }
        }
        Decoder {
            table,
            first_code,
            count,
            offset,
            sorted,
        }
    }

    /// Decodes `n` symbols, returning them and the number of bits consumed.
    fn decode(&self, payload: &[u8], limit_bits: u64, n: usize) -> Result<(Vec<u8>, u64)> {
        let mut out = Vec::with_capacity(n);
        let mut pos = 0u64;
        let bit_at = |p: u64| -> u32 { u32::from(payload[(p >> 3) as usize] >> (7 - (p & 7)) & 1) };
        while out.len() < n {
            let remaining = limit_bits - pos;
            if remaining == 0 {
                return Err(Error::Corrupt(format!(
                    "bitstream exhausted after {} of {n} symbols",
                    out.len()
                )));
            }
            let window = peek_bits(payload, pos, TABLE_BITS);
            let entry = self.table[window as usize];
            let len = u64::from(entry & 0xf);
            if len > 0 && len <= remaining {
                out.push((entry >> 4) as u8);
                pos += len;
                continue;
            }
            // Slow path: walk the canonical tiers bit by bit.
            let mut code = 0u32;
            let mut found = false;
            for len in 1..=u64::from(MAX_CODE_LEN).min(remaining) {
                code = (code << 1) | bit_at(pos + len - 1);
                let l = len as usize;
                let rel = code.wrapping_sub(self.first_code[l]);
                if code >= self.first_code[l] && rel < self.count[l] {
                    out.push(self.sorted[(self.offset[l] + rel) as usize]);
                    pos += len;
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(Error::Corrupt(format!(
                    "invalid code at bit {pos} (symbol {} of {n})",
                    out.len()
                )));
            }
        }
        Ok((out, pos))
    }
}

#[inline]
fn peek_bits(payload: &[u8], pos: u64, bits: u32) -> u32 {
    let byte = (pos >> 3) as usize;
    let mut buf = [0u8; 4];
    let avail = payload.len().saturating_sub(byte).min(4);
    buf[..avail].copy_from_slice(&payload[byte..byte + avail]);
    let word = u32::from_be_bytes(buf);
    (word << (pos & 7)) >> (32 - bits)
}

/// Decodes exactly `n` symbols that must consume exactly `stream.bit_count` bits.
pub fn decode(stream: &EncodedStream, cb: &Codebook, n: usize) -> Result<Vec<u8>> {
    if stream.payload.len() as u64 != stream.bit_count.div_ceil(8) {
        return Err(Error::Corrupt(format!(
            "payload of {} bytes cannot hold exactly {} bits",
            stream.payload.len(),
            stream.bit_count
        )));
    }
    let (out, used) = Decoder::new(cb).decode(&stream.payload, stream.bit_count, n)?;
    if used != stream.bit_count {
        return Err(Error::Corrupt(format!(
            "{} trailing bits after {n} symbols",
            stream.bit_count - used
        )));
    }
    Ok(out)
}

/// Decodes `n` symbols from a byte-padded payload whose exact bit count was
/// not stored: the symbols must end in the last byte and the pad bits must be zero.
pub fn decode_padded(payload: &[u8], cb: &Codebook, n: usize) -> Result<Vec<u8>> {
    let limit = payload.len() as u64 * 8;
    let (out, used) = Decoder::new(cb).decode(payload, limit, n)?;
    if used.div_ceil(8) != payload.len() as u64 {
        return Err(Error::Corrupt(format!(
            "{} unused payload bytes after {n} symbols",
            payload.len() as u64 - used.div_ceil(8)
        )));
    }
    let pad = (limit - used) as u32;
    if pad > 0 && payload[payload.len() - 1] & ((1u8 << pad) - 1) != 0 {
        return Err(Error::Corrupt("nonzero padding bits".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Huffman,
    Raw,
}

/// Chooses Huffman coding only when payload plus codebook stays under
/// [`FALLBACK_THRESHOLD`] of the original size.
pub fn should_compress(h: &Histogram, cb: &Codebook, codebook_ser_size: usize) -> Decision {
    if h.total == 0 {
        return Decision::Raw;
    }
    let Ok(bits) = cb.encoded_bits(h) else {
        return Decision::Raw;
    };
    let coded = bits.div_ceil(8) + codebook_ser_size as u64;
    if (coded as f64) / (h.total as f64) < FALLBACK_THRESHOLD {
        Decision::Huffman
    } else {
        Decision::Raw
    }
}

/// `u16` LE present-symbol count followed by `(symbol, length)` byte pairs in
/// ascending symbol order.
pub fn serialize_codebook(cb: &Codebook) -> Vec<u8> {
    let mut out = Vec::with_capacity(cb.serialized_len());
    out.extend_from_slice(&(cb.present_symbols() as u16).to_le_bytes());
    for s in 0..=255u8 {
        let l = cb.length(s);
        if l > 0 {
            out.push(s);
            out.push(l);
        }
    }
    out
}

/// Parses a codebook and returns it with the number of bytes it occupied.
pub fn deserialize_codebook_prefix(bytes: &[u8]) -> Result<(Codebook, usize)> {
    if bytes.len() < 2 {
        return Err(Error::Corrupt("codebook header truncated".into()));
    }
    let count = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
    if count == 0 || count > 256 {
        return Err(Error::Corrupt(format!("codebook symbol count {count}")));
    }
    let end = 2 + 2 * count;
    if bytes.len() < end {
        return Err(Error::Corrupt("codebook entries truncated".into()));
    }
    let mut lengths = [0u8; 256];
    let mut prev: Option<u8> = None;
    for pair in bytes[2..end].chunks_exact(2) {
        let (s, l) = (pair[0], pair[1]);
        if prev.is_some_and(|p| p >= s) {
            return Err(Error::Corrupt(
                "codebook symbols not strictly ascending".into(),
            ));
        }
        if l == 0 {
            return Err(Error::Corrupt(format!(
                "zero code length for symbol {s:#04x}"
            )));
        }
        lengths[s as usize] = l;
        prev = Some(s);
    }
    Ok((Codebook::from_lengths(lengths)?, end))
}

pub fn deserialize_codebook(bytes: &[u8]) -> Result<Codebook> {
    let (cb, used) = deserialize_codebook_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after codebook",
            bytes.len() - used
        )));
    }
    Ok(cb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hist(pairs: &[(u8, u64)]) -> Histogram {
        let mut counts = [0u64; 256];
        for &(s, c) in pairs {
            counts[s as usize] = c;
        }
        Histogram::from_counts(counts)
    }

    #[test]
    fn histogram_counts() {
        let h = histogram(&[]);
        assert_eq!(h.total, 0);
        assert!(h.counts.iter().all(|&c| c == 0));

        let h = histogram(&[0x41, 0x41, 0x42]);
        assert_eq!(h.counts[0x41], 2);
        assert_eq!(h.counts[0x42], 1);
        assert_eq!(h.total, 3);
    }

    #[test]
    fn histogram_uniform_within_five_sigma() {
        // 256 KiB over 256 symbols: mean 1024, sigma = sqrt(n p (1-p)) ~ 31.9.
        let mut data = vec![0u8; 256 * 1024];
        ChaCha8Rng::seed_from_u64(11).fill_bytes(&mut data);
        let h = histogram(&data);
        let n = data.len() as f64;
        let p = 1.0 / 256.0;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for &c in &h.counts {
            assert!((c as f64 - 1024.0).abs() < 5.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn three_symbol_lengths() {
        let cb = build_codebook(&hist(&[(b'A', 2), (b'B', 1), (b'C', 1)])).unwrap();
        assert_eq!(cb.length(b'A'), 1);
        assert_eq!(cb.length(b'B'), 2);
        assert_eq!(cb.length(b'C'), 2);
        assert_eq!(cb.code(b'A'), Some(0b0));
        assert_eq!(cb.code(b'B'), Some(0b10));
        assert_eq!(cb.code(b'C'), Some(0b11));
    }

    #[test]
    fn uniform_alphabet_is_balanced() {
        let cb = build_codebook(&Histogram::from_counts([5; 256])).unwrap();
        assert!(cb.lengths().iter().all(|&l| l == 8));
    }

    #[test]
    fn single_symbol_gets_one_bit() {
        let cb = build_codebook(&hist(&[(b'X', 100)])).unwrap();
        assert_eq!(cb.length(b'X'), 1);
        assert_eq!(cb.present_symbols(), 1);
    }

    #[test]
    fn empty_histogram_rejected() {
        assert!(matches!(
            build_codebook(&Histogram::default()),
            Err(Error::EmptyHistogram)
        ));
        assert!(entropy_bits_per_symbol(&Histogram::default()).is_err());
    }

    #[test]
    fn fibonacci_weights_hit_the_length_cap() {
        // Unconstrained Huffman on 20 Fibonacci weights is 19 levels deep.
        let mut counts = [0u64; 256];
        let (mut a, mut b) = (1u64, 1u64);
        for c in counts.iter_mut().take(20) {
            *c = a;
            (a, b) = (b, a + b);
        }
        let cb = build_codebook(&Histogram::from_counts(counts)).unwrap();
        assert_eq!(cb.max_len(), MAX_CODE_LEN);
        assert_eq!(cb.present_symbols(), 20);
        let data: Vec<u8> = (0..20u8).collect();
        let enc = encode(&data, &cb).unwrap();
        assert_eq!(decode(&enc, &cb, 20).unwrap(), data);
    }

    #[test]
    fn canonical_tiers_are_consecutive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0u64; 256];
        for c in counts.iter_mut() {
            *c = rng.random_range(0..1000u64).pow(2) / 100;
        }
        let cb = build_codebook(&Histogram::from_counts(counts)).unwrap();
        let mut order: Vec<u8> = (0..=255u8).filter(|&s| cb.length(s) > 0).collect();
        order.sort_by_key(|&s| (cb.length(s), s));
        for w in order.windows(2) {
            let (a, b) = (w[0], w[1]);
            let expected = (u32::from(cb.code(a).unwrap()) + 1) << (cb.length(b) - cb.length(a));
            assert_eq!(u32::from(cb.code(b).unwrap()), expected);
        }
    }

    #[test]
    fn degenerate_stream_is_one_bit_per_symbol() {
        let data = vec![0x42u8; 1000];
        let cb = build_codebook(&histogram(&data)).unwrap();
        let enc = encode(&data, &cb).unwrap();
        assert_eq!(enc.bit_count, 1000);
        assert_eq!(enc.payload.len(), 125);
        assert_eq!(decode(&enc, &cb, 1000).unwrap(), data);
    }

    #[test]
    fn empty_input_encodes_to_nothing() {
        let cb = build_codebook(&hist(&[(1, 1)])).unwrap();
        let enc = encode(&[], &cb).unwrap();
        assert_eq!(enc.bit_count, 0);
        assert!(enc.payload.is_empty());
        assert!(decode(&enc, &cb, 0).unwrap().is_empty());
    }

    #[test]
    fn absent_symbol_is_named() {
        let cb = build_codebook(&hist(&[(1, 1), (2, 1)])).unwrap();
        assert!(matches!(encode(&[1, 7], &cb), Err(Error::SymbolAbsent(7))));
    }

    #[test]
    fn decode_detects_exhaustion_and_leftovers() {
        let data = b"abracadabra".to_vec();
        let cb = build_codebook(&histogram(&data)).unwrap();
        let enc = encode(&data, &cb).unwrap();
        assert!(decode(&enc, &cb, data.len() + 5)
            .unwrap_err()
            .is_corruption());
        assert!(decode(&enc, &cb, data.len() - 1)
            .unwrap_err()
            .is_corruption());
    }

    #[test]
    fn single_symbol_code_rejects_one_bits() {
        let cb = build_codebook(&hist(&[(9, 4)])).unwrap();
        let stream = EncodedStream {
            payload: vec![0b0100_0000],
            bit_count: 4,
            symbol_count: 4,
        };
        assert!(decode(&stream, &cb, 4).is_err());
    }

    #[test]
    fn decode_padded_checks_padding() {
        let data = vec![3u8, 3, 4, 5, 3];
        let cb = build_codebook(&histogram(&data)).unwrap();
        let mut enc = encode(&data, &cb).unwrap();
        assert_eq!(decode_padded(&enc.payload, &cb, 5).unwrap(), data);
        *enc.payload.last_mut().unwrap() |= 1;
        assert!(decode_padded(&enc.payload, &cb, 5).is_err());
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy_bits_per_symbol(&hist(&[(0, 9)])).unwrap(), 0.0);
        assert_eq!(
            entropy_bits_per_symbol(&hist(&[(0, 5), (1, 5)])).unwrap(),
            1.0
        );
        let expected = -0.75f64 * 0.75f64.log2() - 0.25 * 0.25f64.log2();
        let got = entropy_bits_per_symbol(&hist(&[(b'A', 3), (b'B', 1)])).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.811_278_124_459_132_9).abs() < 1e-12);
    }

    #[test]
    fn fallback_decisions() {
        let mut data = vec![0u8; 64 * 1024];
        ChaCha8Rng::seed_from_u64(5).fill_bytes(&mut data);
        let h = histogram(&data);
        let cb = build_codebook(&h).unwrap();
        assert_eq!(should_compress(&h, &cb, cb.serialized_len()), Decision::Raw);

        let h = histogram(&vec![7u8; 64 * 1024]);
        let cb = build_codebook(&h).unwrap();
        assert_eq!(
            should_compress(&h, &cb, cb.serialized_len()),
            Decision::Huffman
        );

        // four symbols carry 99% of the mass, the rest is spread thin
        let mut counts = [0u64; 256];
        counts[..4].copy_from_slice(&[40_000, 15_000, 6_000, 3_900]);
        for c in counts.iter_mut().skip(4).take(100) {
            *c = 6;
        }
        let h = Histogram::from_counts(counts);
        let cb = build_codebook(&h).unwrap();
        assert!(entropy_bits_per_symbol(&h).unwrap() < 2.5);
        assert_eq!(
            should_compress(&h, &cb, cb.serialized_len()),
            Decision::Huffman
        );
    }

    #[test]
    fn serialize_degenerate_codebook() {
        let cb = build_codebook(&hist(&[(0x58, 3)])).unwrap();
        assert_eq!(serialize_codebook(&cb), vec![0x01, 0x00, 0x58, 0x01]);
    }

    #[test]
    fn kraft_violations_rejected() {
        // three symbols of length 1
        assert!(deserialize_codebook(&[3, 0, 1, 1, 2, 1, 3, 1]).is_err());
        // incomplete: lengths 1 and 2 only
        assert!(deserialize_codebook(&[2, 0, 1, 1, 2, 2]).is_err());
        // too long
        assert!(deserialize_codebook(&[2, 0, 1, 16, 2, 1]).is_err());
        // unsorted symbols
        assert!(deserialize_codebook(&[2, 0, 2, 1, 1, 1]).is_err());
        // truncated
        assert!(deserialize_codebook(&[2, 0, 1, 1]).is_err());
        // single symbol with length 2 is not the documented exception
        assert!(deserialize_codebook(&[1, 0, 5, 2]).is_err());
    }

    #[test]
    fn identical_histograms_identical_bytes() {
        let h = histogram(b"the quick brown fox jumps over the lazy dog");
        assert_eq!(
            serialize_codebook(&build_codebook(&h).unwrap()),
            serialize_codebook(&build_codebook(&h.clone()).unwrap())
        );
    }

    proptest! {
        #[test]
        fn codebook_serialization_roundtrip(counts in proptest::collection::vec(0u64..5000, 256)) {
            let mut arr = [0u64; 256];
            arr.copy_from_slice(&counts);
            prop_assume!(arr.iter().any(|&c| c > 0));
            let cb = build_codebook(&Histogram::from_counts(arr)).unwrap();
            let bytes = serialize_codebook(&cb);
            prop_assert_eq!(bytes.len(), cb.serialized_len());
            prop_assert_eq!(deserialize_codebook(&bytes).unwrap(), cb);
        }

        #[test]
        fn encode_decode_roundtrip(data in proptest::collection::vec(any::<u8>(), 1..2000)) {
            let cb = build_codebook(&histogram(&data)).unwrap();
            let enc = encode(&data, &cb).unwrap();
            prop_assert!(enc.bit_count <= 8 * enc.payload.len() as u64);
            prop_assert!(8 * (enc.payload.len() as u64) < enc.bit_count + 8);
            prop_assert_eq!(decode(&enc, &cb, data.len()).unwrap(), data.clone());
            prop_assert_eq!(decode_padded(&enc.payload, &cb, data.len()).unwrap(), data);
        }

        #[test]
        fn skewed_roundtrip(data in proptest::collection::vec(prop_oneof![8 => Just(0u8), 1 => any::<u8>()], 1..4000)) {
            let cb = build_codebook(&histogram(&data)).unwrap();
            let enc = encode(&data, &cb).unwrap();
            prop_assert_eq!(decode(&enc, &cb, data.len()).unwrap(), data);
        }
    }
}
