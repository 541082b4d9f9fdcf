//! Streaming compression of per-step K/V-cache tensors with static codebooks.
//!
//! A session builds its codebooks once from calibration tensors (add-one
//! smoothed, so every byte value has a code) and then codes each step without
//! building anything. It tracks the realized ratio of the last `window` steps
//! and, when their mean drifts above the baseline by more than
//! `rebuild_threshold`, rebuilds the codebooks from the histograms of those
//! steps. Each rebuild starts a new codebook generation.
//!
//! Session stream layout (little-endian):
//!
//! ```text
//! header:   "ZKVS" | version u16 | format u8 | codebook record (generation 0)
//! codebook: 0x02 | generation u32 | per stream: mode u8 (0 raw, 1 huffman) [| codebook]
//! step:     0x01 | step u32 | generation u32 | orig_len u32 | raw_flags u8
//!           | exponent_len u32 | sign_mantissa_len u32 | payloads
//! ```
//!
//! `raw_flags` bit 0 marks the exponent payload as stored raw, bit 1 the
//! sign+mantissa payload. A Huffman-mode stream falls back to raw for a step
//! when coding would not shrink it.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::container::ContainerFormat;
use crate::entropy::{self, Codebook, Decision, Histogram};
use crate::error::{Error, Result};
use crate::formats::{self, BitPlanes, FloatFormat};

pub const SESSION_MAGIC: &[u8; 4] = b"ZKVS";
pub const SESSION_VERSION: u16 = 1;
pub const STEP_HEADER_LEN: usize = 22;

const TAG_STEP: u8 = 0x01;
const TAG_CODEBOOKS: u8 = 0x02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvConfig {
    /// Number of recent steps whose ratios are averaged.
    pub window: usize,
    /// Allowed rise of the windowed mean ratio over the baseline.
    pub rebuild_threshold: f64,
}

impl Default for KvConfig {
    fn default() -> Self {
        KvConfig {
            window: 32,
            rebuild_threshold: 0.05,
        }
    }
}

/// Codebooks of one generation; `None` means the stream is always stored raw.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Generation {
    number: u32,
    exponent: Option<Codebook>,
    sign_mantissa: Option<Codebook>,
}

impl Generation {
    fn books(&self) -> [Option<&Codebook>; 2] {
        [self.exponent.as_ref(), self.sign_mantissa.as_ref()]
    }

    fn record(&self) -> Vec<u8> {
        let mut out = vec![TAG_CODEBOOKS];
        out.extend_from_slice(&self.number.to_le_bytes());
        for book in self.books() {
            match book {
                None => out.push(0),
                Some(cb) => {
                    out.push(1);
                    out.extend_from_slice(&entropy::serialize_codebook(cb));
                }
            }
        }
        out
    }

    /// Parses a codebook record, returning it and its length.
    fn parse(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 5 || bytes[0] != TAG_CODEBOOKS {
            return Err(Error::Corrupt("malformed codebook record".into()));
        }
        let number = u32::from_le_bytes(bytes[1..5].try_into().unwrap());
        let mut pos = 5;
        let mut books = [None, None];
        for book in &mut books {
            let mode = *bytes
                .get(pos)
                .ok_or_else(|| Error::Corrupt("codebook record truncated".into()))?;
            pos += 1;
            match mode {
                0 => {}
                1 => {
                    let (cb, used) = entropy::deserialize_codebook_prefix(&bytes[pos..])?;
                    pos += used;
                    *book = Some(cb);
                }
                other => return Err(Error::Corrupt(format!("unknown stream mode {other}"))),
            }
        }
        let [exponent, sign_mantissa] = books;
        Ok((
            Generation {
                number,
                exponent,
                sign_mantissa,
            },
            pos,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RebuildDecision {
    Kept,
    /// New codebooks are in effect from the next step. `record` must be
    /// appended to the session stream before that step.
    Rebuilt {
        generation: u32,
        record: Vec<u8>,
    },
}

/// Encoded step plus its telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub bytes: Vec<u8>,
    /// `bytes.len() / original tensor bytes`, header included.
    pub ratio: f64,
    /// Ratio of the exponent payload alone over the exponent stream length.
    pub exponent_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: u64,
    pub ratio: f64,
    pub exponent_ratio: f64,
    pub generation: u32,
    pub rebuilt: bool,
}

struct StepStats {
    histograms: [Histogram; 2],
    original_bytes: u64,
}

pub struct KvSession {
    format: FloatFormat,
    config: KvConfig,
    generation: Generation,
    ratio_window: VecDeque<f64>,
    stats_window: VecDeque<StepStats>,
    baseline_ratio: f64,
    steps_encoded: u64,
    codebook_builds: u64,
}

fn smoothed(h: &Histogram) -> Histogram {
    let mut counts = h.counts;
    for c in counts.iter_mut() {
        *c += 1;
    }
    Histogram::from_counts(counts)
}

fn stream_histograms(planes: &BitPlanes) -> [Histogram; 2] {
    [
        entropy::histogram(&planes.exponent_stream),
        entropy::histogram(&planes.sign_mantissa_stream),
    ]
}

/// Stored bytes of one stream under a codebook, with the per-step raw fallback.
fn stored_len(book: Option<&Codebook>, h: &Histogram) -> u64 {
    match book {
        None => h.total,
        Some(cb) => {
            let coded = cb
                .encoded_bits(h)
                .expect("smoothed codebook covers all bytes")
                .div_ceil(8);
            coded.min(h.total)
        }
    }
}

impl KvSession {
    /// Builds generation-0 codebooks from pooled calibration tensors.
    pub fn open<'a, I>(format: FloatFormat, calibration: I, config: KvConfig) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [u8]>,
    {
        if format.element_bytes().is_none() {
            return Err(Error::InvalidInput(format!(
                "{format} sessions are not supported"
            )));
        }
        if config.window == 0 {
            return Err(Error::InvalidInput("ratio window must be nonzero".into()));
        }
        let mut per_tensor = Vec::new();
        let mut pooled = [Histogram::default(), Histogram::default()];
        for tensor in calibration {
            let planes = formats::split(tensor, format)?;
            let hs = stream_histograms(&planes);
            pooled[0].merge(&hs[0]);
            pooled[1].merge(&hs[1]);
            per_tensor.push((hs, tensor.len() as u64));
        }
        if per_tensor.is_empty() {
            return Err(Error::InvalidInput("empty calibration batch".into()));
        }
        let mut session = KvSession {
            format,
            config,
            generation: Generation {
                number: 0,
                exponent: None,
                sign_mantissa: None,
            },
            ratio_window: VecDeque::with_capacity(config.window),
            stats_window: VecDeque::with_capacity(config.window),
            baseline_ratio: 0.0,
            steps_encoded: 0,
            codebook_builds: 0,
        };
        session.generation = session.build_generation(0, &pooled);
        let books = session.generation.books();
        let mean: f64 = per_tensor
            .iter()
            .map(|(hs, orig)| {
                let stored: u64 = books.iter().zip(hs).map(|(b, h)| stored_len(*b, h)).sum();
                (STEP_HEADER_LEN as u64 + stored) as f64 / (*orig).max(1) as f64
            })
            .sum::<f64>()
            / per_tensor.len() as f64;
        session.baseline_ratio = mean;
        Ok(session)
    }

    fn build_generation(&mut self, number: u32, pooled: &[Histogram; 2]) -> Generation {
        self.codebook_builds += 1;
        let exponent =
            entropy::build_codebook(&smoothed(&pooled[0])).expect("smoothed histogram is nonempty");
        let sign_mantissa = match self.format {
            FloatFormat::Bf16 => {
                let cb = entropy::build_codebook(&smoothed(&pooled[1]))
                    .expect("smoothed histogram is nonempty");
                (entropy::should_compress(&pooled[1], &cb, cb.serialized_len())
                    == Decision::Huffman)
                    .then_some(cb)
            }
            _ => None,
        };
        Generation {
            number,
            exponent: Some(exponent),
            sign_mantissa,
        }
    }

    pub fn format(&self) -> FloatFormat {
        self.format
    }

    pub fn config(&self) -> KvConfig {
        self.config
    }

    pub fn baseline_ratio(&self) -> f64 {
        self.baseline_ratio
    }

    pub fn generation(&self) -> u32 {
        self.generation.number
    }

    pub fn steps_encoded(&self) -> u64 {
        self.steps_encoded
    }

    /// How many times codebooks have been constructed (1 after `open`).
    pub fn codebook_builds(&self) -> u64 {
        self.codebook_builds
    }

    pub fn window_len(&self) -> usize {
        self.ratio_window.len()
    }

    pub fn window_mean(&self) -> Option<f64> {
        (!self.ratio_window.is_empty())
            .then(|| self.ratio_window.iter().sum::<f64>() / self.ratio_window.len() as f64)
    }

    /// Whether the sign+mantissa stream is entropy coded in the current generation.
    pub fn codes_sign_mantissa(&self) -> bool {
        self.generation.sign_mantissa.is_some()
    }

    /// Session header: magic, version, format and the current codebooks.
    pub fn header_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SESSION_MAGIC);
        out.extend_from_slice(&SESSION_VERSION.to_le_bytes());
        out.push(ContainerFormat::from(self.format).id());
        out.extend_from_slice(&self.generation.record());
        out
    }

    /// Codes one step with the current static codebooks.
    pub fn compress_step(&mut self, tensor: &[u8]) -> Result<StepOutput> {
        if tensor.len() > u32::MAX as usize {
            return Err(Error::InvalidInput("step tensor larger than 4 GiB".into()));
        }
        let planes = formats::split(tensor, self.format)?;
        let histograms = stream_histograms(&planes);

        let mut raw_flags = 0u8;
        let mut payloads: [Vec<u8>; 2] = [Vec::new(), Vec::new()];
        let streams = [&planes.exponent_stream, &planes.sign_mantissa_stream];
        for (i, (book, data)) in self.generation.books().into_iter().zip(streams).enumerate() {
            let coded = book
                .map(|cb| entropy::encode(data, cb).expect("smoothed codebook covers all bytes"));
            payloads[i] = match coded {
                Some(enc) if enc.payload.len() < data.len() => enc.payload,
                _ => {
                    raw_flags |= 1 << i;
                    data.clone()
                }
            };
        }

        let mut bytes = Vec::with_capacity(STEP_HEADER_LEN + payloads[0].len() + payloads[1].len());
        bytes.push(TAG_STEP);
        bytes.extend_from_slice(&(self.steps_encoded as u32).to_le_bytes());
        bytes.extend_from_slice(&self.generation.number.to_le_bytes());
        bytes.extend_from_slice(&(tensor.len() as u32).to_le_bytes());
        bytes.push(raw_flags);
        bytes.extend_from_slice(&(payloads[0].len() as u32).to_le_bytes());
        bytes.extend_from_slice(&(payloads[1].len() as u32).to_le_bytes());
        for p in &payloads {
            bytes.extend_from_slice(p);
        }

        let ratio = bytes.len() as f64 / tensor.len().max(1) as f64;
        let exponent_ratio = payloads[0].len() as f64 / planes.exponent_stream.len().max(1) as f64;
        if self.ratio_window.len() == self.config.window {
            self.ratio_window.pop_front();
            self.stats_window.pop_front();
        }
        self.ratio_window.push_back(ratio);
        self.stats_window.push_back(StepStats {
            histograms,
            original_bytes: tensor.len() as u64,
        });
        self.steps_encoded += 1;
        Ok(StepOutput {
            bytes,
            ratio,
            exponent_ratio,
        })
    }

    /// Rebuilds the codebooks when the window is full and its mean ratio
    /// exceeds the baseline by more than the threshold.
    pub fn maybe_rebuild(&mut self) -> RebuildDecision {
        let Some(mean) = self.window_mean() else {
            return RebuildDecision::Kept;
        };
        if self.ratio_window.len() < self.config.window
            || mean <= self.baseline_ratio + self.config.rebuild_threshold
        {
            return RebuildDecision::Kept;
        }

        let mut pooled = [Histogram::default(), Histogram::default()];
        let mut original = 0u64;
        for s in &self.stats_window {
            pooled[0].merge(&s.histograms[0]);
            pooled[1].merge(&s.histograms[1]);
            original += s.original_bytes;
        }
        let number = self.generation.number + 1;
        let generation = self.build_generation(number, &pooled);
        let stored: u64 = generation
            .books()
            .iter()
            .zip(&pooled)
            .map(|(b, h)| stored_len(*b, h))
            .sum();
        let headers = (STEP_HEADER_LEN * self.stats_window.len()) as u64;
        self.baseline_ratio = (headers + stored) as f64 / original.max(1) as f64;
        log::debug!(
            "kv session rebuilt codebooks: generation {number}, window mean {mean:.4}, new baseline {:.4}",
            self.baseline_ratio
        );
        let record = generation.record();
        self.generation = generation;
        self.ratio_window.clear();
        self.stats_window.clear();
        RebuildDecision::Rebuilt {
            generation: number,
            record,
        }
    }

    /// Compresses a step, runs the rebuild check, and appends everything to `out`.
    pub fn push(&mut self, tensor: &[u8], out: &mut Vec<u8>) -> Result<StepSummary> {
        let step = self.steps_encoded;
        let generation = self.generation.number;
        let StepOutput {
            bytes,
            ratio,
            exponent_ratio,
        } = self.compress_step(tensor)?;
        out.extend_from_slice(&bytes);
        let rebuilt = match self.maybe_rebuild() {
            RebuildDecision::Kept => false,
            RebuildDecision::Rebuilt { record, .. } => {
                out.extend_from_slice(&record);
                true
            }
        };
        Ok(StepSummary {
            step,
            ratio,
            exponent_ratio,
            generation,
            rebuilt,
        })
    }
}

/// A decoded step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedStep {
    pub step: u32,
    pub generation: u32,
    pub tensor: Vec<u8>,
}

/// Replays codebook generations and decodes steps.
#[derive(Debug, Clone)]
pub struct KvDecoder {
    format: FloatFormat,
    generations: BTreeMap<u32, Generation>,
}

impl KvDecoder {
    /// Parses a session header and returns the decoder and the header length.
    pub fn from_header(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 7 {
            return Err(Error::Truncated {
                needed: 7,
                available: bytes.len(),
            });
        }
        if &bytes[..4] != SESSION_MAGIC {
            return Err(Error::BadMagic { expected: "ZKVS" });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != SESSION_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let format = ContainerFormat::from_id(bytes[6])?
            .float_format()
            .ok_or_else(|| Error::Corrupt("session format is not a float tensor format".into()))?;
        let (generation, used) = Generation::parse(&bytes[7..])?;
        let mut generations = BTreeMap::new();
        generations.insert(generation.number, generation);
        Ok((
            KvDecoder {
                format,
                generations,
            },
            7 + used,
        ))
    }

    pub fn format(&self) -> FloatFormat {
        self.format
    }

    /// Consumes one record. Codebook records register a generation and
    /// return `None`; step records return the decoded step.
    pub fn next_record(&mut self, bytes: &[u8]) -> Result<(Option<DecodedStep>, usize)> {
        match bytes.first() {
            Some(&TAG_CODEBOOKS) => {
                let (generation, used) = Generation::parse(bytes)?;
                self.generations.insert(generation.number, generation);
                Ok((None, used))
            }
            Some(&TAG_STEP) => {
                let (step, used) = self.decode_step_prefix(bytes)?;
                Ok((Some(step), used))
            }
            Some(other) => Err(Error::Corrupt(format!("unknown record tag {other:#04x}"))),
            None => Err(Error::Truncated {
                needed: 1,
                available: 0,
            }),
        }
    }

    /// Decodes one step record produced by [`KvSession::compress_step`].
    pub fn decompress_step(&self, bytes: &[u8]) -> Result<DecodedStep> {
        let (step, used) = self.decode_step_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after step record",
                bytes.len() - used
            )));
        }
        Ok(step)
    }

    fn decode_step_prefix(&self, bytes: &[u8]) -> Result<(DecodedStep, usize)> {
        if bytes.len() < STEP_HEADER_LEN {
            return Err(Error::Truncated {
                needed: STEP_HEADER_LEN,
                available: bytes.len(),
            });
        }
        if bytes[0] != TAG_STEP {
            return Err(Error::Corrupt("not a step record".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let step = word(1);
        let generation = word(5);
        let orig_len = word(9) as usize;
        let raw_flags = bytes[13];
        let lens = [word(14) as usize, word(18) as usize];
        let total = STEP_HEADER_LEN + lens[0] + lens[1];
        if bytes.len() < total {
            return Err(Error::Truncated {
                needed: total,
                available: bytes.len(),
            });
        }
        let gen = self.generations.get(&generation).ok_or_else(|| {
            Error::Corrupt(format!(
                "step {step} uses unknown codebook generation {generation}"
            ))
        })?;
        let n = self
            .format
            .element_count(orig_len)
            .map_err(|e| Error::Corrupt(format!("step {step}: {e}")))?;
        let stream_len = BitPlanes::stream_len(self.format, n);

        let mut streams: [Vec<u8>; 2] = [Vec::new(), Vec::new()];
        let mut pos = STEP_HEADER_LEN;
        for (i, book) in gen.books().into_iter().enumerate() {
            let payload = &bytes[pos..pos + lens[i]];
            pos += lens[i];
            streams[i] = match book {
                Some(book) if raw_flags & (1 << i) == 0 => {
                    entropy::decode_padded(payload, book, stream_len)
                        .map_err(|e| Error::Corrupt(format!("step {step}: {e}")))?
                }
                _ => {
                    if payload.len() != stream_len {
                        return Err(Error::Corrupt(format!(
                            "step {step}: raw stream of {} bytes, expected {stream_len}",
                            payload.len()
                        )));
                    }
                    payload.to_vec()
                }
            };
        }
        let [exponent_stream, sign_mantissa_stream] = streams;
        let tensor = formats::merge(&BitPlanes {
            format: self.format,
            element_count: n,
            exponent_stream,
            sign_mantissa_stream,
            pad_elements: if self.format == FloatFormat::Fp8E4M3 {
                n % 2
            } else {
                0
            },
        })?;
        Ok((
            DecodedStep {
                step,
                generation,
                tensor,
            },
            total,
        ))
    }
}

/// Decodes a complete session stream into its step tensors, in order.
pub fn decode_session(stream: &[u8]) -> Result<Vec<DecodedStep>> {
    let (mut decoder, mut pos) = KvDecoder::from_header(stream)?;
    let mut steps = Vec::new();
    while pos < stream.len() {
        let (step, used) = decoder.next_record(&stream[pos..])?;
        pos += used;
        steps.extend(step);
    }
    Ok(steps)
}
