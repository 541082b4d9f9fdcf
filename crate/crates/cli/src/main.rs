//! `ztnc` command-line tool.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage error or unreadable
//! input, 3 corrupt or mismatched data.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use ztnc::container::{ContainerFormat, StreamKind};
use ztnc::fp4::{Fp4Layout, Fp4Scheme, Fp4Tensor};
use ztnc::ingest::{self, Archive, ArchiveReport, Model};
use ztnc::kvcache::{decode_session, KvConfig, KvSession};
use ztnc::report::StreamReport;
use ztnc::{synth, CompressOptions, CompressionReport, Container, FloatFormat};

#[derive(Parser)]
#[command(
    name = "ztnc",
    version,
    about = "Lossless compression for BF16/FP8/FP4 tensors"
)]
struct Cli {
    /// Worker threads for chunk coding (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print reports as JSON.
    #[arg(long, global = true)]
    json: bool,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Bf16,
    #[value(name = "fp8-e4m3")]
    Fp8E4m3,
    #[value(name = "fp8-e5m2")]
    Fp8E5m2,
    Mxfp4,
    Nvfp4,
}

impl Format {
    fn float(self) -> Option<FloatFormat> {
        match self {
            Format::Bf16 => Some(FloatFormat::Bf16),
            Format::Fp8E4m3 => Some(FloatFormat::Fp8E4M3),
            Format::Fp8E5m2 => Some(FloatFormat::Fp8E5M2),
            Format::Mxfp4 | Format::Nvfp4 => None,
        }
    }

    fn fp4(self) -> Option<Fp4Scheme> {
        match self {
            Format::Mxfp4 => Some(Fp4Scheme::Mxfp4),
            Format::Nvfp4 => Some(Fp4Scheme::Nvfp4),
            _ => None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compress a tensor file into a container, or a safetensors model
    /// into an archive when --format is omitted.
    Compress {
        /// Element format of a raw tensor file.
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[arg(long, default_value_t = ztnc::DEFAULT_CHUNK_SIZE)]
        chunk_size: usize,
        /// FP4 scale bytes; without it the input holds packed codes followed by scales.
        #[arg(long)]
        scales: Option<PathBuf>,
        /// FP4 element count (needed for odd counts or partial last blocks).
        #[arg(long)]
        elements: Option<usize>,
        /// JSON tensor table for a headerless model file.
        #[arg(long, conflicts_with = "format")]
        sidecar: Option<PathBuf>,
        input: PathBuf,
        output: PathBuf,
    },
    /// Restore the original bytes of a container, archive or K/V stream.
    Decompress {
        /// Write FP4 scales here instead of appending them to the output.
        #[arg(long)]
        scales: Option<PathBuf>,
        input: PathBuf,
        output: PathBuf,
    },
    /// XOR delta between two BF16 checkpoints.
    Delta {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        next: PathBuf,
        #[arg(long, default_value_t = ztnc::DEFAULT_CHUNK_SIZE)]
        chunk_size: usize,
        output: PathBuf,
    },
    /// Rebuild a checkpoint from its base and a delta.
    Apply {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        delta: PathBuf,
        output: PathBuf,
    },
    /// Per-stream entropy and predicted ratio, without writing output.
    Profile {
        #[arg(long, value_enum)]
        format: Format,
        #[arg(long, default_value_t = ztnc::DEFAULT_CHUNK_SIZE)]
        chunk_size: usize,
        #[arg(long)]
        scales: Option<PathBuf>,
        #[arg(long)]
        elements: Option<usize>,
        input: PathBuf,
    },
    /// Regroup the top bits of packed FP4 codes and try to Huffman code them.
    Fp4Regroup {
        /// Bits taken from each element (1, 2 or 4).
        #[arg(long, default_value_t = 2)]
        bits: u32,
        #[arg(long)]
        elements: Option<usize>,
        input: PathBuf,
    },
    /// Simulated K/V-cache session on synthetic tensors.
    KvBench {
        #[arg(long, value_enum, default_value = "bf16")]
        format: Format,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// gaussian, uniform, or shift:K (scale jumps at step K).
        #[arg(long, default_value = "gaussian")]
        distribution: Distribution,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Elements per step tensor.
        #[arg(long, default_value_t = 8192)]
        elements: usize,
        #[arg(long, default_value_t = 8)]
        calibration_steps: usize,
        #[arg(long, default_value_t = KvConfig::default().window)]
        window: usize,
        #[arg(long, default_value_t = KvConfig::default().rebuild_threshold)]
        threshold: f64,
    },
}

#[derive(Clone, Copy, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Distribution {
    Gaussian,
    Uniform,
    Shift { at: usize },
}

impl std::str::FromStr for Distribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaussian" => Ok(Distribution::Gaussian),
            "uniform" => Ok(Distribution::Uniform),
            _ => s
                .strip_prefix("shift:")
                .and_then(|k| k.parse().ok())
                .map(|at| Distribution::Shift { at })
                .ok_or_else(|| format!("expected gaussian, uniform or shift:K, got {s:?}")),
        }
    }
}

/// Failure classes that map to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Corrupt(anyhow::Error),
    Internal(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        for cause in e.chain() {
            if let Some(z) = cause.downcast_ref::<ztnc::Error>() {
                return match z {
                    z if z.is_corruption() => Failure::Corrupt(e),
                    ztnc::Error::Io(_) | ztnc::Error::Json(_) => Failure::Internal(e),
                    _ => Failure::Usage(e),
                };
            }
            if let Some(io) = cause.downcast_ref::<std::io::Error>() {
                if matches!(io.kind(), ErrorKind::NotFound | ErrorKind::PermissionDenied) {
                    return Failure::Usage(e);
                }
            }
        }
        Failure::Internal(e)
    }
}

impl From<ztnc::Error> for Failure {
    fn from(e: ztnc::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    Ok(fs::read(path).with_context(|| format!("reading {}", path.display()))?)
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Internal)
}

fn options(chunk_size: usize, threads: Option<usize>) -> CliResult<CompressOptions> {
    if chunk_size == 0 {
        return Err(usage("--chunk-size must be positive"));
    }
    if threads == Some(0) {
        return Err(usage("--threads must be positive"));
    }
    Ok(CompressOptions {
        chunk_size,
        threads,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, e) = match f {
                Failure::Internal(e) => (1, e),
                Failure::Usage(e) => (2, e),
                Failure::Corrupt(e) => (3, e),
            };
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let json = cli.json;
    match cli.command {
        Command::Compress {
            format,
            chunk_size,
            scales,
            elements,
            sidecar,
            input,
            output,
        } => {
            let opts = options(chunk_size, cli.threads)?;
            let raw = read(&input)?;
            match format {
                None => {
                    let model = match sidecar {
                        Some(s) => {
                            let sidecar = fs::read_to_string(&s)
                                .with_context(|| format!("reading {}", s.display()))?;
                            Model::parse_raw(raw, &sidecar)?
                        }
                        None => Model::parse_safetensors(raw)?,
                    };
                    let (archive, report) = ingest::compress_model(&model, &opts)?;
                    write(&output, &archive)?;
                    print_archive_report(&report, json)?;
                }
                Some(f) => {
                    let (bytes, report) =
                        compress_raw(&raw, f, scales.as_deref(), elements, &opts)?;
                    write(&output, &bytes)?;
                    print_report(&report, json)?;
                }
            }
        }
        Command::Decompress {
            scales,
            input,
            output,
        } => {
            let bytes = read(&input)?;
            decompress(&bytes, scales.as_deref(), &output)?;
        }
        Command::Delta {
            base,
            next,
            chunk_size,
            output,
        } => {
            let opts = options(chunk_size, cli.threads)?;
            let (bytes, report) = ztnc::compress_delta(&read(&base)?, &read(&next)?, &opts)?;
            write(&output, &bytes)?;
            print_report(&report, json)?;
        }
        Command::Apply {
            base,
            delta,
            output,
        } => {
            let restored = ztnc::apply_delta(&read(&base)?, &read(&delta)?)?;
            write(&output, &restored)?;
        }
        Command::Profile {
            format,
            chunk_size,
            scales,
            elements,
            input,
        } => {
            let opts = options(chunk_size, cli.threads)?;
            let raw = read(&input)?;
            let (_, report) = compress_raw(&raw, format, scales.as_deref(), elements, &opts)?;
            print_report(&report, json)?;
        }
        Command::Fp4Regroup {
            bits,
            elements,
            input,
        } => {
            let nibbles = read(&input)?;
            let n = elements.unwrap_or(nibbles.len() * 2);
            let (_, report) = ztnc::regroup_bits_experiment(&nibbles, n, bits)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?
                );
            } else {
                println!(
                    "fp4 regroup: top {bits} bit(s) of {} elements",
                    report.elements_used
                );
                println!("  regrouped bytes   {}", report.regrouped_bytes);
                println!(
                    "  entropy           {:.4} bits/symbol",
                    report.entropy_bits_per_symbol
                );
                println!("  huffman bytes     {}", report.huffman_bytes);
                println!("  ratio             {:.4}", report.ratio);
            }
        }
        Command::KvBench {
            format,
            steps,
            distribution,
            seed,
            elements,
            calibration_steps,
            window,
            threshold,
        } => {
            let config = KvConfig {
                window,
                rebuild_threshold: threshold,
            };
            kv_bench(
                format,
                steps,
                distribution,
                seed,
                elements,
                calibration_steps,
                config,
                json,
            )?;
        }
    }
    Ok(())
}

fn compress_raw(
    raw: &[u8],
    format: Format,
    scales: Option<&Path>,
    elements: Option<usize>,
    opts: &CompressOptions,
) -> CliResult<(Vec<u8>, CompressionReport)> {
    if let Some(f) = format.float() {
        if scales.is_some() || elements.is_some() {
            return Err(usage("--scales and --elements apply only to mxfp4/nvfp4"));
        }
        return Ok(ztnc::compress_tensor(raw, f, opts)?);
    }
    let layout = Fp4Layout::for_scheme(format.fp4().expect("non-float formats are fp4"));
    let tensor = fp4_input(raw, layout, scales, elements)?;
    Ok(ztnc::compress_fp4(&tensor, opts)?)
}

fn fp4_input(
    raw: &[u8],
    layout: Fp4Layout,
    scales: Option<&Path>,
    elements: Option<usize>,
) -> CliResult<Fp4Tensor> {
    let tensor = match scales {
        Some(path) => {
            let scales = read(path)?;
            let n = elements.unwrap_or(raw.len() * 2);
            Fp4Tensor::new(raw.to_vec(), n, scales, layout)?
        }
        None => {
            let n = match elements {
                Some(n) => n,
                None => layout.elements_in_combined(raw.len()).ok_or_else(|| {
                    usage(format!(
                        "{} bytes is not a whole number of {} blocks; pass --scales or --elements",
                        raw.len(),
                        layout.scheme
                    ))
                })?,
            };
            let split = n.div_ceil(2);
            if split > raw.len() {
                return Err(usage(format!(
                    "{n} elements need {split} code bytes, file has {}",
                    raw.len()
                )));
            }
            Fp4Tensor::new(raw[..split].to_vec(), n, raw[split..].to_vec(), layout)?
        }
    };
    Ok(tensor)
}

fn decompress(bytes: &[u8], scales_out: Option<&Path>, output: &Path) -> CliResult<()> {
    if ingest::is_archive(bytes) {
        return write(output, &Archive::parse(bytes)?.extract()?);
    }
    if bytes.starts_with(b"ZKVS") {
        let steps = decode_session(bytes)?;
        let out: Vec<u8> = steps.into_iter().flat_map(|s| s.tensor).collect();
        return write(output, &out);
    }
    let c = Container::parse(bytes)?;
    if c.header.is_delta() {
        return Err(usage(
            "input is a delta container; use `ztnc apply --base ...`",
        ));
    }
    match c.header.format {
        ContainerFormat::Mxfp4 | ContainerFormat::Nvfp4 => {
            let t = ztnc::decompress_fp4(bytes)?;
            match scales_out {
                Some(path) => {
                    write(output, &t.nibbles)?;
                    write(path, &t.scales)?;
                }
                None => {
                    let mut combined = t.nibbles;
                    combined.extend_from_slice(&t.scales);
                    write(output, &combined)?;
                }
            }
            Ok(())
        }
        _ => write(output, &ztnc::decompress_tensor(bytes)?),
    }
}

fn print_report(report: &CompressionReport, json: bool) -> CliResult<()> {
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(report).map_err(anyhow::Error::from)?
        );
        return Ok(());
    }
    println!(
        "{}: {} elements, {} -> {} bytes, ratio {:.4} ({:.2}% of original), overhead {} bytes",
        report.format,
        report.element_count,
        report.original_bytes,
        report.compressed_bytes,
        report.ratio,
        100.0 * report.ratio,
        report.overhead_bytes
    );
    println!(
        "  {:<14} {:>12} {:>12} {:>8} {:>10} {:>8} {:>6}  top symbols",
        "stream", "original", "compressed", "ratio", "H bits/sym", "huffman", "raw"
    );
    for s in &report.streams {
        print_stream(s);
    }
    Ok(())
}

fn print_stream(s: &StreamReport) {
    let top: Vec<String> = s
        .top_symbols
        .iter()
        .take(4)
        .map(|t| {
            format!(
                "{:02x}:{:.1}%",
                t.symbol,
                100.0 * t.count as f64 / s.original_bytes.max(1) as f64
            )
        })
        .collect();
    println!(
        "  {:<14} {:>12} {:>12} {:>8.4} {:>10.4} {:>8} {:>6}  {}",
        s.kind.name(),
        s.original_bytes,
        s.compressed_bytes,
        s.ratio,
        s.entropy_bits_per_symbol,
        s.huffman_chunks,
        s.raw_chunks,
        top.join(" ")
    );
    if s.huffman_chunks == 0
        && s.kind != StreamKind::RawNibbles
        && s.kind != StreamKind::Elements
        && s.original_bytes > 0
    {
        println!(
            "  {:<14} stored raw (no chunk beat the fallback threshold)",
            ""
        );
    }
}

fn print_archive_report(report: &ArchiveReport, json: bool) -> CliResult<()> {
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(report).map_err(anyhow::Error::from)?
        );
        return Ok(());
    }
    println!(
        "archive: {} -> {} bytes, file ratio {:.4}; tensors {} -> {} bytes, ratio {:.4}",
        report.source_bytes,
        report.archive_bytes,
        report.file_ratio,
        report.tensor_original_bytes,
        report.tensor_compressed_bytes,
        report.tensor_ratio
    );
    for t in &report.tensors {
        println!(
            "  {:<40} {:<8} {:>12} -> {:>12}  ratio {:.4} (exp {:.4}, sm {:.4})",
            t.name,
            t.dtype,
            t.original_bytes,
            t.compressed_bytes,
            t.ratio,
            t.exponent_ratio,
            t.sign_mantissa_ratio
        );
    }
    for name in &report.skipped {
        println!("  {name:<40} stored verbatim (unsupported dtype)");
    }
    Ok(())
}

#[derive(Serialize)]
struct KvStepLine {
    step: u64,
    ratio: f64,
    exponent_ratio: f64,
    generation: u32,
    rebuilt: bool,
}

#[derive(Serialize)]
struct KvBenchReport {
    format: String,
    distribution: Distribution,
    seed: u64,
    steps: usize,
    elements: usize,
    window: usize,
    rebuild_threshold: f64,
    baseline_ratio: f64,
    mean_ratio: f64,
    rebuild_steps: Vec<u64>,
    codebook_builds: u64,
    stream_bytes: usize,
    input_bytes: usize,
    encode_mb_per_s: f64,
    decode_mb_per_s: f64,
    lossless: bool,
    per_step: Vec<KvStepLine>,
}

#[allow(clippy::too_many_arguments)]
fn kv_bench(
    format: Format,
    steps: usize,
    distribution: Distribution,
    seed: u64,
    elements: usize,
    calibration_steps: usize,
    config: KvConfig,
    json: bool,
) -> CliResult<()> {
    let float = format
        .float()
        .ok_or_else(|| usage("kv-bench supports bf16, fp8-e4m3 and fp8-e5m2"))?;
    if calibration_steps == 0 {
        return Err(usage("--calibration-steps must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = |rng: &mut ChaCha8Rng, step: Option<usize>| -> Vec<u8> {
        let sigma = match (distribution, step) {
            (Distribution::Shift { at }, Some(s)) if s >= at => 2.0,
            _ => 0.02,
        };
        if matches!(distribution, Distribution::Uniform) {
            let mut v = vec![0u8; elements * float.element_bytes().unwrap_or(1)];
            rand::RngCore::fill_bytes(rng, &mut v);
            return v;
        }
        let x = synth::gaussian(rng, elements, 0.0, sigma);
        match float {
            FloatFormat::Bf16 => synth::to_bf16_bytes(&x),
            FloatFormat::Fp8E4M3 => synth::to_e4m3_bytes(&x),
            // truncating conversion through BF16, subnormals flushed to zero
            _ => x
                .iter()
                .map(|&v| {
                    let h = synth::f32_to_bf16(v);
                    let sign = ((h >> 8) & 0x80) as u8;
                    let exp = ((h >> 7) & 0xff) as i32 - 127 + 15;
                    if exp <= 0 {
                        sign
                    } else {
                        sign | ((exp.min(30) as u8) << 2) | (((h >> 5) & 0x3) as u8)
                    }
                })
                .collect(),
        }
    };
    let calibration: Vec<Vec<u8>> = (0..calibration_steps)
        .map(|_| gen(&mut rng, None))
        .collect();
    let inputs: Vec<Vec<u8>> = (0..steps).map(|s| gen(&mut rng, Some(s))).collect();

    let mut session = KvSession::open(float, calibration.iter().map(Vec::as_slice), config)?;
    let mut stream = session.header_bytes();
    let mut per_step = Vec::with_capacity(steps);
    let start = Instant::now();
    for t in &inputs {
        let s = session.push(t, &mut stream)?;
        if s.rebuilt {
            log::info!(
                "step {}: rebuilt codebooks (generation {})",
                s.step,
                s.generation
            );
        }
        per_step.push(KvStepLine {
            step: s.step,
            ratio: s.ratio,
            exponent_ratio: s.exponent_ratio,
            generation: s.generation,
            rebuilt: s.rebuilt,
        });
    }
    let encode_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let decoded = decode_session(&stream)?;
    let decode_secs = start.elapsed().as_secs_f64();
    let lossless =
        decoded.len() == inputs.len() && decoded.iter().zip(&inputs).all(|(d, t)| d.tensor == *t);

    let input_bytes: usize = inputs.iter().map(Vec::len).sum();
    let mb = input_bytes as f64 / 1e6;
    let report = KvBenchReport {
        format: float.name().to_string(),
        distribution,
        seed,
        steps,
        elements,
        window: config.window,
        rebuild_threshold: config.rebuild_threshold,
        baseline_ratio: session.baseline_ratio(),
        mean_ratio: per_step.iter().map(|s| s.ratio).sum::<f64>() / steps.max(1) as f64,
        rebuild_steps: per_step
            .iter()
            .filter(|s| s.rebuilt)
            .map(|s| s.step)
            .collect(),
        codebook_builds: session.codebook_builds(),
        stream_bytes: stream.len(),
        input_bytes,
        encode_mb_per_s: mb / encode_secs.max(1e-9),
        decode_mb_per_s: mb / decode_secs.max(1e-9),
        lossless,
        per_step,
    };
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?
        );
    } else {
        println!("step  ratio   exp_ratio  gen");
        for s in &report.per_step {
            println!(
                "{:>4}  {:.4}  {:.4}     {}{}",
                s.step,
                s.ratio,
                s.exponent_ratio,
                s.generation,
                if s.rebuilt { "  rebuild" } else { "" }
            );
        }
        for s in &report.rebuild_steps {
            println!("rebuild event at step {s}");
        }
        println!(
            "{} steps of {} elements ({}): baseline {:.4}, mean ratio {:.4}, {} rebuild(s), {} codebook builds",
            report.steps,
            report.elements,
            report.format,
            report.baseline_ratio,
            report.mean_ratio,
            report.rebuild_steps.len(),
            report.codebook_builds
        );
        println!(
            "stream {} bytes for {} input bytes; encode {:.1} MB/s, decode {:.1} MB/s; lossless {}",
            report.stream_bytes,
            report.input_bytes,
            report.encode_mb_per_s,
            report.decode_mb_per_s,
            report.lossless
        );
    }
    if !lossless {
        return Err(Failure::Internal(anyhow!("K/V session did not round-trip")));
    }
    Ok(())
}
