//! Python bindings. Byte buffers go in and out as `bytes`; reports come back
//! as dicts with the same fields as the CLI's `--json` output.

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use serde::Serialize;
use ztnc_core::fp4::{Fp4Layout, Fp4Scheme, Fp4Tensor};
use ztnc_core::ingest::{self, Model};
use ztnc_core::kvcache::{self, KvConfig};
use ztnc_core::{CompressOptions, FloatFormat, StreamKind};

create_exception!(
    ztnc,
    ZtncError,
    PyValueError,
    "Invalid input or failed codec operation."
);
create_exception!(
    ztnc,
    CorruptionError,
    ZtncError,
    "Compressed data is corrupt or does not match."
);
create_exception!(
    ztnc,
    ChecksumError,
    CorruptionError,
    "A chunk failed its CRC32 check."
);

fn err(py: Python<'_>, e: ztnc_core::Error) -> PyErr {
    let msg = e.to_string();
    let (ty, stream, chunk) = match &e {
        ztnc_core::Error::Checksum { stream, chunk } => {
            (py.get_type::<ChecksumError>(), Some(*stream), Some(*chunk))
        }
        ztnc_core::Error::CorruptChunk { stream, chunk, .. } => (
            py.get_type::<CorruptionError>(),
            Some(*stream),
            Some(*chunk),
        ),
        e if e.is_corruption() => (py.get_type::<CorruptionError>(), None, None),
        _ => (py.get_type::<ZtncError>(), None, None),
    };
    let build = || -> PyResult<PyErr> {
        let obj = ty.call1((msg.clone(),))?;
        obj.setattr("stream", stream.map(StreamKind::name))?;
        obj.setattr("chunk", chunk)?;
        Ok(PyErr::from_value(obj))
    };
    build().unwrap_or_else(|e| e)
}

trait IntoPy<T> {
    fn py_err(self, py: Python<'_>) -> PyResult<T>;
}

impl<T> IntoPy<T> for ztnc_core::Result<T> {
    fn py_err(self, py: Python<'_>) -> PyResult<T> {
        self.map_err(|e| err(py, e))
    }
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(value).map_err(|e| ZtncError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn format(name: &str) -> PyResult<FloatFormat> {
    name.parse()
        .map_err(|e: ztnc_core::Error| ZtncError::new_err(e.to_string()))
}

fn options(chunk_size: usize, threads: Option<usize>) -> CompressOptions {
    CompressOptions {
        chunk_size,
        threads,
    }
}

fn stream_kind(name: &str) -> PyResult<StreamKind> {
    [
        StreamKind::Exponent,
        StreamKind::SignMantissa,
        StreamKind::Scale,
        StreamKind::RawNibbles,
        StreamKind::Elements,
    ]
    .into_iter()
    .find(|k| k.name() == name)
    .ok_or_else(|| ZtncError::new_err(format!("unknown stream {name:?}")))
}

/// compress_tensor(data, format, chunk_size=262144, threads=None) -> (bytes, dict)
#[pyfunction]
#[pyo3(signature = (data, format, chunk_size = ztnc_core::DEFAULT_CHUNK_SIZE, threads = None))]
fn compress_tensor<'py>(
    py: Python<'py>,
    data: &[u8],
    format: &str,
    chunk_size: usize,
    threads: Option<usize>,
) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyAny>)> {
    let f = self::format(format)?;
    let (bytes, report) = py
        .detach(|| ztnc_core::compress_tensor(data, f, &options(chunk_size, threads)))
        .py_err(py)?;
    Ok((PyBytes::new(py, &bytes), to_dict(py, &report)?))
}

#[pyfunction]
fn decompress_tensor<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let out = py
        .detach(|| ztnc_core::decompress_tensor(data))
        .py_err(py)?;
    Ok(PyBytes::new(py, &out))
}

/// decode_chunk(data, stream, index) -> bytes of one chunk of one stream
#[pyfunction]
fn decode_chunk<'py>(
    py: Python<'py>,
    data: &[u8],
    stream: &str,
    index: usize,
) -> PyResult<Bound<'py, PyBytes>> {
    let kind = stream_kind(stream)?;
    let out = ztnc_core::decode_chunk(data, kind, index).py_err(py)?;
    Ok(PyBytes::new(py, &out))
}

/// profile(data, format, chunk_size=262144) -> dict
#[pyfunction]
#[pyo3(signature = (data, format, chunk_size = ztnc_core::DEFAULT_CHUNK_SIZE, threads = None))]
fn profile<'py>(
    py: Python<'py>,
    data: &[u8],
    format: &str,
    chunk_size: usize,
    threads: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let f = self::format(format)?;
    let report = py
        .detach(|| ztnc_core::profile(data, f, &options(chunk_size, threads)))
        .py_err(py)?;
    to_dict(py, &report)
}

#[pyfunction]
#[pyo3(signature = (base, next, chunk_size = ztnc_core::DEFAULT_CHUNK_SIZE, threads = None))]
fn compress_delta<'py>(
    py: Python<'py>,
    base: &[u8],
    next: &[u8],
    chunk_size: usize,
    threads: Option<usize>,
) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyAny>)> {
    let (bytes, report) = py
        .detach(|| ztnc_core::compress_delta(base, next, &options(chunk_size, threads)))
        .py_err(py)?;
    Ok((PyBytes::new(py, &bytes), to_dict(py, &report)?))
}

#[pyfunction]
fn apply_delta<'py>(py: Python<'py>, base: &[u8], delta: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let out = py
        .detach(|| ztnc_core::apply_delta(base, delta))
        .py_err(py)?;
    Ok(PyBytes::new(py, &out))
}

/// compress_fp4(nibbles, scales, scheme, element_count=None, ...) -> (bytes, dict)
///
/// `nibbles` packs two codes per byte, first element in the high nibble.
#[pyfunction]
#[pyo3(signature = (nibbles, scales, scheme, element_count = None, chunk_size = ztnc_core::DEFAULT_CHUNK_SIZE, threads = None))]
fn compress_fp4<'py>(
    py: Python<'py>,
    nibbles: &[u8],
    scales: &[u8],
    scheme: &str,
    element_count: Option<usize>,
    chunk_size: usize,
    threads: Option<usize>,
) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyAny>)> {
    let scheme: Fp4Scheme = scheme.parse().py_err(py)?;
    let n = element_count.unwrap_or(nibbles.len() * 2);
    let t = Fp4Tensor::new(
        nibbles.to_vec(),
        n,
        scales.to_vec(),
        Fp4Layout::for_scheme(scheme),
    )
    .py_err(py)?;
    let (bytes, report) = py
        .detach(|| ztnc_core::compress_fp4(&t, &options(chunk_size, threads)))
        .py_err(py)?;
    Ok((PyBytes::new(py, &bytes), to_dict(py, &report)?))
}

/// decompress_fp4(data) -> dict(nibbles, scales, scheme, element_count)
#[pyfunction]
fn decompress_fp4<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let t = py.detach(|| ztnc_core::decompress_fp4(data)).py_err(py)?;
    let d = PyDict::new(py);
    d.set_item("nibbles", PyBytes::new(py, &t.nibbles))?;
    d.set_item("scales", PyBytes::new(py, &t.scales))?;
    d.set_item("scheme", t.layout.scheme.name())?;
    d.set_item("element_count", t.element_count)?;
    Ok(d)
}

/// regroup_bits_experiment(nibbles, element_count=None, bits=2) -> (bytes, dict)
#[pyfunction]
#[pyo3(signature = (nibbles, element_count = None, bits = 2))]
fn regroup_bits_experiment<'py>(
    py: Python<'py>,
    nibbles: &[u8],
    element_count: Option<usize>,
    bits: u32,
) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyAny>)> {
    let n = element_count.unwrap_or(nibbles.len() * 2);
    let (bytes, report) = py
        .detach(|| ztnc_core::regroup_bits_experiment(nibbles, n, bits))
        .py_err(py)?;
    Ok((PyBytes::new(py, &bytes), to_dict(py, &report)?))
}

/// compress_model(data, sidecar=None) -> (archive bytes, dict)
///
/// `data` is a safetensors file, or a headerless blob described by the
/// JSON `sidecar`.
#[pyfunction]
#[pyo3(signature = (data, sidecar = None, chunk_size = ztnc_core::DEFAULT_CHUNK_SIZE, threads = None))]
fn compress_model<'py>(
    py: Python<'py>,
    data: Vec<u8>,
    sidecar: Option<&str>,
    chunk_size: usize,
    threads: Option<usize>,
) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyAny>)> {
    let (bytes, report) = py
        .detach(|| {
            let model = match sidecar {
                Some(s) => Model::parse_raw(data, s)?,
                None => Model::parse_safetensors(data)?,
            };
            ingest::compress_model(&model, &options(chunk_size, threads))
        })
        .py_err(py)?;
    Ok((PyBytes::new(py, &bytes), to_dict(py, &report)?))
}

#[pyfunction]
fn decompress_archive<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let out = py.detach(|| ingest::decompress_archive(data)).py_err(py)?;
    Ok(PyBytes::new(py, &out))
}

/// Decodes every step of a K/V session stream.
#[pyfunction]
fn decode_session<'py>(py: Python<'py>, stream: &[u8]) -> PyResult<Vec<Bound<'py, PyBytes>>> {
    let steps = py.detach(|| kvcache::decode_session(stream)).py_err(py)?;
    Ok(steps.iter().map(|s| PyBytes::new(py, &s.tensor)).collect())
}

/// Streaming K/V-cache compressor.
///
/// `KvSession(format, calibration, window=32, rebuild_threshold=0.05)`;
/// write `header()` first, then the bytes returned by each `push`.
#[pyclass(name = "KvSession", module = "ztnc")]
struct PyKvSession {
    inner: kvcache::KvSession,
}

#[pymethods]
impl PyKvSession {
    #[new]
    #[pyo3(signature = (format, calibration, window = KvConfig::default().window, rebuild_threshold = KvConfig::default().rebuild_threshold))]
    fn new(
        py: Python<'_>,
        format: &str,
        calibration: Vec<Vec<u8>>,
        window: usize,
        rebuild_threshold: f64,
    ) -> PyResult<Self> {
        let f = self::format(format)?;
        let config = KvConfig {
            window,
            rebuild_threshold,
        };
        let inner = kvcache::KvSession::open(f, calibration.iter().map(Vec::as_slice), config)
            .py_err(py)?;
        Ok(PyKvSession { inner })
    }

    fn header<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.header_bytes())
    }

    /// push(tensor) -> (record bytes, dict(step, ratio, exponent_ratio, generation, rebuilt))
    fn push<'py>(
        &mut self,
        py: Python<'py>,
        tensor: &[u8],
    ) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyDict>)> {
        let mut out = Vec::new();
        let inner = &mut self.inner;
        let s = py.detach(|| inner.push(tensor, &mut out)).py_err(py)?;
        let d = PyDict::new(py);
        d.set_item("step", s.step)?;
        d.set_item("ratio", s.ratio)?;
        d.set_item("exponent_ratio", s.exponent_ratio)?;
        d.set_item("generation", s.generation)?;
        d.set_item("rebuilt", s.rebuilt)?;
        Ok((PyBytes::new(py, &out), d))
    }

    #[getter]
    fn baseline_ratio(&self) -> f64 {
        self.inner.baseline_ratio()
    }

    #[getter]
    fn generation(&self) -> u32 {
        self.inner.generation()
    }

    #[getter]
    fn codebook_builds(&self) -> u64 {
        self.inner.codebook_builds()
    }

    #[getter]
    fn steps_encoded(&self) -> u64 {
        self.inner.steps_encoded()
    }
}

#[pymodule]
fn ztnc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("ZtncError", py.get_type::<ZtncError>())?;
    m.add("CorruptionError", py.get_type::<CorruptionError>())?;
    m.add("ChecksumError", py.get_type::<ChecksumError>())?;
    m.add("DEFAULT_CHUNK_SIZE", ztnc_core::DEFAULT_CHUNK_SIZE)?;
    m.add_function(wrap_pyfunction!(compress_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(decompress_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(decode_chunk, m)?)?;
    m.add_function(wrap_pyfunction!(profile, m)?)?;
    m.add_function(wrap_pyfunction!(compress_delta, m)?)?;
    m.add_function(wrap_pyfunction!(apply_delta, m)?)?;
    m.add_function(wrap_pyfunction!(compress_fp4, m)?)?;
    m.add_function(wrap_pyfunction!(decompress_fp4, m)?)?;
    m.add_function(wrap_pyfunction!(regroup_bits_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(compress_model, m)?)?;
    m.add_function(wrap_pyfunction!(decompress_archive, m)?)?;
    m.add_function(wrap_pyfunction!(decode_session, m)?)?;
    m.add_class::<PyKvSession>()?;
    Ok(())
}
