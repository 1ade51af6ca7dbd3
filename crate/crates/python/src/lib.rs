//! Python bindings for `mpemb`.
//!
//! Enum-like arguments (precision, rounding, policy, hash) are passed as
//! lowercase strings. Config-shaped inputs and reports cross the boundary as
//! plain dicts.

use std::fs::File;
use std::io::{BufReader, BufWriter};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use mpemb_core::cli::{self, TrainToyConfig};
use mpemb_core::{
    self as core, AccessTrace, CacheConfig, Error, GradientBatch, Precision,
    ReplacementPolicy, ReplayConfig, RngStream, RoundingMode, RowWiseAdagrad,
};

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Json(_) | Error::TraceFormat { .. } | Error::NotInteger(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::IndexOutOfRange { .. }
        | Error::DimensionMismatch { .. }
        | Error::NonFinite { .. }
        | Error::EmptyRow
        | Error::RangeOverflow { .. }
        | Error::NonPositiveReference(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| err(e.into()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let s: String = match obj {
        Some(o) => py.import("json")?.call_method1("dumps", (o,))?.extract()?,
        None => "{}".into(),
    };
    serde_json::from_str(&s).map_err(|e| err(e.into()))
}

fn rng(seed: u64, row: u64, iteration: u64) -> RngStream {
    RngStream::keyed(seed, 0, row, iteration)
}

/// A quantized row: per-row scale and bias plus bit-packed codes.
#[pyclass(name = "PackedRow", module = "mpemb", frozen)]
struct PyPackedRow {
    inner: core::PackedRow,
}

#[pymethods]
impl PyPackedRow {
    #[getter]
    fn scale(&self) -> f32 {
        self.inner.params.scale
    }

    #[getter]
    fn bias(&self) -> f32 {
        self.inner.params.bias
    }

    #[getter]
    fn precision(&self) -> &'static str {
        self.inner.precision().as_str()
    }

    #[getter]
    fn codes(&self) -> Vec<u32> {
        self.inner.codes().into_iter().map(u32::from).collect()
    }

    fn dequantize(&self) -> Vec<f32> {
        core::dequantize_row(&self.inner)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, pyo3::types::PyBytes> {
        pyo3::types::PyBytes::new(py, &self.inner.to_bytes())
    }

    #[staticmethod]
    fn from_bytes(data: &[u8], precision: &str, dim: usize) -> PyResult<Self> {
        let inner = core::PackedRow::from_bytes(data, parse(precision)?, dim).map_err(err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.dim()
    }

    fn __repr__(&self) -> String {
        format!(
            "PackedRow(precision={}, dim={}, scale={}, bias={})",
            self.inner.precision(),
            self.inner.dim(),
            self.inner.params.scale,
            self.inner.params.bias
        )
    }
}

/// Quantizes one row to an integer precision.
#[pyfunction]
#[pyo3(signature = (row, precision, rounding="nearest", seed=0, row_index=0, iteration=0))]
fn quantize_row(
    row: Vec<f32>,
    precision: &str,
    rounding: &str,
    seed: u64,
    row_index: u64,
    iteration: u64,
) -> PyResult<PyPackedRow> {
    let mut r = rng(seed, row_index, iteration);
    let inner = core::quantize_row(&row, parse(precision)?, parse(rounding)?, &mut r).map_err(err)?;
    Ok(PyPackedRow { inner })
}

#[pyfunction]
fn dequantize_row(packed: &PyPackedRow) -> Vec<f32> {
    core::dequantize_row(&packed.inner)
}

/// Quantize-then-dequantize in FP32; matches `quantize_row(...).dequantize()`
/// for the same seed and key.
#[pyfunction]
#[pyo3(signature = (row, precision, rounding="nearest", seed=0, row_index=0, iteration=0))]
fn fake_quantize_row(
    row: Vec<f32>,
    precision: &str,
    rounding: &str,
    seed: u64,
    row_index: u64,
    iteration: u64,
) -> PyResult<Vec<f32>> {
    let mut r = rng(seed, row_index, iteration);
    core::fake_quantize_row(&row, parse(precision)?, parse(rounding)?, &mut r).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (x, rounding="nearest", seed=0))]
fn convert_fp16(x: f32, rounding: &str, seed: u64) -> PyResult<f32> {
    core::convert_fp16(x, parse(rounding)?, &mut RngStream::new(seed)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (precision, dim, cache_ratio=0.0, policy="lfu"))]
fn compression_factor(precision: &str, dim: usize, cache_ratio: f64, policy: &str) -> PyResult<f64> {
    core::compression_factor(parse(precision)?, dim, cache_ratio, parse(policy)?).map_err(err)
}

#[pyfunction]
fn accuracy_drop(acc_fp32: f64, acc_lowprec: f64) -> PyResult<f64> {
    core::accuracy_drop(acc_fp32, acc_lowprec).map_err(err)
}

/// Sums duplicate-row gradients; output is sorted by row index.
#[pyfunction]
fn dedup(entries: Vec<(usize, Vec<f32>)>) -> Vec<(usize, Vec<f32>)> {
    let batch = GradientBatch {
        entries,
        learning_rate: 0.0,
    };
    core::dedup(&batch).entries
}

/// Quantized embedding table with an optional FP32 set-associative cache.
#[pyclass(name = "Embedding", module = "mpemb")]
struct PyEmbedding {
    inner: core::MixedPrecisionEmbedding,
    adagrad: Option<RowWiseAdagrad>,
}

fn cache_config(
    num_rows: usize,
    dim: usize,
    ratio: f64,
    associativity: usize,
    policy: &str,
    hash: &str,
) -> PyResult<Option<CacheConfig>> {
    if ratio == 0.0 {
        return Ok(None);
    }
    CacheConfig::for_ratio(num_rows, ratio, associativity, dim, parse(policy)?, parse(hash)?)
        .map_err(err)
}

#[pymethods]
impl PyEmbedding {
    /// `rows` is a list of equal-length float lists.
    #[new]
    #[pyo3(signature = (rows, precision, rounding="nearest", cache_ratio=0.0, associativity=1, policy="lfu", hash="modulo", seed=0, table_id=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        rows: Vec<Vec<f32>>,
        precision: &str,
        rounding: &str,
        cache_ratio: f64,
        associativity: usize,
        policy: &str,
        hash: &str,
        seed: u64,
        table_id: u64,
    ) -> PyResult<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(PyValueError::new_err("rows must all have the same length"));
        }
        let flat: Vec<f32> = rows.concat();
        let cache = cache_config(rows.len(), dim, cache_ratio, associativity, policy, hash)?;
        let inner = core::MixedPrecisionEmbedding::from_rows(
            &flat,
            dim,
            parse(precision)?,
            cache,
            parse(rounding)?,
            seed,
            table_id,
        )
        .map_err(err)?;
        Ok(Self {
            inner,
            adagrad: None,
        })
    }

    #[getter]
    fn num_rows(&self) -> usize {
        self.inner.num_rows()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn precision(&self) -> &'static str {
        self.inner.precision().as_str()
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.iteration()
    }

    fn fetch(&self, i: usize) -> PyResult<Vec<f32>> {
        self.inner.fetch(i).map_err(err)
    }

    /// Writes `x` as the new value of row `i`; returns the outcome name.
    fn update(&mut self, i: usize, x: Vec<f32>) -> PyResult<String> {
        let o = self.inner.update(i, &x).map_err(err)?;
        Ok(format!("{o:?}").to_lowercase())
    }

    fn is_resident(&self, i: usize) -> bool {
        self.inner.is_resident(i)
    }

    /// Advances the iteration counter (once per mini-batch).
    fn step(&mut self) {
        self.inner.step();
    }

    fn flush(&mut self) -> PyResult<()> {
        self.inner.flush().map_err(err)
    }

    /// Deduplicates `entries` and applies one SGD step.
    fn sgd(&mut self, entries: Vec<(usize, Vec<f32>)>, learning_rate: f32) -> PyResult<()> {
        let batch = core::dedup(&GradientBatch {
            entries,
            learning_rate,
        });
        core::apply_sgd(&mut self.inner, &batch).map_err(err)?;
        Ok(())
    }

    /// Deduplicates `entries` and applies one row-wise AdaGrad step. The
    /// optimizer state lives on this object.
    fn adagrad(&mut self, entries: Vec<(usize, Vec<f32>)>, learning_rate: f32) -> PyResult<()> {
        let batch = core::dedup(&GradientBatch {
            entries,
            learning_rate,
        });
        let n = self.inner.num_rows();
        let state = self.adagrad.get_or_insert_with(|| RowWiseAdagrad::new(n));
        core::apply_rowwise_adagrad(&mut self.inner, &batch, state).map_err(err)?;
        Ok(())
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let s = self.inner.stats();
        let d = pyo3::types::PyDict::new(py);
        d.set_item("hits", s.hits)?;
        d.set_item("misses", s.misses)?;
        d.set_item("admissions", s.admissions)?;
        d.set_item("evictions", s.evictions)?;
        d.set_item("bypasses", s.bypasses)?;
        d.set_item("hit_rate", s.hit_rate())?;
        Ok(d.into_any())
    }

    /// Flushes the cache and writes a binary snapshot.
    fn save(&mut self, path: &str) -> PyResult<()> {
        let f = File::create(path).map_err(|e| err(e.into()))?;
        self.inner.write_snapshot(BufWriter::new(f)).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(|e| err(e.into()))?;
        let inner = core::MixedPrecisionEmbedding::read_snapshot(BufReader::new(f)).map_err(err)?;
        Ok(Self {
            inner,
            adagrad: None,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Embedding(num_rows={}, dim={}, precision={}, cached={})",
            self.inner.num_rows(),
            self.inner.dim(),
            self.inner.precision(),
            self.inner.cache().is_some()
        )
    }
}

/// Sequence of mini-batches of row indices.
#[pyclass(name = "Trace", module = "mpemb", frozen)]
struct PyTrace {
    inner: AccessTrace,
}

#[pymethods]
impl PyTrace {
    #[new]
    fn new(num_rows: usize, iterations: Vec<Vec<u32>>) -> PyResult<Self> {
        Ok(Self {
            inner: AccessTrace::new(num_rows, iterations).map_err(err)?,
        })
    }

    #[getter]
    fn num_rows(&self) -> usize {
        self.inner.num_rows
    }

    #[getter]
    fn iterations(&self) -> Vec<Vec<u32>> {
        self.inner.iterations.clone()
    }

    fn total_accesses(&self) -> usize {
        self.inner.total_accesses()
    }

    fn access_counts(&self) -> Vec<u64> {
        self.inner.access_counts()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let f = File::create(path).map_err(|e| err(e.into()))?;
        self.inner.write_to(BufWriter::new(f)).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(|e| err(e.into()))?;
        Ok(Self {
            inner: AccessTrace::read_from(BufReader::new(f)).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.iterations.len()
    }
}

#[pyfunction]
#[pyo3(signature = (num_rows, iterations, batch_rows, exponent=1.05, seed=0))]
fn gen_zipf_trace(
    num_rows: usize,
    iterations: usize,
    batch_rows: usize,
    exponent: f64,
    seed: u64,
) -> PyResult<PyTrace> {
    let inner = core::gen_zipf_trace(num_rows, iterations, batch_rows, exponent, seed).map_err(err)?;
    Ok(PyTrace { inner })
}

#[pyfunction]
#[pyo3(signature = (num_rows, phases, iterations_per_phase, batch_rows, exponent=1.05, seed=0))]
fn gen_phased_trace(
    num_rows: usize,
    phases: usize,
    iterations_per_phase: usize,
    batch_rows: usize,
    exponent: f64,
    seed: u64,
) -> PyResult<PyTrace> {
    let inner =
        core::gen_phased_trace(num_rows, phases, iterations_per_phase, batch_rows, exponent, seed)
            .map_err(err)?;
    Ok(PyTrace { inner })
}

/// Replays a trace through a cached embedding and returns the report dict.
/// Extra keyword arguments set the remaining replay options (dim, precision,
/// rounding, hash, learning_rate, seed, cdf_points).
#[pyfunction]
#[pyo3(signature = (trace, policy="lfu", associativity=1, cache_ratio=0.05, **options))]
fn replay<'py>(
    py: Python<'py>,
    trace: &PyTrace,
    policy: &str,
    associativity: usize,
    cache_ratio: f64,
    options: Option<&Bound<'py, pyo3::types::PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = ReplayConfig::new(parse::<ReplacementPolicy>(policy)?, associativity, cache_ratio);
    if let Some(opts) = options {
        let mut base = serde_json::to_value(&cfg).map_err(|e| err(e.into()))?;
        let extra: serde_json::Map<String, serde_json::Value> = from_py(py, Some(opts.as_any()))?;
        base.as_object_mut().unwrap().extend(extra);
        cfg = serde_json::from_value(base).map_err(|e| err(e.into()))?;
    }
    let t = &trace.inner;
    let report = py.detach(|| core::replay(t, &cfg)).map_err(err)?;
    to_py(py, &report)
}

/// Runs the toy teacher-student experiment. `config` uses the same keys as
/// the `train-toy` JSON config; returns one dict per trained configuration.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn train_toy<'py>(py: Python<'py>, config: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: TrainToyConfig = from_py(py, config)?;
    let rows = py.detach(|| cli::cmd_train_toy(&cfg)).map_err(err)?;
    to_py(py, &rows)
}

#[pymodule]
fn mpemb(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PRECISIONS", Precision::ALL.iter().map(|p| p.as_str()).collect::<Vec<_>>())?;
    m.add("ROUNDINGS", vec![RoundingMode::Nearest.as_str(), RoundingMode::Stochastic.as_str()])?;
    m.add_class::<PyPackedRow>()?;
    m.add_class::<PyEmbedding>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(quantize_row, m)?)?;
    m.add_function(wrap_pyfunction!(dequantize_row, m)?)?;
    m.add_function(wrap_pyfunction!(fake_quantize_row, m)?)?;
    m.add_function(wrap_pyfunction!(convert_fp16, m)?)?;
    m.add_function(wrap_pyfunction!(compression_factor, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy_drop, m)?)?;
    m.add_function(wrap_pyfunction!(dedup, m)?)?;
    m.add_function(wrap_pyfunction!(gen_zipf_trace, m)?)?;
    m.add_function(wrap_pyfunction!(gen_phased_trace, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    Ok(())
}
