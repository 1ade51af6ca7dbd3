//! Experiment configs and command implementations behind the `mpemb` binary.
//!
//! Every command reads a JSON config (unknown keys rejected), applies
//! `key.path=value` overrides from the command line, validates, and only then
//! starts work. File formats are documented in `docs/formats.md`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cache::{CacheConfig, HashKind, ReplacementPolicy};
use crate::error::{Error, Result};
use crate::numerics::{Precision, RoundingMode};
use crate::optim::{apply_sgd, GradientBatch};
use crate::table::{accuracy_drop, compression_factor, MixedPrecisionEmbedding};
use crate::toy::{self, CacheSpec, EmbeddingSpec, ToyDataset, ToyTaskConfig, TrainConfig};
use crate::trace::{self, AccessTrace, ReplayConfig, SimReport};

/// Environment variable supplying the seed when a config leaves it unset.
pub const SEED_ENV: &str = "MPEMB_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Config problems map to [`EXIT_CONFIG`], everything else to [`EXIT_RUNTIME`].
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::TraceFormat { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Seed from the config, else from `MPEMB_SEED`, else 0.
pub fn resolve_seed(configured: Option<u64>) -> Result<u64> {
    if let Some(s) = configured {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

/// Applies `a.b.c=value` overrides to a JSON document. The value is parsed as
/// JSON when possible and taken as a string otherwise.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for ov in overrides {
        let (path, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override '{ov}' is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut cur = &mut *doc;
        let keys: Vec<&str> = path.split('.').collect();
        for (n, key) in keys.iter().enumerate() {
            if key.is_empty() {
                return Err(Error::config(format!("empty key in override '{ov}'")));
            }
            if !cur.is_object() {
                return Err(Error::config(format!("override '{ov}': '{key}' is not inside an object")));
            }
            let obj = cur.as_object_mut().unwrap();
            if n + 1 == keys.len() {
                obj.insert(key.to_string(), value.clone());
                break;
            }
            cur = obj
                .entry(key.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// Reads a JSON config (or `{}` when `path` is `None`), applies overrides and
/// deserializes it.
pub fn load_config<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut doc: Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)?
        }
        None => Value::Object(Default::default()),
    };
    apply_overrides(&mut doc, overrides)?;
    Ok(serde_json::from_value(doc)?)
}

/// Five decimals, ties rounded away from zero (`{:.5}` alone rounds exact
/// binary ties such as 0.265625 to even).
pub fn fmt5(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    format!("{:.5}", (x * 1e5).round() / 1e5)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TraceSpec {
    Zipf {
        num_rows: usize,
        iterations: usize,
        batch_rows: usize,
        #[serde(default = "default_exponent")]
        exponent: f64,
    },
    Phased {
        num_rows: usize,
        phases: usize,
        iterations_per_phase: usize,
        batch_rows: usize,
        #[serde(default = "default_exponent")]
        exponent: f64,
    },
    File {
        path: PathBuf,
    },
}

fn default_exponent() -> f64 {
    1.05
}

impl TraceSpec {
    pub fn build(&self, seed: u64) -> Result<AccessTrace> {
        match self {
            TraceSpec::Zipf {
                num_rows,
                iterations,
                batch_rows,
                exponent,
            } => trace::gen_zipf_trace(*num_rows, *iterations, *batch_rows, *exponent, seed),
            TraceSpec::Phased {
                num_rows,
                phases,
                iterations_per_phase,
                batch_rows,
                exponent,
            } => {
                if *phases < 2 {
                    return Err(Error::config("phased trace needs at least two phases"));
                }
                trace::gen_phased_trace(
                    *num_rows,
                    *phases,
                    *iterations_per_phase,
                    *batch_rows,
                    *exponent,
                    seed,
                )
            }
            TraceSpec::File { path } => {
                let f = fs::File::open(path)
                    .map_err(|e| Error::config(format!("cannot open trace {}: {e}", path.display())))?;
                AccessTrace::read_from(BufReader::new(f))
            }
        }
    }
}

fn default_sim_dim() -> usize {
    16
}
fn default_sim_precision() -> Precision {
    Precision::Int8
}
fn default_assocs() -> Vec<usize> {
    vec![1]
}
fn default_sim_lr() -> f32 {
    1e-3
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("mpemb-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub trace: TraceSpec,
    #[serde(default = "default_sim_dim")]
    pub dim: usize,
    #[serde(default = "default_sim_precision")]
    pub precision: Precision,
    #[serde(default)]
    pub rounding: RoundingMode,
    #[serde(default)]
    pub hash: HashKind,
    #[serde(default = "default_sim_lr")]
    pub learning_rate: f32,
    pub policies: Vec<ReplacementPolicy>,
    #[serde(default = "default_assocs")]
    pub associativities: Vec<usize>,
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimCell {
    pub policy: ReplacementPolicy,
    pub associativity: usize,
    pub ratio: f64,
}

impl SimCell {
    pub fn row_label(&self) -> String {
        format!("{}-{}way", self.policy, self.associativity)
    }

    pub fn file_name(&self) -> String {
        format!("{}-{}way-r{}.json", self.policy, self.associativity, fmt5(self.ratio))
    }
}

#[derive(Debug)]
pub struct SimulateOutput {
    pub cells: Vec<(SimCell, Result<SimReport>)>,
    pub csv_path: PathBuf,
    pub json_paths: Vec<PathBuf>,
}

impl SimulateOutput {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|(_, r)| r.is_err()).count()
    }
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() || self.associativities.is_empty() || self.ratios.is_empty() {
            return Err(Error::config("empty experiment grid"));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::config(format!("cache ratio {r} outside [0, 1]")));
        }
        if let Some(a) = self
            .associativities
            .iter()
            .find(|a| !crate::cache::ASSOCIATIVITIES.contains(a))
        {
            return Err(Error::config(format!("associativity {a} is not a power of two up to 32")));
        }
        if self.dim == 0 {
            return Err(Error::config("dim must be positive"));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<SimCell> {
        let mut out = Vec::new();
        for &policy in &self.policies {
            for &associativity in &self.associativities {
                for &ratio in &self.ratios {
                    out.push(SimCell {
                        policy,
                        associativity,
                        ratio,
                    });
                }
            }
        }
        out
    }
}

/// Replays the (policy × associativity × ratio) grid, writing one JSON report
/// per cell and a hit-rate CSV matrix (rows: policy/associativity, columns:
/// ratio).
pub fn cmd_simulate(cfg: &SimulateConfig) -> Result<SimulateOutput> {
    cfg.validate()?;
    let seed = resolve_seed(cfg.seed)?;
    let trace = cfg.trace.build(seed)?;
    let cells = cfg.cells();
    let replay_cfgs: Vec<ReplayConfig> = cells
        .iter()
        .map(|c| ReplayConfig {
            dim: cfg.dim,
            precision: cfg.precision,
            rounding: cfg.rounding,
            policy: c.policy,
            associativity: c.associativity,
            hash: cfg.hash,
            cache_ratio: c.ratio,
            learning_rate: cfg.learning_rate,
            seed,
            cdf_points: 100,
        })
        .collect();
    let results = trace::replay_grid(&trace, &replay_cfgs);

    fs::create_dir_all(&cfg.out_dir)?;
    let mut json_paths = Vec::new();
    for (cell, res) in cells.iter().zip(&results) {
        let path = cfg.out_dir.join(cell.file_name());
        let body = match res {
            Ok(r) => serde_json::to_string_pretty(r)?,
            Err(e) => serde_json::to_string_pretty(&serde_json::json!({ "error": e.to_string() }))?,
        };
        fs::write(&path, body + "\n")?;
        json_paths.push(path);
    }

    let csv_path = cfg.out_dir.join("hit_rates.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    let mut header = vec!["config".to_string()];
    header.extend(cfg.ratios.iter().map(|&r| fmt5(r)));
    w.write_record(&header)?;
    let mut by_row = cells.iter().zip(&results).peekable();
    while let Some((cell, _)) = by_row.peek() {
        let label = cell.row_label();
        let mut record = vec![label.clone()];
        while let Some((c, r)) = by_row.peek() {
            if c.row_label() != label {
                break;
            }
            record.push(match r {
                Ok(rep) => fmt5(rep.hit_rate),
                Err(_) => "ERR".into(),
            });
            by_row.next();
        }
        w.write_record(&record)?;
    }
    w.flush()?;

    Ok(SimulateOutput {
        cells: cells.into_iter().zip(results).collect(),
        csv_path,
        json_paths,
    })
}

pub fn render_sim_table(out: &SimulateOutput) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>8} {:>10} {:>10} {:>10} {:>12}",
        "config", "ratio", "hit_rate", "evictions", "bypasses", "compression"
    );
    for (cell, res) in &out.cells {
        match res {
            Ok(r) => {
                let _ = writeln!(
                    s,
                    "{:<12} {:>8} {:>10} {:>10} {:>10} {:>12}",
                    cell.row_label(),
                    fmt5(cell.ratio),
                    fmt5(r.hit_rate),
                    r.evictions,
                    r.bypasses,
                    fmt5(r.compression_factor)
                );
            }
            Err(e) => {
                let _ = writeln!(s, "{:<12} {:>8} error: {e}", cell.row_label(), fmt5(cell.ratio));
            }
        }
    }
    s
}

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

fn default_precisions() -> Vec<Precision> {
    vec![Precision::Int8, Precision::Int4, Precision::Int2]
}
fn default_roundings() -> Vec<RoundingMode> {
    vec![RoundingMode::Nearest, RoundingMode::Stochastic]
}
fn default_caches() -> Vec<Option<CacheSpec>> {
    vec![None]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainToyConfig {
    #[serde(default)]
    pub task: ToyTaskConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_precisions")]
    pub precisions: Vec<Precision>,
    #[serde(default = "default_roundings")]
    pub roundings: Vec<RoundingMode>,
    /// `null` entries mean "no cache".
    #[serde(default = "default_caches")]
    pub caches: Vec<Option<CacheSpec>>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Directory for the generated-dataset cache; no caching when unset.
    #[serde(default)]
    pub dataset_dir: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyResultRow {
    pub label: String,
    pub spec: EmbeddingSpec,
    pub status: RunStatus,
    pub test_accuracy: Option<f64>,
    pub test_log_loss: Option<f64>,
    pub accuracy_drop_pct: Option<f64>,
    pub hit_rate: Option<f64>,
    pub compression_factor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrainToyConfig {
    pub fn grid(&self) -> Result<Vec<EmbeddingSpec>> {
        if self.precisions.is_empty() || self.roundings.is_empty() || self.caches.is_empty() {
            return Err(Error::config("empty experiment grid"));
        }
        let mut specs = vec![EmbeddingSpec::fp32()];
        for &precision in &self.precisions {
            for &rounding in &self.roundings {
                for &cache in &self.caches {
                    specs.push(EmbeddingSpec {
                        precision,
                        rounding,
                        cache,
                    });
                }
            }
        }
        Ok(specs)
    }
}

/// Trains the FP32 baseline plus every grid cell and reports accuracy drop.
pub fn cmd_train_toy(cfg: &TrainToyConfig) -> Result<Vec<ToyResultRow>> {
    let specs = cfg.grid()?;
    let seed = resolve_seed(cfg.seed)?;
    let task = ToyTaskConfig {
        seed,
        ..cfg.task.clone()
    };
    task.validate()?;
    for c in cfg.caches.iter().flatten() {
        if !(0.0..=1.0).contains(&c.ratio) || !crate::cache::ASSOCIATIVITIES.contains(&c.associativity) {
            return Err(Error::config(format!("bad cache spec {c:?}")));
        }
    }
    let train_cfg = TrainConfig { seed, ..cfg.train };
    let ds = match &cfg.dataset_dir {
        Some(dir) => ToyDataset::load_or_generate(dir, &task)?,
        None => toy::gen_task(&task)?,
    };
    let results = toy::train(&ds, &specs, &train_cfg);
    // Without a baseline there is nothing to compare against.
    let base = match &results[0] {
        Ok(m) => m.test_accuracy,
        Err(_) => return Err(results.into_iter().next().unwrap().unwrap_err()),
    };

    let rows_total: usize = task.rows_per_table.iter().sum();
    let rows = specs
        .iter()
        .zip(results)
        .map(|(spec, res)| {
            let cached: usize = spec.cache.map_or(0, |c| {
                task.rows_per_table
                    .iter()
                    .filter_map(|&n| {
                        CacheConfig::for_ratio(n, c.ratio, c.associativity, task.dim, c.policy, c.hash)
                            .ok()
                            .flatten()
                    })
                    .map(|cc| cc.capacity_rows())
                    .sum()
            });
            let cf = compression_factor(
                spec.precision,
                task.dim,
                cached as f64 / rows_total as f64,
                spec.cache.map_or(ReplacementPolicy::Lfu, |c| c.policy),
            )
            .unwrap_or(f64::NAN);
            match res {
                Ok(m) => ToyResultRow {
                    label: spec.label(),
                    spec: *spec,
                    status: RunStatus::Ok,
                    test_accuracy: Some(m.test_accuracy),
                    test_log_loss: Some(m.test_log_loss),
                    accuracy_drop_pct: accuracy_drop(base, m.test_accuracy).ok(),
                    hit_rate: Some(m.hit_rate),
                    compression_factor: cf,
                    error: None,
                },
                Err(e) => ToyResultRow {
                    label: spec.label(),
                    spec: *spec,
                    status: if matches!(e, Error::Diverged) {
                        RunStatus::Diverged
                    } else {
                        RunStatus::Error
                    },
                    test_accuracy: None,
                    test_log_loss: None,
                    accuracy_drop_pct: None,
                    hit_rate: None,
                    compression_factor: cf,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect::<Vec<_>>();

    if let Some(out) = &cfg.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(out, serde_json::to_string_pretty(&rows)? + "\n")?;
    }
    Ok(rows)
}

/// Accuracy-drop table; runs that did not converge show `N/A`.
pub fn render_drop_table(rows: &[ToyResultRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>9}  {:>12}  {:>11}",
        "config", "accuracy", "drop %", "compression"
    );
    for r in rows {
        let (acc, drop) = match (r.test_accuracy, r.accuracy_drop_pct) {
            (Some(a), Some(d)) => (format!("{a:.5}"), format!("{d:.3}")),
            _ => ("N/A".to_string(), "N/A".to_string()),
        };
        let _ = writeln!(
            s,
            "{:<width$}  {:>9}  {:>12}  {:>11}",
            r.label,
            acc,
            drop,
            fmt5(r.compression_factor)
        );
    }
    s
}

// ---------------------------------------------------------------------------
// compression
// ---------------------------------------------------------------------------

pub fn cmd_compression(
    precision: Precision,
    dim: usize,
    ratio: f64,
    policy: ReplacementPolicy,
) -> Result<String> {
    compression_factor(precision, dim, ratio, policy).map(fmt5)
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn default_hit_rates() -> Vec<f64> {
    vec![0.05, 0.5, 0.95]
}
fn default_bench_rows() -> usize {
    100_000
}
fn default_bench_dim() -> usize {
    64
}
fn default_bench_updates() -> usize {
    200_000
}
fn default_bench_ratio() -> f64 {
    0.05
}
fn default_bench_assoc() -> usize {
    32
}
fn default_repeats() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_hit_rates")]
    pub hit_rates: Vec<f64>,
    #[serde(default = "default_bench_rows")]
    pub num_rows: usize,
    #[serde(default = "default_bench_dim")]
    pub dim: usize,
    #[serde(default = "default_bench_updates")]
    pub updates: usize,
    #[serde(default = "default_sim_precision")]
    pub precision: Precision,
    #[serde(default = "BenchConfig::default_rounding")]
    pub rounding: RoundingMode,
    #[serde(default = "default_bench_ratio")]
    pub cache_ratio: f64,
    #[serde(default = "default_bench_assoc")]
    pub associativity: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl BenchConfig {
    fn default_rounding() -> RoundingMode {
        RoundingMode::Stochastic
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all bench fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub target_hit_rate: f64,
    pub measured_hit_rate: f64,
    pub update_rows_per_s: f64,
    pub fetch_rows_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub points: Vec<BenchPoint>,
    /// Update throughput never drops as the hit rate rises.
    pub monotone: bool,
    /// Update throughput at the highest hit rate beats the lowest.
    pub extremes_ordered: bool,
}

/// Hot rows fill the cache exactly and are warmed so no cold row can displace
/// them; each access is hot with probability `hit_rate`, otherwise a uniform
/// cold row. The measured hit rate therefore tracks the target.
fn bench_point(cfg: &BenchConfig, hit_rate: f64, seed: u64) -> Result<BenchPoint> {
    let cache = CacheConfig::for_ratio(
        cfg.num_rows,
        cfg.cache_ratio,
        cfg.associativity,
        cfg.dim,
        ReplacementPolicy::Lfu,
        HashKind::Modulo,
    )?
    .ok_or_else(|| Error::config("bench cache ratio yields no cache"))?;
    let hot = cache.capacity_rows();
    if hot >= cfg.num_rows {
        return Err(Error::config("bench needs rows outside the cache"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Vec<f32> = (0..cfg.num_rows * cfg.dim)
        .map(|_| rng.random_range(-0.1f32..0.1))
        .collect();
    let mut emb = MixedPrecisionEmbedding::from_rows(
        &init,
        cfg.dim,
        cfg.precision,
        Some(cache),
        cfg.rounding,
        seed,
        0,
    )?;
    let grad = vec![1.0f32; cfg.dim];
    let lr = 1e-4;
    const WARM: usize = 16;
    for _ in 0..WARM {
        let mut b = GradientBatch::new(lr);
        for i in 0..hot {
            b.push(i, grad.clone());
        }
        apply_sgd(&mut emb, &b)?;
        emb.step();
    }
    emb.reset_stats();

    let accesses: Vec<usize> = (0..cfg.updates)
        .map(|_| {
            if rng.random::<f64>() < hit_rate {
                rng.random_range(0..hot)
            } else {
                rng.random_range(hot..cfg.num_rows)
            }
        })
        .collect();

    let mut x = vec![0.0f32; cfg.dim];
    let t = Instant::now();
    for &i in &accesses {
        emb.fetch_into(i, &mut x)?;
        x.iter_mut().zip(&grad).for_each(|(v, g)| *v -= lr * g);
        emb.update(i, &x)?;
    }
    let update_secs = t.elapsed().as_secs_f64();
    let measured = emb.stats().hit_rate();

    let mut sink = 0.0f32;
    let t = Instant::now();
    for &i in &accesses {
        emb.fetch_into(i, &mut x)?;
        sink += x[0];
    }
    let fetch_secs = t.elapsed().as_secs_f64();
    std::hint::black_box(sink);

    Ok(BenchPoint {
        target_hit_rate: hit_rate,
        measured_hit_rate: measured,
        update_rows_per_s: cfg.updates as f64 / update_secs.max(1e-12),
        fetch_rows_per_s: cfg.updates as f64 / fetch_secs.max(1e-12),
    })
}

/// Measures fetch and update throughput at each requested hit rate. Each point
/// keeps the best of `repeats` runs. Points run sequentially.
pub fn cmd_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.hit_rates.is_empty() {
        return Err(Error::config("empty experiment grid"));
    }
    if let Some(h) = cfg.hit_rates.iter().find(|h| !(0.0..=1.0).contains(*h)) {
        return Err(Error::config(format!("hit rate {h} outside [0, 1]")));
    }
    if cfg.repeats == 0 || cfg.updates == 0 || cfg.dim == 0 {
        return Err(Error::config("repeats, updates and dim must be positive"));
    }
    let seed = resolve_seed(cfg.seed)?;
    let mut points = Vec::with_capacity(cfg.hit_rates.len());
    for &h in &cfg.hit_rates {
        let mut best: Option<BenchPoint> = None;
        for _ in 0..cfg.repeats {
            let p = bench_point(cfg, h, seed)?;
            best = Some(match best {
                Some(b) if b.update_rows_per_s >= p.update_rows_per_s => BenchPoint {
                    fetch_rows_per_s: b.fetch_rows_per_s.max(p.fetch_rows_per_s),
                    ..b
                },
                Some(b) => BenchPoint {
                    fetch_rows_per_s: b.fetch_rows_per_s.max(p.fetch_rows_per_s),
                    ..p
                },
                None => p,
            });
        }
        points.push(best.unwrap());
    }
    let mut sorted: Vec<&BenchPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.target_hit_rate.total_cmp(&b.target_hit_rate));
    let monotone = sorted
        .windows(2)
        .all(|w| w[1].update_rows_per_s >= w[0].update_rows_per_s);
    let extremes_ordered = sorted.len() < 2
        || sorted.last().unwrap().update_rows_per_s > sorted[0].update_rows_per_s;
    let report = BenchReport {
        points,
        monotone,
        extremes_ordered,
    };
    if let Some(out) = &cfg.out {
        fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

pub fn render_bench_table(r: &BenchReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>10} {:>10} {:>16} {:>16}",
        "target", "measured", "update rows/s", "fetch rows/s"
    );
    for p in &r.points {
        let _ = writeln!(
            s,
            "{:>10} {:>10} {:>16.0} {:>16.0}",
            fmt5(p.target_hit_rate),
            fmt5(p.measured_hit_rate),
            p.update_rows_per_s,
            p.fetch_rows_per_s
        );
    }
    s
}

// ---------------------------------------------------------------------------
// quantize
// ---------------------------------------------------------------------------

/// Parses a text matrix: one row per line, values separated by whitespace or
/// commas, `#` starts a comment line. All rows must have the same length.
pub fn read_text_rows<R: BufRead>(r: R) -> Result<(Vec<f32>, usize)> {
    let mut values = Vec::new();
    let mut dim = None;
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f32> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f32>()
                    .map_err(|e| Error::config(format!("line {}: bad value '{t}': {e}", n + 1)))
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::config(format!(
                    "line {}: expected {d} values, got {}",
                    n + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
    }
    let dim = dim.ok_or_else(|| Error::config("input has no rows"))?;
    Ok((values, dim))
}

/// Quantizes a text matrix into a snapshot file; returns `(rows, dim)`.
pub fn cmd_quantize(
    input: &Path,
    output: &Path,
    precision: Precision,
    rounding: RoundingMode,
    seed: Option<u64>,
) -> Result<(usize, usize)> {
    let f = fs::File::open(input)
        .map_err(|e| Error::config(format!("cannot open {}: {e}", input.display())))?;
    let (values, dim) = read_text_rows(BufReader::new(f))?;
    let seed = resolve_seed(seed)?;
    let mut emb = MixedPrecisionEmbedding::from_rows(&values, dim, precision, None, rounding, seed, 0)?;
    let rows = emb.num_rows();
    let file = fs::File::create(output)?;
    emb.write_snapshot(std::io::BufWriter::new(file))?;
    Ok((rows, dim))
}

// ---------------------------------------------------------------------------
// gen-trace
// ---------------------------------------------------------------------------

pub fn cmd_gen_trace(spec: &TraceSpec, seed: Option<u64>, output: &Path) -> Result<AccessTrace> {
    let seed = resolve_seed(seed)?;
    let t = spec.build(seed)?;
    let f = fs::File::create(output)?;
    t.write_to(std::io::BufWriter::new(f))?;
    Ok(t)
}

/// Runs several configs of one command kind in parallel on the rayon pool.
pub fn run_parallel<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.par_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_merge_paths() {
        let mut doc = serde_json::json!({"a": {"b": 1}, "c": "x"});
        apply_overrides(
            &mut doc,
            &["a.b=2".into(), "a.z=[1,2]".into(), "c=hello".into(), "n.m=true".into()],
        )
        .unwrap();
        assert_eq!(doc, serde_json::json!({"a": {"b": 2, "z": [1, 2]}, "c": "hello", "n": {"m": true}}));
        assert!(apply_overrides(&mut doc, &["novalue".into()]).is_err());
        assert!(apply_overrides(&mut doc, &["c.d=1".into()]).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: Result<SimulateConfig> = load_config(None, &["bogus=1".into()]);
        assert!(r.is_err());
        let r: Result<BenchConfig> = load_config(None, &["hit_rate=[0.5]".into()]);
        assert!(matches!(r, Err(Error::Json(_))));
        let b: BenchConfig = load_config(None, &[]).unwrap();
        assert_eq!(b, BenchConfig::default());
    }

    #[test]
    fn trace_spec_tagging() {
        let t: TraceSpec = serde_json::from_str(
            r#"{"kind":"zipf","num_rows":10,"iterations":2,"batch_rows":3}"#,
        )
        .unwrap();
        assert_eq!(t, TraceSpec::Zipf { num_rows: 10, iterations: 2, batch_rows: 3, exponent: 1.05 });
        assert!(serde_json::from_str::<TraceSpec>(
            r#"{"kind":"zipf","num_rows":10,"iterations":2,"batch_rows":3,"extra":1}"#
        )
        .is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x")), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Diverged), EXIT_RUNTIME);
    }

    #[test]
    fn text_rows() {
        let (v, d) = read_text_rows("# header\n1, 2 3\n\n4 5 6\n".as_bytes()).unwrap();
        assert_eq!((v, d), (vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3));
        assert!(read_text_rows("1 2\n3\n".as_bytes()).is_err());
        assert!(read_text_rows("1 x\n".as_bytes()).is_err());
        assert!(read_text_rows("# only\n".as_bytes()).is_err());
    }

    #[test]
    fn compression_command_formats() {
        assert_eq!(cmd_compression(Precision::Int2, 128, 0.0, ReplacementPolicy::Lfu).unwrap(), "0.07813");
        assert_eq!(cmd_compression(Precision::Int8, 128, 0.05, ReplacementPolicy::Lfu).unwrap(), "0.32383");
        assert_eq!(cmd_compression(Precision::Int4, 128, 0.05, ReplacementPolicy::Lfu).unwrap(), "0.19883");
    }

    #[test]
    fn drop_table_renders_na() {
        let ok = ToyResultRow {
            label: "FP32".into(),
            spec: EmbeddingSpec::fp32(),
            status: RunStatus::Ok,
            test_accuracy: Some(0.8),
            test_log_loss: Some(0.4),
            accuracy_drop_pct: Some(0.0),
            hit_rate: Some(0.0),
            compression_factor: 1.0,
            error: None,
        };
        let bad = ToyResultRow {
            label: "INT2 nearest".into(),
            status: RunStatus::Diverged,
            test_accuracy: None,
            test_log_loss: None,
            accuracy_drop_pct: None,
            error: Some("training diverged".into()),
            ..ok.clone()
        };
        let t = render_drop_table(&[ok, bad]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[1].contains("0.000"));
        assert!(lines[2].contains("N/A"));
    }
}
