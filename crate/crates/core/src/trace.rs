//! Synthetic access traces and trace-driven replay through a
//! [`MixedPrecisionEmbedding`].
//!
//! Row popularity follows a Zipf law over a random rank-to-row permutation.
//! Phased traces redraw that permutation at every phase boundary, so the hot
//! set moves while its shape stays the same.
//!
//! Replay de-duplicates each iteration's indices, applies a small SGD step to
//! every touched row, and counts hits and misses on the update path.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheConfig, HashKind, ReplacementPolicy, ASSOCIATIVITIES};
use crate::error::{Error, Result};
use crate::numerics::{Precision, RoundingMode};
use crate::optim::{apply_sgd, dedup, GradientBatch};
use crate::table::{compression_factor, MixedPrecisionEmbedding};

/// Inverse-CDF Zipf sampler over ranks `0..n`; rank `k` has weight
/// `1 / (k + 1)^exponent`.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(n: usize, exponent: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("Zipf support must be non-empty"));
        }
        if !(exponent > 0.0 && exponent.is_finite()) {
            return Err(Error::config(format!("Zipf exponent must be positive, got {exponent}")));
        }
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (0..n)
            .map(|k| {
                acc += ((k + 1) as f64).powf(-exponent);
                acc
            })
            .collect();
        cdf.iter_mut().for_each(|c| *c /= acc);
        Ok(Self { cdf })
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }

    /// Probability mass of the `k` most popular ranks.
    pub fn head_mass(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.cdf[k.min(self.cdf.len()) - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccessTrace {
    pub num_rows: usize,
    pub iterations: Vec<Vec<u32>>,
    /// Generator parameters, written as `# key=value` header lines.
    pub metadata: BTreeMap<String, String>,
}

impl AccessTrace {
    pub fn new(num_rows: usize, iterations: Vec<Vec<u32>>) -> Result<Self> {
        let t = Self {
            num_rows,
            iterations,
            metadata: BTreeMap::new(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_rows == 0 {
            return Err(Error::config("trace needs at least one row"));
        }
        for it in &self.iterations {
            if let Some(&i) = it.iter().find(|&&i| i as usize >= self.num_rows) {
                return Err(Error::IndexOutOfRange {
                    index: i as usize,
                    len: self.num_rows,
                });
            }
        }
        Ok(())
    }

    pub fn total_accesses(&self) -> usize {
        self.iterations.iter().map(Vec::len).sum()
    }

    /// Raw (pre-dedup) access count per row.
    pub fn access_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_rows];
        for &i in self.iterations.iter().flatten() {
            counts[i as usize] += 1;
        }
        counts
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# mpemb-trace v1")?;
        writeln!(w, "# num_rows={}", self.num_rows)?;
        for (k, v) in &self.metadata {
            writeln!(w, "# {k}={v}")?;
        }
        let mut line = String::new();
        for it in &self.iterations {
            line.clear();
            for (n, i) in it.iter().enumerate() {
                if n > 0 {
                    line.push(' ');
                }
                line.push_str(&i.to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut num_rows = None;
        let mut metadata = BTreeMap::new();
        let mut iterations = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = n + 1;
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some((k, v)) = rest.split_once('=') {
                    let (k, v) = (k.trim(), v.trim());
                    if k == "num_rows" {
                        num_rows = Some(v.parse::<usize>().map_err(|e| Error::TraceFormat {
                            line: lineno,
                            msg: format!("bad num_rows: {e}"),
                        })?);
                    } else {
                        metadata.insert(k.to_string(), v.to_string());
                    }
                }
                continue;
            }
            let row: Vec<u32> = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>().map_err(|e| Error::TraceFormat {
                        line: lineno,
                        msg: format!("bad index '{tok}': {e}"),
                    })
                })
                .collect::<Result<_>>()?;
            iterations.push(row);
        }
        let num_rows = num_rows.ok_or(Error::TraceFormat {
            line: 0,
            msg: "missing '# num_rows=' header".into(),
        })?;
        let t = Self {
            num_rows,
            iterations,
            metadata,
        };
        t.validate()?;
        Ok(t)
    }
}

/// Stationary Zipf trace: `iterations` lists of `batch_rows` draws each.
pub fn gen_zipf_trace(
    num_rows: usize,
    iterations: usize,
    batch_rows: usize,
    exponent: f64,
    seed: u64,
) -> Result<AccessTrace> {
    let mut t = gen_phased_trace(num_rows, 1, iterations, batch_rows, exponent, seed)?;
    t.metadata.insert("distribution".into(), "zipf".into());
    t.metadata.remove("phases");
    t.metadata.remove("iterations_per_phase");
    t.metadata.insert("iterations".into(), iterations.to_string());
    Ok(t)
}

/// Zipf trace whose rank-to-row permutation is redrawn every
/// `iterations_per_phase` iterations. One phase is the stationary trace.
pub fn gen_phased_trace(
    num_rows: usize,
    phases: usize,
    iterations_per_phase: usize,
    batch_rows: usize,
    exponent: f64,
    seed: u64,
) -> Result<AccessTrace> {
    if phases == 0 {
        return Err(Error::config("need at least one phase"));
    }
    if num_rows > u32::MAX as usize {
        return Err(Error::config("trace rows must fit in 32 bits"));
    }
    let sampler = ZipfSampler::new(num_rows, exponent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<u32> = (0..num_rows as u32).collect();
    let mut iterations = Vec::with_capacity(phases * iterations_per_phase);
    for _ in 0..phases {
        perm.shuffle(&mut rng);
        for _ in 0..iterations_per_phase {
            iterations.push(
                (0..batch_rows)
                    .map(|_| perm[sampler.sample(&mut rng)])
                    .collect(),
            );
        }
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("distribution".into(), "phased".into());
    metadata.insert("exponent".into(), exponent.to_string());
    metadata.insert("seed".into(), seed.to_string());
    metadata.insert("phases".into(), phases.to_string());
    metadata.insert("iterations_per_phase".into(), iterations_per_phase.to_string());
    metadata.insert("batch_rows".into(), batch_rows.to_string());
    Ok(AccessTrace {
        num_rows,
        iterations,
        metadata,
    })
}

fn default_dim() -> usize {
    16
}
fn default_precision() -> Precision {
    Precision::Int8
}
fn default_assoc() -> usize {
    1
}
fn default_lr() -> f32 {
    1e-3
}
fn default_cdf_points() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default)]
    pub rounding: RoundingMode,
    pub policy: ReplacementPolicy,
    #[serde(default = "default_assoc")]
    pub associativity: usize,
    #[serde(default)]
    pub hash: HashKind,
    pub cache_ratio: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cdf_points")]
    pub cdf_points: usize,
}

impl ReplayConfig {
    pub fn new(policy: ReplacementPolicy, associativity: usize, cache_ratio: f64) -> Self {
        Self {
            dim: default_dim(),
            precision: default_precision(),
            rounding: RoundingMode::Nearest,
            policy,
            associativity,
            hash: HashKind::Modulo,
            cache_ratio,
            learning_rate: default_lr(),
            seed: 0,
            cdf_points: default_cdf_points(),
        }
    }

    /// Resolves the cache geometry for a table of `num_rows` rows. A positive
    /// ratio that rounds to less than one set is rejected.
    pub fn cache_config(&self, num_rows: usize) -> Result<Option<CacheConfig>> {
        if self.dim == 0 {
            return Err(Error::config("dim must be positive"));
        }
        if !ASSOCIATIVITIES.contains(&self.associativity) {
            return Err(Error::config(format!(
                "associativity {} not in {:?}",
                self.associativity, ASSOCIATIVITIES
            )));
        }
        let cfg = CacheConfig::for_ratio(
            num_rows,
            self.cache_ratio,
            self.associativity,
            self.dim,
            self.policy,
            self.hash,
        )?;
        if cfg.is_none() && self.cache_ratio > 0.0 {
            return Err(Error::config(format!(
                "cache ratio {} of {num_rows} rows is smaller than one {}-way set",
                self.cache_ratio, self.associativity
            )));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: ReplacementPolicy,
    pub associativity: usize,
    pub num_sets: usize,
    pub cache_ratio: f64,
    pub precision: Precision,
    pub rounding: RoundingMode,
    pub hit_rate: f64,
    pub hits: u64,
    pub misses: u64,
    pub admissions: u64,
    pub evictions: u64,
    pub bypasses: u64,
    /// Raw trace entries, duplicates within an iteration included.
    pub accesses: u64,
    /// Row updates after per-iteration dedup; equals `hits + misses`.
    pub updates: u64,
    pub unique_rows: u64,
    pub compression_factor: f64,
    /// `[fraction of rows, fraction of accesses]`, rows sorted by descending
    /// access count.
    pub cdf: Vec<[f64; 2]>,
    #[serde(skip)]
    pub access_counts: Vec<u64>,
}

/// Cumulative access share of the most-accessed rows, sampled at `points`
/// evenly spaced row fractions ending at 1. Empty if there were no accesses.
pub fn access_cdf(counts: &[u64], points: usize) -> Vec<[f64; 2]> {
    let total: u64 = counts.iter().sum();
    if total == 0 || counts.is_empty() || points == 0 {
        return Vec::new();
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let mut prefix = Vec::with_capacity(sorted.len() + 1);
    prefix.push(0u64);
    for c in &sorted {
        prefix.push(prefix.last().unwrap() + c);
    }
    let n = counts.len();
    (1..=points)
        .map(|k| {
            let f = k as f64 / points as f64;
            let rows = ((f * n as f64).ceil() as usize).min(n);
            [f, prefix[rows] as f64 / total as f64]
        })
        .collect()
}

/// Replays `trace` through a fresh embedding built from `cfg`.
pub fn replay(trace: &AccessTrace, cfg: &ReplayConfig) -> Result<SimReport> {
    trace.validate()?;
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::config("learning rate must be positive"));
    }
    let n = trace.num_rows;
    let cache = cfg.cache_config(n)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init: Vec<f32> = (0..n * cfg.dim)
        .map(|_| rng.random_range(-0.1f32..0.1))
        .collect();
    let mut emb = MixedPrecisionEmbedding::from_rows(
        &init,
        cfg.dim,
        cfg.precision,
        cache,
        cfg.rounding,
        cfg.seed,
        0,
    )?;

    let grad: Vec<f32> = (0..cfg.dim)
        .map(|j| if j % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let mut unique = vec![false; n];
    for it in &trace.iterations {
        let mut batch = GradientBatch::new(cfg.learning_rate);
        for &i in it {
            batch.push(i as usize, grad.clone());
            unique[i as usize] = true;
        }
        let batch = dedup(&batch);
        apply_sgd(&mut emb, &batch)?;
        emb.step();
    }

    let stats = emb.stats();
    let counts = trace.access_counts();
    let cap = cache.map_or(0, |c| c.capacity_rows());
    Ok(SimReport {
        policy: cfg.policy,
        associativity: cfg.associativity,
        num_sets: cache.map_or(0, |c| c.num_sets),
        cache_ratio: cfg.cache_ratio,
        precision: cfg.precision,
        rounding: cfg.rounding,
        hit_rate: stats.hit_rate(),
        hits: stats.hits,
        misses: stats.misses,
        admissions: stats.admissions,
        evictions: stats.evictions,
        bypasses: stats.bypasses,
        accesses: trace.total_accesses() as u64,
        updates: stats.hits + stats.misses,
        unique_rows: unique.iter().filter(|&&u| u).count() as u64,
        compression_factor: compression_factor(
            cfg.precision,
            cfg.dim,
            cap as f64 / n as f64,
            cfg.policy,
        )?,
        cdf: access_cdf(&counts, cfg.cdf_points),
        access_counts: counts,
    })
}

/// Replays independent configurations in parallel; results keep input order.
pub fn replay_grid(trace: &AccessTrace, cfgs: &[ReplayConfig]) -> Vec<Result<SimReport>> {
    cfgs.par_iter().map(|c| replay(trace, c)).collect()
}
