//! Teacher-student click model for measuring accuracy drop at desk scale.
//!
//! Each example picks one Zipf-distributed row from each of `K` tables. The
//! teacher's logit is the sum over table pairs of `dot(e_a, e_b) / √d`; the
//! label is a Bernoulli draw of its sigmoid, optionally flipped. A student
//! with the same form is trained through [`MixedPrecisionEmbedding`] so every
//! precision, rounding and cache setting sees identical data and order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheConfig, HashKind, ReplacementPolicy};
use crate::error::{Error, Result};
use crate::numerics::{Precision, RoundingMode};
use crate::optim::{apply_rowwise_adagrad, apply_sgd, dedup, GradientBatch, RowWiseAdagrad};
use crate::table::{compression_factor, MixedPrecisionEmbedding};
use crate::trace::ZipfSampler;

fn default_rows() -> Vec<usize> {
    vec![2_000, 5_000, 10_000, 20_000]
}
fn default_dim() -> usize {
    16
}
fn default_examples() -> usize {
    200_000
}
fn default_exponent() -> f64 {
    1.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTaskConfig {
    #[serde(default = "default_rows")]
    pub rows_per_table: Vec<usize>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_examples")]
    pub examples: usize,
    #[serde(default = "default_exponent")]
    pub zipf_exponent: f64,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self {
            rows_per_table: default_rows(),
            dim: default_dim(),
            examples: default_examples(),
            zipf_exponent: default_exponent(),
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl ToyTaskConfig {
    pub fn num_tables(&self) -> usize {
        self.rows_per_table.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tables() < 2 {
            return Err(Error::config("toy task needs at least two tables"));
        }
        if self.dim < 4 {
            return Err(Error::config("toy task needs dim >= 4"));
        }
        if self.rows_per_table.iter().any(|&n| n == 0 || n > u32::MAX as usize) {
            return Err(Error::config("table sizes must be in 1..=2^32-1"));
        }
        if self.examples < 10 {
            return Err(Error::config("toy task needs at least 10 examples"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::config("label_noise must be a probability"));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::config("zipf_exponent must be positive"));
        }
        Ok(())
    }

    /// Stable 64-bit key for the dataset cache (FNV-1a over the JSON form).
    pub fn cache_key(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        json.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyExample {
    pub indices: Vec<u32>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub config: ToyTaskConfig,
    pub train: Vec<ToyExample>,
    pub test: Vec<ToyExample>,
    /// Teacher rows per table, row-major `N_k × d`.
    pub teacher: Vec<Vec<f32>>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Pairwise-interaction logit `Σ_{a<b} dot(rows[a], rows[b]) / √d`.
pub fn logit(rows: &[&[f32]]) -> f64 {
    let d = rows[0].len() as f64;
    let mut z = 0.0;
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            z += dot(rows[a], rows[b]);
        }
    }
    z / d.sqrt()
}

/// Log-loss of one example, numerically stable for large `|z|`.
pub fn log_loss(z: f64, label: u8) -> f64 {
    // -[y log σ(z) + (1-y) log(1-σ(z))] = softplus(z) - y·z
    let softplus = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - label as f64 * z
}

/// Log-loss and its gradient with respect to every input row. Computed in
/// f64 and rounded to FP32 at the end.
pub fn loss_and_grads(rows: &[&[f32]], label: u8) -> (f64, Vec<Vec<f32>>) {
    let d = rows[0].len();
    let z = logit(rows);
    let dz = sigmoid(z) - label as f64;
    let scale = dz / (d as f64).sqrt();
    let mut sum = vec![0.0f64; d];
    for r in rows {
        for (s, v) in sum.iter_mut().zip(r.iter()) {
            *s += *v as f64;
        }
    }
    let grads = rows
        .iter()
        .map(|r| {
            sum.iter()
                .zip(r.iter())
                .map(|(s, v)| (scale * (s - *v as f64)) as f32)
                .collect()
        })
        .collect();
    (log_loss(z, label), grads)
}

/// Generates teacher embeddings and a 90/10 train/test split.
pub fn gen_task(cfg: &ToyTaskConfig) -> Result<ToyDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let teacher: Vec<Vec<f32>> = cfg
        .rows_per_table
        .iter()
        .map(|&n| (0..n * cfg.dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let samplers: Vec<(ZipfSampler, Vec<u32>)> = cfg
        .rows_per_table
        .iter()
        .map(|&n| {
            let mut perm: Vec<u32> = (0..n as u32).collect();
            perm.shuffle(&mut rng);
            ZipfSampler::new(n, cfg.zipf_exponent).map(|s| (s, perm))
        })
        .collect::<Result<_>>()?;

    let d = cfg.dim;
    let mut examples = Vec::with_capacity(cfg.examples);
    for _ in 0..cfg.examples {
        let indices: Vec<u32> = samplers
            .iter()
            .map(|(s, perm)| perm[s.sample(&mut rng)])
            .collect();
        let rows: Vec<&[f32]> = indices
            .iter()
            .zip(&teacher)
            .map(|(&i, t)| &t[i as usize * d..(i as usize + 1) * d])
            .collect();
        let p = sigmoid(logit(&rows));
        let mut label = (rng.random::<f64>() < p) as u8;
        if rng.random::<f64>() < cfg.label_noise {
            label ^= 1;
        }
        examples.push(ToyExample { indices, label });
    }
    let test = examples.split_off(cfg.examples * 9 / 10);
    Ok(ToyDataset {
        config: cfg.clone(),
        train: examples,
        test,
        teacher,
    })
}

const DATASET_MAGIC: &[u8; 8] = b"MPEMBTOY";
const DATASET_VERSION: u32 = 1;

impl ToyDataset {
    pub fn cache_path(dir: &Path, cfg: &ToyTaskConfig) -> PathBuf {
        dir.join(format!("toy-{:016x}.bin", cfg.cache_key()))
    }

    /// Loads the dataset for `cfg` from `dir`, generating and storing it on a
    /// miss or when the stored copy was made for a different config.
    pub fn load_or_generate(dir: &Path, cfg: &ToyTaskConfig) -> Result<Self> {
        let path = Self::cache_path(dir, cfg);
        if let Ok(bytes) = fs::read(&path) {
            if let Ok(ds) = Self::from_bytes(&bytes) {
                if &ds.config == cfg {
                    return Ok(ds);
                }
            }
        }
        let ds = gen_task(cfg)?;
        fs::create_dir_all(dir)?;
        fs::File::create(&path)?.write_all(&ds.to_bytes())?;
        Ok(ds)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.teacher {
            t.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for set in [&self.train, &self.test] {
            out.extend_from_slice(&(set.len() as u64).to_le_bytes());
            for ex in set {
                ex.indices
                    .iter()
                    .for_each(|i| out.extend_from_slice(&i.to_le_bytes()));
                out.push(ex.label);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Snapshot(format!("toy dataset: {m}"));
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(bad("truncated"));
            }
            let (h, t) = r.split_at(n);
            r = t;
            Ok(h)
        };
        if take(8)? != DATASET_MAGIC {
            return Err(bad("bad magic"));
        }
        if u32::from_le_bytes(take(4)?.try_into().unwrap()) != DATASET_VERSION {
            return Err(bad("unsupported version"));
        }
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let config: ToyTaskConfig = serde_json::from_slice(take(len)?)?;
        config.validate()?;
        let d = config.dim;
        let teacher = config
            .rows_per_table
            .iter()
            .map(|&n| {
                let raw = take(n * d * 4)?;
                Ok(raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            })
            .collect::<Result<Vec<Vec<f32>>>>()?;
        let k = config.num_tables();
        let mut sets = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let raw = take(n.checked_mul(4 * k + 1).ok_or_else(|| bad("length overflow"))?)?;
            let set: Vec<ToyExample> = raw
                .chunks_exact(4 * k + 1)
                .map(|c| ToyExample {
                    indices: c[..4 * k]
                        .chunks_exact(4)
                        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                    label: c[4 * k],
                })
                .collect();
            sets.push(set);
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let test = sets.pop().unwrap();
        let train = sets.pop().unwrap();
        for ex in train.iter().chain(&test) {
            for (&i, &n) in ex.indices.iter().zip(&config.rows_per_table) {
                if i as usize >= n {
                    return Err(bad("index out of range"));
                }
            }
        }
        Ok(Self {
            config,
            train,
            test,
            teacher,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSpec {
    pub ratio: f64,
    #[serde(default = "CacheSpec::default_assoc")]
    pub associativity: usize,
    #[serde(default = "CacheSpec::default_policy")]
    pub policy: ReplacementPolicy,
    #[serde(default)]
    pub hash: HashKind,
}

impl CacheSpec {
    fn default_assoc() -> usize {
        32
    }
    fn default_policy() -> ReplacementPolicy {
        ReplacementPolicy::Lfu
    }

    pub fn label(&self) -> String {
        format!(
            "{:.0}% {}-way {}",
            self.ratio * 100.0,
            self.associativity,
            self.policy.as_str().to_uppercase()
        )
    }
}

/// Storage configuration of every student table in one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSpec {
    pub precision: Precision,
    #[serde(default)]
    pub rounding: RoundingMode,
    #[serde(default)]
    pub cache: Option<CacheSpec>,
}

impl EmbeddingSpec {
    pub fn fp32() -> Self {
        Self {
            precision: Precision::Fp32,
            rounding: RoundingMode::Nearest,
            cache: None,
        }
    }

    pub fn label(&self) -> String {
        let base = if self.precision == Precision::Fp32 {
            "FP32".to_string()
        } else {
            format!("{} {}", self.precision.as_str().to_uppercase(), self.rounding)
        };
        match &self.cache {
            Some(c) => format!("{base} + {}", c.label()),
            None => base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adagrad,
}

fn default_lr() -> f32 {
    0.02
}
fn default_batch() -> usize {
    128
}
fn default_epochs() -> usize {
    3
}
fn default_init_std() -> f32 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f32,
    /// Seeds student initialization, shuffling and rounding streams.
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::default(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            init_std: default_init_std(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMetrics {
    pub label: String,
    pub test_accuracy: f64,
    pub test_log_loss: f64,
    pub train_log_loss: f64,
    pub hit_rate: f64,
    pub compression_factor: f64,
}

/// A student model: one mixed-precision embedding per table.
pub struct Student {
    pub tables: Vec<MixedPrecisionEmbedding>,
}

impl Student {
    pub fn new(task: &ToyTaskConfig, spec: &EmbeddingSpec, train: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5354_5544_454e_5421);
        let normal = Normal::new(0.0f32, train.init_std)
            .map_err(|e| Error::config(format!("init_std: {e}")))?;
        let d = task.dim;
        let tables = task
            .rows_per_table
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let init: Vec<f32> = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
                let cache = match &spec.cache {
                    Some(c) => CacheConfig::for_ratio(n, c.ratio, c.associativity, d, c.policy, c.hash)?,
                    None => None,
                };
                MixedPrecisionEmbedding::from_rows(
                    &init,
                    d,
                    spec.precision,
                    cache,
                    spec.rounding,
                    train.seed,
                    k as u64,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { tables })
    }

    fn fetch_all(&self, ex: &ToyExample, buf: &mut [Vec<f32>]) -> Result<()> {
        for ((t, &i), b) in self.tables.iter().zip(&ex.indices).zip(buf.iter_mut()) {
            t.fetch_into(i as usize, b)?;
        }
        Ok(())
    }

    /// Mean log-loss and accuracy over `set`.
    pub fn evaluate(&self, set: &[ToyExample]) -> Result<(f64, f64)> {
        let d = self.tables[0].dim();
        let mut buf = vec![vec![0.0f32; d]; self.tables.len()];
        let mut loss = 0.0;
        let mut correct = 0usize;
        for ex in set {
            self.fetch_all(ex, &mut buf)?;
            let rows: Vec<&[f32]> = buf.iter().map(Vec::as_slice).collect();
            let z = logit(&rows);
            loss += log_loss(z, ex.label);
            if (z > 0.0) == (ex.label == 1) {
                correct += 1;
            }
        }
        let n = set.len().max(1) as f64;
        Ok((loss / n, correct as f64 / n))
    }
}

fn train_one(ds: &ToyDataset, spec: &EmbeddingSpec, cfg: &TrainConfig) -> Result<ToyMetrics> {
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::config("batch_size and learning_rate must be positive"));
    }
    let mut student = Student::new(&ds.config, spec, cfg)?;
    let k = student.tables.len();
    let d = ds.config.dim;
    let mut adagrad: Vec<RowWiseAdagrad> = ds
        .config
        .rows_per_table
        .iter()
        .map(|&n| RowWiseAdagrad::new(n))
        .collect();
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_4521);
    let mut buf = vec![vec![0.0f32; d]; k];
    let mut train_loss = 0.0;

    let diverged = |e: Error| match e {
        Error::NonFinite { .. } | Error::RangeOverflow { .. } => Error::Diverged,
        other => other,
    };

    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batches: Vec<GradientBatch> =
                (0..k).map(|_| GradientBatch::new(cfg.learning_rate)).collect();
            for &e in chunk {
                let ex = &ds.train[e];
                student.fetch_all(ex, &mut buf)?;
                let rows: Vec<&[f32]> = buf.iter().map(Vec::as_slice).collect();
                let (loss, grads) = loss_and_grads(&rows, ex.label);
                if !loss.is_finite() {
                    return Err(Error::Diverged);
                }
                epoch_loss += loss;
                for ((b, &i), g) in batches.iter_mut().zip(&ex.indices).zip(grads) {
                    b.push(i as usize, g);
                }
            }
            for (t, (table, batch)) in student.tables.iter_mut().zip(&batches).enumerate() {
                let batch = dedup(batch);
                match cfg.optimizer {
                    OptimizerKind::Sgd => apply_sgd(table, &batch),
                    OptimizerKind::Adagrad => apply_rowwise_adagrad(table, &batch, &mut adagrad[t]),
                }
                .map_err(diverged)?;
                table.step();
            }
        }
        train_loss = epoch_loss / ds.train.len().max(1) as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged);
        }
    }

    let (test_log_loss, test_accuracy) = student.evaluate(&ds.test)?;
    if !test_log_loss.is_finite() {
        return Err(Error::Diverged);
    }
    let (hits, total) = student.tables.iter().fold((0u64, 0u64), |(h, t), e| {
        let s = e.stats();
        (h + s.hits, t + s.hits + s.misses)
    });
    let rows: usize = ds.config.rows_per_table.iter().sum();
    let cached: usize = student
        .tables
        .iter()
        .filter_map(|e| e.cache().map(|c| c.config().capacity_rows()))
        .sum();
    let policy = spec.cache.map_or(ReplacementPolicy::Lfu, |c| c.policy);
    Ok(ToyMetrics {
        label: spec.label(),
        test_accuracy,
        test_log_loss,
        train_log_loss: train_loss,
        hit_rate: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        compression_factor: compression_factor(spec.precision, d, cached as f64 / rows as f64, policy)?,
    })
}

/// Trains one student per spec on identical data and order. Configurations
/// run in parallel; each run is single-threaded. A run whose loss or weights
/// become non-finite yields `Err(Error::Diverged)`.
pub fn train(ds: &ToyDataset, specs: &[EmbeddingSpec], cfg: &TrainConfig) -> Vec<Result<ToyMetrics>> {
    specs.par_iter().map(|s| train_one(ds, s, cfg)).collect()
}
