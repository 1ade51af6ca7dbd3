//! Mixed-precision embedding: a low-precision table fronted by an optional
//! FP32 cache, exposed through `fetch` and `update`.
//!
//! A row is authoritative in exactly one place. While it is cache-resident the
//! FP32 copy wins and the table copy may be stale; once evicted, bypassed, or
//! flushed the row is rounded into the table with the embedding's rounding
//! mode. Rounding draws come from a stream keyed by
//! `(seed, table_id, row, iteration)`.

use std::io::{Read, Write};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::cache::{Admission, CacheConfig, HashKind, Lookup, ReplacementPolicy, SetAssocCache};
use crate::error::{Error, Result};
use crate::numerics::{self, PackedRow, Precision, QuantParams, RoundingMode};
use crate::rng::RngStream;

#[derive(Debug, Clone)]
enum Storage {
    Fp32(Vec<f32>),
    Fp16(Vec<f16>),
    Packed {
        params: Vec<QuantParams>,
        payload: Vec<u8>,
        row_bytes: usize,
    },
}

/// `num_rows × dim` rows stored at one precision.
#[derive(Debug, Clone)]
pub struct QuantizedTable {
    num_rows: usize,
    dim: usize,
    precision: Precision,
    storage: Storage,
}

impl QuantizedTable {
    /// A table of zero rows.
    pub fn zeros(num_rows: usize, dim: usize, precision: Precision) -> Result<Self> {
        if num_rows == 0 || dim == 0 {
            return Err(Error::config("table needs at least one row and one column"));
        }
        let storage = match precision {
            Precision::Fp32 => Storage::Fp32(vec![0.0; num_rows * dim]),
            Precision::Fp16 => Storage::Fp16(vec![f16::ZERO; num_rows * dim]),
            _ => {
                let row_bytes = PackedRow::byte_len(precision, dim) - QuantParams::BYTES;
                Storage::Packed {
                    params: vec![QuantParams::default(); num_rows],
                    payload: vec![0; num_rows * row_bytes],
                    row_bytes,
                }
            }
        };
        Ok(Self {
            num_rows,
            dim,
            precision,
            storage,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.num_rows {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.num_rows,
            });
        }
        Ok(())
    }

    /// Up-converts row `i` into `out`.
    pub fn read_row(&self, i: usize, out: &mut [f32]) -> Result<()> {
        self.check_index(i)?;
        if out.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: out.len(),
            });
        }
        let d = self.dim;
        match &self.storage {
            Storage::Fp32(v) => out.copy_from_slice(&v[i * d..(i + 1) * d]),
            Storage::Fp16(v) => {
                for (o, h) in out.iter_mut().zip(&v[i * d..(i + 1) * d]) {
                    *o = h.to_f32();
                }
            }
            Storage::Packed {
                params,
                payload,
                row_bytes,
            } => numerics::dequantize_into(
                params[i],
                self.precision,
                &payload[i * row_bytes..(i + 1) * row_bytes],
                out,
            ),
        }
        Ok(())
    }

    /// Down-converts `x` into row `i`.
    pub fn write_row(
        &mut self,
        i: usize,
        x: &[f32],
        mode: RoundingMode,
        rng: &mut RngStream,
    ) -> Result<()> {
        self.check_index(i)?;
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let d = self.dim;
        match &mut self.storage {
            Storage::Fp32(v) => {
                if let Some((index, &value)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::NonFinite { index, value });
                }
                v[i * d..(i + 1) * d].copy_from_slice(x);
            }
            Storage::Fp16(v) => {
                let mut tmp = Vec::with_capacity(d);
                for (index, &value) in x.iter().enumerate() {
                    if !value.is_finite() {
                        return Err(Error::NonFinite { index, value });
                    }
                    tmp.push(numerics::to_fp16(value, mode, rng)?);
                }
                v[i * d..(i + 1) * d].copy_from_slice(&tmp);
            }
            Storage::Packed {
                params,
                payload,
                row_bytes,
            } => {
                let packed = numerics::quantize_row(x, self.precision, mode, rng)?;
                params[i] = packed.params;
                payload[i * *row_bytes..(i + 1) * *row_bytes].copy_from_slice(packed.payload());
            }
        }
        Ok(())
    }

    /// Row `i` as a [`PackedRow`], for integer precisions.
    pub fn packed_row(&self, i: usize) -> Result<PackedRow> {
        self.check_index(i)?;
        match &self.storage {
            Storage::Packed {
                params,
                payload,
                row_bytes,
            } => {
                let mut bytes = Vec::with_capacity(QuantParams::BYTES + row_bytes);
                bytes.extend_from_slice(&params[i].scale.to_le_bytes());
                bytes.extend_from_slice(&params[i].bias.to_le_bytes());
                bytes.extend_from_slice(&payload[i * row_bytes..(i + 1) * row_bytes]);
                PackedRow::from_bytes(&bytes, self.precision, self.dim)
            }
            _ => Err(Error::NotInteger(self.precision)),
        }
    }

    /// Serialized bytes per row: `bits·d/8` plus 8 header bytes for integer
    /// precisions.
    pub fn row_bytes(&self) -> usize {
        match self.precision {
            Precision::Fp32 => 4 * self.dim,
            Precision::Fp16 => 2 * self.dim,
            p => PackedRow::byte_len(p, self.dim),
        }
    }

    fn write_row_bytes(&self, i: usize, out: &mut Vec<u8>) {
        let d = self.dim;
        match &self.storage {
            Storage::Fp32(v) => v[i * d..(i + 1) * d]
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Storage::Fp16(v) => v[i * d..(i + 1) * d]
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Storage::Packed {
                params,
                payload,
                row_bytes,
            } => {
                out.extend_from_slice(&params[i].scale.to_le_bytes());
                out.extend_from_slice(&params[i].bias.to_le_bytes());
                out.extend_from_slice(&payload[i * row_bytes..(i + 1) * row_bytes]);
            }
        }
    }

    fn read_row_bytes(&mut self, i: usize, bytes: &[u8]) -> Result<()> {
        let d = self.dim;
        match &mut self.storage {
            Storage::Fp32(v) => {
                for (dst, chunk) in v[i * d..(i + 1) * d].iter_mut().zip(bytes.chunks_exact(4)) {
                    *dst = f32::from_le_bytes(chunk.try_into().unwrap());
                }
            }
            Storage::Fp16(v) => {
                for (dst, chunk) in v[i * d..(i + 1) * d].iter_mut().zip(bytes.chunks_exact(2)) {
                    *dst = f16::from_le_bytes(chunk.try_into().unwrap());
                }
            }
            Storage::Packed {
                params,
                payload,
                row_bytes,
            } => {
                let row = PackedRow::from_bytes(bytes, self.precision, d)?;
                params[i] = row.params;
                payload[i * *row_bytes..(i + 1) * *row_bytes].copy_from_slice(row.payload());
            }
        }
        Ok(())
    }
}

/// What `update` did with a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    /// Resident; the FP32 copy was overwritten.
    Hit,
    /// Installed into an empty way.
    Admitted,
    /// Installed over `victim`, which was rounded back into the table.
    Evicted { victim: usize },
    /// Lost the priority comparison and was rounded into the table.
    Bypassed,
    /// No cache configured; rounded into the table.
    Uncached,
}

impl UpdateOutcome {
    pub fn is_hit(self) -> bool {
        self == UpdateOutcome::Hit
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingStats {
    pub hits: u64,
    pub misses: u64,
    pub admissions: u64,
    pub evictions: u64,
    pub bypasses: u64,
}

impl EmbeddingStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct MixedPrecisionEmbedding {
    table: QuantizedTable,
    cache: Option<SetAssocCache>,
    rounding: RoundingMode,
    seed: u64,
    table_id: u64,
    iteration: u64,
    stats: EmbeddingStats,
}

impl MixedPrecisionEmbedding {
    pub fn new(
        table: QuantizedTable,
        cache: Option<CacheConfig>,
        rounding: RoundingMode,
        seed: u64,
        table_id: u64,
    ) -> Result<Self> {
        let cache = match cache {
            Some(cfg) => {
                if cfg.row_dim != table.dim {
                    return Err(Error::DimensionMismatch {
                        expected: table.dim,
                        got: cfg.row_dim,
                    });
                }
                Some(SetAssocCache::new(cfg, table.num_rows)?)
            }
            None => None,
        };
        Ok(Self {
            table,
            cache,
            rounding,
            seed,
            table_id,
            iteration: 0,
            stats: EmbeddingStats::default(),
        })
    }

    /// Builds an embedding whose table holds `rows` (row-major, `num_rows × dim`)
    /// rounded to `precision`.
    pub fn from_rows(
        rows: &[f32],
        dim: usize,
        precision: Precision,
        cache: Option<CacheConfig>,
        rounding: RoundingMode,
        seed: u64,
        table_id: u64,
    ) -> Result<Self> {
        if dim == 0 || !rows.len().is_multiple_of(dim) {
            return Err(Error::config(format!(
                "{} values do not form rows of dimension {dim}",
                rows.len()
            )));
        }
        let mut table = QuantizedTable::zeros(rows.len() / dim, dim, precision)?;
        for (i, r) in rows.chunks_exact(dim).enumerate() {
            let mut rng = RngStream::keyed(seed, table_id, i as u64, u64::MAX);
            table.write_row(i, r, rounding, &mut rng)?;
        }
        Self::new(table, cache, rounding, seed, table_id)
    }

    pub fn table(&self) -> &QuantizedTable {
        &self.table
    }

    pub fn cache(&self) -> Option<&SetAssocCache> {
        self.cache.as_ref()
    }

    pub fn num_rows(&self) -> usize {
        self.table.num_rows
    }

    pub fn dim(&self) -> usize {
        self.table.dim
    }

    pub fn precision(&self) -> Precision {
        self.table.precision
    }

    pub fn rounding(&self) -> RoundingMode {
        self.rounding
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Advances the iteration clock. LRU timestamps and rounding streams are
    /// keyed by it, so call once per mini-batch.
    pub fn step(&mut self) {
        self.iteration += 1;
    }

    pub fn stats(&self) -> EmbeddingStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = EmbeddingStats::default();
    }

    fn rng_for(&self, row: usize) -> RngStream {
        RngStream::keyed(self.seed, self.table_id, row as u64, self.iteration)
    }

    /// FP32 view of row `i`. Does not touch priorities.
    pub fn fetch_into(&self, i: usize, out: &mut [f32]) -> Result<()> {
        self.table.check_index(i)?;
        if let Some(cache) = &self.cache {
            if let Lookup::Hit(w) = cache.lookup(i) {
                if out.len() != self.table.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.table.dim,
                        got: out.len(),
                    });
                }
                out.copy_from_slice(cache.row(w));
                return Ok(());
            }
        }
        self.table.read_row(i, out)
    }

    pub fn fetch(&self, i: usize) -> Result<Vec<f32>> {
        let mut out = vec![0.0; self.table.dim];
        self.fetch_into(i, &mut out)?;
        Ok(out)
    }

    pub fn is_resident(&self, i: usize) -> bool {
        self.cache
            .as_ref()
            .is_some_and(|c| matches!(c.lookup(i), Lookup::Hit(_)))
    }

    /// Stores the fully updated FP32 row `x` for index `i`.
    pub fn update(&mut self, i: usize, x: &[f32]) -> Result<UpdateOutcome> {
        self.table.check_index(i)?;
        if x.len() != self.table.dim {
            return Err(Error::DimensionMismatch {
                expected: self.table.dim,
                got: x.len(),
            });
        }
        if let Some((index, &value)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }

        let now = self.iteration;
        let Some(cache) = self.cache.as_mut() else {
            let mut rng = self.rng_for(i);
            self.table.write_row(i, x, self.rounding, &mut rng)?;
            self.stats.misses += 1;
            return Ok(UpdateOutcome::Uncached);
        };

        let pv = cache.touch(i, now);
        if let Lookup::Hit(w) = cache.lookup(i) {
            cache.row_mut(w).copy_from_slice(x);
            self.stats.hits += 1;
            return Ok(UpdateOutcome::Hit);
        }
        self.stats.misses += 1;

        match cache.admit_or_bypass(i, x, pv) {
            Admission::Admitted { .. } => {
                self.stats.admissions += 1;
                Ok(UpdateOutcome::Admitted)
            }
            Admission::Evicted { victim, row, .. } => {
                let mut rng = self.rng_for(victim);
                self.table.write_row(victim, &row, self.rounding, &mut rng)?;
                self.stats.evictions += 1;
                Ok(UpdateOutcome::Evicted { victim })
            }
            Admission::Bypassed => {
                let mut rng = self.rng_for(i);
                self.table.write_row(i, x, self.rounding, &mut rng)?;
                self.stats.bypasses += 1;
                Ok(UpdateOutcome::Bypassed)
            }
        }
    }

    /// Rounds every resident back into the table and empties the cache.
    pub fn flush(&mut self) -> Result<()> {
        let Some(cache) = self.cache.as_mut() else {
            return Ok(());
        };
        let mut drained = cache.drain();
        drained.sort_unstable_by_key(|(i, _)| *i);
        for (i, row) in drained {
            let mut rng = self.rng_for(i);
            self.table.write_row(i, &row, self.rounding, &mut rng)?;
        }
        Ok(())
    }

    /// Flushes, then writes a snapshot (see `docs/formats.md`).
    pub fn write_snapshot<W: Write>(&mut self, mut w: W) -> Result<()> {
        self.flush()?;
        let t = &self.table;
        let mut buf = Vec::with_capacity(SNAPSHOT_HEADER_LEN + t.num_rows * t.row_bytes());
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        buf.push(t.precision.to_tag());
        buf.push(match self.rounding {
            RoundingMode::Nearest => 0,
            RoundingMode::Stochastic => 1,
        });
        let cfg = self.cache.as_ref().map(|c| *c.config());
        buf.push(match cfg.map(|c| c.policy) {
            None => 0,
            Some(ReplacementPolicy::Lru) => 1,
            Some(ReplacementPolicy::Lfu) => 2,
        });
        buf.push(match cfg.map(|c| c.hash) {
            None | Some(HashKind::Modulo) => 0,
            Some(HashKind::Multiplicative) => 1,
        });
        buf.extend_from_slice(&(t.num_rows as u64).to_le_bytes());
        buf.extend_from_slice(&(t.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(cfg.map_or(0, |c| c.num_sets) as u32).to_le_bytes());
        buf.extend_from_slice(&(cfg.map_or(0, |c| c.associativity) as u32).to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.table_id.to_le_bytes());
        buf.extend_from_slice(&self.iteration.to_le_bytes());
        debug_assert_eq!(buf.len(), SNAPSHOT_HEADER_LEN);
        for i in 0..t.num_rows {
            t.write_row_bytes(i, &mut buf);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Restores an embedding from a snapshot. The cache starts empty and LFU
    /// access counts start at zero.
    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; SNAPSHOT_HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|_| Error::Snapshot("truncated header".into()))?;
        if &header[0..8] != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(header[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let precision = Precision::from_tag(header[12])
            .ok_or_else(|| Error::Snapshot(format!("bad precision tag {}", header[12])))?;
        let rounding = match header[13] {
            0 => RoundingMode::Nearest,
            1 => RoundingMode::Stochastic,
            t => return Err(Error::Snapshot(format!("bad rounding tag {t}"))),
        };
        let policy = match header[14] {
            0 => None,
            1 => Some(ReplacementPolicy::Lru),
            2 => Some(ReplacementPolicy::Lfu),
            t => return Err(Error::Snapshot(format!("bad policy tag {t}"))),
        };
        let hash = match header[15] {
            0 => HashKind::Modulo,
            1 => HashKind::Multiplicative,
            t => return Err(Error::Snapshot(format!("bad hash tag {t}"))),
        };
        let num_rows = usize::try_from(u64_at(16))
            .map_err(|_| Error::Snapshot("row count overflows".into()))?;
        let dim = u32_at(24) as usize;
        let num_sets = u32_at(28) as usize;
        let assoc = u32_at(32) as usize;
        let seed = u64_at(40);
        let table_id = u64_at(48);
        let iteration = u64_at(56);

        let mut table = QuantizedTable::zeros(num_rows, dim, precision)
            .map_err(|e| Error::Snapshot(e.to_string()))?;
        let row_bytes = table.row_bytes();
        let mut row = vec![0u8; row_bytes];
        for i in 0..num_rows {
            r.read_exact(&mut row)
                .map_err(|_| Error::Snapshot(format!("truncated at row {i}")))?;
            table.read_row_bytes(i, &row)?;
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Snapshot("trailing bytes after last row".into()));
        }
        let cache = match policy {
            Some(policy) => Some(
                CacheConfig::new(num_sets, assoc, dim, policy, hash)
                    .map_err(|e| Error::Snapshot(e.to_string()))?,
            ),
            None => None,
        };
        let mut emb = Self::new(table, cache, rounding, seed, table_id)?;
        emb.iteration = iteration;
        Ok(emb)
    }
}

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"MPEMBSNP";
pub const SNAPSHOT_VERSION: u32 = 1;
pub const SNAPSHOT_HEADER_LEN: usize = 64;

/// Memory of a mixed-precision table relative to its FP32 original.
///
/// Per-row bits: the low-precision row (`bits·d`, plus 64 for the integer
/// `(scale, bias)` header), `32·d·ratio` for the cache payload, `32·ratio`
/// for cache tags, and a 32-bit access counter per table row under LFU.
/// A zero ratio means no cache and hence no counters.
pub fn compression_factor(
    precision: Precision,
    dim: usize,
    cache_ratio: f64,
    policy: ReplacementPolicy,
) -> Result<f64> {
    if dim == 0 {
        return Err(Error::config("dimension must be positive"));
    }
    if !(0.0..=1.0).contains(&cache_ratio) {
        return Err(Error::config(format!("cache ratio {cache_ratio} outside [0, 1]")));
    }
    let d = dim as f64;
    let fp32 = 32.0 * d;
    let header = if precision.is_integer() { 64.0 } else { 0.0 };
    let low = precision.bitwidth() as f64 * d + header;
    let cache = fp32 * cache_ratio;
    let tags = 32.0 * cache_ratio;
    let counters = if cache_ratio > 0.0 && policy == ReplacementPolicy::Lfu {
        32.0
    } else {
        0.0
    };
    Ok((low + cache + tags + counters) / fp32)
}

/// Relative accuracy loss in percent; negative when the low-precision model
/// scores higher.
pub fn accuracy_drop(acc_fp32: f64, acc_lowprec: f64) -> Result<f64> {
    if !(acc_fp32 > 0.0) {
        return Err(Error::NonPositiveReference(acc_fp32));
    }
    Ok((acc_fp32 - acc_lowprec) / acc_fp32 * 100.0)
}
