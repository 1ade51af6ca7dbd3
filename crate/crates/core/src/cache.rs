//! The full-precision set-associative row cache.
//!
//! `n` sets of `α` ways each hold FP32 copies of embedding rows. Row `i` may
//! only live in set `h(i)`. Each row carries a priority value: an access count
//! (LFU, one saturating 32-bit counter per table row) or the timestamp of its
//! last access (LRU, one stamp per cached way). An incoming row takes a way
//! from a full set only if its priority is strictly higher than the lowest
//! resident priority. A direct-mapped LRU cache skips the comparison and
//! always evicts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EMPTY: u32 = u32::MAX;
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Associativities accepted by [`CacheConfig`].
pub const ASSOCIATIVITIES: [usize; 6] = [1, 2, 4, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplacementPolicy {
    Lru,
    Lfu,
}

impl ReplacementPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            ReplacementPolicy::Lru => "lru",
            ReplacementPolicy::Lfu => "lfu",
        }
    }
}

impl fmt::Display for ReplacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReplacementPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lru" => Ok(ReplacementPolicy::Lru),
            "lfu" => Ok(ReplacementPolicy::Lfu),
            other => Err(Error::config(format!("unknown replacement policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HashKind {
    /// `i mod n`.
    #[default]
    Modulo,
    /// Fibonacci hashing: high half of `i * 2^64/φ`, then `mod n`.
    Multiplicative,
}

impl HashKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HashKind::Modulo => "modulo",
            HashKind::Multiplicative => "multiplicative",
        }
    }
}

impl FromStr for HashKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "modulo" => Ok(HashKind::Modulo),
            "multiplicative" => Ok(HashKind::Multiplicative),
            other => Err(Error::config(format!("unknown hash '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub num_sets: usize,
    pub associativity: usize,
    pub row_dim: usize,
    pub policy: ReplacementPolicy,
    #[serde(default)]
    pub hash: HashKind,
}

impl CacheConfig {
    pub fn new(
        num_sets: usize,
        associativity: usize,
        row_dim: usize,
        policy: ReplacementPolicy,
        hash: HashKind,
    ) -> Result<Self> {
        let cfg = Self {
            num_sets,
            associativity,
            row_dim,
            policy,
            hash,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sizes a cache to hold `ratio * num_rows` rows, rounded down to a whole
    /// number of sets. Returns `None` when that is less than one set.
    pub fn for_ratio(
        num_rows: usize,
        ratio: f64,
        associativity: usize,
        row_dim: usize,
        policy: ReplacementPolicy,
        hash: HashKind,
    ) -> Result<Option<Self>> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::config(format!("cache ratio {ratio} outside [0, 1]")));
        }
        let rows = (ratio * num_rows as f64).round() as usize;
        let num_sets = rows / associativity.max(1);
        if num_sets == 0 {
            return Ok(None);
        }
        Self::new(num_sets, associativity, row_dim, policy, hash).map(Some)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sets == 0 {
            return Err(Error::config("cache needs at least one set"));
        }
        if !ASSOCIATIVITIES.contains(&self.associativity) {
            return Err(Error::config(format!(
                "associativity {} not in {:?}",
                self.associativity, ASSOCIATIVITIES
            )));
        }
        if self.row_dim == 0 {
            return Err(Error::config("cache row dimension must be positive"));
        }
        Ok(())
    }

    pub fn capacity_rows(&self) -> usize {
        self.num_sets * self.associativity
    }

    /// FP32 payload size, `4·α·n·d` bytes.
    pub fn payload_bytes(&self) -> usize {
        4 * self.associativity * self.num_sets * self.row_dim
    }

    fn direct_mapped_lru(&self) -> bool {
        self.associativity == 1 && self.policy == ReplacementPolicy::Lru
    }
}

#[inline]
pub fn hash_index(i: usize, cfg: &CacheConfig) -> usize {
    match cfg.hash {
        HashKind::Modulo => i % cfg.num_sets,
        HashKind::Multiplicative => {
            (((i as u64).wrapping_mul(GOLDEN) >> 32) % cfg.num_sets as u64) as usize
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Hit(usize),
    Miss,
}

/// Result of offering a non-resident row to its set.
#[derive(Debug, Clone, PartialEq)]
pub enum Admission {
    /// Installed into an empty way.
    Admitted { way: usize },
    /// Installed over the lowest-priority resident, which is handed back.
    Evicted {
        way: usize,
        victim: usize,
        row: Vec<f32>,
    },
    /// Lost the priority comparison; the cache is unchanged.
    Bypassed,
}

#[derive(Debug, Clone)]
pub struct SetAssocCache {
    cfg: CacheConfig,
    num_rows: usize,
    tags: Vec<u32>,
    rows: Vec<f32>,
    stamps: Vec<u64>,
    counters: Vec<u32>,
    residents: usize,
}

impl SetAssocCache {
    /// An empty cache for a table of `num_rows` rows. LFU keeps one counter
    /// per table row, so its memory grows with the table.
    pub fn new(cfg: CacheConfig, num_rows: usize) -> Result<Self> {
        cfg.validate()?;
        if num_rows > EMPTY as usize {
            return Err(Error::config(format!("{num_rows} rows exceed 32-bit cache tags")));
        }
        let ways = cfg.capacity_rows();
        let (stamps, counters) = match cfg.policy {
            ReplacementPolicy::Lru => (vec![0; ways], Vec::new()),
            ReplacementPolicy::Lfu => (Vec::new(), vec![0; num_rows]),
        };
        Ok(Self {
            cfg,
            num_rows,
            tags: vec![EMPTY; ways],
            rows: vec![0.0; ways * cfg.row_dim],
            stamps,
            counters,
            residents: 0,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn len(&self) -> usize {
        self.residents
    }

    pub fn is_empty(&self) -> bool {
        self.residents == 0
    }

    #[inline]
    fn ways_of(&self, set: usize) -> std::ops::Range<usize> {
        let a = self.cfg.associativity;
        set * a..set * a + a
    }

    pub fn set_of(&self, i: usize) -> usize {
        hash_index(i, &self.cfg)
    }

    /// Read-only probe.
    #[inline]
    pub fn lookup(&self, i: usize) -> Lookup {
        let tag = i as u32;
        let set = self.set_of(i);
        self.ways_of(set)
            .find(|&w| self.tags[w] == tag)
            .map_or(Lookup::Miss, Lookup::Hit)
    }

    /// Records an access to row `i` at time `now` and returns its priority.
    /// LFU bumps the row's counter; LRU stamps the row's way if resident.
    pub fn touch(&mut self, i: usize, now: u64) -> u64 {
        match self.cfg.policy {
            ReplacementPolicy::Lfu => {
                let c = &mut self.counters[i];
                *c = c.saturating_add(1);
                *c as u64
            }
            ReplacementPolicy::Lru => {
                if let Lookup::Hit(w) = self.lookup(i) {
                    self.stamps[w] = now;
                }
                now
            }
        }
    }

    /// Access count of row `i` under LFU.
    pub fn access_count(&self, i: usize) -> Option<u32> {
        self.counters.get(i).copied()
    }

    /// Priority of whatever occupies `way`, or `None` if it is empty.
    pub fn way_priority(&self, way: usize) -> Option<u64> {
        let tag = self.tags[way];
        if tag == EMPTY {
            return None;
        }
        Some(match self.cfg.policy {
            ReplacementPolicy::Lfu => self.counters[tag as usize] as u64,
            ReplacementPolicy::Lru => self.stamps[way],
        })
    }

    pub fn tag(&self, way: usize) -> Option<usize> {
        let t = self.tags[way];
        (t != EMPTY).then_some(t as usize)
    }

    pub fn row(&self, way: usize) -> &[f32] {
        let d = self.cfg.row_dim;
        &self.rows[way * d..(way + 1) * d]
    }

    pub fn row_mut(&mut self, way: usize) -> &mut [f32] {
        let d = self.cfg.row_dim;
        &mut self.rows[way * d..(way + 1) * d]
    }

    fn install(&mut self, way: usize, i: usize, row: &[f32], pv: u64) {
        self.tags[way] = i as u32;
        self.row_mut(way).copy_from_slice(row);
        if self.cfg.policy == ReplacementPolicy::Lru {
            self.stamps[way] = pv;
        }
    }

    /// Offers non-resident row `i` with its already-updated priority `pv`.
    ///
    /// An empty way is always filled first. Otherwise the resident with the
    /// lowest priority (lowest way index on ties) is the candidate victim, and
    /// the incoming row bypasses unless `pv` is strictly greater.
    pub fn admit_or_bypass(&mut self, i: usize, row: &[f32], pv: u64) -> Admission {
        debug_assert_eq!(row.len(), self.cfg.row_dim);
        debug_assert_eq!(self.lookup(i), Lookup::Miss);
        let set = self.set_of(i);
        let ways = self.ways_of(set);

        if let Some(way) = ways.clone().find(|&w| self.tags[w] == EMPTY) {
            self.install(way, i, row, pv);
            self.residents += 1;
            return Admission::Admitted { way };
        }

        let (way, victim_pv) = ways
            .map(|w| (w, self.way_priority(w).unwrap()))
            .fold(None, |best: Option<(usize, u64)>, (w, p)| match best {
                Some((_, bp)) if bp <= p => best,
                _ => Some((w, p)),
            })
            .unwrap();

        if !self.cfg.direct_mapped_lru() && pv <= victim_pv {
            return Admission::Bypassed;
        }
        let victim = self.tags[way] as usize;
        let old = self.row(way).to_vec();
        self.install(way, i, row, pv);
        Admission::Evicted {
            way,
            victim,
            row: old,
        }
    }

    /// Resident `(row index, way)` pairs in way order.
    pub fn residents(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != EMPTY)
            .map(|(w, &t)| (t as usize, w))
    }

    /// Empties every way and returns the evicted `(row index, row)` pairs.
    /// LFU access counts survive; they belong to the table rows.
    pub fn drain(&mut self) -> Vec<(usize, Vec<f32>)> {
        let out: Vec<_> = self
            .residents()
            .map(|(i, w)| (i, self.row(w).to_vec()))
            .collect();
        self.tags.fill(EMPTY);
        self.stamps.fill(0);
        self.residents = 0;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, a: usize, policy: ReplacementPolicy) -> CacheConfig {
        CacheConfig::new(n, a, 2, policy, HashKind::Modulo).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(CacheConfig::new(4, 3, 2, ReplacementPolicy::Lfu, HashKind::Modulo).is_err());
        assert!(CacheConfig::new(4, 64, 2, ReplacementPolicy::Lfu, HashKind::Modulo).is_err());
        assert!(CacheConfig::new(0, 1, 2, ReplacementPolicy::Lfu, HashKind::Modulo).is_err());
        assert!(CacheConfig::new(4, 1, 0, ReplacementPolicy::Lfu, HashKind::Modulo).is_err());
        let c = cfg(8, 4, ReplacementPolicy::Lru);
        assert_eq!(c.capacity_rows(), 32);
        assert_eq!(c.payload_bytes(), 4 * 4 * 8 * 2);
    }

    #[test]
    fn for_ratio_sizing() {
        let c = CacheConfig::for_ratio(1000, 0.1, 32, 4, ReplacementPolicy::Lfu, HashKind::Modulo)
            .unwrap()
            .unwrap();
        assert_eq!(c.num_sets, 3);
        assert!(CacheConfig::for_ratio(1000, 0.0, 1, 4, ReplacementPolicy::Lfu, HashKind::Modulo)
            .unwrap()
            .is_none());
        assert!(CacheConfig::for_ratio(10, 1.5, 1, 4, ReplacementPolicy::Lfu, HashKind::Modulo).is_err());
    }

    #[test]
    fn hash_examples() {
        let c = cfg(2, 1, ReplacementPolicy::Lru);
        assert_eq!(hash_index(5, &c), 1);
        assert_eq!(hash_index(0, &c), 0);
        let m = CacheConfig { hash: HashKind::Multiplicative, ..cfg(7, 1, ReplacementPolicy::Lru) };
        for i in 0..1000 {
            assert!(hash_index(i, &m) < 7);
        }
    }

    #[test]
    fn multiplicative_hash_balance() {
        use rand::{Rng, SeedableRng};
        let c = CacheConfig {
            hash: HashKind::Multiplicative,
            ..cfg(1024, 1, ReplacementPolicy::Lru)
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut occupancy = vec![0usize; 1024];
        let draws = 1_000_000;
        for _ in 0..draws {
            occupancy[hash_index(rng.random_range(0..1_000_000), &c)] += 1;
        }
        let mean = draws as f64 / 1024.0;
        for &o in &occupancy {
            assert!((o as f64 - mean).abs() <= 0.2 * mean, "set load {o} vs mean {mean}");
        }
    }

    #[test]
    fn empty_cache_misses_and_readmit_hits() {
        let mut c = SetAssocCache::new(cfg(2, 2, ReplacementPolicy::Lfu), 16).unwrap();
        assert_eq!(c.lookup(3), Lookup::Miss);
        let pv = c.touch(3, 0);
        assert_eq!(c.admit_or_bypass(3, &[1.0, 2.0], pv), Admission::Admitted { way: 2 });
        assert_eq!(c.lookup(3), Lookup::Hit(2));
        assert_eq!(c.row(2), &[1.0, 2.0]);
    }

    #[test]
    fn direct_mapped_conflict() {
        let mut c = SetAssocCache::new(cfg(2, 1, ReplacementPolicy::Lru), 4).unwrap();
        let pv = c.touch(0, 1);
        c.admit_or_bypass(0, &[0.0, 0.0], pv);
        let pv = c.touch(2, 2);
        let out = c.admit_or_bypass(2, &[2.0, 2.0], pv);
        assert_eq!(
            out,
            Admission::Evicted { way: 0, victim: 0, row: vec![0.0, 0.0] }
        );
        assert_eq!(c.lookup(0), Lookup::Miss);
        assert_eq!(c.lookup(2), Lookup::Hit(0));
    }

    #[test]
    fn direct_mapped_lru_evicts_even_on_stale_stamp() {
        let mut c = SetAssocCache::new(cfg(1, 1, ReplacementPolicy::Lru), 4).unwrap();
        c.admit_or_bypass(0, &[0.0, 0.0], 10);
        // An older timestamp would lose a comparison; direct-mapped LRU has none.
        assert!(matches!(c.admit_or_bypass(1, &[1.0, 1.0], 3), Admission::Evicted { victim: 0, .. }));
    }

    #[test]
    fn direct_mapped_lfu_bypass() {
        let mut c = SetAssocCache::new(cfg(1, 1, ReplacementPolicy::Lfu), 4).unwrap();
        for _ in 0..5 {
            c.touch(0, 0);
        }
        c.admit_or_bypass(0, &[0.0, 0.0], 5);
        let pv = c.touch(1, 0);
        assert_eq!(pv, 1);
        assert_eq!(c.admit_or_bypass(1, &[1.0, 1.0], pv), Admission::Bypassed);
        assert_eq!(c.lookup(0), Lookup::Hit(0));
    }

    #[test]
    fn lfu_tie_bypasses() {
        let mut c = SetAssocCache::new(cfg(1, 1, ReplacementPolicy::Lfu), 4).unwrap();
        c.touch(0, 0);
        c.admit_or_bypass(0, &[0.0, 0.0], 1);
        let pv = c.touch(1, 0);
        assert_eq!(c.admit_or_bypass(1, &[1.0, 1.0], pv), Admission::Bypassed);
    }

    #[test]
    fn two_way_lfu_evicts_the_minimum() {
        let mut c = SetAssocCache::new(cfg(1, 2, ReplacementPolicy::Lfu), 8).unwrap();
        for _ in 0..3 {
            c.touch(0, 0);
        }
        for _ in 0..7 {
            c.touch(1, 0);
        }
        c.admit_or_bypass(0, &[0.0, 0.0], 3);
        c.admit_or_bypass(1, &[1.0, 1.0], 7);
        for _ in 0..4 {
            c.touch(2, 0);
        }
        let out = c.admit_or_bypass(2, &[2.0, 2.0], 4);
        assert_eq!(out, Admission::Evicted { way: 0, victim: 0, row: vec![0.0, 0.0] });
    }

    #[test]
    fn argmin_ties_take_lowest_way() {
        let mut c = SetAssocCache::new(cfg(1, 4, ReplacementPolicy::Lru), 8).unwrap();
        for i in 0..4 {
            c.admit_or_bypass(i, &[i as f32; 2], 5);
        }
        assert!(matches!(c.admit_or_bypass(7, &[7.0; 2], 6), Admission::Evicted { way: 0, victim: 0, .. }));
    }

    #[test]
    fn touch_priorities() {
        let mut lfu = SetAssocCache::new(cfg(1, 1, ReplacementPolicy::Lfu), 4).unwrap();
        assert_eq!(lfu.touch(2, 0), 1);
        for k in 2..=6 {
            assert_eq!(lfu.touch(2, 0), k);
        }
        let mut lru = SetAssocCache::new(cfg(1, 2, ReplacementPolicy::Lru), 4).unwrap();
        let pv = lru.touch(1, 3);
        lru.admit_or_bypass(1, &[0.0; 2], pv);
        assert_eq!(lru.touch(1, 9), 9);
        assert_eq!(lru.way_priority(0), Some(9));
    }

    #[test]
    fn lfu_counter_saturates() {
        let mut c = SetAssocCache::new(cfg(1, 1, ReplacementPolicy::Lfu), 1).unwrap();
        c.counters[0] = u32::MAX - 1;
        assert_eq!(c.touch(0, 0), u32::MAX as u64);
        assert_eq!(c.touch(0, 0), u32::MAX as u64);
    }

    #[test]
    fn drain_empties_but_keeps_counts() {
        let mut c = SetAssocCache::new(cfg(2, 2, ReplacementPolicy::Lfu), 8).unwrap();
        for i in 0..3 {
            let pv = c.touch(i, 0);
            c.admit_or_bypass(i, &[i as f32; 2], pv);
        }
        let mut drained = c.drain();
        drained.sort_by_key(|(i, _)| *i);
        assert_eq!(drained.len(), 3);
        assert_eq!(drained[2], (2, vec![2.0, 2.0]));
        assert!(c.is_empty());
        assert_eq!(c.lookup(1), Lookup::Miss);
        assert_eq!(c.access_count(1), Some(1));
    }
}
