//! Independent reference models shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use mpemb::{HashKind, ReplacementPolicy, UpdateOutcome};

/// Naive set-associative cache. Each set is a plain vector of ways; LRU stamps
/// are stored per resident row and LFU counts per table row in hash maps.
pub struct RefCache {
    pub num_sets: usize,
    pub assoc: usize,
    pub policy: ReplacementPolicy,
    pub hash: HashKind,
    pub ways: Vec<Vec<Option<(usize, Vec<f32>)>>>,
    pub stamp: HashMap<usize, u64>,
    pub count: HashMap<usize, u64>,
}

impl RefCache {
    pub fn new(num_sets: usize, assoc: usize, policy: ReplacementPolicy, hash: HashKind) -> Self {
        Self {
            num_sets,
            assoc,
            policy,
            hash,
            ways: vec![vec![None; assoc]; num_sets],
            stamp: HashMap::new(),
            count: HashMap::new(),
        }
    }

    pub fn set(&self, i: usize) -> usize {
        match self.hash {
            HashKind::Modulo => i % self.num_sets,
            HashKind::Multiplicative => {
                let h = (i as u128 * 0x9E37_79B9_7F4A_7C15u128) as u64;
                ((h >> 32) % self.num_sets as u64) as usize
            }
        }
    }

    fn priority(&self, row: usize) -> u64 {
        match self.policy {
            ReplacementPolicy::Lru => self.stamp[&row],
            ReplacementPolicy::Lfu => self.count[&row],
        }
    }

    /// Priority of each way in set-major order, `None` when empty.
    pub fn priorities(&self) -> Vec<Option<u64>> {
        self.ways
            .iter()
            .flatten()
            .map(|w| w.as_ref().map(|(r, _)| self.priority(*r)))
            .collect()
    }

    pub fn tags(&self) -> Vec<Option<usize>> {
        self.ways.iter().flatten().map(|w| w.as_ref().map(|(r, _)| *r)).collect()
    }

    pub fn resident(&self, i: usize) -> Option<&Vec<f32>> {
        self.ways[self.set(i)]
            .iter()
            .flatten()
            .find(|(r, _)| *r == i)
            .map(|(_, v)| v)
    }

    /// Returns the outcome plus the evicted `(victim, row)` if any.
    pub fn update(&mut self, i: usize, x: &[f32], now: u64) -> (UpdateOutcome, Option<(usize, Vec<f32>)>) {
        if self.policy == ReplacementPolicy::Lfu {
            let c = self.count.entry(i).or_insert(0);
            *c = (*c + 1).min(u32::MAX as u64);
        }
        let s = self.set(i);
        if let Some(slot) = self.ways[s].iter_mut().flatten().find(|(r, _)| *r == i) {
            slot.1 = x.to_vec();
            if self.policy == ReplacementPolicy::Lru {
                self.stamp.insert(i, now);
            }
            return (UpdateOutcome::Hit, None);
        }
        let pv = match self.policy {
            ReplacementPolicy::Lru => now,
            ReplacementPolicy::Lfu => self.count[&i],
        };
        if let Some(w) = self.ways[s].iter().position(Option::is_none) {
            self.ways[s][w] = Some((i, x.to_vec()));
            self.stamp.insert(i, now);
            return (UpdateOutcome::Admitted, None);
        }
        let mut victim_way = 0;
        for w in 1..self.assoc {
            let p = self.priority(self.ways[s][w].as_ref().unwrap().0);
            let best = self.priority(self.ways[s][victim_way].as_ref().unwrap().0);
            if p < best {
                victim_way = w;
            }
        }
        let always = self.assoc == 1 && self.policy == ReplacementPolicy::Lru;
        let victim_pv = self.priority(self.ways[s][victim_way].as_ref().unwrap().0);
        if !always && pv <= victim_pv {
            return (UpdateOutcome::Bypassed, None);
        }
        let old = self.ways[s][victim_way].replace((i, x.to_vec())).unwrap();
        self.stamp.remove(&old.0);
        self.stamp.insert(i, now);
        (UpdateOutcome::Evicted { victim: old.0 }, Some(old))
    }
}

/// Map-accumulation oracle for gradient dedup.
pub fn dedup_oracle(entries: &[(usize, Vec<f32>)]) -> BTreeMap<usize, Vec<f32>> {
    let mut m: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
    for (i, g) in entries {
        match m.get_mut(i) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                m.insert(*i, g.clone());
            }
        }
    }
    m
}

/// Toy-model log-loss evaluated entirely in f64, in the form
/// `softplus(-z)` for positives and `softplus(z)` for negatives.
pub fn toy_loss_f64(rows: &[Vec<f64>], label: u8) -> f64 {
    let d = rows[0].len() as f64;
    let mut z = 0.0;
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            z += rows[a].iter().zip(&rows[b]).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    z /= d.sqrt();
    let t = if label == 1 { -z } else { z };
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Central finite differences of [`toy_loss_f64`] with respect to every
/// element of every row.
pub fn toy_grads_fd(rows: &[Vec<f32>], label: u8, h: f64) -> Vec<Vec<f64>> {
    let base: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let mut out = vec![vec![0.0; rows[0].len()]; rows.len()];
    for a in 0..rows.len() {
        for j in 0..rows[a].len() {
            let mut p = base.clone();
            p[a][j] += h;
            let fp = toy_loss_f64(&p, label);
            p[a][j] -= 2.0 * h;
            let fm = toy_loss_f64(&p, label);
            out[a][j] = (fp - fm) / (2.0 * h);
        }
    }
    out
}

/// Largest element-wise relative error; denominators are floored at `floor`.
pub fn max_rel_err(analytic: &[Vec<f32>], numeric: &[Vec<f64>], floor: f64) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| {
            let a = a as f64;
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Binomial standard deviation of the mean of `n` stochastic roundings of `x`
/// onto the bracket `[lo, hi]`.
pub fn sr_sigma(x: f64, lo: f64, hi: f64, n: usize) -> f64 {
    let p = (x - lo) / (hi - lo);
    (hi - lo) * (p * (1.0 - p) / n as f64).sqrt()
}
