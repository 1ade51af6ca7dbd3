//! Sparse embedding optimizers.
//!
//! Gradients for one mini-batch are de-duplicated first: entries are sorted
//! by row index and every contribution to the same row is summed, so each row
//! goes through `fetch`/`update` exactly once per batch. Updates are applied
//! in FP32 on the fetched row and handed back to the embedding.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::table::{MixedPrecisionEmbedding, UpdateOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBatch {
    pub entries: Vec<(usize, Vec<f32>)>,
    pub learning_rate: f32,
}

impl GradientBatch {
    pub fn new(learning_rate: f32) -> Self {
        Self {
            entries: Vec::new(),
            learning_rate,
        }
    }

    pub fn push(&mut self, row: usize, grad: Vec<f32>) {
        self.entries.push((row, grad));
    }

    fn check(&self, dim: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (_, g) in &self.entries {
            if g.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: g.len(),
                });
            }
            if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite { index, value });
            }
        }
        Ok(())
    }

    fn is_deduped(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].0 < w[1].0)
    }
}

/// Merges entries that share a row index. Contributions are summed in their
/// original order; the result is sorted by strictly ascending index.
pub fn dedup(batch: &GradientBatch) -> GradientBatch {
    let mut merged: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
    for (i, g) in &batch.entries {
        match merged.get_mut(i) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                merged.insert(*i, g.clone());
            }
        }
    }
    GradientBatch {
        entries: merged.into_iter().collect(),
        learning_rate: batch.learning_rate,
    }
}

fn prepare(emb: &MixedPrecisionEmbedding, batch: &GradientBatch) -> Result<()> {
    batch.check(emb.dim())?;
    if !batch.is_deduped() {
        return Err(Error::config("gradient batch must be de-duplicated first"));
    }
    Ok(())
}

/// `x ← x − η·g` for every row of a de-duplicated batch, in index order.
pub fn apply_sgd(
    emb: &mut MixedPrecisionEmbedding,
    batch: &GradientBatch,
) -> Result<Vec<UpdateOutcome>> {
    prepare(emb, batch)?;
    let lr = batch.learning_rate;
    let mut x = vec![0.0f32; emb.dim()];
    let mut out = Vec::with_capacity(batch.entries.len());
    for (i, g) in &batch.entries {
        emb.fetch_into(*i, &mut x)?;
        x.iter_mut().zip(g).for_each(|(v, gj)| *v -= lr * gj);
        out.push(emb.update(*i, &x)?);
    }
    Ok(out)
}

/// Row-wise AdaGrad: one scalar accumulator per row holding the running sum
/// of the row's mean squared gradient.
#[derive(Debug, Clone)]
pub struct RowWiseAdagrad {
    pub momentum: Vec<f32>,
    pub epsilon: f32,
}

impl RowWiseAdagrad {
    pub const DEFAULT_EPSILON: f32 = 1e-8;

    pub fn new(num_rows: usize) -> Self {
        Self::with_epsilon(num_rows, Self::DEFAULT_EPSILON)
    }

    pub fn with_epsilon(num_rows: usize, epsilon: f32) -> Self {
        Self {
            momentum: vec![0.0; num_rows],
            epsilon,
        }
    }
}

/// `m_i ← m_i + mean(g²)`, then `x ← x − η·g / (√m_i + ε)`.
pub fn apply_rowwise_adagrad(
    emb: &mut MixedPrecisionEmbedding,
    batch: &GradientBatch,
    state: &mut RowWiseAdagrad,
) -> Result<Vec<UpdateOutcome>> {
    prepare(emb, batch)?;
    if state.momentum.len() != emb.num_rows() {
        return Err(Error::DimensionMismatch {
            expected: emb.num_rows(),
            got: state.momentum.len(),
        });
    }
    let lr = batch.learning_rate;
    let d = emb.dim() as f32;
    let mut x = vec![0.0f32; emb.dim()];
    let mut out = Vec::with_capacity(batch.entries.len());
    for (i, g) in &batch.entries {
        let m = &mut state.momentum[*i];
        *m += g.iter().map(|v| v * v).sum::<f32>() / d;
        let denom = m.sqrt() + state.epsilon;
        emb.fetch_into(*i, &mut x)?;
        if denom > 0.0 {
            x.iter_mut().zip(g).for_each(|(v, gj)| *v -= lr * gj / denom);
        }
        out.push(emb.update(*i, &x)?);
    }
    Ok(out)
}
