//! Mixed-precision embedding tables.
//!
//! Rows live in a low-precision table (FP16 or row-wise INT8/INT4/INT2 with a
//! per-row FP32 scale and bias). A small FP32 set-associative cache keeps the
//! highest-priority rows in full precision under an LRU or LFU policy. Updated
//! rows that lose the priority comparison bypass the cache and are rounded
//! straight back into the table, by nearest or stochastic rounding.
//!
//! Around that core the crate carries the pieces needed to study the design:
//! a sparse optimizer with per-batch gradient de-duplication, Zipf trace
//! generation and trace-driven cache simulation, and a small teacher-student
//! recommendation task for measuring accuracy drop.

pub mod bitpack;
pub mod cache;
pub mod cli;
pub mod error;
pub mod numerics;
pub mod optim;
pub mod rng;
pub mod table;
pub mod toy;
pub mod trace;

pub use cache::{Admission, CacheConfig, HashKind, Lookup, ReplacementPolicy, SetAssocCache};
pub use error::{Error, Result};
pub use numerics::{
    convert_fp16, dequantize_row, fake_quantize_row, quantize_row, stochastic_round_unit,
    PackedRow, Precision, QuantParams, RoundingMode,
};
pub use optim::{apply_rowwise_adagrad, apply_sgd, dedup, GradientBatch, RowWiseAdagrad};
pub use rng::RngStream;
pub use table::{
    accuracy_drop, compression_factor, EmbeddingStats, MixedPrecisionEmbedding, QuantizedTable,
    UpdateOutcome,
};
pub use trace::{gen_phased_trace, gen_zipf_trace, replay, AccessTrace, ReplayConfig, SimReport};
