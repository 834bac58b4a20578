//! Token, FLOP and cached-parameter accounting.
//!
//! The cached-scalar counters quantify what each method must keep around
//! between queries: the concatenation baseline retains the per-token
//! key/value cache of the demonstration prefix (`2·M·D·L` scalars), while
//! the injection pipeline stores one context vector plus its coefficients
//! (`2·D·L + 4·L` scalars) regardless of how many demonstration tokens went
//! into them.

use crate::model::ModelConfig;

/// Context vector (`2·D·L`) plus linear coefficients (`4·L`).
pub fn i2cl_cached_scalars(d_model: usize, n_layers: usize) -> u64 {
    (2 * d_model * n_layers + 4 * n_layers) as u64
}

/// Key/value cache for `m_tokens` context tokens across all layers.
pub fn icl_kv_cached_scalars(m_tokens: usize, d_model: usize, n_layers: usize) -> u64 {
    (2 * m_tokens * d_model * n_layers) as u64
}

/// Matrix-multiply FLOPs of one forward pass over `t` tokens (2 FLOPs per
/// multiply-accumulate; normalization and activation costs are omitted).
pub fn forward_flops(config: &ModelConfig, t: usize) -> u64 {
    let (d, dm, v) = (config.d_model as u64, config.d_mlp as u64, config.vocab_size as u64);
    let t = t as u64;
    let qkv_and_out = 4 * t * d * d;
    let attention = 2 * t * t * d;
    let mlp = 2 * t * d * dm;
    let per_layer = 2 * (qkv_and_out + attention + mlp);
    config.n_layers as u64 * per_layer + 2 * t * d * v
}
