//! Decoder-only transformer: configuration, weights, deterministic
//! initialization, forward pass and meta-pretraining.
//!
//! The residual stream decomposes as `r_l = r_{l-1} + a_l + m_l` with
//! pre-norm blocks, so the MHA and MLP outputs are clean additive writes —
//! the property the instrumentation layer relies on.

mod forward;
mod io;
mod pretrain;
mod tokenizer;

pub use forward::{forward, forward_on_tape, CoefBinding, CoefIds, ForwardOutput, ForwardRun, TapeForward};
pub use io::{load_weights, load_weights_expecting, save_weights, weights_hash};
pub use pretrain::{meta_pretrain, LossRow, PretrainOptions};
pub use tokenizer::Tokenizer;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::rng::{stream_rng, STREAM_WEIGHT_INIT};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Convention: `d_mlp = 4·d_model`.
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, vocab_size: usize, max_seq: usize, seed: u64) -> Self {
        Self { n_layers, d_model, n_heads, d_mlp: 4 * d_model, vocab_size, max_seq, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_layers, self.d_model, self.n_heads, self.d_mlp, self.vocab_size, self.max_seq];
        if dims.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidConfig("all model dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1: NormParams,
    pub attn: AttnWeights,
    pub ln2: NormParams,
    pub mlp: MlpWeights,
}

/// Model weights; immutable during inference, training mutates a private
/// copy. Array order is fixed and shared by the file format, the weight
/// hash and the optimizer (see [`ModelConfig`] and `expected_shapes`).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: NormParams,
    pub unembed: Tensor,
}

/// `(name, shape)` for every array, in serialization order.
pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, dm) = (config.d_model, config.d_mlp);
    let mut out = vec![
        ("tok_emb".to_string(), vec![config.vocab_size, d]),
        ("pos_emb".to_string(), vec![config.max_seq, d]),
    ];
    for l in 1..=config.n_layers {
        let p = |name: &str| format!("layer{l}.{name}");
        out.push((p("ln1.gain"), vec![d]));
        out.push((p("ln1.bias"), vec![d]));
        out.push((p("attn.wq"), vec![d, d]));
        out.push((p("attn.bq"), vec![d]));
        out.push((p("attn.wk"), vec![d, d]));
        out.push((p("attn.bk"), vec![d]));
        out.push((p("attn.wv"), vec![d, d]));
        out.push((p("attn.bv"), vec![d]));
        out.push((p("attn.wo"), vec![d, d]));
        out.push((p("attn.bo"), vec![d]));
        out.push((p("ln2.gain"), vec![d]));
        out.push((p("ln2.bias"), vec![d]));
        out.push((p("mlp.w_up"), vec![d, dm]));
        out.push((p("mlp.b_up"), vec![dm]));
        out.push((p("mlp.w_down"), vec![dm, d]));
        out.push((p("mlp.b_down"), vec![d]));
    }
    out.push(("final_norm.gain".to_string(), vec![d]));
    out.push(("final_norm.bias".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![d, config.vocab_size]));
    out
}

impl Weights {
    /// Visit every array in serialization order.
    pub fn for_each_array<'a>(&'a self, mut f: impl FnMut(&str, &'a Tensor)) {
        f("tok_emb", &self.tok_emb);
        f("pos_emb", &self.pos_emb);
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            f(&format!("layer{l}.ln1.gain"), &layer.ln1.gain);
            f(&format!("layer{l}.ln1.bias"), &layer.ln1.bias);
            f(&format!("layer{l}.attn.wq"), &layer.attn.wq);
            f(&format!("layer{l}.attn.bq"), &layer.attn.bq);
            f(&format!("layer{l}.attn.wk"), &layer.attn.wk);
            f(&format!("layer{l}.attn.bk"), &layer.attn.bk);
            f(&format!("layer{l}.attn.wv"), &layer.attn.wv);
            f(&format!("layer{l}.attn.bv"), &layer.attn.bv);
            f(&format!("layer{l}.attn.wo"), &layer.attn.wo);
            f(&format!("layer{l}.attn.bo"), &layer.attn.bo);
            f(&format!("layer{l}.ln2.gain"), &layer.ln2.gain);
            f(&format!("layer{l}.ln2.bias"), &layer.ln2.bias);
            f(&format!("layer{l}.mlp.w_up"), &layer.mlp.w_up);
            f(&format!("layer{l}.mlp.b_up"), &layer.mlp.b_up);
            f(&format!("layer{l}.mlp.w_down"), &layer.mlp.w_down);
            f(&format!("layer{l}.mlp.b_down"), &layer.mlp.b_down);
        }
        f("final_norm.gain", &self.final_norm.gain);
        f("final_norm.bias", &self.final_norm.bias);
        f("unembed", &self.unembed);
    }

    /// Visit every array mutably, same order as [`Weights::for_each_array`].
    pub fn for_each_array_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let l = i + 1;
            f(&format!("layer{l}.ln1.gain"), &mut layer.ln1.gain);
            f(&format!("layer{l}.ln1.bias"), &mut layer.ln1.bias);
            f(&format!("layer{l}.attn.wq"), &mut layer.attn.wq);
            f(&format!("layer{l}.attn.bq"), &mut layer.attn.bq);
            f(&format!("layer{l}.attn.wk"), &mut layer.attn.wk);
            f(&format!("layer{l}.attn.bk"), &mut layer.attn.bk);
            f(&format!("layer{l}.attn.wv"), &mut layer.attn.wv);
            f(&format!("layer{l}.attn.bv"), &mut layer.attn.bv);
            f(&format!("layer{l}.attn.wo"), &mut layer.attn.wo);
            f(&format!("layer{l}.attn.bo"), &mut layer.attn.bo);
            f(&format!("layer{l}.ln2.gain"), &mut layer.ln2.gain);
            f(&format!("layer{l}.ln2.bias"), &mut layer.ln2.bias);
            f(&format!("layer{l}.mlp.w_up"), &mut layer.mlp.w_up);
            f(&format!("layer{l}.mlp.b_up"), &mut layer.mlp.b_up);
            f(&format!("layer{l}.mlp.w_down"), &mut layer.mlp.w_down);
            f(&format!("layer{l}.mlp.b_down"), &mut layer.mlp.b_down);
        }
        f("final_norm.gain", &mut self.final_norm.gain);
        f("final_norm.bias", &mut self.final_norm.bias);
        f("unembed", &mut self.unembed);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_array(|_, t| n += t.numel());
        n
    }

    /// SHA-256 over the serialized byte layout; anchors use it to pin the
    /// checkpoint they were calibrated against.
    pub fn hash_hex(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(io::to_bytes(self));
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Deterministic initialization from `config.seed` on the weight-init
/// stream: normal(0, 0.02) for projections and embeddings, zeros for
/// biases, ones for layer-norm gains.
pub fn init_weights(config: &ModelConfig) -> Result<Weights> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, STREAM_WEIGHT_INIT);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut fill = |shape: Vec<usize>| {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Tensor::from_raw(shape, data)
    };
    let d = config.d_model;
    let tok_emb = fill(vec![config.vocab_size, d]);
    let pos_emb = fill(vec![config.max_seq, d]);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let ln1 = NormParams { gain: Tensor::ones(vec![d]), bias: Tensor::zeros(vec![d]) };
        let attn = AttnWeights {
            wq: fill(vec![d, d]),
            bq: Tensor::zeros(vec![d]),
            wk: fill(vec![d, d]),
            bk: Tensor::zeros(vec![d]),
            wv: fill(vec![d, d]),
            bv: Tensor::zeros(vec![d]),
            wo: fill(vec![d, d]),
            bo: Tensor::zeros(vec![d]),
        };
        let ln2 = NormParams { gain: Tensor::ones(vec![d]), bias: Tensor::zeros(vec![d]) };
        let mlp = MlpWeights {
            w_up: fill(vec![d, config.d_mlp]),
            b_up: Tensor::zeros(vec![config.d_mlp]),
            w_down: fill(vec![config.d_mlp, d]),
            b_down: Tensor::zeros(vec![d]),
        };
        layers.push(LayerWeights { ln1, attn, ln2, mlp });
    }
    let final_norm = NormParams { gain: Tensor::ones(vec![d]), bias: Tensor::zeros(vec![d]) };
    let unembed = fill(vec![d, config.vocab_size]);
    Ok(Weights { config: *config, tok_emb, pos_emb, layers, final_norm, unembed })
}
