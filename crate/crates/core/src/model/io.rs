//! Binary weight checkpoint format.
//!
//! Layout: magic `I2CLW1`, little-endian header `(L, D, H, d_mlp, V, T_max)`
//! as u32, then every array as raw little-endian f64 in the order given by
//! `expected_shapes`. Round-trips are bit-exact. The init seed is not part
//! of the file; a loaded config carries seed 0.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::model::{expected_shapes, LayerWeights, MlpWeights, ModelConfig, NormParams, Weights};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"I2CLW1";

pub(crate) fn to_bytes(w: &Weights) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + 8 * w.param_count());
    buf.extend_from_slice(MAGIC);
    for dim in [
        w.config.n_layers,
        w.config.d_model,
        w.config.n_heads,
        w.config.d_mlp,
        w.config.vocab_size,
        w.config.max_seq,
    ] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    w.for_each_array(|_, t| {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
    buf
}

pub fn save_weights(path: &Path, w: &Weights) -> Result<()> {
    fs::write(path, to_bytes(w))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<Weights> {
    let mut data = Vec::new();
    fs::File::open(path)
        .map_err(|e| CoreError::Format(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut data)?;
    if data.len() < 6 + 24 {
        return Err(CoreError::Format("weight file shorter than header".into()));
    }
    if &data[0..6] != MAGIC {
        return Err(CoreError::Format(format!(
            "bad magic {:?}, expected {:?}",
            &data[0..6],
            MAGIC
        )));
    }
    let mut dims = [0usize; 6];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 6 + 4 * i;
        *d = u32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as usize;
    }
    let config = ModelConfig {
        n_layers: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        d_mlp: dims[3],
        vocab_size: dims[4],
        max_seq: dims[5],
        seed: 0,
    };
    config.validate().map_err(|e| CoreError::Format(format!("header: {e}")))?;

    let mut pos = 6 + 24;
    let read_array = |name: &str, shape: &[usize], pos: &mut usize| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let bytes = n * 8;
        if *pos + bytes > data.len() {
            return Err(CoreError::Format(format!("truncated while reading {name}")));
        }
        let vals: Vec<f64> = data[*pos..*pos + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *pos += bytes;
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite(format!("array {name}")));
        }
        Ok(Tensor::from_raw(shape.to_vec(), vals))
    };

    let d = config.d_model;
    let tok_emb = read_array("tok_emb", &[config.vocab_size, d], &mut pos)?;
    let pos_emb = read_array("pos_emb", &[config.max_seq, d], &mut pos)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 1..=config.n_layers {
        let p = |n: &str| format!("layer{l}.{n}");
        let ln1 = NormParams {
            gain: read_array(&p("ln1.gain"), &[d], &mut pos)?,
            bias: read_array(&p("ln1.bias"), &[d], &mut pos)?,
        };
        let attn = crate::model::AttnWeights {
            wq: read_array(&p("attn.wq"), &[d, d], &mut pos)?,
            bq: read_array(&p("attn.bq"), &[d], &mut pos)?,
            wk: read_array(&p("attn.wk"), &[d, d], &mut pos)?,
            bk: read_array(&p("attn.bk"), &[d], &mut pos)?,
            wv: read_array(&p("attn.wv"), &[d, d], &mut pos)?,
            bv: read_array(&p("attn.bv"), &[d], &mut pos)?,
            wo: read_array(&p("attn.wo"), &[d, d], &mut pos)?,
            bo: read_array(&p("attn.bo"), &[d], &mut pos)?,
        };
        let ln2 = NormParams {
            gain: read_array(&p("ln2.gain"), &[d], &mut pos)?,
            bias: read_array(&p("ln2.bias"), &[d], &mut pos)?,
        };
        let mlp = MlpWeights {
            w_up: read_array(&p("mlp.w_up"), &[d, config.d_mlp], &mut pos)?,
            b_up: read_array(&p("mlp.b_up"), &[config.d_mlp], &mut pos)?,
            w_down: read_array(&p("mlp.w_down"), &[config.d_mlp, d], &mut pos)?,
            b_down: read_array(&p("mlp.b_down"), &[d], &mut pos)?,
        };
        layers.push(LayerWeights { ln1, attn, ln2, mlp });
    }
    let final_norm = NormParams {
        gain: read_array("final_norm.gain", &[d], &mut pos)?,
        bias: read_array("final_norm.bias", &[d], &mut pos)?,
    };
    let unembed = read_array("unembed", &[d, config.vocab_size], &mut pos)?;
    if pos != data.len() {
        return Err(CoreError::Format(format!("{} trailing bytes", data.len() - pos)));
    }
    Ok(Weights { config, tok_emb, pos_emb, layers, final_norm, unembed })
}

/// Load and verify the file against an expected architecture. On mismatch
/// the error names the first offending array in serialization order.
pub fn load_weights_expecting(path: &Path, expected: &ModelConfig) -> Result<Weights> {
    let w = load_weights(path)?;
    let found: HashMap<String, Vec<usize>> = expected_shapes(&w.config).into_iter().collect();
    for (name, shape) in expected_shapes(expected) {
        match found.get(&name) {
            None => {
                return Err(CoreError::ArrayMismatch { name, found: vec![], expected: shape });
            }
            Some(got) if *got != shape => {
                return Err(CoreError::ArrayMismatch { name, found: got.clone(), expected: shape });
            }
            Some(_) => {}
        }
    }
    Ok(w)
}

/// Hex SHA-256 of a checkpoint file's canonical byte layout.
pub fn weights_hash(w: &Weights) -> String {
    w.hash_hex()
}
