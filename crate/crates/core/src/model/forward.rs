//! Instrumented forward pass.
//!
//! Pre-norm block order: `a_l = MHA(LN1(r))` is written to the stream first,
//! then `m_l = MLP(LN2(r + a_l))`, so the MLP contribution is contingent on
//! the attention write of the same layer. When an injection plan is present,
//! each targeted write becomes a blend of the context component and the
//! module output instead of the plain output; calibration noise perturbs the
//! stream after each of the two writes.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::instrument::{
    resolve_positions, InjectionFormula, InjectionPlan, TargetModule, TraceRequest,
};
use crate::model::Weights;
use crate::rng::{derive_seed, stream_rng, STREAM_NOISE, STREAM_POSITION};
use crate::tensor::{BlendKind, Tape, Tensor, ValId};
use crate::ActivationTrace;

/// Options for one forward pass.
#[derive(Default)]
pub struct ForwardRun<'a> {
    pub plan: Option<&'a InjectionPlan>,
    pub trace: Option<&'a TraceRequest>,
    /// Prediction-responsible position for `PositionSpec::Last`; defaults to
    /// the final token. Label scoring sets this to the end of the query
    /// rendering.
    pub boundary: Option<usize>,
    /// Sub-stream id mixed into the plan's noise seed; calibration varies it
    /// per (epoch, demonstration) so noise is resampled per forward while
    /// staying reproducible.
    pub noise_stream: u64,
}

pub struct ForwardOutput {
    pub logits: Tensor,
    pub trace: ActivationTrace,
    /// Recorded draw when the plan targets a random position.
    pub random_position: Option<usize>,
}

/// Tape-level coefficient binding for the injection scalars.
pub struct CoefIds {
    pub lambda_attn: Vec<ValId>,
    pub beta_attn: Vec<ValId>,
    pub lambda_mlp: Vec<ValId>,
    pub beta_mlp: Vec<ValId>,
}

/// How the forward obtains its injection coefficients.
///
/// `FromPlan` freezes them as constants; `Ids` lets the calibrator supply
/// tape values (parameters, or softplus transforms of parameters) so the
/// loss gradient reaches them. With the add-only formula, `Ids` callers must
/// supply constant-one beta values.
pub enum CoefBinding<'a> {
    FromPlan,
    Ids(&'a CoefIds),
}

pub struct TapeForward {
    pub logits: ValId,
    pub trace: ActivationTrace,
    pub random_position: Option<usize>,
    /// When weights are bound trainable: one id per array, serialization order.
    pub weight_ids: Vec<ValId>,
}

fn causal_mask(t_len: usize) -> Tensor {
    // finite sentinel keeps every tensor finite; exp(-1e30 - x) is exactly 0
    let mut data = vec![0.0; t_len * t_len];
    for i in 0..t_len {
        for j in (i + 1)..t_len {
            data[i * t_len + j] = -1e30;
        }
    }
    Tensor::from_raw(vec![t_len, t_len], data)
}

pub fn forward_on_tape(
    tape: &mut Tape,
    weights: &Weights,
    tokens: &[u32],
    run: &ForwardRun,
    coef: CoefBinding,
    trainable_weights: bool,
) -> Result<TapeForward> {
    let cfg = &weights.config;
    let t_len = tokens.len();
    if t_len == 0 {
        return Err(CoreError::EmptyInput("tokens"));
    }
    if t_len > cfg.max_seq {
        return Err(CoreError::SequenceTooLong { len: t_len, max: cfg.max_seq });
    }
    for &id in tokens {
        if id as usize >= cfg.vocab_size {
            return Err(CoreError::UnknownTokenId { id, vocab: cfg.vocab_size });
        }
    }
    if let Some(plan) = run.plan {
        plan.validate_for(cfg.n_layers, cfg.d_model)?;
    }

    // Injection rows are resolved once per forward; the random draw comes
    // from the plan seed on its own stream.
    let mut random_position = None;
    let inject_rows: Vec<usize> = match run.plan {
        Some(plan) => {
            let (rows, recorded) =
                resolve_positions(plan.profile.target_positions, t_len, run.boundary, || {
                    stream_rng(derive_seed(plan.noise_seed, run.noise_stream), STREAM_POSITION)
                        .next_u64()
                });
            random_position = recorded;
            rows
        }
        None => Vec::new(),
    };

    let gamma = run.plan.map(|p| p.noise_gamma).unwrap_or(0.0);
    let mut noise_rng = if gamma > 0.0 {
        let plan = run.plan.expect("gamma implies plan");
        Some(stream_rng(derive_seed(plan.noise_seed, run.noise_stream), STREAM_NOISE))
    } else {
        None
    };
    let mut draw_eta = |tape: &mut Tape, rows: usize, cols: usize| -> ValId {
        let rng = noise_rng.as_mut().expect("noise stream");
        let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        tape.constant(Tensor::from_raw(vec![rows, cols], data))
    };

    let mut weight_ids = Vec::new();
    macro_rules! bind {
        ($t:expr) => {{
            let id = if trainable_weights {
                tape.parameter($t.clone())
            } else {
                tape.constant($t.clone())
            };
            weight_ids.push(id);
            id
        }};
    }

    // Effective (λ, β, kind) per (layer, module) as tape values.
    let blend_kind = match run.plan.map(|p| p.profile.formula) {
        Some(InjectionFormula::ConvexScaled) => BlendKind::ConvexScaled,
        _ => BlendKind::Linear,
    };
    let coef_at = |tape: &mut Tape, plan: &InjectionPlan, layer: usize, module: TargetModule| {
        match &coef {
            CoefBinding::Ids(ids) => match module {
                // the hidden-state ablation rides the attention slots
                TargetModule::Mha | TargetModule::Hidden => {
                    (ids.lambda_attn[layer - 1], ids.beta_attn[layer - 1])
                }
                TargetModule::Mlp => (ids.lambda_mlp[layer - 1], ids.beta_mlp[layer - 1]),
            },
            CoefBinding::FromPlan => {
                let c = &plan.coefficients;
                let (raw_l, raw_b) = match module {
                    TargetModule::Mha | TargetModule::Hidden => {
                        (c.lambda_attn[layer - 1], c.beta_attn[layer - 1])
                    }
                    TargetModule::Mlp => (c.lambda_mlp[layer - 1], c.beta_mlp[layer - 1]),
                };
                let (l_eff, b_eff, _) = plan.blend_parts(raw_l, raw_b);
                (tape.constant(Tensor::scalar(l_eff)), tape.constant(Tensor::scalar(b_eff)))
            }
        }
    };
    let targets = |plan: &InjectionPlan, layer: usize, module: TargetModule| {
        plan.profile.target_layers.contains(&layer) && plan.profile.target_modules.contains(&module)
    };

    let d = cfg.d_model;
    let tok_table = bind!(&weights.tok_emb);
    let x = tape.gather_rows(tok_table, tokens)?;
    let pos_table = bind!(&weights.pos_emb);
    let pos = tape.slice_rows(pos_table, 0, t_len)?;
    let mut r = tape.add(x, pos)?;

    let mask = tape.constant(causal_mask(t_len));
    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut trace = ActivationTrace::default();

    for layer in 1..=cfg.n_layers {
        let lw = &weights.layers[layer - 1];
        let ln1_gain = bind!(&lw.ln1.gain);
        let ln1_bias = bind!(&lw.ln1.bias);
        let wq = bind!(&lw.attn.wq);
        let bq = bind!(&lw.attn.bq);
        let wk = bind!(&lw.attn.wk);
        let bk = bind!(&lw.attn.bk);
        let wv = bind!(&lw.attn.wv);
        let bv = bind!(&lw.attn.bv);
        let wo = bind!(&lw.attn.wo);
        let bo = bind!(&lw.attn.bo);
        let ln2_gain = bind!(&lw.ln2.gain);
        let ln2_bias = bind!(&lw.ln2.bias);
        let w_up = bind!(&lw.mlp.w_up);
        let b_up = bind!(&lw.mlp.b_up);
        let w_down = bind!(&lw.mlp.w_down);
        let b_down = bind!(&lw.mlp.b_down);

        // attention write
        let h1 = tape.layer_norm_rows(r, ln1_gain, ln1_bias)?;
        let q0 = tape.matmul(h1, wq)?;
        let q = tape.add_row(q0, bq)?;
        let k0 = tape.matmul(h1, wk)?;
        let k = tape.add_row(k0, bk)?;
        let v0 = tape.matmul(h1, wv)?;
        let v = tape.add_row(v0, bv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, scale);
            let masked = tape.add(scaled, mask)?;
            let probs = tape.softmax_rows(masked)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let proj = tape.matmul(merged, wo)?;
        let attn_out = tape.add_row(proj, bo)?;

        // trace captures the module output, pre-addition and pre-blend
        if let Some(req) = run.trace {
            for (point, pos) in req.positions_for(layer, TargetModule::Mha, t_len) {
                trace.insert(point, tape.value(attn_out).row(pos).to_vec());
            }
        }

        let attn_write = match run.plan {
            Some(plan) if targets(plan, layer, TargetModule::Mha) => {
                let (lam, bet) = coef_at(tape, plan, layer, TargetModule::Mha);
                let ctx = tape
                    .constant(Tensor::from_raw(vec![d], plan.context.mha[layer - 1].clone()));
                tape.inject_rows(attn_out, ctx, lam, bet, &inject_rows, blend_kind)?
            }
            _ => attn_out,
        };
        let mut stream_mid = tape.add(r, attn_write)?;
        if gamma > 0.0 {
            let eta = draw_eta(tape, t_len, d);
            stream_mid = tape.perturb_rows(stream_mid, eta, gamma)?;
        }

        // MLP write, computed from the (possibly noised) intermediate stream
        let h2 = tape.layer_norm_rows(stream_mid, ln2_gain, ln2_bias)?;
        let up0 = tape.matmul(h2, w_up)?;
        let up = tape.add_row(up0, b_up)?;
        let act = tape.gelu(up);
        let down = tape.matmul(act, w_down)?;
        let mlp_out = tape.add_row(down, b_down)?;

        if let Some(req) = run.trace {
            for (point, pos) in req.positions_for(layer, TargetModule::Mlp, t_len) {
                trace.insert(point, tape.value(mlp_out).row(pos).to_vec());
            }
        }

        let mlp_write = match run.plan {
            Some(plan) if targets(plan, layer, TargetModule::Mlp) => {
                let (lam, bet) = coef_at(tape, plan, layer, TargetModule::Mlp);
                let ctx = tape
                    .constant(Tensor::from_raw(vec![d], plan.context.mlp[layer - 1].clone()));
                tape.inject_rows(mlp_out, ctx, lam, bet, &inject_rows, blend_kind)?
            }
            _ => mlp_out,
        };
        let mut stream_out = tape.add(stream_mid, mlp_write)?;
        if gamma > 0.0 {
            let eta = draw_eta(tape, t_len, d);
            stream_out = tape.perturb_rows(stream_out, eta, gamma)?;
        }

        // hidden-state ablation: replace the post-block state by a blend
        if let Some(plan) = run.plan {
            if targets(plan, layer, TargetModule::Hidden) {
                let hidden = plan
                    .context
                    .hidden
                    .as_ref()
                    .ok_or_else(|| CoreError::InvalidPlan("missing hidden context".into()))?;
                let (lam, bet) = coef_at(tape, plan, layer, TargetModule::Hidden);
                let ctx = tape.constant(Tensor::from_raw(vec![d], hidden[layer - 1].clone()));
                stream_out = tape.inject_rows(stream_out, ctx, lam, bet, &inject_rows, blend_kind)?;
            }
        }

        if let Some(req) = run.trace {
            for (point, pos) in req.positions_for(layer, TargetModule::Hidden, t_len) {
                trace.insert(point, tape.value(stream_out).row(pos).to_vec());
            }
        }

        r = stream_out;
    }

    let final_gain = bind!(&weights.final_norm.gain);
    let final_bias = bind!(&weights.final_norm.bias);
    let rf = tape.layer_norm_rows(r, final_gain, final_bias)?;
    let unembed = bind!(&weights.unembed);
    let logits = tape.matmul(rf, unembed)?;
    if !tape.value(logits).all_finite() {
        return Err(CoreError::NonFinite("logits".into()));
    }
    if !trainable_weights {
        weight_ids.clear();
    }
    Ok(TapeForward { logits, trace, random_position, weight_ids })
}

/// Convenience wrapper: run on a private tape and return concrete logits.
pub fn forward(weights: &Weights, tokens: &[u32], run: &ForwardRun) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let out = forward_on_tape(&mut tape, weights, tokens, run, CoefBinding::FromPlan, false)?;
    Ok(ForwardOutput {
        logits: tape.value(out.logits).clone(),
        trace: out.trace,
        random_position: out.random_position,
    })
}
