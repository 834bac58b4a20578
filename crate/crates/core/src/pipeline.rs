//! The implicit in-context learning pipeline: vectorize demonstrations,
//! aggregate them into a context vector, calibrate the linear coefficients
//! under stream noise, and score/evaluate queries.

use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::costs::forward_flops;
use crate::error::{CoreError, Result};
use crate::instrument::{
    capture_end, CoefficientSet, ContextVector, InjectionFormula, InjectionPlan, InjectionProfile,
    TargetModule, TracePoint, TracePosition,
};
use crate::model::{
    forward, forward_on_tape, CoefBinding, CoefIds, ForwardRun, Tokenizer, Weights,
};
use crate::optim::{cosine_lr, AdamW};
use crate::taskgen::{Demonstration, Template};
use crate::tensor::{softplus, softplus_inverse, Tape, Tensor};

/// The 2L end-token activations extracted from one demonstration (plus the
/// post-block hidden states, kept for the hidden-state ablation).
#[derive(Debug, Clone, PartialEq)]
pub struct DemonstrationVector {
    pub mha: Vec<Vec<f64>>,
    pub mlp: Vec<Vec<f64>>,
    pub hidden: Option<Vec<Vec<f64>>>,
}

/// One clean forward pass per demonstration; no injection, no noise.
pub fn vectorize_demo(weights: &Weights, rendered: &str) -> Result<DemonstrationVector> {
    let tokens = Tokenizer::new().encode(rendered)?;
    let trace = capture_end(weights, &tokens, true)?;
    let n_layers = weights.config.n_layers;
    let pick = |module: TargetModule| -> Result<Vec<Vec<f64>>> {
        (1..=n_layers)
            .map(|layer| {
                trace
                    .get(&TracePoint { layer, module, position: TracePosition::End })
                    .cloned()
                    .ok_or_else(|| CoreError::MissingCapture(format!("{module:?} layer {layer}")))
            })
            .collect()
    };
    Ok(DemonstrationVector {
        mha: pick(TargetModule::Mha)?,
        mlp: pick(TargetModule::Mlp)?,
        hidden: Some(pick(TargetModule::Hidden)?),
    })
}

fn vector_digest(v: &DemonstrationVector, with_hidden: bool) -> Vec<u8> {
    let mut hasher = Sha256::new();
    let mut feed = |vecs: &Vec<Vec<f64>>| {
        for row in vecs {
            for value in row {
                hasher.update(value.to_le_bytes());
            }
        }
    };
    feed(&v.mha);
    feed(&v.mlp);
    if with_hidden {
        if let Some(h) = &v.hidden {
            feed(h);
        }
    }
    hasher.finalize().to_vec()
}

/// Element-wise arithmetic mean of demonstration vectors.
///
/// Summation runs in a canonical order (ascending content hash), so any
/// permutation of the input yields a bit-identical context vector.
pub fn aggregate(vectors: &[DemonstrationVector]) -> Result<ContextVector> {
    let Some(first) = vectors.first() else {
        return Err(CoreError::EmptyInput("demonstration vectors"));
    };
    let n_layers = first.mha.len();
    let dim = first.mha.first().map(Vec::len).unwrap_or(0);
    if n_layers == 0 || dim == 0 {
        return Err(CoreError::EmptyInput("demonstration vector components"));
    }
    let with_hidden = vectors.iter().all(|v| v.hidden.is_some());
    for v in vectors {
        let shapes_ok = v.mha.len() == n_layers
            && v.mlp.len() == n_layers
            && v.mha.iter().chain(&v.mlp).all(|row| row.len() == dim)
            && v.hidden.as_ref().map_or(true, |h| {
                h.len() == n_layers && h.iter().all(|row| row.len() == dim)
            });
        if !shapes_ok {
            return Err(CoreError::ShapeMismatch {
                op: "aggregate",
                details: "inconsistent layer count or dimension".into(),
            });
        }
    }

    let mut order: Vec<(Vec<u8>, usize)> =
        vectors.iter().enumerate().map(|(i, v)| (vector_digest(v, with_hidden), i)).collect();
    order.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut mha = vec![vec![0.0; dim]; n_layers];
    let mut mlp = vec![vec![0.0; dim]; n_layers];
    let mut hidden = if with_hidden { Some(vec![vec![0.0; dim]; n_layers]) } else { None };
    for (_, idx) in &order {
        let v = &vectors[*idx];
        for l in 0..n_layers {
            for j in 0..dim {
                mha[l][j] += v.mha[l][j];
                mlp[l][j] += v.mlp[l][j];
            }
        }
        if let (Some(acc), Some(h)) = (hidden.as_mut(), v.hidden.as_ref()) {
            for l in 0..n_layers {
                for j in 0..dim {
                    acc[l][j] += h[l][j];
                }
            }
        }
    }
    let n = vectors.len() as f64;
    let div = |mut vecs: Vec<Vec<f64>>| {
        for row in &mut vecs {
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        vecs
    };
    let out = ContextVector {
        mha: div(mha),
        mlp: div(mlp),
        hidden: hidden.map(div),
        source_count: vectors.len(),
    };
    out.validate()?;
    Ok(out)
}

/// Vectorize a demonstration list and aggregate it in one step.
pub fn build_context_vector(
    weights: &Weights,
    demos: &[Demonstration],
    template: &Template,
) -> Result<ContextVector> {
    let vectors: Vec<Result<DemonstrationVector>> =
        demos.par_iter().map(|d| vectorize_demo(weights, &template.render(d))).collect();
    let vectors: Result<Vec<_>> = vectors.into_iter().collect();
    aggregate(&vectors?)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Sum of label-token log-probabilities, teacher-forced after the query
/// rendering; no length normalization.
pub fn label_logprob(
    weights: &Weights,
    query: &str,
    label: &str,
    plan: Option<&InjectionPlan>,
) -> Result<f64> {
    if label.is_empty() {
        return Err(CoreError::EmptyInput("label"));
    }
    let tok = Tokenizer::new();
    let prefix = tok.encode(query)?;
    if prefix.is_empty() {
        return Err(CoreError::EmptyInput("query"));
    }
    let label_ids = tok.encode(label)?;
    let mut tokens = prefix.clone();
    tokens.extend_from_slice(&label_ids);
    let boundary = prefix.len() - 1;
    let run = ForwardRun { plan, boundary: Some(boundary), ..Default::default() };
    let out = forward(weights, &tokens, &run)?;
    let mut total = 0.0;
    for (j, &id) in label_ids.iter().enumerate() {
        let row = out.logits.row(boundary + j);
        total += row[id as usize] - log_sum_exp(row);
    }
    Ok(total)
}

// --- calibration -------------------------------------------------------------

/// Calibration hyper-parameters. Defaults: 100 epochs, cosine 1e-2 → 1e-5,
/// Adam with decoupled weight decay 0.01 (betas 0.9/0.999), noise scale
/// 0.001, initial coefficients λ = 0.1, β = 1.0.
#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub init_lambda: f64,
    pub init_beta: f64,
    pub seed: u64,
    /// Injection sites; `None` means the standard treatment (MHA+MLP, all
    /// layers, all positions, linear blend).
    pub profile: Option<InjectionProfile>,
    /// Token prefix kept in context during every calibration forward (the
    /// combined concatenation+injection mode).
    pub context_prefix: Option<String>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr_start: 1e-2,
            lr_end: 1e-5,
            weight_decay: 0.01,
            gamma: 0.001,
            init_lambda: 0.1,
            init_beta: 1.0,
            seed: 0,
            profile: None,
            context_prefix: None,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(CoreError::InvalidConfig("need lr_start >= lr_end > 0".into()));
        }
        if self.gamma < 0.0 {
            return Err(CoreError::InvalidConfig("negative noise scale".into()));
        }
        Ok(())
    }

    pub fn initial_coefficients(&self, n_layers: usize) -> CoefficientSet {
        CoefficientSet::uniform_init(n_layers, self.init_lambda, self.init_beta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub coefficients: CoefficientSet,
    pub history: Vec<EpochRow>,
}

/// A demonstration rendered for scoring: query text plus held-out label.
#[derive(Debug, Clone)]
pub struct RenderedDemo {
    pub query: String,
    pub label: String,
}

pub fn render_calibration_demos(
    demos: &[Demonstration],
    template: &Template,
    context_prefix: Option<&str>,
) -> Vec<RenderedDemo> {
    demos
        .iter()
        .map(|d| {
            let mut query = String::new();
            if let Some(prefix) = context_prefix {
                query.push_str(prefix);
            }
            query.push_str(&template.render_query(&d.x));
            RenderedDemo { query, label: d.y.clone() }
        })
        .collect()
}

/// Map a coefficient set into optimizer space for the given formula.
///
/// Constrained formulas are reparameterized through softplus instead of
/// clipping, so their gradients stay informative; the add-only formula keeps
/// β frozen at 1.
fn to_param_space(init: &CoefficientSet, formula: InjectionFormula) -> Result<Vec<f64>> {
    let positive = |v: f64, what: &str| -> Result<f64> {
        if v <= 0.0 {
            return Err(CoreError::ConstraintViolation(format!(
                "{what} must be positive to initialize a constrained formula, got {v}"
            )));
        }
        Ok(softplus_inverse(v))
    };
    let n = init.n_layers();
    let mut out = Vec::with_capacity(4 * n);
    for l in 0..n {
        match formula {
            InjectionFormula::LinearCombo => {
                out.extend([init.lambda_attn[l], init.beta_attn[l], init.lambda_mlp[l], init.beta_mlp[l]]);
            }
            InjectionFormula::AddOnly => {
                out.push(positive(init.lambda_attn[l], "λ")?);
                out.push(init.beta_attn[l]);
                out.push(positive(init.lambda_mlp[l], "λ")?);
                out.push(init.beta_mlp[l]);
            }
            InjectionFormula::ConvexScaled => {
                out.push(init.lambda_attn[l]);
                out.push(positive(init.beta_attn[l], "β")?);
                out.push(init.lambda_mlp[l]);
                out.push(positive(init.beta_mlp[l], "β")?);
            }
        }
    }
    Ok(out)
}

/// Effective coefficients for a parameter-space vector.
pub fn effective_coefficients(params: &[f64], formula: InjectionFormula) -> Result<CoefficientSet> {
    let raw = CoefficientSet::from_flat(params)?;
    let n = raw.n_layers();
    let mut out = raw.clone();
    match formula {
        InjectionFormula::LinearCombo => {}
        InjectionFormula::AddOnly => {
            for l in 0..n {
                out.lambda_attn[l] = softplus(raw.lambda_attn[l]);
                out.lambda_mlp[l] = softplus(raw.lambda_mlp[l]);
                out.beta_attn[l] = 1.0;
                out.beta_mlp[l] = 1.0;
            }
        }
        InjectionFormula::ConvexScaled => {
            for l in 0..n {
                out.beta_attn[l] = softplus(raw.beta_attn[l]);
                out.beta_mlp[l] = softplus(raw.beta_mlp[l]);
            }
        }
    }
    Ok(out)
}

/// Options for one full-batch loss evaluation over the demonstration set.
pub struct CalibrationLossOpts<'a> {
    pub profile: &'a InjectionProfile,
    pub gamma: f64,
    pub noise_seed: u64,
    /// Demonstration `i` of this batch uses noise sub-stream `stream_base + i`.
    pub stream_base: u64,
}

fn eval_demo(
    weights: &Weights,
    demo: &RenderedDemo,
    context: &ContextVector,
    params: &[f64],
    opts: &CalibrationLossOpts,
    stream_id: u64,
    want_grads: bool,
) -> Result<(f64, Vec<f64>)> {
    let tok = Tokenizer::new();
    let prefix = tok.encode(&demo.query)?;
    if demo.label.is_empty() {
        return Err(CoreError::EmptyInput("label"));
    }
    if prefix.is_empty() {
        return Err(CoreError::EmptyInput("query"));
    }
    let label_ids = tok.encode(&demo.label)?;
    let mut tokens = prefix.clone();
    tokens.extend_from_slice(&label_ids);
    let boundary = prefix.len() - 1;
    let picks: Vec<(usize, u32)> =
        label_ids.iter().enumerate().map(|(j, &c)| (boundary + j, c)).collect();

    let n_layers = weights.config.n_layers;
    let mut tape = Tape::new();
    let raw_ids: Vec<_> = params
        .iter()
        .map(|&v| {
            if want_grads {
                tape.parameter(Tensor::scalar(v))
            } else {
                tape.constant(Tensor::scalar(v))
            }
        })
        .collect();
    let one = tape.constant(Tensor::scalar(1.0));
    let mut coef = CoefIds {
        lambda_attn: Vec::with_capacity(n_layers),
        beta_attn: Vec::with_capacity(n_layers),
        lambda_mlp: Vec::with_capacity(n_layers),
        beta_mlp: Vec::with_capacity(n_layers),
    };
    for l in 0..n_layers {
        let (la, ba, lm, bm) =
            (raw_ids[4 * l], raw_ids[4 * l + 1], raw_ids[4 * l + 2], raw_ids[4 * l + 3]);
        match opts.profile.formula {
            InjectionFormula::LinearCombo => {
                coef.lambda_attn.push(la);
                coef.beta_attn.push(ba);
                coef.lambda_mlp.push(lm);
                coef.beta_mlp.push(bm);
            }
            InjectionFormula::AddOnly => {
                let la_eff = tape.softplus(la);
                let lm_eff = tape.softplus(lm);
                coef.lambda_attn.push(la_eff);
                coef.beta_attn.push(one);
                coef.lambda_mlp.push(lm_eff);
                coef.beta_mlp.push(one);
            }
            InjectionFormula::ConvexScaled => {
                let ba_eff = tape.softplus(ba);
                let bm_eff = tape.softplus(bm);
                coef.lambda_attn.push(la);
                coef.beta_attn.push(ba_eff);
                coef.lambda_mlp.push(lm);
                coef.beta_mlp.push(bm_eff);
            }
        }
    }

    let plan = InjectionPlan {
        context: context.clone(),
        coefficients: effective_coefficients(params, opts.profile.formula)?,
        profile: opts.profile.clone(),
        noise_gamma: opts.gamma,
        noise_seed: opts.noise_seed,
    };
    let run = ForwardRun {
        plan: Some(&plan),
        trace: None,
        boundary: Some(boundary),
        noise_stream: stream_id,
    };
    let out = forward_on_tape(&mut tape, weights, &tokens, &run, CoefBinding::Ids(&coef), false)?;
    let logprob = tape.gather_log_softmax(out.logits, &picks)?;
    let loss = tape.scale(logprob, -1.0);
    let loss_val = tape.value(loss).scalar_value();
    let grads = if want_grads {
        let g = tape.backward(loss)?;
        raw_ids.iter().map(|id| g.scalar(*id)).collect()
    } else {
        Vec::new()
    };
    Ok((loss_val, grads))
}

fn batch_loss(
    weights: &Weights,
    demos: &[RenderedDemo],
    context: &ContextVector,
    params: &[f64],
    opts: &CalibrationLossOpts,
    want_grads: bool,
) -> Result<(f64, Vec<f64>)> {
    if demos.is_empty() {
        return Err(CoreError::EmptyInput("demos"));
    }
    let per_demo: Vec<Result<(f64, Vec<f64>)>> = demos
        .par_iter()
        .enumerate()
        .map(|(i, demo)| {
            eval_demo(weights, demo, context, params, opts, opts.stream_base + i as u64, want_grads)
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = vec![0.0; params.len()];
    for item in per_demo {
        let (demo_loss, demo_grads) = item?;
        loss += demo_loss;
        if want_grads {
            for (g, d) in grads.iter_mut().zip(demo_grads) {
                *g += d;
            }
        }
    }
    let inv = 1.0 / demos.len() as f64;
    loss *= inv;
    for g in grads.iter_mut() {
        *g *= inv;
    }
    Ok((loss, grads))
}

/// Mean negative label log-probability over the demonstration set, with the
/// per-site noise stream frozen by (`noise_seed`, `stream_base`).
pub fn calibration_loss(
    weights: &Weights,
    demos: &[RenderedDemo],
    context: &ContextVector,
    params: &[f64],
    opts: &CalibrationLossOpts,
) -> Result<f64> {
    batch_loss(weights, demos, context, params, opts, false).map(|(loss, _)| loss)
}

/// Loss plus reverse-mode gradients for the `4L` parameter-space values.
pub fn calibration_loss_and_grads(
    weights: &Weights,
    demos: &[RenderedDemo],
    context: &ContextVector,
    params: &[f64],
    opts: &CalibrationLossOpts,
) -> Result<(f64, Vec<f64>)> {
    batch_loss(weights, demos, context, params, opts, true)
}

/// Noisy self-calibration: full-batch gradient descent on the demonstration
/// label log-probabilities. Only the `4L` coefficients move; the model
/// weights are read-only throughout.
pub fn calibrate(
    weights: &Weights,
    demos: &[Demonstration],
    template: &Template,
    context: &ContextVector,
    config: &CalibrationConfig,
    init: &CoefficientSet,
) -> Result<CalibrationOutcome> {
    if demos.is_empty() {
        return Err(CoreError::EmptyInput("demos"));
    }
    config.validate()?;
    context.validate()?;
    let n_layers = weights.config.n_layers;
    if init.n_layers() != n_layers {
        return Err(CoreError::InvalidPlan(format!(
            "init built for {} layers, model has {n_layers}",
            init.n_layers()
        )));
    }
    let profile =
        config.profile.clone().unwrap_or_else(|| InjectionProfile::standard(n_layers));
    profile.validate(n_layers)?;
    let rendered = render_calibration_demos(demos, template, config.context_prefix.as_deref());

    let mut params = to_param_space(init, profile.formula)?;
    // frozen β slots (odd flatten indices) of the add-only formula are
    // exempt from decay
    let decay_mask: Vec<bool> = (0..params.len())
        .map(|i| !(profile.formula == InjectionFormula::AddOnly && i % 2 == 1))
        .collect();
    let mut opt = AdamW::new(params.len(), config.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.lr_start, config.lr_end, epoch, config.epochs);
        let opts = CalibrationLossOpts {
            profile: &profile,
            gamma: config.gamma,
            noise_seed: config.seed,
            stream_base: (epoch * rendered.len()) as u64,
        };
        let (loss, grads) = calibration_loss_and_grads(weights, &rendered, context, &params, &opts)
            .map_err(|e| match e {
                CoreError::NonFinite(_) => CoreError::CalibrationDiverged { epoch },
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(CoreError::CalibrationDiverged { epoch });
        }
        history.push(EpochRow { epoch, lr, loss });
        opt.step(&mut params, &grads, lr, Some(&decay_mask));
    }
    Ok(CalibrationOutcome {
        coefficients: effective_coefficients(&params, profile.formula)?,
        history,
    })
}

// --- prediction and evaluation ------------------------------------------------

#[derive(Debug, Clone)]
pub struct Prediction {
    pub index: usize,
    pub label: String,
    pub logprobs: Vec<f64>,
}

/// Argmax of [`label_logprob`] over the label space; ties break toward the
/// lowest label index in the declared order.
pub fn predict(
    weights: &Weights,
    query: &str,
    labels: &[String],
    plan: Option<&InjectionPlan>,
) -> Result<Prediction> {
    if labels.is_empty() {
        return Err(CoreError::EmptyInput("labels"));
    }
    if let Some(p) = plan {
        if p.noise_gamma != 0.0 {
            return Err(CoreError::InvalidPlan("noise is calibration-only; γ must be 0 at evaluation".into()));
        }
    }
    let tok = Tokenizer::new();
    let label_ids: Vec<Vec<u32>> =
        labels.iter().map(|l| tok.encode(l)).collect::<Result<Vec<_>>>()?;

    // Single-token labels share one forward of the query rendering: by
    // causality the boundary logits are bit-identical to each per-label
    // scoring pass, so this is the same computation, |C| times cheaper.
    let logprobs = if label_ids.iter().all(|ids| ids.len() == 1) {
        for ids in &label_ids {
            if ids[0] as usize >= weights.config.vocab_size {
                return Err(CoreError::UnknownTokenId {
                    id: ids[0],
                    vocab: weights.config.vocab_size,
                });
            }
        }
        let prefix = tok.encode(query)?;
        if prefix.is_empty() {
            return Err(CoreError::EmptyInput("query"));
        }
        let boundary = prefix.len() - 1;
        let run = ForwardRun { plan, boundary: Some(boundary), ..Default::default() };
        let out = forward(weights, &prefix, &run)?;
        let row = out.logits.row(boundary);
        let lse = log_sum_exp(row);
        label_ids.iter().map(|ids| row[ids[0] as usize] - lse).collect()
    } else {
        labels
            .iter()
            .map(|label| label_logprob(weights, query, label, plan))
            .collect::<Result<Vec<f64>>>()?
    };

    let mut best = 0usize;
    let mut best_value = f64::NEG_INFINITY;
    for (index, &lp) in logprobs.iter().enumerate() {
        if lp > best_value {
            best_value = lp;
            best = index;
        }
    }
    Ok(Prediction { index: best, label: labels[best].clone(), logprobs })
}

/// One evaluation query set with its rendering conventions.
pub struct EvalTask<'a> {
    pub queries: &'a [Demonstration],
    pub labels: &'a [String],
    pub template: &'a Template,
    pub name: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub query_id: usize,
    pub gold: String,
    pub pred: String,
    pub logprobs: Vec<f64>,
    /// Accounting tokens for this query: the query rendering plus one
    /// generated label token (plus any retained context prefix).
    pub tokens: usize,
    pub flops: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub records: Vec<QueryRecord>,
    pub mean_tokens: f64,
}

pub fn evaluate(
    weights: &Weights,
    task: &EvalTask,
    plan: Option<&InjectionPlan>,
    context_prefix: Option<&str>,
) -> Result<EvalOutcome> {
    if task.queries.is_empty() {
        return Err(CoreError::EmptyInput("eval set"));
    }
    let results: Vec<Result<QueryRecord>> = task
        .queries
        .par_iter()
        .enumerate()
        .map(|(query_id, demo)| {
            let started = Instant::now();
            let mut query = String::new();
            if let Some(prefix) = context_prefix {
                query.push_str(prefix);
            }
            query.push_str(&task.template.render_query(&demo.x));
            let prediction = predict(weights, &query, task.labels, plan)?;
            let tokens = Tokenizer::new().encode(&query)?.len() + 1;
            Ok(QueryRecord {
                query_id,
                gold: demo.y.clone(),
                pred: prediction.label,
                logprobs: prediction.logprobs,
                tokens,
                flops: forward_flops(&weights.config, tokens),
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            })
        })
        .collect();
    let records: Result<Vec<QueryRecord>> = results.into_iter().collect();
    let records = records?;
    let correct = records.iter().filter(|r| r.pred == r.gold).count();
    let accuracy = correct as f64 / records.len() as f64;
    let mean_tokens = records.iter().map(|r| r.tokens as f64).sum::<f64>() / records.len() as f64;
    Ok(EvalOutcome { accuracy, records, mean_tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, meta_pretrain, ModelConfig, PretrainOptions};
    use crate::rng::{stream_rng, STREAM_TASKGEN};
    use crate::taskgen::{generate_task, sample_demos, SyntheticTaskSpec, TaskFamily};
    use rand::Rng;
    use std::sync::OnceLock;

    fn tiny_config() -> ModelConfig {
        ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_mlp: 64, vocab_size: 97, max_seq: 96, seed: 3 }
    }

    fn tiny_family() -> TaskFamily {
        let mut family = TaskFamily::new(9, 0.7);
        family.min_len = 2;
        family.max_len = 4;
        family
    }

    fn tiny_task_spec() -> SyntheticTaskSpec {
        tiny_family().canonical_task(51)
    }

    /// Briefly meta-pretrained checkpoint shared by the slower tests.
    fn trained() -> &'static Weights {
        static CELL: OnceLock<Weights> = OnceLock::new();
        CELL.get_or_init(|| {
            let opts = PretrainOptions { steps: 250, batch_size: 2, ..Default::default() };
            meta_pretrain(&tiny_config(), &tiny_family(), &opts).unwrap().0
        })
    }

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn vectorize_is_deterministic_and_sensitive() {
        let w = init_weights(&tiny_config()).unwrap();
        let a = vectorize_demo(&w, "Input: ab\nLabel: A").unwrap();
        let b = vectorize_demo(&w, "Input: ab\nLabel: A").unwrap();
        assert_eq!(a, b);
        let c = vectorize_demo(&w, "Input: ac\nLabel: A").unwrap();
        assert_ne!(a, c);
        assert_eq!(a.mha.len(), 2);
        assert_eq!(a.mha[0].len(), 16);
    }

    #[test]
    fn vectorize_single_token_is_position_zero_trace() {
        let w = init_weights(&tiny_config()).unwrap();
        let v = vectorize_demo(&w, "x").unwrap();
        let tokens = Tokenizer::new().encode("x").unwrap();
        let trace = capture_end(&w, &tokens, false).unwrap();
        let at = trace
            .get(&TracePoint { layer: 1, module: TargetModule::Mha, position: TracePosition::End })
            .unwrap();
        assert_eq!(&v.mha[0], at);
    }

    fn synthetic_vector(n_layers: usize, dim: usize, seed: u64) -> DemonstrationVector {
        let mut rng = stream_rng(seed, STREAM_TASKGEN);
        let mut component = || -> Vec<Vec<f64>> {
            (0..n_layers).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        DemonstrationVector { mha: component(), mlp: component(), hidden: None }
    }

    #[test]
    fn aggregate_of_one_is_identity() {
        let v = synthetic_vector(2, 4, 1);
        let out = aggregate(std::slice::from_ref(&v)).unwrap();
        assert_eq!(bits(&out.mha[0]), bits(&v.mha[0]));
        assert_eq!(bits(&out.mlp[1]), bits(&v.mlp[1]));
        assert_eq!(out.source_count, 1);
    }

    #[test]
    fn aggregate_is_elementwise_mean() {
        let mut a = synthetic_vector(1, 2, 2);
        let mut b = synthetic_vector(1, 2, 3);
        a.mha[0] = vec![1.0, 3.0];
        b.mha[0] = vec![3.0, 1.0];
        let out = aggregate(&[a, b]).unwrap();
        assert_eq!(out.mha[0], vec![2.0, 2.0]);
    }

    #[test]
    fn aggregate_is_bitwise_permutation_invariant() {
        let vectors: Vec<DemonstrationVector> = (0..7).map(|i| synthetic_vector(2, 5, 10 + i)).collect();
        let baseline = aggregate(&vectors).unwrap();
        let mut rng = stream_rng(99, STREAM_TASKGEN);
        for _ in 0..50 {
            let mut shuffled = vectors.clone();
            for i in (1..shuffled.len()).rev() {
                let j = rng.gen_range(0..=i);
                shuffled.swap(i, j);
            }
            let out = aggregate(&shuffled).unwrap();
            for l in 0..2 {
                assert_eq!(bits(&out.mha[l]), bits(&baseline.mha[l]));
                assert_eq!(bits(&out.mlp[l]), bits(&baseline.mlp[l]));
            }
        }
    }

    #[test]
    fn aggregate_rejects_empty_and_mismatched() {
        assert!(aggregate(&[]).is_err());
        let a = synthetic_vector(2, 4, 1);
        let b = synthetic_vector(2, 5, 2);
        assert!(aggregate(&[a, b]).is_err());
    }

    #[test]
    fn uniform_unembedding_gives_log_inverse_vocab() {
        let mut cfg = tiny_config();
        cfg.vocab_size = 100;
        let mut w = init_weights(&cfg).unwrap();
        w.unembed = Tensor::zeros(vec![cfg.d_model, cfg.vocab_size]);
        let lp = label_logprob(&w, "Input: ab\nLabel: ", "A", None).unwrap();
        assert!((lp - (1.0f64 / 100.0).ln()).abs() < 1e-9, "{lp}");
    }

    #[test]
    fn two_token_label_is_sum_of_single_positions() {
        let w = trained();
        let q = "Input: ab\nLabel: ";
        let joint = label_logprob(w, q, "AB", None).unwrap();
        let first = label_logprob(w, q, "A", None).unwrap();
        let second = label_logprob(w, &format!("{q}A"), "B", None).unwrap();
        assert_eq!(joint.to_bits(), (first + second).to_bits());
    }

    #[test]
    fn identity_plan_logprob_is_bit_exact() {
        let w = trained();
        let cfg = w.config;
        let context = ContextVector {
            mha: vec![vec![0.5; cfg.d_model]; cfg.n_layers],
            mlp: vec![vec![-0.25; cfg.d_model]; cfg.n_layers],
            hidden: None,
            source_count: 1,
        };
        let plan = InjectionPlan::new(
            context,
            CoefficientSet::identity(cfg.n_layers),
            InjectionProfile::standard(cfg.n_layers),
        );
        let without = label_logprob(w, "Input: 93\nLabel: ", "C", None).unwrap();
        let with = label_logprob(w, "Input: 93\nLabel: ", "C", Some(&plan)).unwrap();
        assert_eq!(without.to_bits(), with.to_bits());
    }

    #[test]
    fn empty_label_is_error() {
        let w = init_weights(&tiny_config()).unwrap();
        assert!(matches!(label_logprob(&w, "Input: x\nLabel: ", "", None), Err(CoreError::EmptyInput(_))));
    }

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                xp[i] += h;
                let mut xm = x.to_vec();
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn calibration_fixture(formula: InjectionFormula) -> (Weights, Vec<RenderedDemo>, ContextVector, InjectionProfile) {
        let w = init_weights(&tiny_config()).unwrap();
        let ds = generate_task(&tiny_task_spec(), 12, 0, 0).unwrap();
        let demos = sample_demos(&ds, 1, 4).unwrap();
        let rendered = render_calibration_demos(&demos, &Template::default(), None);
        let context = build_context_vector(&w, &demos, &Template::default()).unwrap();
        let mut profile = InjectionProfile::standard(w.config.n_layers);
        profile.formula = formula;
        (w, rendered, context, profile)
    }

    #[test]
    fn coefficient_gradients_match_fd_with_and_without_noise() {
        for gamma in [0.0, 0.001] {
            let (w, rendered, context, profile) = calibration_fixture(InjectionFormula::LinearCombo);
            let opts = CalibrationLossOpts { profile: &profile, gamma, noise_seed: 11, stream_base: 0 };
            let params = to_param_space(
                &CoefficientSet::uniform_init(w.config.n_layers, 0.1, 1.0),
                profile.formula,
            )
            .unwrap();
            let (loss, grads) =
                calibration_loss_and_grads(&w, &rendered, &context, &params, &opts).unwrap();
            assert!(loss.is_finite());
            let fd = fd_grad(
                |p| calibration_loss(&w, &rendered, &context, p, &opts).unwrap(),
                &params,
                1e-4,
            );
            for (i, (g, f)) in grads.iter().zip(&fd).enumerate() {
                let denom = g.abs().max(f.abs()).max(1e-8);
                assert!(
                    (g - f).abs() / denom <= 1e-4,
                    "gamma {gamma}: param {i}: reverse {g} vs fd {f}"
                );
            }
        }
    }

    #[test]
    fn constrained_formula_gradients_match_fd() {
        for formula in [InjectionFormula::AddOnly, InjectionFormula::ConvexScaled] {
            let (w, rendered, context, profile) = calibration_fixture(formula);
            let opts = CalibrationLossOpts { profile: &profile, gamma: 0.0, noise_seed: 1, stream_base: 0 };
            let params = to_param_space(
                &CoefficientSet::uniform_init(w.config.n_layers, 0.1, 1.0),
                formula,
            )
            .unwrap();
            let (_, grads) =
                calibration_loss_and_grads(&w, &rendered, &context, &params, &opts).unwrap();
            let fd = fd_grad(
                |p| calibration_loss(&w, &rendered, &context, p, &opts).unwrap(),
                &params,
                1e-4,
            );
            for (i, (g, f)) in grads.iter().zip(&fd).enumerate() {
                let denom = g.abs().max(f.abs()).max(1e-8);
                assert!((g - f).abs() / denom <= 1e-4, "{formula:?} param {i}: {g} vs {f}");
            }
        }
    }

    #[test]
    fn calibrate_zero_epochs_returns_init() {
        let (w, _, context, _) = calibration_fixture(InjectionFormula::LinearCombo);
        let ds = generate_task(&tiny_task_spec(), 12, 0, 0).unwrap();
        let demos = sample_demos(&ds, 1, 4).unwrap();
        let config = CalibrationConfig { epochs: 0, ..Default::default() };
        let init = CoefficientSet::uniform_init(2, 0.1, 1.0);
        let out = calibrate(&w, &demos, &Template::default(), &context, &config, &init).unwrap();
        assert_eq!(out.coefficients, init);
        assert!(out.history.is_empty());
    }

    #[test]
    fn calibrate_is_deterministic_and_leaves_weights_untouched() {
        let (w, _, context, _) = calibration_fixture(InjectionFormula::LinearCombo);
        let hash_before = w.hash_hex();
        let ds = generate_task(&tiny_task_spec(), 12, 0, 0).unwrap();
        let demos = sample_demos(&ds, 1, 4).unwrap();
        let config = CalibrationConfig { epochs: 3, seed: 5, ..Default::default() };
        let init = CoefficientSet::uniform_init(2, 0.1, 1.0);
        let a = calibrate(&w, &demos, &Template::default(), &context, &config, &init).unwrap();
        let b = calibrate(&w, &demos, &Template::default(), &context, &config, &init).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(bits(&a.coefficients.flatten()), bits(&b.coefficients.flatten()));
        assert_eq!(w.hash_hex(), hash_before);
    }

    #[test]
    fn calibrate_reduces_loss_on_trained_model() {
        let w = trained();
        let ds = generate_task(&tiny_task_spec(), 60, 0, 0).unwrap();
        let template = Template::default();
        let mut improved = 0;
        for seed in 0..5u64 {
            let demos = sample_demos(&ds, 5, seed).unwrap();
            let context = build_context_vector(w, &demos, &template).unwrap();
            let config = CalibrationConfig { seed, ..Default::default() };
            let init = config.initial_coefficients(w.config.n_layers);
            let out = calibrate(w, &demos, &template, &context, &config, &init).unwrap();
            if out.history.last().unwrap().loss < out.history.first().unwrap().loss {
                improved += 1;
            }
        }
        assert!(improved >= 4, "loss improved in only {improved}/5 seeds");
    }

    #[test]
    fn predict_singleton_and_tie_break() {
        let w = init_weights(&tiny_config()).unwrap();
        let labels = vec!["A".to_string()];
        let p = predict(&w, "Input: ab\nLabel: ", &labels, None).unwrap();
        assert_eq!(p.label, "A");

        let dup = vec!["B".to_string(), "B".to_string()];
        let p = predict(&w, "Input: ab\nLabel: ", &dup, None).unwrap();
        assert_eq!(p.index, 0);
        assert_eq!(p.logprobs[0], p.logprobs[1]);
    }

    #[test]
    fn predict_rejects_noisy_plan_at_evaluation() {
        let w = init_weights(&tiny_config()).unwrap();
        let cfg = w.config;
        let mut plan = InjectionPlan::new(
            ContextVector {
                mha: vec![vec![0.0; cfg.d_model]; cfg.n_layers],
                mlp: vec![vec![0.0; cfg.d_model]; cfg.n_layers],
                hidden: None,
                source_count: 1,
            },
            CoefficientSet::identity(cfg.n_layers),
            InjectionProfile::standard(cfg.n_layers),
        );
        plan.noise_gamma = 0.001;
        let labels = vec!["A".to_string()];
        assert!(predict(&w, "Input: x\nLabel: ", &labels, Some(&plan)).is_err());
    }

    #[test]
    fn predict_majority_on_letter_query_is_a() {
        let w = trained();
        let ds = generate_task(&tiny_task_spec(), 60, 0, 0).unwrap();
        let template = Template::default();
        let mut votes = 0;
        for seed in 0..5u64 {
            let demos = sample_demos(&ds, 5, seed).unwrap();
            let context = build_context_vector(w, &demos, &template).unwrap();
            let config = CalibrationConfig { epochs: 60, seed, ..Default::default() };
            let init = config.initial_coefficients(w.config.n_layers);
            let out = calibrate(w, &demos, &template, &context, &config, &init).unwrap();
            let plan = InjectionPlan::new(
                context,
                out.coefficients,
                InjectionProfile::standard(w.config.n_layers),
            );
            let p = predict(w, "Input: vq\nLabel: ", &ds.spec.classes, Some(&plan)).unwrap();
            if p.label == "A" {
                votes += 1;
            }
        }
        assert!(votes >= 3, "A predicted in only {votes}/5 seeds");
    }

    #[test]
    fn evaluate_oracle_and_disjoint_cases() {
        let w = init_weights(&tiny_config()).unwrap();
        let ds = generate_task(&tiny_task_spec(), 0, 10, 0).unwrap();
        let template = Template::default();
        let labels = ds.spec.classes.clone();

        // oracle: replace gold labels with the model's own predictions
        let oracle: Vec<Demonstration> = ds
            .eval_set
            .iter()
            .map(|d| {
                let q = template.render_query(&d.x);
                let p = predict(&w, &q, &labels, None).unwrap();
                Demonstration { x: d.x.clone(), y: p.label, class_index: p.index }
            })
            .collect();
        let task = EvalTask { queries: &oracle, labels: &labels, template: &template, name: "oracle" };
        let out = evaluate(&w, &task, None, None).unwrap();
        assert_eq!(out.accuracy, 1.0);

        // complement: every gold differs from the prediction
        let wrong: Vec<Demonstration> = oracle
            .iter()
            .map(|d| {
                let other = (d.class_index + 1) % labels.len();
                Demonstration { x: d.x.clone(), y: labels[other].clone(), class_index: other }
            })
            .collect();
        let task = EvalTask { queries: &wrong, labels: &labels, template: &template, name: "wrong" };
        let out = evaluate(&w, &task, None, None).unwrap();
        assert_eq!(out.accuracy, 0.0);

        // accuracy equals the mean of per-record correctness
        let recomputed = out.records.iter().filter(|r| r.pred == r.gold).count() as f64
            / out.records.len() as f64;
        assert_eq!(out.accuracy, recomputed);
    }
}
