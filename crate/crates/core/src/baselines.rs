//! Reference methods sharing the evaluation harness: zero-shot, few-shot
//! concatenation, concatenation+injection combined mode, noise-vector and
//! task-vector.
//!
//! Every method funnels through [`crate::pipeline::evaluate`]; the audit
//! record captures the executed plan parameters so tests can verify that two
//! methods differ only in their declared deltas.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::costs::{forward_flops, i2cl_cached_scalars, icl_kv_cached_scalars};
use crate::error::{CoreError, Result};
use crate::instrument::{
    CoefficientSet, ContextVector, InjectionFormula, InjectionPlan, InjectionProfile,
    PositionSpec, TargetModule, TracePoint, TracePosition, TraceRequest,
};
use crate::model::{forward, ForwardRun, Tokenizer, Weights};
use crate::pipeline::{
    build_context_vector, calibrate, evaluate, CalibrationConfig, CalibrationOutcome, EvalOutcome,
    EvalTask,
};
use crate::rng::{stream_rng, STREAM_NOISE_VECTOR};
use crate::taskgen::{Demonstration, SyntheticTaskSpec, Template};

/// Where the context vector came from; the only delta between the injection
/// method and its noise-vector control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorSource {
    Demonstrations,
    Noise { seed: u64 },
}

/// Executed plan parameters shared by the injection-style methods.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileAudit {
    pub formula: InjectionFormula,
    pub target_modules: Vec<TargetModule>,
    pub target_layers: Vec<usize>,
    pub target_positions: PositionSpec,
    pub calibration_gamma: f64,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub init_lambda: f64,
    pub init_beta: f64,
    pub demos_in_context: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunAudit {
    pub method: &'static str,
    pub vector_source: VectorSource,
    pub profile: ProfileAudit,
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub eval: EvalOutcome,
    /// Mean accounting tokens per query.
    pub tokens_per_query: f64,
    pub cached_scalars: u64,
    pub audit: Option<RunAudit>,
}

fn profile_audit(profile: &InjectionProfile, calib: &CalibrationConfig, demos_in_context: bool) -> ProfileAudit {
    ProfileAudit {
        formula: profile.formula,
        target_modules: profile.target_modules.iter().copied().collect(),
        target_layers: profile.target_layers.iter().copied().collect(),
        target_positions: profile.target_positions,
        calibration_gamma: calib.gamma,
        epochs: calib.epochs,
        lr_start: calib.lr_start,
        lr_end: calib.lr_end,
        weight_decay: calib.weight_decay,
        init_lambda: calib.init_lambda,
        init_beta: calib.init_beta,
        demos_in_context,
    }
}

/// Plain inference, no plan.
pub fn run_zero_shot(weights: &Weights, task: &EvalTask) -> Result<MethodOutcome> {
    let eval = evaluate(weights, task, None, None)?;
    let tokens_per_query = eval.mean_tokens;
    Ok(MethodOutcome { eval, tokens_per_query, cached_scalars: 0, audit: None })
}

/// Demonstrations rendered and joined by newline, prefixed to each query.
pub fn icl_prefix(demos: &[Demonstration], template: &Template) -> String {
    let mut prefix = String::new();
    for demo in demos {
        prefix.push_str(&template.render(demo));
        prefix.push('\n');
    }
    prefix
}

/// Few-shot concatenation. The KV counter records the demonstration tokens
/// retained between queries.
pub fn run_icl(
    weights: &Weights,
    demos: &[Demonstration],
    template: &Template,
    task: &EvalTask,
) -> Result<MethodOutcome> {
    let prefix = icl_prefix(demos, template);
    let m_tokens = Tokenizer::new().encode(&prefix)?.len();
    let eval = evaluate(weights, task, None, Some(&prefix))?;
    let tokens_per_query = eval.mean_tokens;
    let cfg = &weights.config;
    Ok(MethodOutcome {
        eval,
        tokens_per_query,
        cached_scalars: icl_kv_cached_scalars(m_tokens, cfg.d_model, cfg.n_layers),
        audit: None,
    })
}

/// The full injection pipeline with a pluggable vector source; the method
/// and its noise-vector control share this exact code path.
pub struct I2clRun {
    pub outcome: MethodOutcome,
    pub context: ContextVector,
    pub coefficients: CoefficientSet,
    pub calibration: CalibrationOutcome,
}

fn noise_context(weights: &Weights, seed: u64) -> ContextVector {
    let cfg = &weights.config;
    let mut rng = stream_rng(seed, STREAM_NOISE_VECTOR);
    let mut component = || -> Vec<Vec<f64>> {
        (0..cfg.n_layers)
            .map(|_| (0..cfg.d_model).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    };
    ContextVector { mha: component(), mlp: component(), hidden: None, source_count: 1 }
}

pub fn i2cl_pipeline(
    weights: &Weights,
    demos: &[Demonstration],
    template: &Template,
    source: VectorSource,
    calib: &CalibrationConfig,
    task: &EvalTask,
) -> Result<I2clRun> {
    let n_layers = weights.config.n_layers;
    let context = match source {
        VectorSource::Demonstrations => build_context_vector(weights, demos, template)?,
        VectorSource::Noise { seed } => noise_context(weights, seed),
    };
    let init = calib.initial_coefficients(n_layers);
    let calibration = calibrate(weights, demos, template, &context, calib, &init)?;
    let profile = calib.profile.clone().unwrap_or_else(|| InjectionProfile::standard(n_layers));
    let plan = InjectionPlan {
        context: context.clone(),
        coefficients: calibration.coefficients.clone(),
        profile: profile.clone(),
        noise_gamma: 0.0,
        noise_seed: calib.seed,
    };
    let eval = evaluate(weights, task, Some(&plan), calib.context_prefix.as_deref())?;
    let tokens_per_query = eval.mean_tokens;
    let method: &'static str =
        if matches!(source, VectorSource::Noise { .. }) { "noise_vector" } else { "i2cl" };
    let cached = if calib.context_prefix.is_some() {
        let m = Tokenizer::new().encode(calib.context_prefix.as_deref().unwrap())?.len();
        icl_kv_cached_scalars(m, weights.config.d_model, n_layers)
            + i2cl_cached_scalars(weights.config.d_model, n_layers)
    } else {
        i2cl_cached_scalars(weights.config.d_model, n_layers)
    };
    let audit = RunAudit {
        method,
        vector_source: source,
        profile: profile_audit(&profile, calib, calib.context_prefix.is_some()),
    };
    Ok(I2clRun {
        outcome: MethodOutcome { eval, tokens_per_query, cached_scalars: cached, audit: Some(audit) },
        context,
        coefficients: calibration.coefficients.clone(),
        calibration,
    })
}

pub fn run_i2cl(
    weights: &Weights,
    demos: &[Demonstration],
    template: &Template,
    task: &EvalTask,
    calib: &CalibrationConfig,
) -> Result<I2clRun> {
    i2cl_pipeline(weights, demos, template, VectorSource::Demonstrations, calib, task)
}

/// Context vector replaced by unit Gaussian noise; everything else identical.
pub fn run_noise_vector(
    weights: &Weights,
    demos: &[Demonstration],
    template: &Template,
    task: &EvalTask,
    calib: &CalibrationConfig,
    vector_seed: u64,
) -> Result<I2clRun> {
    i2cl_pipeline(weights, demos, template, VectorSource::Noise { seed: vector_seed }, calib, task)
}

/// Demonstration tokens stay in context through both calibration and
/// inference, with injection applied on top.
pub fn run_icl_plus_i2cl(
    weights: &Weights,
    demos: &[Demonstration],
    template: &Template,
    task: &EvalTask,
    calib: &CalibrationConfig,
) -> Result<I2clRun> {
    let mut combined = calib.clone();
    combined.context_prefix = Some(icl_prefix(demos, template));
    i2cl_pipeline(weights, demos, template, VectorSource::Demonstrations, &combined, task)
}

/// Task-vector baseline: extract the end hidden state of a demonstration
/// prompt, pick the replacement layer on a holdout set, evaluate with the
/// query's hidden state replaced at that layer.
pub struct TaskVectorRun {
    pub outcome: MethodOutcome,
    pub chosen_layer: usize,
    pub holdout_accuracy: Vec<f64>,
}

pub fn run_task_vector(
    weights: &Weights,
    demos: &[Demonstration],
    template: &Template,
    spec: &SyntheticTaskSpec,
    holdout: &[Demonstration],
    task: &EvalTask,
    dummy_seed: u64,
) -> Result<TaskVectorRun> {
    if holdout.is_empty() {
        return Err(CoreError::EmptyInput("holdout"));
    }
    for h in holdout {
        if task.queries.iter().any(|q| q.x == h.x) {
            return Err(CoreError::HoldoutOverlap("eval"));
        }
        if demos.iter().any(|d| d.x == h.x) {
            return Err(CoreError::HoldoutOverlap("demonstration"));
        }
    }
    let cfg = &weights.config;
    let n_layers = cfg.n_layers;

    // demonstration prompt plus a dummy query drawn from the task's query
    // distribution; the dummy label is excluded
    let mut rng = stream_rng(dummy_seed, STREAM_NOISE_VECTOR);
    let dummy_class = rng.gen_range(0..spec.classes.len());
    let dummy_x = spec.sample_pattern(dummy_class, &mut rng);
    let prompt = format!("{}{}", icl_prefix(demos, template), template.render_query(&dummy_x));
    let tokens = Tokenizer::new().encode(&prompt)?;

    let request = TraceRequest::end_capture(n_layers, true);
    let run = ForwardRun { trace: Some(&request), ..Default::default() };
    let out = forward(weights, &tokens, &run)?;
    let hidden_states: Vec<Vec<f64>> = (1..=n_layers)
        .map(|layer| {
            out.trace
                .get(&TracePoint { layer, module: TargetModule::Hidden, position: TracePosition::End })
                .cloned()
                .ok_or_else(|| CoreError::MissingCapture(format!("hidden layer {layer}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let plan_for_layer = |layer: usize| -> InjectionPlan {
        let d = cfg.d_model;
        let mut hidden = vec![vec![0.0; d]; n_layers];
        hidden[layer - 1] = hidden_states[layer - 1].clone();
        let mut coefficients = CoefficientSet::identity(n_layers);
        // replacement: λ = 1, β = 0 at the chosen layer (hidden rides the
        // attention coefficient slots)
        coefficients.lambda_attn[layer - 1] = 1.0;
        coefficients.beta_attn[layer - 1] = 0.0;
        let profile = InjectionProfile {
            target_modules: [TargetModule::Hidden].into_iter().collect(),
            target_layers: [layer].into_iter().collect(),
            target_positions: PositionSpec::Last,
            formula: InjectionFormula::LinearCombo,
        };
        InjectionPlan {
            context: ContextVector {
                mha: vec![vec![0.0; d]; n_layers],
                mlp: vec![vec![0.0; d]; n_layers],
                hidden: Some(hidden),
                source_count: 1,
            },
            coefficients,
            profile,
            noise_gamma: 0.0,
            noise_seed: dummy_seed,
        }
    };

    let holdout_task =
        EvalTask { queries: holdout, labels: task.labels, template: task.template, name: task.name };
    let mut holdout_accuracy = Vec::with_capacity(n_layers);
    let mut best_layer = 1;
    let mut best_acc = f64::NEG_INFINITY;
    for layer in 1..=n_layers {
        let plan = plan_for_layer(layer);
        let acc = evaluate(weights, &holdout_task, Some(&plan), None)?.accuracy;
        holdout_accuracy.push(acc);
        if acc > best_acc {
            best_acc = acc;
            best_layer = layer;
        }
    }

    let plan = plan_for_layer(best_layer);
    let eval = evaluate(weights, task, Some(&plan), None)?;
    let tokens_per_query = eval.mean_tokens;
    Ok(TaskVectorRun {
        outcome: MethodOutcome {
            eval,
            tokens_per_query,
            // a single hidden-state vector is retained between queries
            cached_scalars: cfg.d_model as u64,
            audit: None,
        },
        chosen_layer: best_layer,
        holdout_accuracy,
    })
}

/// Accounting FLOPs for a query processed with a retained prefix of
/// `m_tokens`: the prefix cost is paid once, queries extend it.
pub fn query_flops_with_prefix(weights: &Weights, m_tokens: usize, query_tokens: usize) -> u64 {
    forward_flops(&weights.config, m_tokens + query_tokens) - forward_flops(&weights.config, m_tokens)
}
