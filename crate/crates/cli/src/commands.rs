//! Command implementations.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use i2cl_core::baselines::{
    run_icl, run_icl_plus_i2cl, run_noise_vector, run_task_vector, run_zero_shot, MethodOutcome,
};
use i2cl_core::instrument::{InjectionFormula, InjectionProfile, PositionSpec, TargetModule};
use i2cl_core::model::{
    load_weights, meta_pretrain, ModelConfig, PretrainOptions, Weights,
};
use i2cl_core::pipeline::{CalibrationConfig, EvalTask};
use i2cl_core::report::{
    append_result_row, write_loss_history, write_per_query_csv, write_pretrain_log, write_summary,
    ResultRow,
};
use i2cl_core::rng::derive_seed;
use i2cl_core::taskgen::{
    generate_task, load_task_spec, sample_demos, Dataset, SyntheticTaskSpec, TaskFamily, Template,
};
use i2cl_core::transfer::{load_registry, save_anchor, transfer_learn, Anchor};
use i2cl_core::{baselines, pipeline, transfer as transfer_mod};

use crate::args::*;
use crate::config::{parse_seed_list, KvFile};
use crate::CliError;

pub fn output_root(flag: &Option<PathBuf>) -> PathBuf {
    if let Some(p) = flag {
        return p.clone();
    }
    std::env::var_os("I2CL_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("i2cl_out"))
}

fn load_model(path: &Path) -> Result<Weights, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("model file {} does not exist", path.display())));
    }
    Ok(load_weights(path)?)
}

fn load_task(path: &Path) -> Result<SyntheticTaskSpec, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("task spec {} does not exist", path.display())));
    }
    Ok(load_task_spec(path)?)
}

/// Partition 1-based layers into near-equal thirds.
pub fn layer_preset(n_layers: usize, preset: &str) -> Option<BTreeSet<usize>> {
    let first = n_layers / 3;
    let second = (2 * n_layers) / 3;
    let range = match preset {
        "all" => 1..=n_layers,
        "early" => 1..=first,
        "middle" => (first + 1)..=second,
        "late" => (second + 1)..=n_layers,
        _ => return None,
    };
    Some(range.collect())
}

fn parse_layers(raw: &str, n_layers: usize) -> Result<BTreeSet<usize>, CliError> {
    if let Some(set) = layer_preset(n_layers, raw.trim()) {
        return Ok(set);
    }
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("bad layer list entry {s:?}")))
        })
        .collect()
}

fn parse_modules(raw: &str) -> Result<BTreeSet<TargetModule>, CliError> {
    // '+' works where commas are taken, e.g. sweep values like mha+mlp
    raw.split([',', '+'])
        .map(|s| match s.trim() {
            "mha" => Ok(TargetModule::Mha),
            "mlp" => Ok(TargetModule::Mlp),
            "hidden" => Ok(TargetModule::Hidden),
            other => Err(CliError::Config(format!("unknown module {other:?}"))),
        })
        .collect()
}

fn parse_positions(raw: &str) -> Result<PositionSpec, CliError> {
    match raw.trim() {
        "all" => Ok(PositionSpec::All),
        "first" => Ok(PositionSpec::First),
        "last" => Ok(PositionSpec::Last),
        "random" => Ok(PositionSpec::Random),
        other => Err(CliError::Config(format!("unknown position spec {other:?}"))),
    }
}

fn parse_formula(raw: &str) -> Result<InjectionFormula, CliError> {
    match raw.trim() {
        "linear" => Ok(InjectionFormula::LinearCombo),
        "add_only" => Ok(InjectionFormula::AddOnly),
        "convex_scaled" => Ok(InjectionFormula::ConvexScaled),
        other => Err(CliError::Config(format!("unknown formula {other:?}"))),
    }
}

fn build_profile(plan: &PlanArgs, kv: &KvFile, n_layers: usize) -> Result<InjectionProfile, CliError> {
    let mut profile = InjectionProfile::standard(n_layers);
    let modules = kv.resolve(&plan.modules, "modules", "mha,mlp".to_string())?;
    profile.target_modules = parse_modules(&modules)?;
    let layers = kv.resolve(&plan.layers, "layers", "all".to_string())?;
    profile.target_layers = parse_layers(&layers, n_layers)?;
    let positions = kv.resolve(&plan.positions, "positions", "all".to_string())?;
    profile.target_positions = parse_positions(&positions)?;
    let formula = kv.resolve(&plan.formula, "formula", "linear".to_string())?;
    profile.formula = parse_formula(&formula)?;
    Ok(profile)
}

fn build_calibration(
    calib: &CalibArgs,
    plan: &PlanArgs,
    kv: &KvFile,
    n_layers: usize,
    seed: u64,
) -> Result<CalibrationConfig, CliError> {
    let defaults = CalibrationConfig::default();
    let config = CalibrationConfig {
        epochs: kv.resolve(&calib.epochs, "epochs", defaults.epochs)?,
        lr_start: kv.resolve(&calib.lr_start, "lr_start", defaults.lr_start)?,
        lr_end: kv.resolve(&calib.lr_end, "lr_end", defaults.lr_end)?,
        weight_decay: kv.resolve(&calib.weight_decay, "weight_decay", defaults.weight_decay)?,
        gamma: kv.resolve(&plan.gamma, "gamma", defaults.gamma)?,
        init_lambda: kv.resolve(&calib.init_lambda, "init_lambda", defaults.init_lambda)?,
        init_beta: kv.resolve(&calib.init_beta, "init_beta", defaults.init_beta)?,
        seed,
        profile: Some(build_profile(plan, kv, n_layers)?),
        context_prefix: None,
    };
    config.validate()?;
    Ok(config)
}

fn meta_pairs(extra: &[(&str, String)], weights: Option<&Weights>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> =
        extra.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    if let Some(w) = weights {
        out.push(("weights_hash".into(), w.hash_hex()));
        out.push((
            "model".into(),
            format!(
                "L={} D={} H={} d_mlp={} V={} T_max={}",
                w.config.n_layers,
                w.config.d_model,
                w.config.n_heads,
                w.config.d_mlp,
                w.config.vocab_size,
                w.config.max_seq
            ),
        ));
    }
    out
}

pub fn cmd_pretrain(args: &PretrainArgs) -> Result<(), CliError> {
    let kv = KvFile::load(args.config.as_deref())?;
    let out: PathBuf = kv.require(&args.out, "out")?;
    let d_model = kv.resolve(&args.d_model, "d_model", 48)?;
    let config = ModelConfig {
        n_layers: kv.resolve(&args.layers, "layers", 3)?,
        d_model,
        n_heads: kv.resolve(&args.heads, "heads", 4)?,
        d_mlp: kv.resolve(&args.d_mlp, "d_mlp", 4 * d_model)?,
        vocab_size: kv.resolve(&args.vocab, "vocab", 97)?,
        max_seq: kv.resolve(&args.max_seq, "max_seq", 384)?,
        seed: kv.resolve(&args.seed, "seed", 7)?,
    };
    config.validate()?;
    let mut family = TaskFamily::new(
        kv.resolve(&args.family_seed, "family_seed", 11)?,
        kv.resolve(&args.canonical_bias, "canonical_bias", 0.25)?,
    );
    family.min_len = kv.resolve(&args.min_pattern_len, "min_pattern_len", 3)?;
    family.max_len = kv.resolve(&args.max_pattern_len, "max_pattern_len", 6)?;
    let defaults = PretrainOptions::default();
    let opts = PretrainOptions {
        steps: kv.resolve(&args.steps, "steps", 2000)?,
        batch_size: kv.resolve(&args.batch, "batch", defaults.batch_size)?,
        lr_start: kv.resolve(&args.lr_start, "lr_start", defaults.lr_start)?,
        lr_end: kv.resolve(&args.lr_end, "lr_end", defaults.lr_end)?,
        weight_decay: kv.resolve(&args.weight_decay, "weight_decay", defaults.weight_decay)?,
        min_demos: kv.resolve(&args.min_demos, "min_demos", defaults.min_demos)?,
        max_demos: kv.resolve(&args.max_demos, "max_demos", 17)?,
        out_path: Some(out.clone()),
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CliError::Config(e.to_string()))?;
        }
    }
    let (weights, log) = meta_pretrain(&config, &family, &opts)?;
    let meta = meta_pairs(
        &[
            ("family_seed", family.family_seed.to_string()),
            ("canonical_bias", family.canonical_bias.to_string()),
            ("steps", opts.steps.to_string()),
            ("batch", opts.batch_size.to_string()),
        ],
        Some(&weights),
    );
    write_pretrain_log(&out.with_extension("loss.csv"), &log, &meta)?;
    println!(
        "pretrained {} steps -> {} (hash {})",
        opts.steps,
        out.display(),
        &weights.hash_hex()[..12]
    );
    Ok(())
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<(), CliError> {
    let kv = KvFile::load(args.config.as_deref())?;
    let model_path: PathBuf = kv.require(&args.model, "model")?;
    let task_path: PathBuf = kv.require(&args.task, "task")?;
    let anchor_dir: PathBuf = kv.require(&args.out_anchor, "out_anchor")?;
    let seed = kv.resolve(&args.seed, "seed", 0)?;
    let demos_per_class = kv.resolve(&args.demos_per_class, "demos_per_class", 5)?;
    let train_pool = kv.resolve(&args.train_pool, "train_pool", 120)?;

    let weights = load_model(&model_path)?;
    let spec = load_task(&task_path)?;
    let dataset = generate_task(&spec, train_pool, 0, 0)?;
    let template = Template::default();
    let demos = sample_demos(&dataset, demos_per_class, seed)?;
    let calib = build_calibration(&args.calib, &args.plan, &kv, weights.config.n_layers, seed)?;

    let context = pipeline::build_context_vector(&weights, &demos, &template)?;
    let init = calib.initial_coefficients(weights.config.n_layers);
    let outcome = pipeline::calibrate(&weights, &demos, &template, &context, &calib, &init)?;

    let anchor = Anchor { task_name: spec.name.clone(), context, coefficients: outcome.coefficients };
    save_anchor(&anchor_dir, &anchor, weights.config.d_model, seed, &weights.hash_hex())?;
    let meta = meta_pairs(
        &[
            ("task", spec.name.clone()),
            ("seed", seed.to_string()),
            ("demos_per_class", demos_per_class.to_string()),
            ("epochs", calib.epochs.to_string()),
            ("gamma", calib.gamma.to_string()),
        ],
        Some(&weights),
    );
    write_loss_history(&anchor_dir.join("calibration_loss.csv"), &outcome.history, &meta)?;
    println!("anchor for task {:?} written to {}", spec.name, anchor_dir.display());
    Ok(())
}

pub struct ResolvedEval {
    pub weights: Weights,
    pub spec: SyntheticTaskSpec,
    pub dataset: Dataset,
    pub template: Template,
    pub method: String,
    pub seeds: Vec<u64>,
    pub demos_per_class: usize,
    pub out_dir: PathBuf,
    pub calib_args: CalibArgs,
    pub plan_args: PlanArgs,
    pub kv_path: Option<PathBuf>,
}

pub fn resolve_eval(args: &EvalArgs) -> Result<(ResolvedEval, KvFile), CliError> {
    let kv = KvFile::load(args.config.as_deref())?;
    let model_path: PathBuf = kv.require(&args.model, "model")?;
    let task_path: PathBuf = kv.require(&args.task, "task")?;
    let method: String = kv.require(&args.method, "method")?;
    let seeds = parse_seed_list(&kv.resolve(&args.seeds, "seeds", "0".to_string())?)?;
    let demos_per_class = kv.resolve(&args.demos_per_class, "demos_per_class", 5)?;
    let eval_size = kv.resolve(&args.eval_size, "eval_size", 200)?;
    let train_pool = kv.resolve(&args.train_pool, "train_pool", 120)?;
    let holdout = kv.resolve(&args.holdout, "holdout", 32)?;

    let weights = load_model(&model_path)?;
    let spec = load_task(&task_path)?;
    let dataset = generate_task(&spec, train_pool, eval_size, holdout)?;
    let out_dir = output_root(&args.out);
    fs::create_dir_all(&out_dir).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((
        ResolvedEval {
            weights,
            spec,
            dataset,
            template: Template::default(),
            method,
            seeds,
            demos_per_class,
            out_dir,
            calib_args: args.calib.clone(),
            plan_args: args.plan.clone(),
            kv_path: args.config.clone(),
        },
        kv,
    ))
}

pub struct MethodRun {
    pub outcome: MethodOutcome,
    pub chosen_layer: Option<usize>,
}

pub fn run_method(
    resolved: &ResolvedEval,
    kv: &KvFile,
    method: &str,
    seed: u64,
) -> Result<MethodRun, CliError> {
    let weights = &resolved.weights;
    let dataset = &resolved.dataset;
    let template = &resolved.template;
    let labels = dataset.spec.classes.clone();
    let task = EvalTask {
        queries: &dataset.eval_set,
        labels: &labels,
        template,
        name: &dataset.spec.name,
    };
    let calib =
        build_calibration(&resolved.calib_args, &resolved.plan_args, kv, weights.config.n_layers, seed)?;
    let run = match method {
        "zero_shot" => MethodRun { outcome: run_zero_shot(weights, &task)?, chosen_layer: None },
        "icl" => {
            let demos = sample_demos(dataset, resolved.demos_per_class, seed)?;
            MethodRun { outcome: run_icl(weights, &demos, template, &task)?, chosen_layer: None }
        }
        "i2cl" => {
            let demos = sample_demos(dataset, resolved.demos_per_class, seed)?;
            let run = baselines::run_i2cl(weights, &demos, template, &task, &calib)?;
            MethodRun { outcome: run.outcome, chosen_layer: None }
        }
        "icl_plus_i2cl" => {
            let demos = sample_demos(dataset, resolved.demos_per_class, seed)?;
            let run = run_icl_plus_i2cl(weights, &demos, template, &task, &calib)?;
            MethodRun { outcome: run.outcome, chosen_layer: None }
        }
        "noise_vector" => {
            let demos = sample_demos(dataset, resolved.demos_per_class, seed)?;
            let vector_seed = derive_seed(seed, 0x4e01);
            let run = run_noise_vector(weights, &demos, template, &task, &calib, vector_seed)?;
            MethodRun { outcome: run.outcome, chosen_layer: None }
        }
        "task_vector" => {
            let demos = sample_demos(dataset, resolved.demos_per_class, seed)?;
            let run = run_task_vector(
                weights,
                &demos,
                template,
                &dataset.spec,
                &dataset.holdout,
                &task,
                derive_seed(seed, 0xd07),
            )?;
            MethodRun { outcome: run.outcome, chosen_layer: Some(run.chosen_layer) }
        }
        other => return Err(CliError::Config(format!("unknown method {other:?}"))),
    };
    Ok(run)
}

fn method_meta(resolved: &ResolvedEval) -> Vec<(String, String)> {
    let mut pairs = vec![
        ("task", resolved.spec.name.clone()),
        ("demos_per_class", resolved.demos_per_class.to_string()),
        ("eval_size", resolved.dataset.eval_set.len().to_string()),
    ];
    if let Some(path) = &resolved.kv_path {
        pairs.push(("config_file", path.display().to_string()));
    }
    meta_pairs(
        &pairs.iter().map(|(k, v)| (*k, v.clone())).collect::<Vec<_>>(),
        Some(&resolved.weights),
    )
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (resolved, kv) = resolve_eval(args)?;
    let results_path = resolved.out_dir.join("results.csv");
    let meta = method_meta(&resolved);
    let mut rows = Vec::new();
    for &seed in &resolved.seeds {
        let run = run_method(&resolved, &kv, &resolved.method, seed)?;
        let row = ResultRow {
            method: resolved.method.clone(),
            task: resolved.spec.name.clone(),
            seed,
            accuracy: run.outcome.eval.accuracy,
            tokens_per_query: run.outcome.tokens_per_query,
            cached_scalars: run.outcome.cached_scalars,
        };
        append_result_row(&results_path, &row, &meta)?;
        let per_query = resolved.out_dir.join(format!(
            "queries_{}_{}_{}.csv",
            resolved.method, resolved.spec.name, seed
        ));
        write_per_query_csv(&per_query, &resolved.dataset.spec.classes, &run.outcome.eval.records, &meta)?;
        if let Some(layer) = run.chosen_layer {
            println!("seed {seed}: accuracy {:.4} (layer {layer})", run.outcome.eval.accuracy);
        } else {
            println!("seed {seed}: accuracy {:.4}", run.outcome.eval.accuracy);
        }
        rows.push(row);
    }
    write_summary(&resolved.out_dir.join("summary.csv"), &rows, &meta)?;
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let (resolved, kv) = resolve_eval(&args.eval)?;
    let axis: String = kv.require(&args.axis, "axis")?;
    let values_raw: String = kv.require(&args.values, "values")?;
    let values: Vec<String> =
        values_raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Config("empty sweep value list".into()));
    }

    let results_path = resolved.out_dir.join("results.csv");
    let meta = method_meta(&resolved);
    let mut rows = Vec::new();
    for value in &values {
        // each grid point evaluates a modified configuration
        let mut point = resolved_clone(&resolved);
        match axis.as_str() {
            "demos" => {
                point.demos_per_class = value
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad demo count {value:?}")))?;
            }
            "gamma" => point.plan_args.gamma = Some(
                value.parse().map_err(|_| CliError::Config(format!("bad gamma {value:?}")))?,
            ),
            "layers" => point.plan_args.layers = Some(value.clone()),
            "modules" => point.plan_args.modules = Some(value.clone()),
            "positions" => point.plan_args.positions = Some(value.clone()),
            "formula" => point.plan_args.formula = Some(value.clone()),
            other => return Err(CliError::Config(format!("unknown sweep axis {other:?}"))),
        }
        let tag = format!("{}[{}={}]", resolved.method, axis, value);
        for &seed in &resolved.seeds {
            let run = run_method(&point, &kv, &resolved.method, seed)?;
            let row = ResultRow {
                method: tag.clone(),
                task: resolved.spec.name.clone(),
                seed,
                accuracy: run.outcome.eval.accuracy,
                tokens_per_query: run.outcome.tokens_per_query,
                cached_scalars: run.outcome.cached_scalars,
            };
            append_result_row(&results_path, &row, &meta)?;
            println!("{tag} seed {seed}: accuracy {:.4}", run.outcome.eval.accuracy);
            rows.push(row);
        }
    }
    write_summary(&resolved.out_dir.join("summary.csv"), &rows, &meta)?;
    Ok(())
}

fn resolved_clone(r: &ResolvedEval) -> ResolvedEval {
    ResolvedEval {
        weights: r.weights.clone(),
        spec: r.spec.clone(),
        dataset: r.dataset.clone(),
        template: r.template.clone(),
        method: r.method.clone(),
        seeds: r.seeds.clone(),
        demos_per_class: r.demos_per_class,
        out_dir: r.out_dir.clone(),
        calib_args: r.calib_args.clone(),
        plan_args: r.plan_args.clone(),
        kv_path: r.kv_path.clone(),
    }
}

pub fn cmd_transfer(args: &TransferArgs) -> Result<(), CliError> {
    let kv = KvFile::load(args.config.as_deref())?;
    let model_path: PathBuf = kv.require(&args.model, "model")?;
    let task_path: PathBuf = kv.require(&args.task, "task")?;
    let anchors_dir: PathBuf = kv.require(&args.anchors, "anchors")?;
    let h = kv.resolve(&args.h, "h", 0.8)?;
    let tau = kv.resolve(&args.tau, "tau", 0.5)?;
    let seeds = parse_seed_list(&kv.resolve(&args.seeds, "seeds", "0".to_string())?)?;
    let demos_per_class = kv.resolve(&args.demos_per_class, "demos_per_class", 5)?;
    let eval_size = kv.resolve(&args.eval_size, "eval_size", 200)?;
    let train_pool = kv.resolve(&args.train_pool, "train_pool", 120)?;

    let weights = load_model(&model_path)?;
    let spec = load_task(&task_path)?;
    if !anchors_dir.exists() {
        return Err(CliError::Config(format!("anchor registry {} does not exist", anchors_dir.display())));
    }
    let anchors = load_registry(&anchors_dir, Some(&weights.hash_hex()))?;
    let dataset = generate_task(&spec, train_pool, eval_size, 0)?;
    let template = Template::default();
    let labels = dataset.spec.classes.clone();
    let out_dir = output_root(&args.out);
    fs::create_dir_all(&out_dir).map_err(|e| CliError::Config(e.to_string()))?;
    let results_path = out_dir.join("results.csv");
    let meta = meta_pairs(
        &[("task", spec.name.clone()), ("h", h.to_string()), ("tau", tau.to_string())],
        Some(&weights),
    );

    let mut detail = String::from("seed,anchor,similarity,probability\n");
    for &seed in &seeds {
        let calib = build_calibration(&args.calib, &PlanArgs {
            modules: None,
            layers: None,
            positions: None,
            formula: None,
            gamma: None,
        }, &kv, weights.config.n_layers, seed)?;
        let demos = sample_demos(&dataset, demos_per_class, seed)?;
        let outcome = transfer_learn(&weights, &anchors, &demos, &template, h, tau, &calib)?;

        let task = EvalTask { queries: &dataset.eval_set, labels: &labels, template: &template, name: &spec.name };
        let profile = calib.profile.clone().unwrap_or_else(|| InjectionProfile::standard(weights.config.n_layers));
        let eval_with = pipeline::evaluate(
            &weights,
            &task,
            Some(&i2cl_core::InjectionPlan::new(
                outcome.context.clone(),
                outcome.coefficients.clone(),
                profile.clone(),
            )),
            None,
        )?;
        let eval_without = pipeline::evaluate(
            &weights,
            &task,
            Some(&i2cl_core::InjectionPlan::new(
                outcome.stage_one_context.clone(),
                outcome.stage_one.coefficients.clone(),
                profile,
            )),
            None,
        )?;
        for (method, eval) in [("i2cl_transfer", &eval_with), ("i2cl_no_transfer", &eval_without)] {
            append_result_row(
                &results_path,
                &ResultRow {
                    method: method.to_string(),
                    task: spec.name.clone(),
                    seed,
                    accuracy: eval.accuracy,
                    tokens_per_query: eval.mean_tokens,
                    cached_scalars: i2cl_core::costs::i2cl_cached_scalars(
                        weights.config.d_model,
                        weights.config.n_layers,
                    ),
                },
                &meta,
            )?;
        }
        if let Some(blend) = &outcome.blend {
            for ((idx, sim), prob) in blend
                .retained
                .iter()
                .zip(&blend.similarities)
                .map(|(i, s)| (*i, *s))
                .zip(&blend.probabilities)
            {
                detail.push_str(&format!("{seed},{},{sim},{prob}\n", anchors[idx].task_name));
            }
        }
        println!(
            "seed {seed}: transfer {:.4} vs plain {:.4} ({} anchors retained)",
            eval_with.accuracy,
            eval_without.accuracy,
            outcome.blend.as_ref().map(|b| b.retained.len()).unwrap_or(0)
        );
    }
    fs::write(out_dir.join("transfer_detail.csv"), detail).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(())
}

pub fn cmd_export(args: &ExportArgs) -> Result<(), CliError> {
    let anchors_dir =
        args.anchors.clone().ok_or_else(|| CliError::Config("missing --anchors".into()))?;
    if !anchors_dir.exists() {
        return Err(CliError::Config(format!("anchor registry {} does not exist", anchors_dir.display())));
    }
    let anchors = load_registry(&anchors_dir, None)?;
    if anchors.is_empty() {
        return Err(CliError::Config("anchor registry is empty".into()));
    }
    let out_dir = output_root(&args.out);
    fs::create_dir_all(&out_dir).map_err(|e| CliError::Config(e.to_string()))?;

    // flattened coefficient task-ids
    let coef_len = 4 * anchors[0].coefficients.n_layers();
    let mut coef_csv = String::from("task");
    for i in 0..coef_len {
        coef_csv.push_str(&format!(",c{i}"));
    }
    coef_csv.push('\n');
    for anchor in &anchors {
        coef_csv.push_str(&anchor.task_name);
        for v in transfer_mod::flatten(&anchor.coefficients) {
            coef_csv.push_str(&format!(",{v}"));
        }
        coef_csv.push('\n');
    }
    fs::write(out_dir.join("coefficients.csv"), coef_csv).map_err(|e| CliError::Config(e.to_string()))?;

    // raw context vectors, one row per (task, layer, module)
    let dim = anchors[0].context.dim();
    let mut ctx_csv = String::from("task,layer,module");
    for i in 0..dim {
        ctx_csv.push_str(&format!(",v{i}"));
    }
    ctx_csv.push('\n');
    for anchor in &anchors {
        for (module, vecs) in [("mha", &anchor.context.mha), ("mlp", &anchor.context.mlp)] {
            for (l, row) in vecs.iter().enumerate() {
                ctx_csv.push_str(&format!("{},{},{module}", anchor.task_name, l + 1));
                for v in row {
                    ctx_csv.push_str(&format!(",{v}"));
                }
                ctx_csv.push('\n');
            }
        }
    }
    fs::write(out_dir.join("context_vectors.csv"), ctx_csv).map_err(|e| CliError::Config(e.to_string()))?;

    // pairwise cosine matrix over coefficient task-ids
    let mut cos_csv = String::from("task");
    for anchor in &anchors {
        cos_csv.push_str(&format!(",{}", anchor.task_name));
    }
    cos_csv.push('\n');
    for a in &anchors {
        cos_csv.push_str(&a.task_name);
        for b in &anchors {
            let c = transfer_mod::cosine(
                &transfer_mod::flatten(&a.coefficients),
                &transfer_mod::flatten(&b.coefficients),
            )?;
            cos_csv.push_str(&format!(",{c}"));
        }
        cos_csv.push('\n');
    }
    fs::write(out_dir.join("cosine_matrix.csv"), cos_csv).map_err(|e| CliError::Config(e.to_string()))?;
    println!("exported {} anchors to {}", anchors.len(), out_dir.display());
    Ok(())
}
