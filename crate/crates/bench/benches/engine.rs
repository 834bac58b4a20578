//! Engine benchmarks: forward passes with and without injection, the
//! demonstration-prefix cost that injection removes, and one calibration
//! epoch.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use i2cl_core::instrument::{CoefficientSet, ContextVector, InjectionPlan, InjectionProfile};
use i2cl_core::model::{forward, init_weights, ForwardRun, ModelConfig, Tokenizer, Weights};
use i2cl_core::pipeline::{
    build_context_vector, calibration_loss_and_grads, render_calibration_demos,
    CalibrationLossOpts,
};
use i2cl_core::taskgen::{generate_task, sample_demos, SyntheticTaskSpec, Template};

fn bench_config() -> ModelConfig {
    ModelConfig { n_layers: 3, d_model: 32, n_heads: 4, d_mlp: 128, vocab_size: 97, max_seq: 384, seed: 7 }
}

fn setup() -> (Weights, Vec<u32>, Vec<u32>, InjectionPlan) {
    let weights = init_weights(&bench_config()).unwrap();
    let tok = Tokenizer::new();
    let query = tok.encode("Input: qzpfhw\nLabel: ").unwrap();
    let spec = SyntheticTaskSpec { min_len: 3, max_len: 6, seed: 5, ..Default::default() };
    let ds = generate_task(&spec, 60, 0, 0).unwrap();
    let template = Template::default();
    let demos = sample_demos(&ds, 5, 0).unwrap();
    let mut prompt = String::new();
    for d in &demos {
        prompt.push_str(&template.render(d));
        prompt.push('\n');
    }
    prompt.push_str("Input: qzpfhw\nLabel: ");
    let icl_tokens = tok.encode(&prompt).unwrap();
    let context = build_context_vector(&weights, &demos, &template).unwrap();
    let plan = InjectionPlan::new(
        context,
        CoefficientSet::uniform_init(3, 0.1, 1.0),
        InjectionProfile::standard(3),
    );
    (weights, query, icl_tokens, plan)
}

fn bench_forward(c: &mut Criterion) {
    let (weights, query, icl_tokens, plan) = setup();
    let mut group = c.benchmark_group("forward");
    group.bench_function("zero_shot_query", |b| {
        b.iter(|| forward(&weights, black_box(&query), &ForwardRun::default()).unwrap())
    });
    group.bench_function("injected_query", |b| {
        let run = ForwardRun { plan: Some(&plan), ..Default::default() };
        b.iter(|| forward(&weights, black_box(&query), &run).unwrap())
    });
    group.bench_function("icl_prompt_15_demos", |b| {
        b.iter(|| forward(&weights, black_box(&icl_tokens), &ForwardRun::default()).unwrap())
    });
    group.finish();
}

fn bench_calibration_epoch(c: &mut Criterion) {
    let (weights, ..) = setup();
    let spec = SyntheticTaskSpec { min_len: 3, max_len: 6, seed: 5, ..Default::default() };
    let ds = generate_task(&spec, 60, 0, 0).unwrap();
    let template = Template::default();
    let demos = sample_demos(&ds, 5, 0).unwrap();
    let context = build_context_vector(&weights, &demos, &template).unwrap();
    let rendered = render_calibration_demos(&demos, &template, None);
    let profile = InjectionProfile::standard(3);
    let params = CoefficientSet::uniform_init(3, 0.1, 1.0).flatten();
    c.bench_function("calibration_epoch_15_demos", |b| {
        b.iter(|| {
            let opts = CalibrationLossOpts {
                profile: &profile,
                gamma: 0.001,
                noise_seed: 1,
                stream_base: 0,
            };
            calibration_loss_and_grads(&weights, &rendered, &context, black_box(&params), &opts)
                .unwrap()
        })
    });
}

fn bench_context_vectorization(c: &mut Criterion) {
    let (weights, ..) = setup();
    let spec = SyntheticTaskSpec { min_len: 3, max_len: 6, seed: 5, ..Default::default() };
    let ds = generate_task(&spec, 60, 0, 0).unwrap();
    let template = Template::default();
    let demos = sample_demos(&ds, 5, 0).unwrap();
    c.bench_function("vectorize_15_demos", |b| {
        b.iter(|| build_context_vector(&weights, black_box(&demos), &template).unwrap())
    });
}

criterion_group!(
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_forward, bench_calibration_epoch, bench_context_vectorization
);
criterion_main!(benches);
