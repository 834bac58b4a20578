// scratch diagnostic for acceptance-scale tuning
use i2cl_core::baselines::*;
use i2cl_core::model::*;
use i2cl_core::pipeline::*;
use i2cl_core::taskgen::*;
use std::time::Instant;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let bias: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let d_model: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let lr_end: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(1e-5);
    let cfg = ModelConfig { n_layers: 3, d_model, n_heads: 4, d_mlp: 4 * d_model, vocab_size: 97, max_seq: 384, seed: 7 };
    let mut family = TaskFamily::new(11, bias);
    family.min_len = 3;
    family.max_len = 6;
    let t0 = Instant::now();
    let opts = PretrainOptions { steps, batch_size: 4, max_demos: 17, lr_end, ..Default::default() };
    let (w, log) = meta_pretrain(&cfg, &family, &opts).unwrap();
    println!("pretrain {steps} steps bias {bias} D {d_model}: {:.1}s, loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(), log.first().unwrap().loss, log.last().unwrap().loss);

    for (tag, spec) in [
        ("canonical", family.canonical_task(51)),
        ("derangement", family.permuted_task(&[1, 2, 0], 52)),
    ] {
        let ds = generate_task(&spec, 120, 100, 32).unwrap();
        let template = Template::default();
        let labels = spec.classes.clone();
        let task = EvalTask { queries: &ds.eval_set, labels: &labels, template: &template, name: tag };
        let zs = run_zero_shot(&w, &task).unwrap();
        print!("{tag}: zs {:.3}", zs.eval.accuracy);
        let mut accs = (0.0, 0.0, 0.0);
        for seed in 0..3u64 {
            let demos = sample_demos(&ds, 5, seed).unwrap();
            let icl = run_icl(&w, &demos, &template, &task).unwrap();
            let calib = CalibrationConfig { seed, ..Default::default() };
            let i2cl = run_i2cl(&w, &demos, &template, &task, &calib).unwrap();
            let noise = run_noise_vector(&w, &demos, &template, &task, &calib, 1000 + seed).unwrap();
            accs.0 += icl.eval.accuracy / 3.0;
            accs.1 += i2cl.outcome.eval.accuracy / 3.0;
            accs.2 += noise.outcome.eval.accuracy / 3.0;
        }
        println!("  icl {:.3}  i2cl {:.3}  noise {:.3}  ({:.0}s)", accs.0, accs.1, accs.2, t0.elapsed().as_secs_f64());
    }
}
