// scratch probe of training-data distributions
use i2cl_core::model::*;
use i2cl_core::pipeline::*;
use i2cl_core::taskgen::*;
use std::collections::HashMap;

fn main() {
    let mut family = TaskFamily::new(11, 0.25);
    family.min_len = 3;
    family.max_len = 6;

    // permutation distribution over instances
    let mut perm_counts: HashMap<Vec<String>, usize> = HashMap::new();
    for i in 0..3000u64 {
        let inst = family.sample_instance(i);
        let sig: Vec<String> = inst.generators.iter().map(|g| g.to_string()).collect();
        *perm_counts.entry(sig).or_default() += 1;
    }
    println!("permutation distribution over 3000 instances:");
    let mut entries: Vec<_> = perm_counts.into_iter().collect();
    entries.sort_by_key(|e| std::cmp::Reverse(e.1));
    for (sig, count) in entries {
        println!("  {:?}: {}", sig.join(","), count);
    }

    // training sequence length distribution (via the pretrain path at max_seq 384)
    let cfg = ModelConfig { n_layers: 1, d_model: 8, n_heads: 1, d_mlp: 32, vocab_size: 97, max_seq: 384, seed: 0 };
    let mut lens = Vec::new();
    let opts = PretrainOptions { steps: 0, ..Default::default() };
    let _ = (cfg, opts);
    // lengths via rendering 500 sequences at the library level is private;
    // approximate by sampling demos ourselves
    let template = Template::default();
    for i in 0..500u64 {
        let inst = family.sample_instance(i);
        let mut rng = i2cl_core::rng::stream_rng(i2cl_core::rng::derive_seed(11, i.wrapping_add(0x517c)), i2cl_core::rng::STREAM_PRETRAIN);
        use rand::Rng;
        let target = rng.gen_range(2usize..=17);
        let mut text = String::new();
        let mut count = 0;
        while count < target {
            let c = rng.gen_range(0..3usize);
            let demo = Demonstration { x: inst.sample_pattern(c, &mut rng), y: inst.classes[c].clone(), class_index: c };
            let rendered = template.render(&demo);
            let sep = usize::from(!text.is_empty());
            if text.len() + sep + rendered.len() > 384 { break; }
            if sep == 1 { text.push('\n'); }
            text.push_str(&rendered);
            count += 1;
        }
        lens.push(text.len());
    }
    lens.sort_unstable();
    println!("seq len p10 {} p50 {} p90 {} max {}", lens[50], lens[250], lens[450], lens[499]);
}
