//! Coefficient task-ids and anchor-based transfer learning.
//!
//! Calibrated coefficient sets, flattened to `4L`-vectors, act as task-ids:
//! cosine similarity against stored anchors decides which existing tasks are
//! close enough to seed a new calibration. Retained similarities become a
//! temperature-softmax distribution whose weighted averages reinitialize the
//! context vector and coefficients.

use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::instrument::{
    load_coefficients, load_context_vector, save_coefficients, save_context_vector,
    CoefficientSet, ContextVector,
};
use crate::model::Weights;
use crate::pipeline::{build_context_vector, calibrate, CalibrationConfig, CalibrationOutcome};
use crate::taskgen::{Demonstration, Template};

/// A stored (context vector, coefficient set) pair for a calibrated task.
#[derive(Debug, Clone)]
pub struct Anchor {
    pub task_name: String,
    pub context: ContextVector,
    pub coefficients: CoefficientSet,
}

/// Flatten to the fixed `(λ^a, β^a, λ^m, β^m)` per-layer order.
pub fn flatten(c: &CoefficientSet) -> Vec<f64> {
    c.flatten()
}

/// Standard cosine similarity; zero-norm input is an error.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(CoreError::ShapeMismatch {
            op: "cosine",
            details: format!("{} vs {}", u.len(), v.len()),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(CoreError::ZeroNorm);
    }
    Ok(dot / (nu * nv))
}

/// Temperature softmax over retained similarities:
/// `P(i) = exp(s_i/τ) / Σ_j exp(s_j/τ)`.
pub fn transfer_weights(similarities: &[f64], tau: f64) -> Result<Vec<f64>> {
    if similarities.is_empty() {
        return Err(CoreError::EmptyInput("retained similarity set"));
    }
    if tau <= 0.0 {
        return Err(CoreError::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    let m = similarities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = similarities.iter().map(|s| ((s - m) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Outcome of the anchor-retention stage.
#[derive(Debug, Clone)]
pub struct TransferBlend {
    /// Indices into the anchor list, ascending.
    pub retained: Vec<usize>,
    pub similarities: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub context: ContextVector,
    pub coefficients: CoefficientSet,
}

/// Retain anchors with `cos(c_new, c_i) > h` and blend them by transfer
/// weight. Returns `None` when nothing clears the threshold.
pub fn transfer_blend(
    c_new: &CoefficientSet,
    anchors: &[Anchor],
    h: f64,
    tau: f64,
) -> Result<Option<TransferBlend>> {
    let id_new = flatten(c_new);
    let mut retained = Vec::new();
    let mut similarities = Vec::new();
    for (i, anchor) in anchors.iter().enumerate() {
        let s = cosine(&id_new, &flatten(&anchor.coefficients))?;
        if s > h {
            retained.push(i);
            similarities.push(s);
        }
    }
    if retained.is_empty() {
        return Ok(None);
    }
    let probabilities = transfer_weights(&similarities, tau)?;

    let first = &anchors[retained[0]];
    let n_layers = first.context.n_layers();
    let dim = first.context.dim();
    let mut mha = vec![vec![0.0; dim]; n_layers];
    let mut mlp = vec![vec![0.0; dim]; n_layers];
    let mut coef_flat = vec![0.0; 4 * n_layers];
    for (&idx, &p) in retained.iter().zip(&probabilities) {
        let anchor = &anchors[idx];
        if anchor.context.n_layers() != n_layers || anchor.context.dim() != dim {
            return Err(CoreError::InvalidPlan("anchor registry mixes architectures".into()));
        }
        for l in 0..n_layers {
            for j in 0..dim {
                mha[l][j] += p * anchor.context.mha[l][j];
                mlp[l][j] += p * anchor.context.mlp[l][j];
            }
        }
        for (slot, v) in coef_flat.iter_mut().zip(flatten(&anchor.coefficients)) {
            *slot += p * v;
        }
    }
    let context = ContextVector { mha, mlp, hidden: None, source_count: retained.len() };
    let coefficients = CoefficientSet::from_flat(&coef_flat)?;
    Ok(Some(TransferBlend { retained, similarities, probabilities, context, coefficients }))
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub coefficients: CoefficientSet,
    pub context: ContextVector,
    /// Empty when no anchor cleared the threshold (plain calibration path).
    pub blend: Option<TransferBlend>,
    pub stage_one: CalibrationOutcome,
    /// The context vector the stage-one calibration ran against.
    pub stage_one_context: ContextVector,
    pub final_calibration: Option<CalibrationOutcome>,
}

/// Anchor-based transfer: vectorize and calibrate the new task, retain
/// similar anchors, and when any exist, recalibrate from their weighted
/// average. An empty retained set falls back to the stage-one result, so
/// transfer is never worse than unavailable.
pub fn transfer_learn(
    weights: &Weights,
    anchors: &[Anchor],
    new_demos: &[Demonstration],
    template: &Template,
    h: f64,
    tau: f64,
    calib: &CalibrationConfig,
) -> Result<TransferOutcome> {
    let n_layers = weights.config.n_layers;
    let v_new = build_context_vector(weights, new_demos, template)?;
    let init = calib.initial_coefficients(n_layers);
    let stage_one = calibrate(weights, new_demos, template, &v_new, calib, &init)?;

    match transfer_blend(&stage_one.coefficients, anchors, h, tau)? {
        None => Ok(TransferOutcome {
            coefficients: stage_one.coefficients.clone(),
            context: v_new.clone(),
            blend: None,
            stage_one,
            stage_one_context: v_new,
            final_calibration: None,
        }),
        Some(blend) => {
            let recalibrated =
                calibrate(weights, new_demos, template, &blend.context, calib, &blend.coefficients)?;
            Ok(TransferOutcome {
                coefficients: recalibrated.coefficients.clone(),
                context: blend.context.clone(),
                blend: Some(blend),
                stage_one,
                stage_one_context: v_new,
                final_calibration: Some(recalibrated),
            })
        }
    }
}

// --- anchor registry ----------------------------------------------------------

/// One subdirectory per task: `context.i2clv`, `coefficients.i2clc` and a
/// flat-text manifest carrying the task name, architecture, creation seed
/// and the weights hash of the producing checkpoint.
pub fn save_anchor(
    dir: &Path,
    anchor: &Anchor,
    dim: usize,
    creation_seed: u64,
    weights_hash: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_context_vector(&dir.join("context.i2clv"), &anchor.context)?;
    save_coefficients(&dir.join("coefficients.i2clc"), &anchor.coefficients, dim)?;
    let manifest = format!(
        "task_name = {}\nn_layers = {}\nd_model = {}\ncreation_seed = {}\nweights_hash = {}\n",
        anchor.task_name,
        anchor.coefficients.n_layers(),
        dim,
        creation_seed,
        weights_hash
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn manifest_value(text: &str, key: &str) -> Option<String> {
    text.lines().find_map(|line| {
        let (k, v) = line.split_once('=')?;
        (k.trim() == key).then(|| v.trim().to_string())
    })
}

/// Load one anchor directory, verifying the weights hash when provided.
pub fn load_anchor(dir: &Path, expected_hash: Option<&str>) -> Result<Anchor> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| CoreError::Format(format!("{}: {e}", dir.display())))?;
    let task_name = manifest_value(&manifest, "task_name")
        .ok_or_else(|| CoreError::Format("manifest missing task_name".into()))?;
    if let Some(expected) = expected_hash {
        let found = manifest_value(&manifest, "weights_hash")
            .ok_or_else(|| CoreError::Format("manifest missing weights_hash".into()))?;
        if found != expected {
            return Err(CoreError::InvalidConfig(format!(
                "anchor {task_name} was calibrated against a different checkpoint"
            )));
        }
    }
    let context = load_context_vector(&dir.join("context.i2clv"))?;
    let (coefficients, _) = load_coefficients(&dir.join("coefficients.i2clc"))?;
    if context.n_layers() != coefficients.n_layers() {
        return Err(CoreError::Format(format!(
            "anchor {task_name}: context has {} layers, coefficients {}",
            context.n_layers(),
            coefficients.n_layers()
        )));
    }
    Ok(Anchor { task_name, context, coefficients })
}

/// Load every anchor under a registry root, sorted by directory name.
pub fn load_registry(root: &Path, expected_hash: Option<&str>) -> Result<Vec<Anchor>> {
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_anchor(d, expected_hash)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, STREAM_TASKGEN};
    use rand::Rng;

    fn random_coeffs(n_layers: usize, seed: u64) -> CoefficientSet {
        let mut rng = stream_rng(seed, STREAM_TASKGEN);
        let flat: Vec<f64> = (0..4 * n_layers).map(|_| rng.gen_range(-1.0..1.5)).collect();
        CoefficientSet::from_flat(&flat).unwrap()
    }

    fn random_context(n_layers: usize, dim: usize, seed: u64) -> ContextVector {
        let mut rng = stream_rng(seed, STREAM_TASKGEN);
        let mut component = || -> Vec<Vec<f64>> {
            (0..n_layers).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        ContextVector { mha: component(), mlp: component(), hidden: None, source_count: 1 }
    }

    #[test]
    fn cosine_basics() {
        let x = vec![0.3, -0.7, 1.1];
        assert!((cosine(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((cosine(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(CoreError::ZeroNorm)));
    }

    #[test]
    fn transfer_weights_examples() {
        let single = transfer_weights(&[0.91], 0.5).unwrap();
        assert_eq!(single, vec![1.0]);

        let equal = transfer_weights(&[0.9, 0.9, 0.9, 0.9], 0.5).unwrap();
        for p in &equal {
            assert!((p - 0.25).abs() < 1e-12);
        }

        let pair = transfer_weights(&[0.9, 0.8], 0.5).unwrap();
        assert!((pair[0] - 0.5498).abs() < 1e-4, "{}", pair[0]);
        assert!((pair[1] - 0.4502).abs() < 1e-4, "{}", pair[1]);
        // independent recomputation
        let e1 = (0.9f64 / 0.5).exp();
        let e2 = (0.8f64 / 0.5).exp();
        assert!((pair[0] - e1 / (e1 + e2)).abs() < 1e-12);

        assert!(transfer_weights(&[], 0.5).is_err());
        assert!(transfer_weights(&[0.5], 0.0).is_err());
    }

    #[test]
    fn transfer_weight_properties() {
        let mut rng = stream_rng(5, STREAM_TASKGEN);
        for _ in 0..50 {
            let n = rng.gen_range(1..6);
            let sims: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tau = rng.gen_range(0.05..2.0);
            let p = transfer_weights(&sims, tau).unwrap();
            let total: f64 = p.iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);

            // shift invariance
            let shifted: Vec<f64> = sims.iter().map(|s| s + 0.37).collect();
            let q = transfer_weights(&shifted, tau).unwrap();
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-9);
            }

            // τ-invariant argmax
            let argmax = |v: &[f64]| {
                v.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
            };
            let p2 = transfer_weights(&sims, tau * 3.0).unwrap();
            assert_eq!(argmax(&p), argmax(&p2));
        }
    }

    #[test]
    fn blend_single_anchor_is_bit_exact_copy() {
        let c_new = random_coeffs(2, 1);
        let anchor = Anchor {
            task_name: "t".into(),
            context: random_context(2, 4, 2),
            // cosine 1.0 against itself
            coefficients: c_new.clone(),
        };
        let blend = transfer_blend(&c_new, &[anchor.clone()], 0.8, 0.5).unwrap().unwrap();
        assert_eq!(blend.probabilities, vec![1.0]);
        assert_eq!(blend.context.mha, anchor.context.mha);
        assert_eq!(blend.context.mlp, anchor.context.mlp);
        assert_eq!(blend.coefficients, anchor.coefficients);
    }

    #[test]
    fn blend_empty_retained_set_is_none() {
        let c_new = random_coeffs(2, 3);
        let opposite = CoefficientSet::from_flat(
            &flatten(&c_new).iter().map(|v| -v).collect::<Vec<_>>(),
        )
        .unwrap();
        let anchor = Anchor {
            task_name: "far".into(),
            context: random_context(2, 4, 4),
            coefficients: opposite,
        };
        assert!(transfer_blend(&c_new, &[anchor], 0.8, 0.5).unwrap().is_none());
    }

    #[test]
    fn blend_matches_brute_force_weighted_sums() {
        // independent oracle: recompute retention, probabilities and the
        // weighted averages with plain loops
        let mut rng = stream_rng(17, STREAM_TASKGEN);
        for case in 0..20 {
            let n_layers = rng.gen_range(1..4);
            let dim = rng.gen_range(2..6);
            let n_anchors = rng.gen_range(1..6);
            let c_new = random_coeffs(n_layers, 100 + case);
            let anchors: Vec<Anchor> = (0..n_anchors)
                .map(|i| {
                    // mix of near and far anchors
                    let coefficients = if rng.gen_bool(0.5) {
                        let mut flat = flatten(&c_new);
                        for v in flat.iter_mut() {
                            *v += rng.gen_range(-0.05..0.05);
                        }
                        CoefficientSet::from_flat(&flat).unwrap()
                    } else {
                        random_coeffs(n_layers, 500 + 31 * case + i)
                    };
                    Anchor {
                        task_name: format!("a{i}"),
                        context: random_context(n_layers, dim, 900 + 13 * case + i),
                        coefficients,
                    }
                })
                .collect();

            let (h, tau) = (0.8, 0.5);
            let got = transfer_blend(&c_new, &anchors, h, tau).unwrap();

            // oracle
            let id = flatten(&c_new);
            let mut retained = Vec::new();
            for (i, a) in anchors.iter().enumerate() {
                let other = flatten(&a.coefficients);
                let dot: f64 = id.iter().zip(&other).map(|(x, y)| x * y).sum();
                let nu = id.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv = other.iter().map(|x| x * x).sum::<f64>().sqrt();
                let s = dot / (nu * nv);
                if s > h {
                    retained.push((i, s));
                }
            }
            match (&got, retained.is_empty()) {
                (None, true) => continue,
                (Some(blend), false) => {
                    let z: f64 = retained.iter().map(|(_, s)| (s / tau).exp()).sum();
                    for (slot, (idx, s)) in retained.iter().enumerate() {
                        assert_eq!(blend.retained[slot], *idx);
                        let p = (s / tau).exp() / z;
                        assert!((blend.probabilities[slot] - p).abs() < 1e-9);
                    }
                    for l in 0..n_layers {
                        for j in 0..dim {
                            let want: f64 = retained
                                .iter()
                                .map(|(idx, s)| {
                                    (s / tau).exp() / z * anchors[*idx].context.mha[l][j]
                                })
                                .sum();
                            assert!((blend.context.mha[l][j] - want).abs() < 1e-9);
                        }
                    }
                    let want_coeffs: Vec<f64> = (0..4 * n_layers)
                        .map(|k| {
                            retained
                                .iter()
                                .map(|(idx, s)| {
                                    (s / tau).exp() / z * flatten(&anchors[*idx].coefficients)[k]
                                })
                                .sum()
                        })
                        .collect();
                    for (g, w) in flatten(&blend.coefficients).iter().zip(&want_coeffs) {
                        assert!((g - w).abs() < 1e-9);
                    }
                }
                (got, _) => panic!("retention disagrees with oracle: {:?}", got.is_some()),
            }
        }
    }

    #[test]
    fn transfer_learn_empty_registry_falls_back_to_plain_calibration() {
        use crate::model::{init_weights, ModelConfig};
        use crate::taskgen::{generate_task, sample_demos, SyntheticTaskSpec};

        let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_mlp: 64, vocab_size: 97, max_seq: 96, seed: 2 };
        let w = init_weights(&cfg).unwrap();
        let spec = SyntheticTaskSpec { min_len: 2, max_len: 4, seed: 31, ..Default::default() };
        let ds = generate_task(&spec, 30, 0, 0).unwrap();
        let demos = sample_demos(&ds, 2, 0).unwrap();
        let template = Template::default();
        let calib = CalibrationConfig { epochs: 3, seed: 1, ..Default::default() };

        let out = transfer_learn(&w, &[], &demos, &template, 0.8, 0.5, &calib).unwrap();
        assert!(out.blend.is_none());
        assert!(out.final_calibration.is_none());

        // identical to running the plain pipeline by hand
        let v = build_context_vector(&w, &demos, &template).unwrap();
        let init = calib.initial_coefficients(cfg.n_layers);
        let plain = calibrate(&w, &demos, &template, &v, &calib, &init).unwrap();
        assert_eq!(out.coefficients, plain.coefficients);
        assert_eq!(out.context.mha, v.mha);
    }

    #[test]
    fn transfer_learn_self_anchor_recalibrates_from_it() {
        use crate::model::{init_weights, ModelConfig};
        use crate::taskgen::{generate_task, sample_demos, SyntheticTaskSpec};

        let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_mlp: 64, vocab_size: 97, max_seq: 96, seed: 2 };
        let w = init_weights(&cfg).unwrap();
        let spec = SyntheticTaskSpec { min_len: 2, max_len: 4, seed: 32, ..Default::default() };
        let ds = generate_task(&spec, 30, 0, 0).unwrap();
        let demos = sample_demos(&ds, 2, 0).unwrap();
        let template = Template::default();
        let calib = CalibrationConfig { epochs: 3, seed: 2, ..Default::default() };

        // the anchor IS the stage-one result, so its cosine is exactly 1
        let v = build_context_vector(&w, &demos, &template).unwrap();
        let init = calib.initial_coefficients(cfg.n_layers);
        let stage_one = calibrate(&w, &demos, &template, &v, &calib, &init).unwrap();
        let anchor = Anchor {
            task_name: "self".into(),
            context: v.clone(),
            coefficients: stage_one.coefficients.clone(),
        };

        let out = transfer_learn(&w, &[anchor.clone()], &demos, &template, 0.8, 0.5, &calib).unwrap();
        let blend = out.blend.expect("anchor retained");
        assert_eq!(blend.probabilities, vec![1.0]);
        // weighted average of one anchor is that anchor, bit-exact
        assert_eq!(out.context.mha, anchor.context.mha);
        assert_eq!(out.context.mlp, anchor.context.mlp);
        // and the final coefficients come from a recalibration seeded there
        let recal = calibrate(&w, &demos, &template, &anchor.context, &calib, &anchor.coefficients).unwrap();
        assert_eq!(out.coefficients, recal.coefficients);
    }

    #[test]
    fn registry_roundtrip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let anchor = Anchor {
            task_name: "sentiment".into(),
            context: random_context(2, 4, 7),
            coefficients: random_coeffs(2, 8),
        };
        let path = dir.path().join("sentiment");
        save_anchor(&path, &anchor, 4, 42, "abc123").unwrap();
        let loaded = load_anchor(&path, Some("abc123")).unwrap();
        assert_eq!(loaded.task_name, "sentiment");
        assert_eq!(loaded.coefficients, anchor.coefficients);
        assert_eq!(loaded.context.mha, anchor.context.mha);
        assert!(load_anchor(&path, Some("different")).is_err());

        let registry = load_registry(dir.path(), Some("abc123")).unwrap();
        assert_eq!(registry.len(), 1);
    }
}
