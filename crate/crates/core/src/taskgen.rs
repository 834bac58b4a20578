//! Synthetic few-shot classification task families.
//!
//! Each class draws its patterns from a disjoint character family (letters,
//! special characters, digits), so tasks carry no semantic priors: the only
//! way to classify a query is the family→label assignment revealed by the
//! demonstrations. Everything here is a pure function of declared seeds.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, stream_rng, STREAM_DEMO_SAMPLER, STREAM_TASKGEN};

const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";
const SPECIALS: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
const DIGITS: &str = "0123456789";

/// Character family a class draws its patterns from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassGenerator {
    RandomLetters,
    RandomSpecials,
    RandomDigits,
}

impl ClassGenerator {
    pub fn alphabet(self) -> &'static str {
        match self {
            ClassGenerator::RandomLetters => LETTERS,
            ClassGenerator::RandomSpecials => SPECIALS,
            ClassGenerator::RandomDigits => DIGITS,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "letters" => Ok(ClassGenerator::RandomLetters),
            "specials" => Ok(ClassGenerator::RandomSpecials),
            "digits" => Ok(ClassGenerator::RandomDigits),
            other => Err(CoreError::InvalidConfig(format!("unknown generator {other:?}"))),
        }
    }
}

impl fmt::Display for ClassGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ClassGenerator::RandomLetters => "letters",
            ClassGenerator::RandomSpecials => "specials",
            ClassGenerator::RandomDigits => "digits",
        };
        f.write_str(s)
    }
}

/// One task instance: an ordered label space plus per-class generators.
///
/// `generators[i]` produces the patterns labelled `classes[i]`, so a
/// permutation of `generators` is a different task over the same labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub name: String,
    pub classes: Vec<String>,
    pub generators: Vec<ClassGenerator>,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            classes: vec!["A".into(), "B".into(), "C".into()],
            generators: vec![
                ClassGenerator::RandomLetters,
                ClassGenerator::RandomSpecials,
                ClassGenerator::RandomDigits,
            ],
            min_len: 8,
            max_len: 16,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(CoreError::InvalidConfig("need at least 2 classes".into()));
        }
        if self.generators.len() != self.classes.len() {
            return Err(CoreError::InvalidConfig(format!(
                "{} generators for {} classes",
                self.generators.len(),
                self.classes.len()
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(CoreError::InvalidConfig(format!(
                "bad pattern length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// Draw one pattern for the given class.
    pub fn sample_pattern<R: Rng>(&self, class_index: usize, rng: &mut R) -> String {
        let alphabet: Vec<char> = self.generators[class_index].alphabet().chars().collect();
        let len = rng.gen_range(self.min_len..=self.max_len);
        (0..len).map(|_| *alphabet.choose(rng).expect("non-empty alphabet")).collect()
    }
}

/// A single instructional pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub x: String,
    pub y: String,
    #[serde(skip)]
    pub class_index: usize,
}

/// Prompt rendering: `input_prefix + x + separator + label_prefix + y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub input_prefix: String,
    pub label_prefix: String,
    pub separator: char,
}

impl Default for Template {
    fn default() -> Self {
        Self { input_prefix: "Input: ".into(), label_prefix: "Label: ".into(), separator: '\n' }
    }
}

impl Template {
    /// Rendering with the formatting words removed.
    pub fn no_format() -> Self {
        Self { input_prefix: String::new(), label_prefix: String::new(), separator: '\n' }
    }

    pub fn render(&self, demo: &Demonstration) -> String {
        format!("{}{}{}{}{}", self.input_prefix, demo.x, self.separator, self.label_prefix, demo.y)
    }

    /// The query rendering a label is scored after.
    pub fn render_query(&self, x: &str) -> String {
        format!("{}{}{}{}", self.input_prefix, x, self.separator, self.label_prefix)
    }
}

/// Pools generated for one task instance; its pools share no `x` string.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub train_pool: Vec<Demonstration>,
    pub eval_set: Vec<Demonstration>,
    pub holdout: Vec<Demonstration>,
}

impl Dataset {
    pub fn labels(&self) -> &[String] {
        &self.spec.classes
    }
}

/// Generate disjoint, class-balanced train/eval/holdout pools.
pub fn generate_task(
    spec: &SyntheticTaskSpec,
    n_train_pool: usize,
    n_eval: usize,
    n_holdout: usize,
) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, STREAM_TASKGEN);
    let mut seen: HashSet<String> = HashSet::new();
    let fill = |n: usize, rng: &mut rand_pcg::Pcg64, seen: &mut HashSet<String>| {
        let k = spec.classes.len();
        let mut pool = Vec::with_capacity(n);
        for class_index in 0..k {
            // first (n mod k) classes absorb the remainder
            let count = n / k + usize::from(class_index < n % k);
            for _ in 0..count {
                let x = loop {
                    let candidate = spec.sample_pattern(class_index, rng);
                    if seen.insert(candidate.clone()) {
                        break candidate;
                    }
                };
                pool.push(Demonstration { x, y: spec.classes[class_index].clone(), class_index });
            }
        }
        pool
    };
    let train_pool = fill(n_train_pool, &mut rng, &mut seen);
    let eval_set = fill(n_eval, &mut rng, &mut seen);
    let holdout = fill(n_holdout, &mut rng, &mut seen);
    Ok(Dataset { spec: spec.clone(), train_pool, eval_set, holdout })
}

/// Draw exactly `k_per_class` demonstrations per class from the train pool,
/// then shuffle the combined list.
pub fn sample_demos(dataset: &Dataset, k_per_class: usize, seed: u64) -> Result<Vec<Demonstration>> {
    let mut rng = stream_rng(seed, STREAM_DEMO_SAMPLER);
    let mut demos = Vec::with_capacity(k_per_class * dataset.spec.classes.len());
    for (class_index, class) in dataset.spec.classes.iter().enumerate() {
        let candidates: Vec<&Demonstration> =
            dataset.train_pool.iter().filter(|d| d.class_index == class_index).collect();
        if candidates.len() < k_per_class {
            return Err(CoreError::InsufficientPool {
                class: class.clone(),
                available: candidates.len(),
                needed: k_per_class,
            });
        }
        let chosen = candidates.choose_multiple(&mut rng, k_per_class);
        demos.extend(chosen.map(|d| (*d).clone()));
    }
    demos.shuffle(&mut rng);
    Ok(demos)
}

/// Demonstration corruptions used by the ablation experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionMode {
    /// Reassign each label uniformly from the label space.
    RandomLabel,
    /// Permute the characters of each input.
    RandomToken,
    /// Keep the pairs, render without formatting words.
    NoFormat,
}

pub struct CorruptionResult {
    pub demos: Vec<Demonstration>,
    /// Present for `NoFormat`: callers swap their template for this one.
    pub template_override: Option<Template>,
}

pub fn corrupt(
    demos: &[Demonstration],
    classes: &[String],
    mode: CorruptionMode,
    seed: u64,
) -> CorruptionResult {
    let mut rng = stream_rng(seed, STREAM_DEMO_SAMPLER);
    match mode {
        CorruptionMode::RandomLabel => {
            let demos = demos
                .iter()
                .map(|d| {
                    let class_index = rng.gen_range(0..classes.len());
                    Demonstration { x: d.x.clone(), y: classes[class_index].clone(), class_index }
                })
                .collect();
            CorruptionResult { demos, template_override: None }
        }
        CorruptionMode::RandomToken => {
            let demos = demos
                .iter()
                .map(|d| {
                    let mut chars: Vec<char> = d.x.chars().collect();
                    chars.shuffle(&mut rng);
                    Demonstration { x: chars.into_iter().collect(), ..d.clone() }
                })
                .collect();
            CorruptionResult { demos, template_override: None }
        }
        CorruptionMode::NoFormat => CorruptionResult {
            demos: demos.to_vec(),
            template_override: Some(Template::no_format()),
        },
    }
}

/// A distribution over task instances sharing one label space.
///
/// `canonical_bias` is the probability that a sampled instance keeps the
/// canonical generator→label assignment; otherwise a uniformly random
/// permutation is used. Meta-pretraining draws from this distribution so a
/// model can both carry a prior (bias close to 1) and be forced to read the
/// context (bias close to 0).
#[derive(Debug, Clone)]
pub struct TaskFamily {
    pub family_seed: u64,
    pub canonical_bias: f64,
    pub classes: Vec<String>,
    pub generators: Vec<ClassGenerator>,
    pub min_len: usize,
    pub max_len: usize,
}

impl TaskFamily {
    pub fn new(family_seed: u64, canonical_bias: f64) -> Self {
        let base = SyntheticTaskSpec::default();
        Self {
            family_seed,
            canonical_bias,
            classes: base.classes,
            generators: base.generators,
            min_len: base.min_len,
            max_len: base.max_len,
        }
    }

    /// The instance with the canonical generator→label assignment.
    pub fn canonical_task(&self, seed: u64) -> SyntheticTaskSpec {
        self.task_with_assignment(&(0..self.generators.len()).collect::<Vec<_>>(), seed, "canonical")
    }

    /// An instance with an explicit generator permutation.
    pub fn permuted_task(&self, perm: &[usize], seed: u64) -> SyntheticTaskSpec {
        self.task_with_assignment(perm, seed, "permuted")
    }

    fn task_with_assignment(&self, perm: &[usize], seed: u64, name: &str) -> SyntheticTaskSpec {
        assert_eq!(perm.len(), self.generators.len());
        SyntheticTaskSpec {
            name: name.into(),
            classes: self.classes.clone(),
            generators: perm.iter().map(|&i| self.generators[i]).collect(),
            min_len: self.min_len,
            max_len: self.max_len,
            seed,
        }
    }

    /// Deterministically sample the `index`-th instance of the family.
    pub fn sample_instance(&self, index: u64) -> SyntheticTaskSpec {
        let instance_seed = derive_seed(self.family_seed, index);
        let mut rng = stream_rng(instance_seed, STREAM_TASKGEN);
        let k = self.generators.len();
        let mut perm: Vec<usize> = (0..k).collect();
        if rng.gen::<f64>() >= self.canonical_bias {
            perm.shuffle(&mut rng);
        }
        let mut spec = self.task_with_assignment(&perm, derive_seed(instance_seed, 1), "instance");
        spec.name = format!("instance-{index}");
        spec
    }
}

// --- file formats -----------------------------------------------------------

/// Newline-delimited records, one `{"x": ..., "y": ...}` object per line.
pub fn save_demos(path: &Path, demos: &[Demonstration]) -> Result<()> {
    let mut out = String::new();
    for d in demos {
        out.push_str(&serde_json::to_string(d).map_err(|e| CoreError::Format(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_demos(path: &Path, classes: &[String]) -> Result<Vec<Demonstration>> {
    let text = fs::read_to_string(path)?;
    let mut demos = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut d: Demonstration = serde_json::from_str(line)
            .map_err(|e| CoreError::Format(format!("line {}: {}", lineno + 1, e)))?;
        d.class_index = classes
            .iter()
            .position(|c| *c == d.y)
            .ok_or_else(|| CoreError::Format(format!("line {}: label {:?} not in class list", lineno + 1, d.y)))?;
        demos.push(d);
    }
    Ok(demos)
}

/// Flat `key = value` task spec file.
pub fn save_task_spec(path: &Path, spec: &SyntheticTaskSpec) -> Result<()> {
    let generators: Vec<String> = spec.generators.iter().map(|g| g.to_string()).collect();
    let text = format!(
        "name = {}\nclasses = {}\ngenerators = {}\nmin_len = {}\nmax_len = {}\nseed = {}\n",
        spec.name,
        spec.classes.join(","),
        generators.join(","),
        spec.min_len,
        spec.max_len,
        spec.seed
    );
    fs::write(path, text)?;
    Ok(())
}

pub fn load_task_spec(path: &Path) -> Result<SyntheticTaskSpec> {
    let text = fs::read_to_string(path)?;
    let mut spec = SyntheticTaskSpec::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CoreError::Format(format!("line {}: expected key = value", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "name" => spec.name = value.to_string(),
            "classes" => spec.classes = value.split(',').map(|s| s.trim().to_string()).collect(),
            "generators" => {
                spec.generators =
                    value.split(',').map(ClassGenerator::parse).collect::<Result<Vec<_>>>()?
            }
            "min_len" => {
                spec.min_len = value
                    .parse()
                    .map_err(|_| CoreError::Format(format!("line {}: bad min_len", lineno + 1)))?
            }
            "max_len" => {
                spec.max_len = value
                    .parse()
                    .map_err(|_| CoreError::Format(format!("line {}: bad max_len", lineno + 1)))?
            }
            "seed" => {
                spec.seed = value
                    .parse()
                    .map_err(|_| CoreError::Format(format!("line {}: bad seed", lineno + 1)))?
            }
            other => {
                return Err(CoreError::Format(format!("line {}: unknown key {:?}", lineno + 1, other)))
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec { seed: 42, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_task(&spec(), 30, 20, 10).unwrap();
        let b = generate_task(&spec(), 30, 20, 10).unwrap();
        assert_eq!(a.train_pool, b.train_pool);
        assert_eq!(a.eval_set, b.eval_set);
        assert_eq!(a.holdout, b.holdout);
    }

    #[test]
    fn digit_class_produces_digits_only() {
        let ds = generate_task(&spec(), 30, 20, 10).unwrap();
        let digit_class = 2; // canonical assignment: C <- digits
        for d in ds.train_pool.iter().chain(&ds.eval_set).chain(&ds.holdout) {
            if d.class_index == digit_class {
                assert!(d.x.chars().all(|c| c.is_ascii_digit()), "{:?}", d.x);
            }
        }
    }

    #[test]
    fn eval_set_is_class_balanced() {
        for n in [20usize, 21, 22, 23] {
            let ds = generate_task(&spec(), 30, n, 0).unwrap();
            let k = ds.spec.classes.len();
            for class_index in 0..k {
                let count = ds.eval_set.iter().filter(|d| d.class_index == class_index).count();
                assert!(count == n / k || count == n / k + 1, "class {class_index}: {count}");
            }
        }
    }

    #[test]
    fn pools_share_no_input_string() {
        let ds = generate_task(&spec(), 60, 40, 20).unwrap();
        let mut seen = HashSet::new();
        for d in ds.train_pool.iter().chain(&ds.eval_set).chain(&ds.holdout) {
            assert!(seen.insert(d.x.clone()), "duplicate {:?}", d.x);
        }
    }

    #[test]
    fn sample_demos_one_per_class() {
        let ds = generate_task(&spec(), 30, 0, 0).unwrap();
        let demos = sample_demos(&ds, 1, 7).unwrap();
        assert_eq!(demos.len(), 3);
        let mut classes: Vec<usize> = demos.iter().map(|d| d.class_index).collect();
        classes.sort_unstable();
        assert_eq!(classes, vec![0, 1, 2]);
    }

    #[test]
    fn sample_demos_five_per_class() {
        let ds = generate_task(&spec(), 30, 0, 0).unwrap();
        let demos = sample_demos(&ds, 5, 7).unwrap();
        assert_eq!(demos.len(), 15);
        for class_index in 0..3 {
            assert_eq!(demos.iter().filter(|d| d.class_index == class_index).count(), 5);
        }
    }

    #[test]
    fn sample_demos_insufficient_pool_is_error() {
        let ds = generate_task(&spec(), 3, 0, 0).unwrap();
        assert!(sample_demos(&ds, 5, 7).is_err());
    }

    #[test]
    fn different_seeds_give_different_order() {
        // fixed seed pair known to differ
        let ds = generate_task(&spec(), 30, 0, 0).unwrap();
        let a = sample_demos(&ds, 5, 1).unwrap();
        let b = sample_demos(&ds, 5, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn random_label_single_class_is_identity() {
        let demos = vec![Demonstration { x: "abc".into(), y: "A".into(), class_index: 0 }];
        let out = corrupt(&demos, &["A".to_string()], CorruptionMode::RandomLabel, 3);
        assert_eq!(out.demos, demos);
    }

    #[test]
    fn random_token_preserves_char_multiset() {
        let ds = generate_task(&spec(), 30, 0, 0).unwrap();
        let demos = sample_demos(&ds, 2, 9).unwrap();
        let out = corrupt(&demos, &ds.spec.classes, CorruptionMode::RandomToken, 5);
        for (orig, perm) in demos.iter().zip(&out.demos) {
            let mut a: Vec<char> = orig.x.chars().collect();
            let mut b: Vec<char> = perm.x.chars().collect();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
            assert_eq!(orig.y, perm.y);
        }
    }

    #[test]
    fn no_format_renders_bare() {
        let demo = Demonstration { x: "abc".into(), y: "A".into(), class_index: 0 };
        let out = corrupt(&[demo.clone()], &["A".to_string()], CorruptionMode::NoFormat, 0);
        let template = out.template_override.unwrap();
        assert_eq!(template.render(&demo), "abc\nA");
    }

    #[test]
    fn template_rendering_matches_contract() {
        let t = Template::default();
        let demo = Demonstration { x: "xy".into(), y: "B".into(), class_index: 1 };
        assert_eq!(t.render(&demo), "Input: xy\nLabel: B");
        assert_eq!(t.render_query("xy"), "Input: xy\nLabel: ");
    }

    #[test]
    fn family_instances_are_deterministic_and_vary() {
        let family = TaskFamily::new(11, 0.25);
        let a = family.sample_instance(0);
        let b = family.sample_instance(0);
        assert_eq!(a, b);
        // across many instances at least one permuted assignment shows up
        let canonical = family.canonical_task(0).generators;
        let any_permuted = (0..32).any(|i| family.sample_instance(i).generators != canonical);
        assert!(any_permuted);
    }

    #[test]
    fn demo_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.ndjson");
        let ds = generate_task(&spec(), 12, 0, 0).unwrap();
        save_demos(&path, &ds.train_pool).unwrap();
        let loaded = load_demos(&path, &ds.spec.classes).unwrap();
        assert_eq!(loaded, ds.train_pool);
    }

    #[test]
    fn task_spec_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.spec");
        let mut s = spec();
        s.name = "demo-task".into();
        s.min_len = 3;
        s.max_len = 6;
        save_task_spec(&path, &s).unwrap();
        let loaded = load_task_spec(&path).unwrap();
        assert_eq!(loaded, s);
    }

    #[test]
    fn task_spec_rejects_unknown_keys_and_bad_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.spec");
        fs::write(&path, "bogus = 1\n").unwrap();
        assert!(load_task_spec(&path).is_err());
        fs::write(&path, "min_len = 9\nmax_len = 3\n").unwrap();
        assert!(load_task_spec(&path).is_err());
    }
}
