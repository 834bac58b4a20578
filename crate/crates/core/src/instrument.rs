//! Residual-stream read/write instrumentation.
//!
//! Holds the activation-trace types used to read MHA/MLP outputs out of a
//! forward pass, the injection plan that blends a context vector back into
//! the stream, and the norm-scaled Gaussian perturbation applied during
//! calibration. Binary container formats for context vectors (`I2CLV1`) and
//! coefficient sets (`I2CLC1`) live here as well.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::model::Weights;
use crate::tensor::BlendKind;

/// Module site a trace point or injection targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TargetModule {
    Mha,
    Mlp,
    /// Post-block hidden state; ablation configurations only.
    Hidden,
}

/// Token positions an injection applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionSpec {
    All,
    First,
    /// The position responsible for next-token prediction (the end of the
    /// query rendering in scoring forwards, the final token otherwise).
    Last,
    /// One position drawn per forward from the plan seed and recorded.
    Random,
}

/// Blend rule for [`apply_injection`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectionFormula {
    /// `λ·v + β·a`, both coefficients unconstrained.
    LinearCombo,
    /// `λ·v + a` with `λ > 0`.
    AddOnly,
    /// `(λ·v + (1−λ)·a)·β` with `β > 0`.
    ConvexScaled,
}

/// Where in a forward pass a vector is captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TracePoint {
    /// 1-based layer index.
    pub layer: usize,
    pub module: TargetModule,
    pub position: TracePosition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TracePosition {
    Index(usize),
    /// The final token of the forwarded sequence.
    End,
}

/// Set of capture sites for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct TraceRequest {
    points: BTreeSet<TracePoint>,
}

impl TraceRequest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, point: TracePoint) {
        self.points.insert(point);
    }

    /// End-token capture across all layers for MHA and MLP (plus the hidden
    /// state when requested).
    pub fn end_capture(n_layers: usize, include_hidden: bool) -> Self {
        let mut req = Self::new();
        for layer in 1..=n_layers {
            req.add(TracePoint { layer, module: TargetModule::Mha, position: TracePosition::End });
            req.add(TracePoint { layer, module: TargetModule::Mlp, position: TracePosition::End });
            if include_hidden {
                req.add(TracePoint {
                    layer,
                    module: TargetModule::Hidden,
                    position: TracePosition::End,
                });
            }
        }
        req
    }

    /// Every position of every layer, MHA and MLP: `2·L·T` vectors.
    pub fn full(n_layers: usize, seq_len: usize) -> Self {
        let mut req = Self::new();
        for layer in 1..=n_layers {
            for t in 0..seq_len {
                for module in [TargetModule::Mha, TargetModule::Mlp] {
                    req.add(TracePoint { layer, module, position: TracePosition::Index(t) });
                }
            }
        }
        req
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TracePoint> {
        self.points.iter()
    }

    /// Capture sites for a given (layer, module), resolved against a
    /// concrete sequence length.
    pub fn positions_for(&self, layer: usize, module: TargetModule, seq_len: usize) -> Vec<(TracePoint, usize)> {
        self.points
            .iter()
            .filter(|p| p.layer == layer && p.module == module)
            .filter_map(|p| match p.position {
                TracePosition::Index(i) if i < seq_len => Some((*p, i)),
                TracePosition::Index(_) => None,
                TracePosition::End => Some((*p, seq_len - 1)),
            })
            .collect()
    }
}

/// Captured vectors, keyed by trace point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationTrace {
    map: BTreeMap<TracePoint, Vec<f64>>,
}

impl ActivationTrace {
    pub fn insert(&mut self, point: TracePoint, vector: Vec<f64>) {
        self.map.insert(point, vector);
    }

    pub fn get(&self, point: &TracePoint) -> Option<&Vec<f64>> {
        self.map.get(point)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TracePoint, &Vec<f64>)> {
        self.map.iter()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for (point, v) in &self.map {
            if v.len() != dim {
                return Err(CoreError::ShapeMismatch {
                    op: "ActivationTrace",
                    details: format!("{point:?} has {} values, expected {dim}", v.len()),
                });
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(CoreError::NonFinite(format!("{point:?}")));
            }
        }
        Ok(())
    }
}

/// Per-layer averaged end-token activations: the condensed representation of
/// a demonstration set.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector {
    /// `ā_l` per layer, each of length D.
    pub mha: Vec<Vec<f64>>,
    /// `m̄_l` per layer, each of length D.
    pub mlp: Vec<Vec<f64>>,
    /// Mean end-token hidden state per layer; built on demand for the
    /// hidden-state ablation, never serialized.
    pub hidden: Option<Vec<Vec<f64>>>,
    /// How many demonstration vectors were averaged.
    pub source_count: usize,
}

impl ContextVector {
    pub fn n_layers(&self) -> usize {
        self.mha.len()
    }

    pub fn dim(&self) -> usize {
        self.mha.first().map(Vec::len).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mha.len() != self.mlp.len() || self.mha.is_empty() {
            return Err(CoreError::InvalidPlan("context vector layer counts differ".into()));
        }
        if self.source_count == 0 {
            return Err(CoreError::InvalidPlan("context vector has no sources".into()));
        }
        let d = self.dim();
        let all = self.mha.iter().chain(&self.mlp).chain(self.hidden.iter().flatten());
        for v in all {
            if v.len() != d {
                return Err(CoreError::InvalidPlan("context vector dims differ".into()));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(CoreError::NonFinite("context vector".into()));
            }
        }
        Ok(())
    }
}

/// The `4L` scalars controlling injection: `λ_l^a, β_l^a, λ_l^m, β_l^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub lambda_attn: Vec<f64>,
    pub beta_attn: Vec<f64>,
    pub lambda_mlp: Vec<f64>,
    pub beta_mlp: Vec<f64>,
}

impl CoefficientSet {
    pub fn uniform_init(n_layers: usize, lambda: f64, beta: f64) -> Self {
        Self {
            lambda_attn: vec![lambda; n_layers],
            beta_attn: vec![beta; n_layers],
            lambda_mlp: vec![lambda; n_layers],
            beta_mlp: vec![beta; n_layers],
        }
    }

    /// The zero-shot identity: λ = 0, β = 1 everywhere.
    pub fn identity(n_layers: usize) -> Self {
        Self::uniform_init(n_layers, 0.0, 1.0)
    }

    pub fn n_layers(&self) -> usize {
        self.lambda_attn.len()
    }

    /// Flatten to `(λ^a, β^a, λ^m, β^m)` per layer, ascending layers.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(4 * self.n_layers());
        for l in 0..self.n_layers() {
            out.push(self.lambda_attn[l]);
            out.push(self.beta_attn[l]);
            out.push(self.lambda_mlp[l]);
            out.push(self.beta_mlp[l]);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.is_empty() || flat.len() % 4 != 0 {
            return Err(CoreError::InvalidPlan(format!("{} is not 4L values", flat.len())));
        }
        let n = flat.len() / 4;
        let mut set = Self::uniform_init(n, 0.0, 0.0);
        for l in 0..n {
            set.lambda_attn[l] = flat[4 * l];
            set.beta_attn[l] = flat[4 * l + 1];
            set.lambda_mlp[l] = flat[4 * l + 2];
            set.beta_mlp[l] = flat[4 * l + 3];
        }
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_layers();
        if self.beta_attn.len() != n || self.lambda_mlp.len() != n || self.beta_mlp.len() != n || n == 0
        {
            return Err(CoreError::InvalidPlan("coefficient vectors differ in length".into()));
        }
        if !self.flatten().iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("coefficient set".into()));
        }
        Ok(())
    }
}

/// Which sites receive injection and under which blend rule.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionProfile {
    pub target_modules: BTreeSet<TargetModule>,
    /// 1-based layer indices.
    pub target_layers: BTreeSet<usize>,
    pub target_positions: PositionSpec,
    pub formula: InjectionFormula,
}

impl InjectionProfile {
    /// The default treatment: MHA+MLP, all layers, all positions, linear.
    pub fn standard(n_layers: usize) -> Self {
        Self {
            target_modules: [TargetModule::Mha, TargetModule::Mlp].into_iter().collect(),
            target_layers: (1..=n_layers).collect(),
            target_positions: PositionSpec::All,
            formula: InjectionFormula::LinearCombo,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.target_modules.is_empty() {
            return Err(CoreError::InvalidPlan("empty target module set".into()));
        }
        if self.target_layers.is_empty() {
            return Err(CoreError::InvalidPlan("empty target layer set".into()));
        }
        for &l in &self.target_layers {
            if l == 0 || l > n_layers {
                return Err(CoreError::InvalidPlan(format!("layer {l} outside 1..={n_layers}")));
            }
        }
        Ok(())
    }
}

/// Everything a forward pass needs to perform context injection.
#[derive(Debug, Clone)]
pub struct InjectionPlan {
    pub context: ContextVector,
    pub coefficients: CoefficientSet,
    pub profile: InjectionProfile,
    /// Calibration-only noise scale; must be 0 at evaluation time.
    pub noise_gamma: f64,
    pub noise_seed: u64,
}

impl InjectionPlan {
    pub fn new(context: ContextVector, coefficients: CoefficientSet, profile: InjectionProfile) -> Self {
        Self { context, coefficients, profile, noise_gamma: 0.0, noise_seed: 0 }
    }

    pub fn validate_for(&self, n_layers: usize, dim: usize) -> Result<()> {
        self.context.validate()?;
        self.coefficients.validate()?;
        self.profile.validate(n_layers)?;
        if self.context.n_layers() != n_layers || self.coefficients.n_layers() != n_layers {
            return Err(CoreError::InvalidPlan(format!(
                "plan built for {} layers, model has {n_layers}",
                self.context.n_layers()
            )));
        }
        if self.context.dim() != dim {
            return Err(CoreError::InvalidPlan(format!(
                "context dim {} vs model dim {dim}",
                self.context.dim()
            )));
        }
        if self.noise_gamma < 0.0 {
            return Err(CoreError::InvalidPlan("negative noise scale".into()));
        }
        if self.profile.target_modules.contains(&TargetModule::Hidden) && self.context.hidden.is_none()
        {
            return Err(CoreError::InvalidPlan("hidden targets need a hidden context component".into()));
        }
        for &l in &self.profile.target_layers {
            let i = l - 1;
            match self.profile.formula {
                InjectionFormula::LinearCombo => {}
                InjectionFormula::AddOnly => {
                    if self.coefficients.lambda_attn[i] <= 0.0 || self.coefficients.lambda_mlp[i] <= 0.0
                    {
                        return Err(CoreError::ConstraintViolation(format!(
                            "add-only formula needs λ > 0 at layer {l}"
                        )));
                    }
                }
                InjectionFormula::ConvexScaled => {
                    if self.coefficients.beta_attn[i] <= 0.0 || self.coefficients.beta_mlp[i] <= 0.0 {
                        return Err(CoreError::ConstraintViolation(format!(
                            "convex-scaled formula needs β > 0 at layer {l}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// (effective λ, effective β, blend kind) for the tape-level op.
    ///
    /// The add-only formula pins β to 1, matching its `λ·v + a` definition.
    pub fn blend_parts(&self, lambda: f64, beta: f64) -> (f64, f64, BlendKind) {
        match self.profile.formula {
            InjectionFormula::LinearCombo => (lambda, beta, BlendKind::Linear),
            InjectionFormula::AddOnly => (lambda, 1.0, BlendKind::Linear),
            InjectionFormula::ConvexScaled => (lambda, beta, BlendKind::ConvexScaled),
        }
    }
}

/// Blend one activation vector with one context component.
pub fn apply_injection(
    activation: &[f64],
    context: &[f64],
    lambda: f64,
    beta: f64,
    formula: InjectionFormula,
) -> Result<Vec<f64>> {
    if activation.len() != context.len() {
        return Err(CoreError::ShapeMismatch {
            op: "apply_injection",
            details: format!("{} vs {}", activation.len(), context.len()),
        });
    }
    match formula {
        InjectionFormula::LinearCombo => {
            Ok(activation.iter().zip(context).map(|(a, v)| lambda * v + beta * a).collect())
        }
        InjectionFormula::AddOnly => {
            if lambda <= 0.0 {
                return Err(CoreError::ConstraintViolation("add-only formula needs λ > 0".into()));
            }
            Ok(activation.iter().zip(context).map(|(a, v)| lambda * v + a).collect())
        }
        InjectionFormula::ConvexScaled => {
            if beta <= 0.0 {
                return Err(CoreError::ConstraintViolation("convex-scaled formula needs β > 0".into()));
            }
            Ok(activation
                .iter()
                .zip(context)
                .map(|(a, v)| (lambda * v + (1.0 - lambda) * a) * beta)
                .collect())
        }
    }
}

/// Norm-scaled Gaussian perturbation: `x + γ‖x‖₂·η`, `η ~ N(0, I)`.
///
/// A zero scale returns the input bit-exact without consuming the stream.
pub fn apply_noise<R: Rng>(x: &[f64], gamma: f64, rng: &mut R) -> Vec<f64> {
    debug_assert!(gamma >= 0.0);
    if gamma == 0.0 {
        return x.to_vec();
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let factor = gamma * norm;
    x.iter().map(|&v| v + factor * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Resolve a position spec against a concrete sequence.
///
/// `boundary` is the prediction-responsible index for `Last`. `Random` draws
/// one index from the provided closure (plan-seeded) and reports it back.
pub fn resolve_positions(
    spec: PositionSpec,
    seq_len: usize,
    boundary: Option<usize>,
    draw: impl FnOnce() -> u64,
) -> (Vec<usize>, Option<usize>) {
    match spec {
        PositionSpec::All => ((0..seq_len).collect(), None),
        PositionSpec::First => (vec![0], None),
        PositionSpec::Last => (vec![boundary.unwrap_or(seq_len - 1)], None),
        PositionSpec::Random => {
            let p = (draw() % seq_len as u64) as usize;
            (vec![p], Some(p))
        }
    }
}

/// Run a clean forward pass and capture end-token activations of both
/// modules (and optionally the hidden state) across all layers.
pub fn capture_end(weights: &Weights, tokens: &[u32], include_hidden: bool) -> Result<ActivationTrace> {
    let request = TraceRequest::end_capture(weights.config.n_layers, include_hidden);
    let run = crate::model::ForwardRun { trace: Some(&request), ..Default::default() };
    let out = crate::model::forward(weights, tokens, &run)?;
    let expected = weights.config.n_layers * if include_hidden { 3 } else { 2 };
    if out.trace.len() != expected {
        return Err(CoreError::MissingCapture(format!(
            "captured {} of {expected} end vectors",
            out.trace.len()
        )));
    }
    Ok(out.trace)
}

// --- binary container formats ------------------------------------------------

const CONTEXT_MAGIC: &[u8; 6] = b"I2CLV1";
const COEFF_MAGIC: &[u8; 6] = b"I2CLC1";

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8], what: &'static str) -> Self {
        Self { data, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(CoreError::Format(format!("{}: truncated at byte {}", self.what, self.pos)));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(CoreError::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Context vector container: magic `I2CLV1`, header `(L, D)` as LE u32,
/// then per layer the MHA and MLP components as LE f64 arrays.
pub fn save_context_vector(path: &Path, v: &ContextVector) -> Result<()> {
    v.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CONTEXT_MAGIC);
    push_u32(&mut buf, v.n_layers() as u32);
    push_u32(&mut buf, v.dim() as u32);
    for l in 0..v.n_layers() {
        push_f64s(&mut buf, &v.mha[l]);
        push_f64s(&mut buf, &v.mlp[l]);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_context_vector(path: &Path) -> Result<ContextVector> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader::new(&data, "context vector");
    if r.take(6)? != CONTEXT_MAGIC {
        return Err(CoreError::Format("context vector: bad magic".into()));
    }
    let l = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mut mha = Vec::with_capacity(l);
    let mut mlp = Vec::with_capacity(l);
    for _ in 0..l {
        mha.push(r.f64s(d)?);
        mlp.push(r.f64s(d)?);
    }
    r.finish()?;
    // the container does not carry provenance; treat as a single source
    let v = ContextVector { mha, mlp, hidden: None, source_count: 1 };
    v.validate()?;
    Ok(v)
}

/// Coefficient container: magic `I2CLC1`, header `(L, D)` as LE u32, then
/// the `4L` scalars in flatten order as LE f64.
pub fn save_coefficients(path: &Path, c: &CoefficientSet, dim: usize) -> Result<()> {
    c.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(COEFF_MAGIC);
    push_u32(&mut buf, c.n_layers() as u32);
    push_u32(&mut buf, dim as u32);
    push_f64s(&mut buf, &c.flatten());
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_coefficients(path: &Path) -> Result<(CoefficientSet, usize)> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader::new(&data, "coefficient set");
    if r.take(6)? != COEFF_MAGIC {
        return Err(CoreError::Format("coefficient set: bad magic".into()));
    }
    let l = r.u32()? as usize;
    let d = r.u32()? as usize;
    let flat = r.f64s(4 * l)?;
    r.finish()?;
    let c = CoefficientSet::from_flat(&flat)?;
    c.validate()?;
    Ok((c, d))
}
