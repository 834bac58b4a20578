//! Desk-scale decoder-only transformer engine with residual-stream
//! instrumentation for implicit in-context learning.
//!
//! The crate is organized around the stages of the method:
//!
//! - [`tensor`] — dense `f64` tensors and a reverse-mode differentiation tape
//! - [`taskgen`] — synthetic few-shot classification task families
//! - [`instrument`] — residual-stream read/write: traces, injection, noise
//! - [`model`] — the transformer itself: config, weights, forward, pretraining
//! - [`pipeline`] — context vectorization, aggregation, calibration, evaluation
//! - [`baselines`] — zero-shot, ICL, combined-mode, noise-vector and task-vector
//! - [`transfer`] — coefficient task-ids and anchor-based transfer learning
//! - [`costs`] — token and cached-parameter accounting
//! - [`report`] — CSV artifacts shared by the CLI and the test harnesses

pub mod baselines;
pub mod costs;
pub mod error;
pub mod instrument;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod taskgen;
pub mod tensor;
pub mod transfer;

pub use error::{CoreError, Result};
pub use instrument::{
    ActivationTrace, CoefficientSet, ContextVector, InjectionFormula, InjectionPlan,
    InjectionProfile, PositionSpec, TargetModule, TracePoint, TraceRequest,
};
pub use model::{ModelConfig, Tokenizer, Weights};
pub use pipeline::{CalibrationConfig, DemonstrationVector};
pub use taskgen::{ClassGenerator, Dataset, Demonstration, SyntheticTaskSpec, TaskFamily, Template};
pub use tensor::{Tape, Tensor, ValId};
