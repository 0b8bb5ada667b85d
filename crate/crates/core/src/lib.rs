//! Error-driven curriculum training for crowd density regression.
//!
//! A tutoring network predicts a per-pixel weight map that re-weights the
//! regression loss of a main counting network, and ground-truth density maps
//! are multiplied by a scale factor to lift their tiny pixel values.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curriculum;
pub mod density;
pub mod error;
pub mod experiment;
pub mod files;
pub mod gradcheck;
pub mod nets;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use curriculum::{CurriculumParams, ErrorMap, WeightMap};
pub use density::{AnnotatedScene, DensityMap, Point};
pub use error::{Error, Result};
pub use nets::{MainKind, NetworkParams, NetworkSpec, TutorDepth, Width};
pub use synth::SceneRecipe;
pub use tensor::Tensor;
pub use trainer::{EvalReport, Mode, Optimizer, StepRecord, TrainConfig};
