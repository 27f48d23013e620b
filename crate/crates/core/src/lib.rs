//! Continual masked-language-model pre-training at desk scale.
//!
//! The crate trains a small transformer encoder sequentially on several text
//! domains and measures how much each domain is forgotten under different
//! mitigation strategies:
//!
//! * elastic weight consolidation with an empirical Fisher diagonal,
//!   plus a no-Fisher (plain L2-to-anchor) ablation,
//! * learning-rate control: layerwise decay with a slanted triangular schedule,
//! * experience replay of stored batches from earlier domains,
//! * multi-domain (mixed) training as an upper-bound baseline.
//!
//! Everything runs on CPU in `f64` on a small reverse-mode tape
//! ([`tensor`]). Experiments are described by TOML configs and driven by
//! [`experiment::run`].

pub mod continual;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod tensor;

pub use error::{CalmError, Result};
pub use tensor::{ParamSet, Parameter, Tape, Tensor, Var};
