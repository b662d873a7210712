//! Multimodal masked word learning with analogical retrieval over past
//! episodes.
//!
//! The crate implements a small, self-contained training stack in plain
//! `f64`: a reverse-mode autodiff engine (`tensor`), a synthetic world of
//! image/sentence episodes (`world`), a single-stream multimodal encoder
//! (`backbone`), retrieval of related episodes from memory (`amm`),
//! analogy-based composition over the retrieved episodes (`arn`), a
//! context-conditioned word predictor (`cce`), and a training/evaluation
//! harness (`harness`). The `model` module ties the pieces into the three
//! runnable variants.

pub mod amm;
pub mod arn;
pub mod backbone;
pub mod cce;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod params;
pub mod seeds;
pub mod tensor;
pub mod world;
