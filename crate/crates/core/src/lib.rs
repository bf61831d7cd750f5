//! Understanding-oriented post-training for a miniature two-expert unified
//! multimodal transformer, with the data world, training loop, diagnostics and
//! evaluation harness needed to check every mechanism end to end.

pub mod diagnostics;
pub mod evalsuite;
pub mod io;
pub mod model;
pub mod objectives;
pub mod packing;
pub mod trainer;
pub mod seed;
pub mod worldgen;
