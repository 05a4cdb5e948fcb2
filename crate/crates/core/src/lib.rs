//! Desk-scale toolkit for monocular 3D detection mechanics: 3D-aware bipartite
//! matching with a step scheduler, noisy-query denoising (deterministic and
//! variational), mask-separated self-attention, forward-looking distillation,
//! and AP@R40 evaluation — all on synthetic scenes or KITTI-format labels,
//! with exact oracles and finite-difference gradient checks in place of
//! full-scale training.

pub mod attention;
pub mod config;
pub mod denoising;
pub mod eval;
pub mod geometry;
pub mod kitti;
pub mod matching;
pub mod model;
pub mod numeric;
