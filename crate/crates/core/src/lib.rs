//! State tracking with chain-of-thought on a one-layer transformer.
//!
//! The library builds LEGO sentences — chains of predicate clauses
//! `x_l = g_l(x_{l-1})` over a finite group action plus answer clauses
//! `x_l = y_l` — and trains a one-layer NoPE decoder block (merged-Q softmax
//! attention over clause embeddings, smoothed-ReLU FFN with fixed biases,
//! clipped logits) to extend the answer chain clause by clause.
//!
//! Modules, bottom up:
//!
//! * [`rng`] — deterministic random streams (xoshiro256++ / SplitMix64).
//! * [`group`] — cyclic and symmetry group actions on `Z_n`, fibers, and the
//!   brute-force state-tracking oracle.
//! * [`corpus`] — vocabulary layout, sentence sampling, clause embedding,
//!   bootstrapped (self-labeled) sampling, JSONL corpora.
//! * [`model`] — the transformer block, decoding, checkpoints.
//! * [`train`] — next-clause losses, analytic gradients plus the
//!   finite-difference oracle, optimizers, curriculum and recursive
//!   self-training schedules.
//! * [`eval`] — teacher-forced and rollout accuracy, attention concentration
//!   diagnostics, permutation ablation, feature probes, CSV exports.
//! * [`config`] / [`cli`] / [`manifest`] — the reproduction driver: presets,
//!   deterministic run directories, content-hash manifests.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod group;
pub mod manifest;
pub mod model;
pub mod rng;
pub mod train;
