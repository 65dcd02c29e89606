//! Differentiable architecture search over factored TDNN layers.
//!
//! A weight-sharing super-network mixes every candidate splicing context and
//! bottleneck width of each layer under learnable architecture weights. The
//! crate trains those weights with Softmax, Gumbel-Softmax and pipelined
//! variants (optionally with a parameter-count penalty), extracts the N most
//! probable architectures from the resulting lattice, retrains them from
//! scratch, and checks the whole pipeline against an exhaustive oracle on
//! synthetic tasks with planted structure.
//!
//! Modules, bottom up:
//! - [`numeric`]: matrices, sequence tensors, seeded random streams
//! - [`layer`]: factored TDNN layer with gated context and width choices
//! - [`supernet`]: search spaces, architecture weights, super and candidate networks
//! - [`search`]: relaxations, penalties and the search schedule
//! - [`lattice`]: N-best extraction and the candidate text format
//! - [`data`]: planted-context and planted-rank tasks
//! - [`train`]: optimisers, retraining and checkpoints
//! - [`oracle`]: brute-force ranking and rank correlations
//! - [`config`] and [`cli`]: run configuration and the command-line driver

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod lattice;
pub mod layer;
pub mod numeric;
pub mod oracle;
pub mod search;
pub mod supernet;
pub mod train;
