//! Distribution-matching RL for masked discrete diffusion sequence models.
//!
//! The crate trains a masked-diffusion policy so that its sequence
//! distribution matches the reward-tilted reference distribution
//! `p*(o|q) ∝ p_ref(o|q) exp(r(q,o)/alpha)`, using self-normalized
//! importance weights over off-policy rollouts and a weighted denoising
//! cross-entropy (or weighted discriminative) loss. Small vocabularies keep
//! everything exactly enumerable, so brute-force oracles can verify the
//! distribution matching claim directly.
//!
//! Module map:
//! - [`mdm`]: sequences, masking, orders, exact/estimated sequence
//!   probabilities, rollout sampling
//! - [`policy`]: tabular and tiny-net backends, snapshots, manual backprop,
//!   finite-difference gradient checking
//! - [`weights`]: importance log-weights, group normalization, partition
//!   estimates, weight baselines
//! - [`loss`]: WDCE and WDDO losses with exact gradients
//! - [`trainer`]: replay buffer, AdamW, the training loop, metrics
//! - [`envs`]: synthetic multi-modal, countdown and 4x4 sudoku environments
//! - [`oracle`]: dense target/model distributions, exact KL, mode masses
//! - [`checkpoint`]: versioned binary policy/optimizer container
//!
//! The hot loops (rollout generation, per-record gradients, dense
//! enumeration) run on rayon when the default `parallel` feature is enabled
//! and on plain iterators otherwise; results are bit-identical either way.

pub mod checkpoint;
pub mod envs;
pub mod error;
pub mod loss;
pub mod mdm;
pub mod oracle;
pub mod par;
pub mod policy;
pub mod rng;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
