//! Checkpoint-merging toolkit for moving preference-alignment task vectors
//! from an autoregressive checkpoint into a masked-diffusion checkpoint.
//!
//! The crate is organised bottom-up:
//!
//! - [`checkpoint`]: safetensors-compatible named-tensor files and
//!   architecture compatibility checks.
//! - [`task_vector`]: task vectors, scaled application, linear task
//!   arithmetic, TIES and DARE.
//! - [`spectral`]: singular spectra, spectral norms and the shadowing bound
//!   `‖τ_diff + γ·τ_pref‖₂ ≤ (1 + γ·ε)·‖τ_diff‖₂`.
//! - [`model`]: a small pre-norm transformer with a causal (AR) and a
//!   bidirectional masked-diffusion likelihood mode.
//! - [`reward`]: implicit diffusion rewards, batch reward accuracy, the
//!   coarse/fine scale search and forward-only preference loss values.
//! - [`synthetic`]: a reproducible end-to-end fixture generator.

pub mod checkpoint;
pub mod error;
pub mod model;
pub mod reward;
pub mod rng;
pub mod spectral;
pub mod synthetic;
pub mod task_vector;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, validate_compatible, Checkpoint, CompatReport, TensorRecord,
};
pub use error::{Error, Result};
pub use model::{ElboConfig, MaskedSeq, Mode, ModelConfig, TinyLm};
pub use reward::{PreferenceBatch, PreferencePair, RewardConfig, SearchTrace};
pub use task_vector::{MergePlan, SignMask, TaskVector};

/// Value written under the `armap.version` metadata key.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
