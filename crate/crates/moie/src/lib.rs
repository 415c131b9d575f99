//! Distill a trained blackbox classifier into a coverage-controlled
//! mixture of concept-based interpretable experts plus a residual, extract
//! first-order-logic explanations per covered sample, and transfer the
//! mixture to a shifted domain via pseudo-labeled concepts.
//!
//! Start with the runnable examples:
//!
//! ```bash
//! cargo run --release --example gradient_check
//! cargo run --release --example synthesize_dataset
//! cargo run --release --example train_blackbox
//! cargo run --release --example distill_mixture
//! cargo run --release --example explain_samples
//! cargo run --release --example intervention_curves
//! cargo run --release --example transfer_domain
//! ```
//!
//! The same workflow is scriptable through the thin `moie` binary
//! (`synth`, `train-bb`, `distill`, `explain`, `transfer`, `report`).

pub mod blackbox;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod experts;
pub mod logic;
pub mod metrics;
pub mod pipeline;
pub mod transfer;
pub mod seed;
pub mod selectors;

pub use error::{Error, Result};
