//! Query-only source-free domain adaptation.
//!
//! Source models live behind a sealed oracle that answers only refined hard
//! labels for whole query sessions. The target side initialises a model from
//! third-party data labelled by the oracle, fine-tunes it on its own data with
//! clustered pseudo-labels, aligns the third-party data to the target through
//! feature-space adversarial perturbation, re-queries and retrains.

pub mod dat;
pub mod data;
pub mod error;
pub mod experiment;
pub mod mia;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod refine;

pub use error::{Error, Result};
