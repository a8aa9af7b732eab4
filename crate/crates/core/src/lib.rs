//! Generation of likely-unsupposable test data for machine-learned models.
//!
//! Desk-scale generative models are trained on an existing dataset and then
//! decoded from latent values that are deliberately improbable under their
//! prior: a VAE with rare Gaussian-mixture latents for tabular data, and a
//! VQ-VAE whose autoregressive prior has its categorical outputs flattened
//! for images.

pub mod dataset;
pub mod error;
pub mod fixtures;
pub mod kernel;
pub mod pipeline;
pub mod prior;
pub mod rare;
pub mod rng;
pub mod stats;
pub mod vae;
pub mod vqvae;

pub use dataset::{ColumnKind, ColumnSpec, ImageDataset, LoadError, Schema, TabularDataset};
pub use error::{Error, Result};
pub use pipeline::{GenParams, Label, Latent, LuRecord, SweepAxis, SweepReport, Values};
pub use prior::{PriorConfig, PriorModel};
pub use rare::{CategoricalDist, RarityParams, SamplerChoice, ThresholdParam};
pub use vae::{VaeConfig, VaeModel};
pub use vqvae::{DiscreteLatentMap, VqVaeConfig, VqVaeModel};
