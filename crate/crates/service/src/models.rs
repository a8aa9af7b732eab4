//! Trained models and reference data behind a session, loaded from the
//! paths recorded in it.

use std::path::Path;

use utg_core::dataset::{load_csv, load_idx};
use utg_core::kernel::persist::ModelFile;
use utg_core::pipeline::{self, GenParams, ImageSource, LuRecord, TabularSource};
use utg_core::{ImageDataset, PriorModel, SamplerChoice, TabularDataset, VaeModel, VqVaeModel};

use crate::store::{Mode, ModelRefs};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    /// A referenced file does not exist.
    #[error("{0}")]
    Missing(String),
    /// Files exist but do not fit the mode or each other.
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] utg_core::Error),
}

pub enum Loaded {
    Tabular {
        vae: VaeModel,
        reference: TabularDataset,
        model_ref: String,
    },
    Image {
        vq: VqVaeModel,
        prior: PriorModel,
        reference: ImageDataset,
        model_ref: String,
    },
}

fn absolute(path: &str, what: &str) -> Result<String, ModelError> {
    std::fs::canonicalize(path)
        .map(|p| p.to_string_lossy().into_owned())
        .map_err(|_| ModelError::Missing(format!("{what} file {path:?} not found")))
}

fn model_file(path: &str, kind: &str) -> Result<ModelFile, ModelError> {
    let file = ModelFile::load(Path::new(path)).map_err(|e| ModelError::Mismatch(format!("{path}: {e}")))?;
    match file.kind() {
        Some(k) if k == kind => Ok(file),
        other => Err(ModelError::Mismatch(format!(
            "{path} holds a {} model, expected {kind}",
            other.unwrap_or("unknown")
        ))),
    }
}

/// Resolves request paths to absolute ones; `data` falls back to the path
/// recorded in the model at training time.
pub fn resolve(mode: Mode, vae: Option<&str>, vq: Option<&str>, prior: Option<&str>, data: Option<&str>) -> Result<(ModelRefs, Loaded), ModelError> {
    fn need<'a>(mode: Mode, p: Option<&'a str>, what: &str) -> Result<&'a str, ModelError> {
        p.ok_or_else(|| ModelError::Mismatch(format!("mode {mode:?} needs a {what} model path")))
    }
    let data_path = |recorded: &Option<String>| -> Result<String, ModelError> {
        let p = data
            .map(str::to_owned)
            .or_else(|| recorded.clone())
            .ok_or_else(|| ModelError::Mismatch("no reference data given and none recorded in the model".into()))?;
        absolute(&p, "data")
    };
    match mode {
        Mode::VaeTabular => {
            let path = absolute(need(mode, vae, "vae")?, "model")?;
            let model = VaeModel::from_model_file(&model_file(&path, "vae")?)?;
            let data = data_path(&model.data_ref)?;
            let refs = ModelRefs {
                vae: Some(path),
                vq: None,
                prior: None,
                data,
            };
            let loaded = load(mode, &refs)?;
            Ok((refs, loaded))
        }
        Mode::VqvaeImage => {
            let vq_path = absolute(need(mode, vq, "vq")?, "model")?;
            let prior_path = absolute(need(mode, prior, "prior")?, "model")?;
            let vq_model = VqVaeModel::from_model_file(&model_file(&vq_path, "vqvae")?)?;
            model_file(&prior_path, "prior")?;
            let data = data_path(&vq_model.data_ref)?;
            let refs = ModelRefs {
                vae: None,
                vq: Some(vq_path),
                prior: Some(prior_path),
                data,
            };
            let loaded = load(mode, &refs)?;
            Ok((refs, loaded))
        }
    }
}

pub fn load(mode: Mode, refs: &ModelRefs) -> Result<Loaded, ModelError> {
    let exists = |p: &str| {
        if Path::new(p).exists() {
            Ok(())
        } else {
            Err(ModelError::Missing(format!("{p} no longer exists")))
        }
    };
    exists(&refs.data)?;
    match (mode, &refs.vae, &refs.vq, &refs.prior) {
        (Mode::VaeTabular, Some(vae), _, _) => {
            exists(vae)?;
            let vae_model = VaeModel::from_model_file(&model_file(vae, "vae")?)?;
            let reference = load_csv(Path::new(&refs.data), &vae_model.codec.schema)
                .map_err(|e| ModelError::Mismatch(format!("reference data: {e}")))?;
            Ok(Loaded::Tabular {
                vae: vae_model,
                reference,
                model_ref: vae.clone(),
            })
        }
        (Mode::VqvaeImage, _, Some(vq), Some(prior)) => {
            exists(vq)?;
            exists(prior)?;
            let vq_model = VqVaeModel::from_model_file(&model_file(vq, "vqvae")?)?;
            let prior_model = PriorModel::from_model_file(&model_file(prior, "prior")?)?;
            let reference = load_idx(Path::new(&refs.data), None)
                .map_err(|e| ModelError::Mismatch(format!("reference data: {e}")))?;
            if vq_model.grid() != prior_model.geometry() || vq_model.config.codebook_size != prior_model.codebook_size() {
                return Err(ModelError::Mismatch("VQ-VAE and prior disagree on map geometry".into()));
            }
            if (reference.height, reference.width) != (vq_model.config.image_height, vq_model.config.image_width) {
                return Err(ModelError::Mismatch("reference images differ in size from the VQ-VAE".into()));
            }
            Ok(Loaded::Image {
                vq: vq_model,
                prior: prior_model,
                reference,
                model_ref: format!("{vq};{prior}"),
            })
        }
        _ => Err(ModelError::Mismatch("session model references do not fit its mode".into())),
    }
}

impl Loaded {
    pub fn generate(&self, params: GenParams, n: usize, seed: u64) -> Result<Vec<LuRecord>, ModelError> {
        match (self, params) {
            (
                Loaded::Tabular {
                    vae,
                    reference,
                    model_ref,
                },
                GenParams::Rarity(p),
            ) => {
                let src = TabularSource {
                    model: vae,
                    reference,
                    model_ref: model_ref.clone(),
                };
                Ok(pipeline::generate_lu_tabular(&src, p, n, seed, SamplerChoice::default())?)
            }
            (
                Loaded::Image {
                    vq,
                    prior,
                    reference,
                    model_ref,
                },
                GenParams::Threshold(t),
            ) => {
                let src = ImageSource {
                    vq,
                    prior,
                    reference,
                    model_ref: model_ref.clone(),
                };
                Ok(pipeline::generate_lu_images(&src, t, n, seed)?)
            }
            _ => Err(ModelError::Mismatch("parameters do not fit the session mode".into())),
        }
    }
}
