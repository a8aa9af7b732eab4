//! `utg train vae|vqvae|prior`.

use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use utg_core::dataset::{load_csv, load_idx};
use utg_core::prior::train_prior;
use utg_core::vae::train_vae;
use utg_core::vqvae::{read_map_cache, train_vqvae, write_map_cache};
use utg_core::{DiscreteLatentMap, ImageDataset, PriorConfig, Schema, VaeConfig, VqVaeConfig, VqVaeModel};

use crate::config::{absolute, existing, fail, resolve, seed_or_fresh, sidecar, write_json, CliResult};

#[derive(Subcommand)]
pub enum TrainKind {
    /// Tabular VAE on a CSV with a column schema.
    Vae(TrainVaeArgs),
    /// VQ-VAE on an IDX image file.
    Vqvae(TrainVqArgs),
    /// Autoregressive prior over the discrete maps of a trained VQ-VAE.
    Prior(TrainPriorArgs),
}

pub fn run(kind: TrainKind) -> CliResult<()> {
    match kind {
        TrainKind::Vae(a) => train_vae_cmd(resolve(a.config.as_deref(), &a)?),
        TrainKind::Vqvae(a) => train_vq_cmd(resolve(a.config.as_deref(), &a)?),
        TrainKind::Prior(a) => train_prior_cmd(resolve(a.config.as_deref(), &a)?),
    }
}

#[derive(Args, Serialize)]
pub struct TrainVaeArgs {
    /// JSON run config; explicit flags override its values.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Hidden widths shared by encoder and decoder, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model file to write; loss history and run config go beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn vae_defaults() -> VaeConfig {
    VaeConfig::default()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainVaeRun {
    data: PathBuf,
    schema: PathBuf,
    #[serde(default = "d_latent")]
    latent_dim: usize,
    #[serde(default = "d_hidden")]
    hidden: Vec<usize>,
    #[serde(default = "d_vae_epochs")]
    epochs: usize,
    #[serde(default = "d_vae_batch")]
    batch_size: usize,
    #[serde(default = "d_vae_lr")]
    lr: f64,
    #[serde(default)]
    seed: Option<u64>,
    out: PathBuf,
}

fn d_latent() -> usize {
    vae_defaults().latent_dim
}
fn d_hidden() -> Vec<usize> {
    vae_defaults().encoder_hidden
}
fn d_vae_epochs() -> usize {
    vae_defaults().epochs
}
fn d_vae_batch() -> usize {
    vae_defaults().batch_size
}
fn d_vae_lr() -> f64 {
    vae_defaults().learning_rate
}

fn train_vae_cmd(mut run: TrainVaeRun) -> CliResult<()> {
    run.data = existing(&run.data, "data")?;
    run.schema = existing(&run.schema, "schema")?;
    run.out = absolute(&run.out);
    run.seed = Some(seed_or_fresh(run.seed));
    let schema = Schema::load(&run.schema).map_err(|e| fail(format!("{}: {e}", run.schema.display())))?;
    let ds = load_csv(&run.data, &schema).map_err(|e| fail(format!("{}: {e}", run.data.display())))?;
    let cfg = VaeConfig {
        latent_dim: run.latent_dim,
        encoder_hidden: run.hidden.clone(),
        decoder_hidden: run.hidden.iter().rev().copied().collect(),
        epochs: run.epochs,
        batch_size: run.batch_size,
        learning_rate: run.lr,
        seed: run.seed.unwrap_or_default(),
    };
    tracing::info!(rows = ds.len(), epochs = cfg.epochs, "training vae");
    let mut model = train_vae(&ds, &cfg)?;
    model.data_ref = Some(run.data.to_string_lossy().into_owned());
    model.save(&run.out)?;
    write_json(&sidecar(&run.out, "loss.json"), &json!({ "loss": model.loss_history }))?;
    write_json(&sidecar(&run.out, "run.json"), &run)?;
    report_losses(&run.out, &model.loss_history);
    Ok(())
}

fn report_losses(out: &Path, history: &[f64]) {
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        eprintln!("wrote {} (loss {first:.4} -> {last:.4})", out.display());
    }
}

#[derive(Args, Serialize)]
pub struct TrainVqArgs {
    /// JSON run config; explicit flags override its values.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// IDX image file, optionally gzip-compressed.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Train on the first N images only.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    code_dim: Option<usize>,
    /// Channels of the two strided convolutions, comma separated.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model file to write; loss history, latent-map cache and run config go beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn vq_defaults() -> VqVaeConfig {
    VqVaeConfig::default()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainVqRun {
    images: PathBuf,
    #[serde(default)]
    limit: Option<usize>,
    #[serde(default = "d_codebook")]
    codebook_size: usize,
    #[serde(default = "d_code_dim")]
    code_dim: usize,
    #[serde(default = "d_channels")]
    channels: Vec<usize>,
    #[serde(default = "d_beta")]
    beta: f64,
    #[serde(default = "d_vq_epochs")]
    epochs: usize,
    #[serde(default = "d_vq_batch")]
    batch_size: usize,
    #[serde(default = "d_vq_lr")]
    lr: f64,
    #[serde(default)]
    seed: Option<u64>,
    out: PathBuf,
}

fn d_codebook() -> usize {
    vq_defaults().codebook_size
}
fn d_code_dim() -> usize {
    vq_defaults().code_dim
}
fn d_channels() -> Vec<usize> {
    vq_defaults().channels.to_vec()
}
fn d_beta() -> f64 {
    vq_defaults().beta
}
fn d_vq_epochs() -> usize {
    vq_defaults().epochs
}
fn d_vq_batch() -> usize {
    vq_defaults().batch_size
}
fn d_vq_lr() -> f64 {
    vq_defaults().learning_rate
}

fn load_images(path: &Path, limit: Option<usize>) -> CliResult<ImageDataset> {
    let ds = load_idx(path, None).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    Ok(match limit {
        Some(n) if n < ds.len() => ds.take(n),
        _ => ds,
    })
}

fn train_vq_cmd(mut run: TrainVqRun) -> CliResult<()> {
    run.images = existing(&run.images, "images")?;
    run.out = absolute(&run.out);
    run.seed = Some(seed_or_fresh(run.seed));
    let channels: [usize; 2] = run
        .channels
        .as_slice()
        .try_into()
        .map_err(|_| fail("--channels takes exactly two widths"))?;
    let ds = load_images(&run.images, run.limit)?;
    let cfg = VqVaeConfig {
        codebook_size: run.codebook_size,
        code_dim: run.code_dim,
        image_height: ds.height,
        image_width: ds.width,
        channels,
        beta: run.beta,
        epochs: run.epochs,
        batch_size: run.batch_size,
        learning_rate: run.lr,
        seed: run.seed.unwrap_or_default(),
    };
    tracing::info!(images = ds.len(), epochs = cfg.epochs, "training vq-vae");
    let mut model = train_vqvae(&ds, &cfg)?;
    model.data_ref = Some(run.images.to_string_lossy().into_owned());
    model.save(&run.out)?;
    let maps = model.encode_dataset_maps(&ds)?;
    write_map_cache(&sidecar(&run.out, "maps"), &maps)?;
    write_json(
        &sidecar(&run.out, "loss.json"),
        &json!({ "loss": model.loss_history, "codebook_usage": model.codebook_usage }),
    )?;
    write_json(&sidecar(&run.out, "run.json"), &run)?;
    let recon: Vec<f64> = model.loss_history.iter().map(|l| l.recon).collect();
    report_losses(&run.out, &recon);
    Ok(())
}

#[derive(Args, Serialize)]
pub struct TrainPriorArgs {
    /// JSON run config; explicit flags override its values.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Trained VQ-VAE whose latent maps the prior models.
    #[arg(long)]
    vq: Option<PathBuf>,
    /// Images to encode; defaults to the VQ-VAE's training images.
    #[arg(long, conflicts_with = "maps")]
    images: Option<PathBuf>,
    /// Pre-encoded latent-map cache written by `train vqvae`.
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    first_kernel: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn prior_defaults() -> PriorConfig {
    PriorConfig::default()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainPriorRun {
    vq: PathBuf,
    #[serde(default)]
    images: Option<PathBuf>,
    #[serde(default)]
    maps: Option<PathBuf>,
    #[serde(default)]
    limit: Option<usize>,
    #[serde(default = "d_layers")]
    layers: usize,
    #[serde(default = "d_prior_channels")]
    channels: usize,
    #[serde(default = "d_first_kernel")]
    first_kernel: usize,
    #[serde(default = "d_kernel")]
    kernel: usize,
    #[serde(default = "d_prior_epochs")]
    epochs: usize,
    #[serde(default = "d_prior_batch")]
    batch_size: usize,
    #[serde(default = "d_prior_lr")]
    lr: f64,
    #[serde(default)]
    seed: Option<u64>,
    out: PathBuf,
}

fn d_layers() -> usize {
    prior_defaults().layers
}
fn d_prior_channels() -> usize {
    prior_defaults().channels
}
fn d_first_kernel() -> usize {
    prior_defaults().first_kernel
}
fn d_kernel() -> usize {
    prior_defaults().kernel
}
fn d_prior_epochs() -> usize {
    prior_defaults().epochs
}
fn d_prior_batch() -> usize {
    prior_defaults().batch_size
}
fn d_prior_lr() -> f64 {
    prior_defaults().learning_rate
}

fn prior_corpus(run: &mut TrainPriorRun, vq: &VqVaeModel) -> CliResult<Vec<DiscreteLatentMap>> {
    if let Some(maps) = &run.maps {
        let path = existing(maps, "maps")?;
        run.maps = Some(path.clone());
        let mut maps = read_map_cache(&path)?;
        if let Some(n) = run.limit {
            maps.truncate(n);
        }
        return Ok(maps);
    }
    let images = match &run.images {
        Some(p) => existing(p, "images")?,
        None => vq
            .data_ref
            .as_ref()
            .map(PathBuf::from)
            .ok_or_else(|| fail("no --images given and the VQ-VAE records no training data"))
            .and_then(|p| existing(&p, "images"))?,
    };
    run.images = Some(images.clone());
    let ds = load_images(&images, run.limit)?;
    Ok(vq.encode_dataset_maps(&ds)?)
}

fn train_prior_cmd(mut run: TrainPriorRun) -> CliResult<()> {
    run.vq = existing(&run.vq, "vq model")?;
    run.out = absolute(&run.out);
    run.seed = Some(seed_or_fresh(run.seed));
    let vq = VqVaeModel::load(&run.vq).map_err(|e| fail(format!("{}: {e}", run.vq.display())))?;
    let maps = prior_corpus(&mut run, &vq)?;
    let (rows, cols) = vq.grid();
    let cfg = PriorConfig {
        codebook_size: vq.config.codebook_size,
        rows,
        cols,
        layers: run.layers,
        channels: run.channels,
        first_kernel: run.first_kernel,
        kernel: run.kernel,
        epochs: run.epochs,
        batch_size: run.batch_size,
        learning_rate: run.lr,
        seed: run.seed.unwrap_or_default(),
    };
    tracing::info!(maps = maps.len(), epochs = cfg.epochs, "training prior");
    let model = train_prior(&maps, &cfg)?;
    model.save(&run.out)?;
    write_json(&sidecar(&run.out, "loss.json"), &json!({ "loss": model.loss_history }))?;
    write_json(&sidecar(&run.out, "run.json"), &run)?;
    report_losses(&run.out, &model.loss_history);
    Ok(())
}
