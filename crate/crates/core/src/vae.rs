//! Variational autoencoder for tabular data.
//!
//! The encoder maps a normalized row to a diagonal Gaussian `(mu, log var)`,
//! a latent is drawn by reparameterization, and the decoder maps it back.
//! Training minimizes per-row squared reconstruction error plus the KL
//! divergence to the standard-normal prior, averaged over the batch.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{TabularCodec, TabularDataset};
use crate::error::{Error, Result};
use crate::kernel::persist::ModelFile;
use crate::kernel::{Activation, AdamConfig, Grads, Layer, Objective, ParamStore, Scalar, Sequential, Tensor};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 8,
            encoder_hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::InvalidParam("latent_dim must be >= 1".into()));
        }
        if self.encoder_hidden.iter().chain(&self.decoder_hidden).any(|&w| w == 0) {
            return Err(Error::InvalidParam("hidden widths must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParam("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian posterior. The standard deviation is stored as log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentGaussian {
    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `z = mu + sigma ⊙ eps`.
pub fn reparameterize(lat: &LatentGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != lat.dim() {
        return Err(Error::shape(
            "reparameterize",
            format!("noise has {} entries, latent {}", eps.len(), lat.dim()),
        ));
    }
    Ok(lat
        .mean
        .iter()
        .zip(&lat.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, I)) = ½ Σ (mu² + sigma² − 1 − log sigma²)`.
pub fn kl_to_prior(lat: &LatentGaussian) -> f64 {
    0.5 * lat
        .mean
        .iter()
        .zip(&lat.log_var)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Encoder and decoder layer stacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeNets {
    pub encoder: Sequential,
    pub decoder: Sequential,
    pub input_dim: usize,
    pub latent_dim: usize,
}

impl VaeNets {
    pub fn new(input_dim: usize, cfg: &VaeConfig) -> Self {
        let mut enc = Vec::new();
        let mut width = input_dim;
        for (i, &h) in cfg.encoder_hidden.iter().enumerate() {
            enc.push(Layer::dense(&format!("enc{i}"), width, h));
            enc.push(Layer::Act(Activation::Relu));
            width = h;
        }
        enc.push(Layer::dense("enc_out", width, 2 * cfg.latent_dim));
        let mut dec = Vec::new();
        width = cfg.latent_dim;
        for (i, &h) in cfg.decoder_hidden.iter().enumerate() {
            dec.push(Layer::dense(&format!("dec{i}"), width, h));
            dec.push(Layer::Act(Activation::Relu));
            width = h;
        }
        dec.push(Layer::dense("dec_out", width, input_dim));
        VaeNets {
            encoder: Sequential::new(enc),
            decoder: Sequential::new(dec),
            input_dim,
            latent_dim: cfg.latent_dim,
        }
    }

    /// Mean ELBO loss terms over a batch and, when `grads` is given, their gradients.
    pub fn elbo<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        x: &Tensor<F>,
        eps: &Tensor<F>,
        grads: Option<&mut Grads<F>>,
    ) -> Result<ElboTerms> {
        let n = x.shape()[0];
        let k = self.latent_dim;
        if eps.shape() != [n, k] {
            return Err(Error::shape("elbo", format!("noise {:?}", eps.shape())));
        }
        let enc = self.encoder.forward(params, x)?;
        let h = enc.output().to_f64_vec();
        let e = eps.to_f64_vec();
        let (z, kl) = latent_forward(&h, &e, k);
        let zt = Tensor::<F>::from_f64(&[n, k], &z)?;
        let dec = self.decoder.forward(params, &zt)?;
        let xr = dec.output();
        let mut recon = 0.0;
        let mut dxr = Vec::with_capacity(xr.len());
        for (a, b) in xr.data().iter().zip(x.data()) {
            let d = a.widen() - b.widen();
            recon += d * d;
            dxr.push(2.0 * d / n as f64);
        }
        let terms = ElboTerms {
            recon: recon / n as f64,
            kl: kl / n as f64,
        };
        if let Some(grads) = grads {
            let dz = self
                .decoder
                .backward(params, &dec, Tensor::from_f64(xr.shape(), &dxr)?, grads)?
                .to_f64_vec();
            let dh = latent_backward(&h, &e, &dz, k, 1.0 / n as f64);
            self.encoder
                .backward(params, &enc, Tensor::from_f64(&[n, 2 * k], &dh)?, grads)?;
        }
        Ok(terms)
    }
}

/// Encoder rows `[mu | log_var]` of width `2k` and noise rows of width `k`
/// to latents `z` and the summed KL to the prior.
fn latent_forward(h: &[f64], eps: &[f64], k: usize) -> (Vec<f64>, f64) {
    let n = eps.len() / k;
    let mut z = vec![0f64; n * k];
    let mut kl = 0.0;
    for r in 0..n {
        for j in 0..k {
            let mu = h[r * 2 * k + j];
            let lv = h[r * 2 * k + k + j];
            z[r * k + j] = mu + (0.5 * lv).exp() * eps[r * k + j];
            kl += 0.5 * (mu * mu + lv.exp() - 1.0 - lv);
        }
    }
    (z, kl)
}

/// Gradient wrt the encoder rows of `<dz, z> + kl_weight * kl`.
fn latent_backward(h: &[f64], eps: &[f64], dz: &[f64], k: usize, kl_weight: f64) -> Vec<f64> {
    let n = eps.len() / k;
    let mut dh = vec![0f64; n * 2 * k];
    for r in 0..n {
        for j in 0..k {
            let mu = h[r * 2 * k + j];
            let lv = h[r * 2 * k + k + j];
            let g = dz[r * k + j];
            dh[r * 2 * k + j] = g + kl_weight * mu;
            dh[r * 2 * k + k + j] = g * eps[r * k + j] * 0.5 * (0.5 * lv).exp() + kl_weight * 0.5 * (lv.exp() - 1.0);
        }
    }
    dh
}

/// The sampling step alone: parameter `"h"` holds encoder rows
/// `[mu | log_var]`; the loss is `<w, z(h, eps)> + kl_weight * KL(h)`.
/// Setting `w` to zero isolates the KL term; `kl_weight = 0` isolates the
/// reparameterization.
pub struct LatentPathObjective {
    pub eps: Vec<f64>,
    pub w: Vec<f64>,
    pub k: usize,
    pub kl_weight: f64,
}

impl Objective<f64> for LatentPathObjective {
    fn loss(&self, params: &ParamStore<f64>) -> Result<f64> {
        let h = params.get("h")?.data();
        let (z, kl) = latent_forward(h, &self.eps, self.k);
        Ok(z.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.kl_weight * kl)
    }

    fn loss_and_grads(&self, params: &ParamStore<f64>) -> Result<(f64, Grads<f64>)> {
        let h = params.get("h")?;
        let dh = latent_backward(h.data(), &self.eps, &self.w, self.k, self.kl_weight);
        let mut g = Grads::new();
        g.accumulate("h", &Tensor::from_f64(h.shape(), &dh)?)?;
        Ok((self.loss(params)?, g))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.recon + self.kl
    }
}

/// ELBO on a fixed batch and fixed noise, for gradient checking.
pub struct ElboObjective<'a, F: Scalar> {
    pub nets: &'a VaeNets,
    pub x: Tensor<F>,
    pub eps: Tensor<F>,
}

impl<F: Scalar> Objective<F> for ElboObjective<'_, F> {
    fn loss(&self, params: &ParamStore<F>) -> Result<f64> {
        Ok(self.nets.elbo(params, &self.x, &self.eps, None)?.total())
    }

    fn loss_and_grads(&self, params: &ParamStore<F>) -> Result<(f64, Grads<F>)> {
        let mut g = Grads::new();
        let t = self.nets.elbo(params, &self.x, &self.eps, Some(&mut g))?;
        Ok((t.total(), g))
    }
}

#[derive(Serialize, Deserialize)]
struct VaeFileConfig {
    kind: String,
    config: VaeConfig,
    nets: VaeNets,
    codec: TabularCodec,
    #[serde(default)]
    data_ref: Option<String>,
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub nets: VaeNets,
    pub codec: TabularCodec,
    pub params: ParamStore<f32>,
    /// Path of the training CSV, kept so novelty can be scored later.
    pub data_ref: Option<String>,
    /// Full-dataset loss before training, then the mean loss of each epoch.
    pub loss_history: Vec<f64>,
}

impl VaeModel {
    /// Randomly initialized, untrained model.
    pub fn init(cfg: &VaeConfig, codec: TabularCodec) -> Result<Self> {
        cfg.validate()?;
        let nets = VaeNets::new(codec.width(), cfg);
        let mut params = ParamStore::new();
        let mut r = rng::rng(rng::derive(cfg.seed, 0));
        nets.encoder.init_params(&mut params, &mut r);
        nets.decoder.init_params(&mut params, &mut r);
        Ok(VaeModel {
            config: cfg.clone(),
            nets,
            codec,
            params,
            data_ref: None,
            loss_history: Vec::new(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.nets.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.nets.input_dim
    }

    pub fn encode(&self, x: &[f64]) -> Result<LatentGaussian> {
        Ok(self.encode_batch(&[x.to_vec()])?.remove(0))
    }

    pub fn encode_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<LatentGaussian>> {
        let d = self.input_dim();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::shape("encode", format!("row width {} != {d}", bad.len())));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let x = Tensor::<f32>::from_f64(&[rows.len(), d], &flat)?;
        let h = self.nets.encoder.predict(&self.params, &x)?.to_f64_vec();
        let k = self.latent_dim();
        Ok(h.chunks(2 * k)
            .map(|c| LatentGaussian {
                mean: c[..k].to_vec(),
                log_var: c[k..].to_vec(),
            })
            .collect())
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_batch(&[z.to_vec()])?.remove(0))
    }

    /// Decoded rows in normalized feature space. Values pass through `f32`
    /// and are returned widened, so re-decoding is bit-identical.
    pub fn decode_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let k = self.latent_dim();
        if let Some(bad) = zs.iter().find(|z| z.len() != k) {
            return Err(Error::shape("decode", format!("latent width {} != {k}", bad.len())));
        }
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let flat: Vec<f64> = zs.iter().flatten().copied().collect();
        let z = Tensor::<f32>::from_f64(&[zs.len(), k], &flat)?;
        let out = self.nets.decoder.predict(&self.params, &z)?;
        if !out.all_finite() {
            return Err(Error::Divergence {
                step: 0,
                what: "decoder output".into(),
            });
        }
        Ok(out.to_f64_vec().chunks(self.input_dim()).map(<[f64]>::to_vec).collect())
    }

    pub fn to_model_file(&self) -> Result<ModelFile> {
        ModelFile::new(
            &VaeFileConfig {
                kind: "vae".into(),
                config: self.config.clone(),
                nets: self.nets.clone(),
                codec: self.codec.clone(),
                data_ref: self.data_ref.clone(),
            },
            &self.params,
        )
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Self> {
        if file.kind() != Some("vae") {
            return Err(Error::ModelFormat(format!("expected a vae model, found {:?}", file.kind())));
        }
        let cfg: VaeFileConfig = file.config_as()?;
        let params = file.params();
        for name in cfg.nets.encoder.param_names().iter().chain(&cfg.nets.decoder.param_names()) {
            params.get(name)?;
        }
        Ok(VaeModel {
            config: cfg.config,
            nets: cfg.nets,
            codec: cfg.codec,
            params,
            data_ref: cfg.data_ref,
            loss_history: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_model_file()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_model_file(&ModelFile::load(path)?)
    }
}

fn draw_normal(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

/// Trains a VAE on the normalized view of `ds`.
pub fn train_vae(ds: &TabularDataset, cfg: &VaeConfig) -> Result<VaeModel> {
    if ds.is_empty() {
        return Err(Error::Precondition("training dataset is empty".into()));
    }
    let mut model = VaeModel::init(cfg, ds.codec())?;
    let x_all: Tensor<f32> = ds.normalize().cast();
    let n = ds.len();
    let k = cfg.latent_dim;
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut r = rng::rng(rng::derive(cfg.seed, 1));

    let eps0 = Tensor::<f32>::from_f64(&[n, k], &draw_normal(&mut r, n * k))?;
    let initial = model.nets.elbo(&model.params, &x_all, &eps0, None)?.total();
    check_finite(initial, 0)?;
    model.loss_history.push(initial);

    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = x_all.select_rows(chunk);
            let eps = Tensor::<f32>::from_f64(&[chunk.len(), k], &draw_normal(&mut r, chunk.len() * k))?;
            let mut grads = Grads::new();
            let terms = model.nets.elbo(&model.params, &x, &eps, Some(&mut grads))?;
            check_finite(terms.total(), model.params.step())?;
            model.params.adam_step(&grads, &adam)?;
            epoch_loss += terms.total() * chunk.len() as f64;
        }
        model.loss_history.push(epoch_loss / n as f64);
    }
    Ok(model)
}

fn check_finite(loss: f64, step: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            what: "loss".into(),
        })
    }
}

/// Decodes `n` latents drawn from the standard-normal prior. Rows are in
/// feature space; `codec.decode` maps them back to columns.
pub fn generate_standard(model: &VaeModel, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut r = rng::rng(seed);
    let k = model.latent_dim();
    let zs: Vec<Vec<f64>> = (0..n).map(|_| draw_normal(&mut r, k)).collect();
    model.decode_batch(&zs)
}
