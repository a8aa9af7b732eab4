//! Vector-quantized autoencoder for grayscale images.
//!
//! A strided convolutional encoder produces an `I x J` grid of `K`-dim
//! vectors; each is replaced by its Euclidean-nearest codebook row and the
//! decoder reconstructs the image from the quantized grid. Gradients reach
//! the encoder through the straight-through estimator.

use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::dataset::ImageDataset;
use crate::error::{Error, Result};
use crate::kernel::persist::ModelFile;
use crate::kernel::{Activation, AdamConfig, Grads, Layer, Objective, ParamStore, Scalar, Sequential, Tensor};
use crate::rng;

pub const CODEBOOK: &str = "codebook";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqVaeConfig {
    /// Number of code vectors `V`.
    pub codebook_size: usize,
    /// Code vector dimension `K`.
    pub code_dim: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Channels after the first and second strided convolution.
    pub channels: [usize; 2],
    /// Commitment weight.
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        VqVaeConfig {
            codebook_size: 32,
            code_dim: 16,
            image_height: 28,
            image_width: 28,
            channels: [16, 32],
            beta: 0.25,
            epochs: 10,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

impl VqVaeConfig {
    /// Latent grid `(I, J)`: two stride-2 reductions.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / 4, self.image_width / 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::InvalidParam("codebook_size must be >= 2".into()));
        }
        if self.codebook_size > u16::MAX as usize + 1 {
            return Err(Error::InvalidParam("codebook_size must fit 16-bit indices".into()));
        }
        if self.code_dim == 0 || self.channels.contains(&0) || self.batch_size == 0 {
            return Err(Error::InvalidParam("dimensions must be positive".into()));
        }
        if self.image_height % 4 != 0 || self.image_width % 4 != 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::InvalidParam(format!(
                "image size {}x{} must be a positive multiple of 4",
                self.image_height, self.image_width
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidParam("beta must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParam("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// `V` code vectors of dimension `K`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub dim: usize,
    pub vectors: Vec<f32>,
}

impl Codebook {
    pub fn new(dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 || vectors.len() % dim != 0 || vectors.len() / dim < 2 {
            return Err(Error::InvalidParam("codebook needs >= 2 vectors of positive dimension".into()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("codebook has non-finite entries".into()));
        }
        Ok(Codebook { dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, v: usize) -> &[f32] {
        &self.vectors[v * self.dim..(v + 1) * self.dim]
    }

    /// Index of the nearest code vector; ties go to the lowest index.
    pub fn nearest(&self, z: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for v in 0..self.len() {
            let d: f64 = self
                .vector(v)
                .iter()
                .zip(z)
                .map(|(c, x)| {
                    let e = *x as f64 - *c as f64;
                    e * e
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        best
    }

    pub fn is_degenerate(&self) -> bool {
        let first = self.vector(0);
        (1..self.len()).all(|v| self.vector(v) == first)
    }
}

/// `I x J` grid of `K`-dim latent vectors, cells in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl LatentMap {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 || data.len() != rows * cols * dim {
            return Err(Error::shape("latent map", format!("{rows}x{cols}x{dim} with {} values", data.len())));
        }
        Ok(LatentMap { rows, cols, dim, data })
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f32] {
        let at = (i * self.cols + j) * self.dim;
        &self.data[at..at + self.dim]
    }

    /// From one sample of a channel-major `[K, I, J]` activation.
    fn from_channels(dim: usize, rows: usize, cols: usize, chw: &[f32]) -> Self {
        let cells = rows * cols;
        let mut data = vec![0f32; cells * dim];
        for k in 0..dim {
            for c in 0..cells {
                data[c * dim + k] = chw[k * cells + c];
            }
        }
        LatentMap { rows, cols, dim, data }
    }

    fn to_channels(&self) -> Vec<f32> {
        let cells = self.rows * self.cols;
        let mut out = vec![0f32; cells * self.dim];
        for c in 0..cells {
            for k in 0..self.dim {
                out[k * cells + c] = self.data[c * self.dim + k];
            }
        }
        out
    }
}

/// Grid of codebook indices in raster order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiscreteLatentMap {
    pub rows: usize,
    pub cols: usize,
    pub indices: Vec<u16>,
}

impl DiscreteLatentMap {
    pub fn new(rows: usize, cols: usize, indices: Vec<u16>) -> Result<Self> {
        if rows == 0 || cols == 0 || indices.len() != rows * cols {
            return Err(Error::shape("discrete map", format!("{rows}x{cols} with {} indices", indices.len())));
        }
        Ok(DiscreteLatentMap { rows, cols, indices })
    }

    pub fn filled(rows: usize, cols: usize, index: u16) -> Self {
        DiscreteLatentMap {
            rows,
            cols,
            indices: vec![index; rows * cols],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.indices[i * self.cols + j] as usize
    }

    pub fn set(&mut self, i: usize, j: usize, v: usize) {
        self.indices[i * self.cols + j] = v as u16;
    }

    pub fn check_codebook(&self, size: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i as usize >= size) {
            Some(&i) => Err(Error::IndexOutOfRange {
                index: i as usize,
                size,
            }),
            None => Ok(()),
        }
    }
}

pub fn quantize_nearest(z: &LatentMap, cb: &Codebook) -> Result<DiscreteLatentMap> {
    if z.dim != cb.dim {
        return Err(Error::shape(
            "quantize_nearest",
            format!("map dim {} vs codebook dim {}", z.dim, cb.dim),
        ));
    }
    let indices = z.data.chunks(z.dim).map(|c| cb.nearest(c) as u16).collect();
    DiscreteLatentMap::new(z.rows, z.cols, indices)
}

pub fn embed(dm: &DiscreteLatentMap, cb: &Codebook) -> Result<LatentMap> {
    dm.check_codebook(cb.len())?;
    let data = dm.indices.iter().flat_map(|&i| cb.vector(i as usize).iter().copied()).collect();
    LatentMap::new(dm.rows, dm.cols, cb.dim, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqLosses {
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl VqLosses {
    pub fn total(&self) -> f64 {
        self.recon + self.codebook + self.commitment
    }
}

/// Loss terms for one reconstruction and its latent maps: pixel MSE, and the
/// per-cell squared distance between `z` and `z_q` (mean over cells) for the
/// codebook term and, weighted by `beta`, the commitment term.
pub fn vq_losses(x: &[f32], x_rec: &[f32], z: &LatentMap, zq: &LatentMap, beta: f64) -> Result<VqLosses> {
    if x.len() != x_rec.len() || z.data.len() != zq.data.len() || x.is_empty() {
        return Err(Error::shape("vq_losses", "input and latent shapes must agree"));
    }
    let recon = x
        .iter()
        .zip(x_rec)
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    let cells = (z.rows * z.cols) as f64;
    let dist = z
        .data
        .iter()
        .zip(&zq.data)
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / cells;
    Ok(VqLosses {
        recon,
        codebook: dist,
        commitment: beta * dist,
    })
}

/// Straight-through backward at the quantization boundary.
///
/// `ze` and `zq` are channel-major `[n, K, I, J]`; `dzq` is the decoder's
/// gradient wrt its input. Returns the gradient wrt the encoder output,
/// `dzq + 2 beta (ze - zq) / cells`, and the codebook gradient
/// `2 (zq - ze) / cells` summed per assigned code.
pub fn straight_through_backward<F: Scalar>(
    ze: &Tensor<F>,
    zq: &Tensor<F>,
    assignments: &[usize],
    dzq: &Tensor<F>,
    codebook_size: usize,
    beta: f64,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let s = ze.shape();
    if s.len() != 4 || zq.shape() != s || dzq.shape() != s {
        return Err(Error::shape("straight_through", format!("{s:?}")));
    }
    let (n, k, cells) = (s[0], s[1], s[2] * s[3]);
    if assignments.len() != n * cells {
        return Err(Error::shape("straight_through", "assignment count"));
    }
    let norm = (n * cells) as f64;
    let mut dze = Vec::with_capacity(ze.len());
    let mut dcb = vec![0f64; codebook_size * k];
    for (idx, ((e, q), g)) in ze.data().iter().zip(zq.data()).zip(dzq.data()).enumerate() {
        let diff = e.widen() - q.widen();
        dze.push(F::narrow(g.widen() + 2.0 * beta * diff / norm));
        let sample = idx / (k * cells);
        let ch = (idx / cells) % k;
        let cell = idx % cells;
        let code = assignments[sample * cells + cell];
        dcb[code * k + ch] -= 2.0 * diff / norm;
    }
    Ok((Tensor::new(s.to_vec(), dze)?, Tensor::from_f64(&[codebook_size, k], &dcb)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqNets {
    pub encoder: Sequential,
    pub decoder: Sequential,
}

impl VqNets {
    pub fn new(cfg: &VqVaeConfig) -> Self {
        let [c1, c2] = cfg.channels;
        let k = cfg.code_dim;
        VqNets {
            encoder: Sequential::new(vec![
                Layer::conv("enc0", 1, c1, 4, 2, 1),
                Layer::Act(Activation::Relu),
                Layer::conv("enc1", c1, c2, 4, 2, 1),
                Layer::Act(Activation::Relu),
                Layer::conv("enc2", c2, k, 1, 1, 0),
            ]),
            decoder: Sequential::new(vec![
                Layer::conv("dec0", k, c2, 3, 1, 1),
                Layer::Act(Activation::Relu),
                Layer::Upsample2x,
                Layer::conv("dec1", c2, c1, 3, 1, 1),
                Layer::Act(Activation::Relu),
                Layer::Upsample2x,
                Layer::conv("dec2", c1, 1, 3, 1, 1),
                Layer::Act(Activation::Sigmoid),
            ]),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VqFileConfig {
    kind: String,
    config: VqVaeConfig,
    nets: VqNets,
    #[serde(default)]
    data_ref: Option<String>,
}

#[derive(Clone, Debug)]
pub struct VqVaeModel {
    pub config: VqVaeConfig,
    pub nets: VqNets,
    pub params: ParamStore<f32>,
    pub data_ref: Option<String>,
    /// Full-dataset losses before training, then per-epoch batch means.
    pub loss_history: Vec<VqLosses>,
    /// Assignment counts per code over the training set after training.
    pub codebook_usage: Vec<usize>,
}

impl VqVaeModel {
    pub fn init(cfg: &VqVaeConfig) -> Result<Self> {
        cfg.validate()?;
        let nets = VqNets::new(cfg);
        let mut params = ParamStore::new();
        let mut r = rng::rng(rng::derive(cfg.seed, 0));
        nets.encoder.init_params(&mut params, &mut r);
        nets.decoder.init_params(&mut params, &mut r);
        let cb: Vec<f64> = (0..cfg.codebook_size * cfg.code_dim)
            .map(|_| rand::Rng::random_range(&mut r, -1.0..1.0))
            .collect();
        params.insert(CODEBOOK, Tensor::from_f64(&[cfg.codebook_size, cfg.code_dim], &cb)?);
        Ok(VqVaeModel {
            config: cfg.clone(),
            nets,
            params,
            data_ref: None,
            loss_history: Vec::new(),
            codebook_usage: Vec::new(),
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.config.grid()
    }

    pub fn codebook(&self) -> Codebook {
        let t = self.params.get(CODEBOOK).expect("codebook present");
        Codebook {
            dim: self.config.code_dim,
            vectors: t.data().to_vec(),
        }
    }

    fn check_images(&self, ds: &ImageDataset) -> Result<()> {
        if ds.height != self.config.image_height || ds.width != self.config.image_width {
            return Err(Error::Geometry(format!(
                "images are {}x{}, model expects {}x{}",
                ds.height, ds.width, self.config.image_height, self.config.image_width
            )));
        }
        Ok(())
    }

    /// Encoder output for a batch `[n, 1, H, W]` as latent maps.
    pub fn encode_batch(&self, x: &Tensor<f32>) -> Result<Vec<LatentMap>> {
        let ze = self.nets.encoder.predict(&self.params, x)?;
        let (i, j) = self.grid();
        let k = self.config.code_dim;
        Ok(ze.data().chunks(k * i * j).map(|c| LatentMap::from_channels(k, i, j, c)).collect())
    }

    pub fn encode_dataset_maps(&self, ds: &ImageDataset) -> Result<Vec<DiscreteLatentMap>> {
        self.check_images(ds)?;
        let cb = self.codebook();
        let mut maps = Vec::with_capacity(ds.len());
        let all: Vec<usize> = (0..ds.len()).collect();
        for chunk in all.chunks(256) {
            for z in self.encode_batch(&ds.batch(chunk))? {
                maps.push(quantize_nearest(&z, &cb)?);
            }
        }
        Ok(maps)
    }

    /// Decodes quantized maps to images with intensities clamped to `[0, 1]`.
    pub fn decode_maps(&self, maps: &[DiscreteLatentMap]) -> Result<Vec<Vec<f32>>> {
        let cb = self.codebook();
        let (i, j) = self.grid();
        let mut input = Vec::with_capacity(maps.len() * i * j * cb.dim);
        for m in maps {
            if (m.rows, m.cols) != (i, j) {
                return Err(Error::Geometry(format!("map is {}x{}, model grid {i}x{j}", m.rows, m.cols)));
            }
            input.extend(embed(m, &cb)?.to_channels());
        }
        if maps.is_empty() {
            return Ok(Vec::new());
        }
        let x = Tensor::new(vec![maps.len(), cb.dim, i, j], input)?;
        let out = self.nets.decoder.predict(&self.params, &x)?;
        let hw = self.config.image_height * self.config.image_width;
        Ok(out
            .data()
            .chunks(hw)
            .map(|img| img.iter().map(|v| v.clamp(0.0, 1.0)).collect())
            .collect())
    }

    pub fn decode_map(&self, dm: &DiscreteLatentMap) -> Result<Vec<f32>> {
        Ok(self.decode_maps(std::slice::from_ref(dm))?.remove(0))
    }

    /// Batch losses and, when `grads` is given, gradients for every parameter
    /// including the codebook.
    pub fn batch_loss(&self, x: &Tensor<f32>, grads: Option<&mut Grads<f32>>) -> Result<(VqLosses, Vec<usize>)> {
        let cb = self.codebook();
        let n = x.shape()[0];
        let (i, j) = self.grid();
        let k = cb.dim;
        let cells = i * j;
        let enc = self.nets.encoder.forward(&self.params, x)?;
        let ze = enc.output();
        let mut assignments = Vec::with_capacity(n * cells);
        let mut zq = vec![0f32; ze.len()];
        let mut cell = vec![0f32; k];
        for s in 0..n {
            let base = s * k * cells;
            for c in 0..cells {
                for (ch, v) in cell.iter_mut().enumerate() {
                    *v = ze.data()[base + ch * cells + c];
                }
                let code = cb.nearest(&cell);
                assignments.push(code);
                for (ch, q) in cb.vector(code).iter().enumerate() {
                    zq[base + ch * cells + c] = *q;
                }
            }
        }
        let zq = Tensor::new(ze.shape().to_vec(), zq)?;
        let dec = self.nets.decoder.forward(&self.params, &zq)?;
        let xr = dec.output();
        let npix = x.len() as f64;
        let mut recon = 0.0;
        let mut dxr = Vec::with_capacity(xr.len());
        for (a, b) in xr.data().iter().zip(x.data()) {
            let d = *a as f64 - *b as f64;
            recon += d * d;
            dxr.push(2.0 * d / npix);
        }
        let dist = ze
            .data()
            .iter()
            .zip(zq.data())
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / (n * cells) as f64;
        let losses = VqLosses {
            recon: recon / npix,
            codebook: dist,
            commitment: self.config.beta * dist,
        };
        if let Some(grads) = grads {
            let dzq = self
                .nets
                .decoder
                .backward(&self.params, &dec, Tensor::from_f64(xr.shape(), &dxr)?, grads)?;
            let (dze, dcb) =
                straight_through_backward(ze, &zq, &assignments, &dzq, cb.len(), self.config.beta)?;
            self.nets.encoder.backward(&self.params, &enc, dze, grads)?;
            grads.accumulate(CODEBOOK, &dcb)?;
        }
        Ok((losses, assignments))
    }

    pub fn to_model_file(&self) -> Result<ModelFile> {
        ModelFile::new(
            &VqFileConfig {
                kind: "vqvae".into(),
                config: self.config.clone(),
                nets: self.nets.clone(),
                data_ref: self.data_ref.clone(),
            },
            &self.params,
        )
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Self> {
        if file.kind() != Some("vqvae") {
            return Err(Error::ModelFormat(format!("expected a vqvae model, found {:?}", file.kind())));
        }
        let cfg: VqFileConfig = file.config_as()?;
        let params = file.params();
        let cb = params.get(CODEBOOK)?;
        if cb.shape() != [cfg.config.codebook_size, cfg.config.code_dim] {
            return Err(Error::ModelFormat("codebook shape disagrees with config".into()));
        }
        Ok(VqVaeModel {
            config: cfg.config,
            nets: cfg.nets,
            params,
            data_ref: cfg.data_ref,
            loss_history: Vec::new(),
            codebook_usage: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_model_file()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_model_file(&ModelFile::load(path)?)
    }
}

fn mean_losses(acc: &[(VqLosses, usize)]) -> VqLosses {
    let n: usize = acc.iter().map(|a| a.1).sum();
    let w = |f: fn(&VqLosses) -> f64| acc.iter().map(|(l, c)| f(l) * *c as f64).sum::<f64>() / n as f64;
    VqLosses {
        recon: w(|l| l.recon),
        codebook: w(|l| l.codebook),
        commitment: w(|l| l.commitment),
    }
}

fn dataset_losses(model: &VqVaeModel, ds: &ImageDataset) -> Result<(VqLosses, Vec<usize>)> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut acc = Vec::new();
    let mut usage = vec![0usize; model.config.codebook_size];
    for chunk in all.chunks(256) {
        let (l, assign) = model.batch_loss(&ds.batch(chunk), None)?;
        for a in assign {
            usage[a] += 1;
        }
        acc.push((l, chunk.len()));
    }
    Ok((mean_losses(&acc), usage))
}

/// Codes no training cell picked during an epoch get no gradient and would
/// stay dead; move them onto encoder outputs of random training cells.
fn restart_dead_codes(model: &mut VqVaeModel, ds: &ImageDataset, used: &[bool], r: &mut rng::UtgRng) -> Result<()> {
    let dead: Vec<usize> = (0..used.len()).filter(|&v| !used[v]).collect();
    if dead.is_empty() {
        return Ok(());
    }
    let probe: Vec<usize> = index::sample(r, ds.len(), ds.len().min(64)).into_vec();
    let maps = model.encode_batch(&ds.batch(&probe))?;
    let cells: Vec<&[f32]> = maps.iter().flat_map(|m| m.data.chunks(m.dim)).collect();
    let k = model.config.code_dim;
    let cb = model.params.get_mut(CODEBOOK)?;
    for v in dead {
        let c = cells[rand::Rng::random_range(r, 0..cells.len())];
        cb.data_mut()[v * k..(v + 1) * k].copy_from_slice(c);
    }
    Ok(())
}

/// Trains encoder, decoder and codebook. The codebook is seeded from
/// encoder outputs of randomly chosen training cells, and codes left unused
/// by an epoch are re-seeded the same way.
pub fn train_vqvae(ds: &ImageDataset, cfg: &VqVaeConfig) -> Result<VqVaeModel> {
    if ds.is_empty() {
        return Err(Error::Precondition("training dataset is empty".into()));
    }
    let mut model = VqVaeModel::init(cfg)?;
    model.check_images(ds)?;
    let mut r = rng::rng(rng::derive(cfg.seed, 1));

    let probe: Vec<usize> = index::sample(&mut r, ds.len(), ds.len().min(256)).into_vec();
    let maps = model.encode_batch(&ds.batch(&probe))?;
    let cells: Vec<&[f32]> = maps.iter().flat_map(|m| m.data.chunks(m.dim)).collect();
    let picks = index::sample(&mut r, cells.len(), cfg.codebook_size.min(cells.len())).into_vec();
    {
        let cb = model.params.get_mut(CODEBOOK)?;
        for (v, &c) in picks.iter().enumerate() {
            cb.data_mut()[v * cfg.code_dim..(v + 1) * cfg.code_dim].copy_from_slice(cells[c]);
        }
    }

    let (initial, _) = dataset_losses(&model, ds)?;
    if !initial.total().is_finite() {
        return Err(Error::Divergence {
            step: 0,
            what: "loss".into(),
        });
    }
    model.loss_history.push(initial);
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut acc = Vec::new();
        let mut used = vec![false; cfg.codebook_size];
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = Grads::new();
            let (l, assign) = model.batch_loss(&ds.batch(chunk), Some(&mut grads))?;
            for a in assign {
                used[a] = true;
            }
            if !l.total().is_finite() {
                return Err(Error::Divergence {
                    step: model.params.step(),
                    what: "loss".into(),
                });
            }
            model.params.adam_step(&grads, &adam)?;
            acc.push((l, chunk.len()));
        }
        model.loss_history.push(mean_losses(&acc));
        if epoch + 1 < cfg.epochs {
            restart_dead_codes(&mut model, ds, &used, &mut r)?;
        }
    }
    let (_, usage) = dataset_losses(&model, ds)?;
    model.codebook_usage = usage;
    Ok(model)
}

/// Straight-through surrogate for gradient checking on micro instances.
///
/// Parameters are the decoder weights, the encoder output `"z"` (`[n, K, I, J]`)
/// and the codebook. The assignments and the quantized map `q0` are frozen at
/// the base point, so the true gradient of
/// `recon(dec(z + q0 - z0)) + |z0 - cb[idx]|^2 + beta |z - q0|^2`
/// is exactly the straight-through gradient there.
pub struct StraightThroughObjective<'a> {
    pub decoder: &'a Sequential,
    pub x: Tensor<f64>,
    pub beta: f64,
    z0: Tensor<f64>,
    q0: Tensor<f64>,
    assignments: Vec<usize>,
}

impl<'a> StraightThroughObjective<'a> {
    pub fn new(decoder: &'a Sequential, x: Tensor<f64>, z0: Tensor<f64>, codebook: &Tensor<f64>, beta: f64) -> Self {
        let s = z0.shape();
        let (n, k, cells) = (s[0], s[1], s[2] * s[3]);
        let cb = Codebook {
            dim: k,
            vectors: codebook.data().iter().map(|&v| v as f32).collect(),
        };
        let mut assignments = Vec::with_capacity(n * cells);
        for smp in 0..n {
            for c in 0..cells {
                let cell: Vec<f32> = (0..k).map(|ch| z0.data()[smp * k * cells + ch * cells + c] as f32).collect();
                assignments.push(cb.nearest(&cell));
            }
        }
        let q0 = gather(&z0, codebook, &assignments);
        StraightThroughObjective {
            decoder,
            x,
            beta,
            z0,
            q0,
            assignments,
        }
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    fn recon(&self, params: &ParamStore<f64>, input: &Tensor<f64>) -> Result<(f64, crate::kernel::Trace<f64>, Vec<f64>)> {
        let tr = self.decoder.forward(params, input)?;
        let npix = self.x.len() as f64;
        let mut loss = 0.0;
        let mut d = Vec::with_capacity(self.x.len());
        for (a, b) in tr.output().data().iter().zip(self.x.data()) {
            loss += (a - b).powi(2);
            d.push(2.0 * (a - b) / npix);
        }
        Ok((loss / npix, tr, d))
    }

    fn cells(&self) -> f64 {
        let s = self.z0.shape();
        (s[0] * s[2] * s[3]) as f64
    }
}

fn gather(like: &Tensor<f64>, cb: &Tensor<f64>, assignments: &[usize]) -> Tensor<f64> {
    let s = like.shape();
    let (k, cells) = (s[1], s[2] * s[3]);
    let out = (0..like.len())
        .map(|idx| {
            let smp = idx / (k * cells);
            let ch = (idx / cells) % k;
            cb.data()[assignments[smp * cells + idx % cells] * k + ch]
        })
        .collect();
    Tensor::new(s.to_vec(), out).expect("gather keeps shape")
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

impl Objective<f64> for StraightThroughObjective<'_> {
    fn loss(&self, params: &ParamStore<f64>) -> Result<f64> {
        let z = params.get("z")?;
        let cb = params.get(CODEBOOK)?;
        let shifted: Vec<f64> = z
            .data()
            .iter()
            .zip(self.q0.data())
            .zip(self.z0.data())
            .map(|((z, q), z0)| z + q - z0)
            .collect();
        let (recon, _, _) = self.recon(params, &Tensor::new(z.shape().to_vec(), shifted)?)?;
        let q = gather(&self.z0, cb, &self.assignments);
        let codebook_term = sq_dist(self.z0.data(), q.data()) / self.cells();
        let commitment = sq_dist(z.data(), self.q0.data()) / self.cells();
        Ok(recon + codebook_term + self.beta * commitment)
    }

    fn loss_and_grads(&self, params: &ParamStore<f64>) -> Result<(f64, Grads<f64>)> {
        let loss = self.loss(params)?;
        let z = params.get("z")?;
        let cb = params.get(CODEBOOK)?;
        let zq = gather(&self.z0, cb, &self.assignments);
        let (_, tr, d) = self.recon(params, &zq)?;
        let mut grads = Grads::new();
        let dzq = self
            .decoder
            .backward(params, &tr, Tensor::new(tr.output().shape().to_vec(), d)?, &mut grads)?;
        let (dz, dcb) = straight_through_backward(z, &zq, &self.assignments, &dzq, cb.shape()[0], self.beta)?;
        grads.accumulate("z", &dz)?;
        grads.accumulate(CODEBOOK, &dcb)?;
        Ok((loss, grads))
    }
}

/// Writes discrete maps as: u32 rows, u32 cols, u32 count (little-endian),
/// then `count * rows * cols` little-endian u16 indices in raster order.
pub fn write_map_cache(path: &Path, maps: &[DiscreteLatentMap]) -> Result<()> {
    let (rows, cols) = maps.first().map_or((0, 0), |m| (m.rows, m.cols));
    let mut out = Vec::with_capacity(12 + maps.len() * rows * cols * 2);
    for v in [rows as u32, cols as u32, maps.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for m in maps {
        if (m.rows, m.cols) != (rows, cols) {
            return Err(Error::Geometry("maps in a cache must share geometry".into()));
        }
        for &i in &m.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_map_cache(path: &Path) -> Result<Vec<DiscreteLatentMap>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::ModelFormat("map cache header truncated".into()));
    }
    let u = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize;
    let (rows, cols, count) = (u(0), u(4), u(8));
    let cells = rows * cols;
    if bytes.len() != 12 + count * cells * 2 {
        return Err(Error::ModelFormat("map cache length disagrees with header".into()));
    }
    Ok(bytes[12..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect::<Vec<_>>()
        .chunks(cells.max(1))
        .take(count)
        .map(|c| DiscreteLatentMap {
            rows,
            cols,
            indices: c.to_vec(),
        })
        .collect())
}
