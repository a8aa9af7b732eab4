//! Autoregressive prior over discrete latent maps.
//!
//! A stack of masked convolutions (type A first, type B after) maps a
//! one-hot `[V, I, J]` encoding of a map to per-cell logits over the `V`
//! codebook indices. Cell `(i, j)` only sees cells strictly before it in
//! raster order, so generation fills the map one cell at a time.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::persist::ModelFile;
use crate::kernel::{softmax, Activation, AdamConfig, Grads, Layer, MaskKind, ParamStore, Sequential, Tensor};
use crate::rare::{manipulate_categorical, CategoricalDist, ThresholdParam};
use crate::rng;
use crate::vqvae::DiscreteLatentMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Categorical arity `V`.
    pub codebook_size: usize,
    pub rows: usize,
    pub cols: usize,
    /// Masked convolutions including the type-A input layer and the 1x1 output.
    pub layers: usize,
    pub channels: usize,
    pub first_kernel: usize,
    pub kernel: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            codebook_size: 32,
            rows: 7,
            cols: 7,
            layers: 5,
            channels: 64,
            first_kernel: 5,
            kernel: 3,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 || self.codebook_size > u16::MAX as usize + 1 {
            return Err(Error::InvalidParam("codebook_size must be in [2, 65536]".into()));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidParam("map geometry must be positive".into()));
        }
        if self.layers < 2 {
            return Err(Error::InvalidParam("need at least an input and an output layer".into()));
        }
        if self.channels == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParam("channels and batch_size must be positive".into()));
        }
        if self.first_kernel % 2 == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidParam("masked kernels must have odd size".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParam("learning_rate must be > 0".into()));
        }
        Ok(())
    }

    fn network(&self) -> Sequential {
        let (v, c) = (self.codebook_size, self.channels);
        let mut layers = vec![
            Layer::masked_conv("in", v, c, self.first_kernel, MaskKind::A),
            Layer::Act(Activation::Relu),
        ];
        for l in 1..self.layers - 1 {
            layers.push(Layer::masked_conv(&format!("hid{l}"), c, c, self.kernel, MaskKind::B));
            layers.push(Layer::Act(Activation::Relu));
        }
        layers.push(Layer::masked_conv("out", c, v, 1, MaskKind::B));
        Sequential::new(layers)
    }
}

#[derive(Serialize, Deserialize)]
struct PriorFileConfig {
    kind: String,
    config: PriorConfig,
    net: Sequential,
}

/// A generated map plus the mean entropy of the distributions it was
/// sampled from (after manipulation, when present).
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedMap {
    pub map: DiscreteLatentMap,
    pub mean_entropy: f64,
}

#[derive(Clone, Debug)]
pub struct PriorModel {
    pub config: PriorConfig,
    pub net: Sequential,
    pub params: ParamStore<f32>,
    /// Full-corpus cross-entropy before training, then per-epoch batch means.
    pub loss_history: Vec<f64>,
}

impl PriorModel {
    pub fn init(cfg: &PriorConfig) -> Result<Self> {
        cfg.validate()?;
        let net = cfg.network();
        let mut params = ParamStore::new();
        net.init_params(&mut params, &mut rng::rng(rng::derive(cfg.seed, 0)));
        Ok(PriorModel {
            config: cfg.clone(),
            net,
            params,
            loss_history: Vec::new(),
        })
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    pub fn geometry(&self) -> (usize, usize) {
        (self.config.rows, self.config.cols)
    }

    fn check_map(&self, m: &DiscreteLatentMap) -> Result<()> {
        if (m.rows, m.cols) != self.geometry() {
            return Err(Error::Geometry(format!(
                "map is {}x{}, prior expects {}x{}",
                m.rows, m.cols, self.config.rows, self.config.cols
            )));
        }
        m.check_codebook(self.config.codebook_size)
    }

    /// One-hot `[n, V, rows, J]` encoding of the first `rows` map rows.
    fn one_hot(&self, maps: &[&DiscreteLatentMap], rows: usize) -> Tensor<f32> {
        let (v, cols) = (self.config.codebook_size, self.config.cols);
        let plane = rows * cols;
        let mut data = vec![0f32; maps.len() * v * plane];
        for (s, m) in maps.iter().enumerate() {
            for c in 0..plane {
                data[(s * v + m.indices[c] as usize) * plane + c] = 1.0;
            }
        }
        Tensor::new(vec![maps.len(), v, rows, cols], data).expect("one-hot shape")
    }

    /// Logits for cell `(i, j)` of every map, computed on rows `0..=i` only.
    /// Masked taps never read rows below the output row, so the cropped pass
    /// performs exactly the arithmetic of the full pass for that row.
    fn cell_logits(&self, maps: &[&DiscreteLatentMap], i: usize, j: usize) -> Result<Vec<Vec<f64>>> {
        let out = self.net.predict(&self.params, &self.one_hot(maps, i + 1))?;
        let (v, cols) = (self.config.codebook_size, self.config.cols);
        let plane = (i + 1) * cols;
        Ok((0..maps.len())
            .map(|s| (0..v).map(|k| out.data()[(s * v + k) * plane + i * cols + j] as f64).collect())
            .collect())
    }

    /// Distribution over the index at `(i, j)` given the cells before it.
    /// Values at or after `(i, j)` are ignored.
    pub fn predict_categorical(&self, partial: &DiscreteLatentMap, cell: (usize, usize)) -> Result<CategoricalDist> {
        self.check_map(partial)?;
        let (i, j) = cell;
        if i >= self.config.rows || j >= self.config.cols {
            return Err(Error::Geometry(format!("cell ({i}, {j}) outside the map")));
        }
        let logits = self.cell_logits(&[partial], i, j)?.remove(0);
        Ok(CategoricalDist::from_softmax(softmax(&logits)))
    }

    /// Full-map distributions, one per cell in raster order.
    pub fn predict_all(&self, map: &DiscreteLatentMap) -> Result<Vec<CategoricalDist>> {
        self.check_map(map)?;
        let out = self.net.predict(&self.params, &self.one_hot(&[map], self.config.rows))?;
        let plane = self.config.rows * self.config.cols;
        Ok((0..plane)
            .map(|c| {
                let logits: Vec<f64> = (0..self.config.codebook_size).map(|k| out.data()[k * plane + c] as f64).collect();
                CategoricalDist::from_softmax(softmax(&logits))
            })
            .collect())
    }

    /// Samples one map per seed in raster order, drawing one uniform per
    /// cell from that map's own generator. With `manipulation`, every
    /// distribution passes through the threshold transform first.
    pub fn generate_maps(&self, seeds: &[u64], manipulation: Option<ThresholdParam>) -> Result<Vec<GeneratedMap>> {
        if let Some(t) = manipulation {
            t.validate()?;
        }
        let (rows, cols) = self.geometry();
        let mut rngs: Vec<_> = seeds.iter().map(|&s| rng::rng(s)).collect();
        let mut maps = vec![DiscreteLatentMap::filled(rows, cols, 0); seeds.len()];
        let mut entropy = vec![0.0; seeds.len()];
        for i in 0..rows {
            for j in 0..cols {
                let refs: Vec<&DiscreteLatentMap> = maps.iter().collect();
                let logits = self.cell_logits(&refs, i, j)?;
                for (s, l) in logits.into_iter().enumerate() {
                    let mut d = CategoricalDist::from_softmax(softmax(&l));
                    if let Some(t) = manipulation {
                        d = manipulate_categorical(&d, t);
                    }
                    entropy[s] += d.entropy();
                    let u: f64 = rngs[s].random();
                    maps[s].set(i, j, d.sample_with(u));
                }
            }
        }
        let cells = (rows * cols) as f64;
        Ok(maps
            .into_iter()
            .zip(entropy)
            .map(|(map, e)| GeneratedMap {
                map,
                mean_entropy: e / cells,
            })
            .collect())
    }

    pub fn generate_map(&self, seed: u64, manipulation: Option<ThresholdParam>) -> Result<DiscreteLatentMap> {
        Ok(self.generate_maps(&[seed], manipulation)?.remove(0).map)
    }

    /// Mean per-cell cross-entropy and, optionally, its gradients.
    pub fn batch_loss(&self, maps: &[&DiscreteLatentMap], grads: Option<&mut Grads<f32>>) -> Result<f64> {
        let (rows, cols) = self.geometry();
        let v = self.config.codebook_size;
        let plane = rows * cols;
        let trace = self.net.forward(&self.params, &self.one_hot(maps, rows))?;
        let out = trace.output();
        let norm = (maps.len() * plane) as f64;
        let mut loss = 0.0;
        let mut dlogits = vec![0f64; out.len()];
        let mut logits = vec![0f64; v];
        for (s, m) in maps.iter().enumerate() {
            for c in 0..plane {
                for (k, l) in logits.iter_mut().enumerate() {
                    *l = out.data()[(s * v + k) * plane + c] as f64;
                }
                let p = softmax(&logits);
                let target = m.indices[c] as usize;
                loss -= p[target].max(f64::MIN_POSITIVE).ln();
                for (k, pk) in p.iter().enumerate() {
                    let y = if k == target { 1.0 } else { 0.0 };
                    dlogits[(s * v + k) * plane + c] = (pk - y) / norm;
                }
            }
        }
        if let Some(grads) = grads {
            self.net
                .backward(&self.params, &trace, Tensor::from_f64(out.shape(), &dlogits)?, grads)?;
        }
        Ok(loss / norm)
    }

    pub fn to_model_file(&self) -> Result<ModelFile> {
        ModelFile::new(
            &PriorFileConfig {
                kind: "prior".into(),
                config: self.config.clone(),
                net: self.net.clone(),
            },
            &self.params,
        )
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Self> {
        if file.kind() != Some("prior") {
            return Err(Error::ModelFormat(format!("expected a prior model, found {:?}", file.kind())));
        }
        let cfg: PriorFileConfig = file.config_as()?;
        cfg.config.validate()?;
        Ok(PriorModel {
            config: cfg.config,
            net: cfg.net,
            params: file.params(),
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

/// Fits the prior to a corpus of maps by minimizing next-index cross-entropy.
/// `cfg.rows`, `cfg.cols` must match the corpus.
pub fn train_prior(maps: &[DiscreteLatentMap], cfg: &PriorConfig) -> Result<PriorModel> {
    if maps.is_empty() {
        return Err(Error::Precondition("no latent maps to train on".into()));
    }
    let mut model = PriorModel::init(cfg)?;
    for m in maps {
        model.check_map(m)?;
    }
    let all: Vec<&DiscreteLatentMap> = maps.iter().collect();
    let mut initial = 0.0;
    for chunk in all.chunks(256) {
        initial += model.batch_loss(chunk, None)? * chunk.len() as f64;
    }
    model.loss_history.push(initial / maps.len() as f64);
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut r = rng::rng(rng::derive(cfg.seed, 1));
    let mut order: Vec<usize> = (0..maps.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DiscreteLatentMap> = chunk.iter().map(|&i| &maps[i]).collect();
            let mut grads = Grads::new();
            let loss = model.batch_loss(&batch, Some(&mut grads))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: model.params.step(),
                    what: "cross-entropy".into(),
                });
            }
            model.params.adam_step(&grads, &adam)?;
            total += loss * chunk.len() as f64;
        }
        model.loss_history.push(total / maps.len() as f64);
    }
    Ok(model)
}
