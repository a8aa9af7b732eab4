//! End-to-end generation of likely-unsupposable (LU) records: acquire rare
//! latents or manipulated maps, decode, post-process, score novelty against
//! the training data, and sweep the rarity knob.

mod export;

pub use export::{
    grid_png, image_png, read_jsonl, records_to_jsonl, strip_png, write_csv, write_image_batch, write_jsonl, write_strip,
};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::dataset::{round_discrete, validate_row, ImageDataset, TabularDataset};
use crate::error::{Error, Result};
use crate::prior::PriorModel;
use crate::rare::{acquire_rare_latent, RarityParams, SamplerChoice, ThresholdParam};
use crate::rng;
use crate::stats;
use crate::vae::VaeModel;
use crate::vqvae::{DiscreteLatentMap, VqVaeModel};

/// Knob values a record was generated with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GenParams {
    Rarity(RarityParams),
    Threshold(ThresholdParam),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Latent {
    Continuous(Vec<f64>),
    Map(DiscreteLatentMap),
}

/// 8-bit grayscale image, pixels base64-encoded in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageValues {
    pub height: usize,
    pub width: usize,
    pub pixels: String,
}

impl ImageValues {
    pub fn from_unit(height: usize, width: usize, pixels: &[f32]) -> Self {
        let bytes: Vec<u8> = pixels.iter().map(|&p| to_u8(p)).collect();
        ImageValues {
            height,
            width,
            pixels: B64.encode(bytes),
        }
    }

    pub fn bytes(&self) -> Result<Vec<u8>> {
        let b = B64
            .decode(&self.pixels)
            .map_err(|e| Error::InvalidParam(format!("image pixels are not base64: {e}")))?;
        if b.len() != self.height * self.width {
            return Err(Error::shape(
                "image values",
                format!("{} bytes for {}x{}", b.len(), self.height, self.width),
            ));
        }
        Ok(b)
    }
}

pub fn to_u8(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Values {
    Row(Vec<f64>),
    Image(ImageValues),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    #[default]
    Unlabeled,
    Supposable,
    Unsupposable,
    Unreal,
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unlabeled" => Ok(Label::Unlabeled),
            "supposable" => Ok(Label::Supposable),
            "unsupposable" => Ok(Label::Unsupposable),
            "unreal" => Ok(Label::Unreal),
            other => Err(Error::InvalidParam(format!("unknown label {other:?}"))),
        }
    }
}

/// One generated sample with everything needed to reproduce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LuRecord {
    pub id: u64,
    /// Owning batch, when the record lives in a session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<String>,
    pub params: GenParams,
    /// Seed that regenerates this record alone.
    pub seed: u64,
    pub latent: Latent,
    pub values: Values,
    pub novelty: f64,
    #[serde(default)]
    pub label: Label,
    #[serde(default)]
    pub note: String,
    pub model_ref: String,
    /// Tabular only: decoder output in original units before rounding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoded: Option<Vec<f64>>,
}

/// Minimum Euclidean distance from `sample` to any reference vector.
pub fn novelty_score<R: AsRef<[f64]>>(sample: &[f64], reference: &[R]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Precondition("novelty needs a non-empty reference set".into()));
    }
    let mut best = f64::INFINITY;
    for r in reference {
        let r = r.as_ref();
        if r.len() != sample.len() {
            return Err(Error::shape("novelty_score", format!("{} vs {}", sample.len(), r.len())));
        }
        let mut d = 0.0;
        for (a, b) in sample.iter().zip(r) {
            d += (a - b) * (a - b);
            if d >= best {
                break;
            }
        }
        best = best.min(d);
    }
    Ok(best.sqrt())
}

fn image_novelty(sample: &[f32], reference: &ImageDataset) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Precondition("novelty needs a non-empty reference set".into()));
    }
    let mut best = f64::INFINITY;
    for i in 0..reference.len() {
        let mut d = 0.0;
        for (a, b) in sample.iter().zip(reference.image(i)) {
            let e = *a as f64 - *b as f64;
            d += e * e;
            if d >= best {
                break;
            }
        }
        best = best.min(d);
    }
    Ok(best.sqrt())
}

/// Trained VAE plus its training data, for the tabular path.
pub struct TabularSource<'a> {
    pub model: &'a VaeModel,
    pub reference: &'a TabularDataset,
    pub model_ref: String,
}

/// Record `i` of a batch uses seed `derive(seed, i)`.
pub fn record_seed(batch_seed: u64, i: usize) -> u64 {
    rng::derive(batch_seed, i as u64)
}

pub fn generate_lu_tabular(
    src: &TabularSource,
    p: RarityParams,
    n: usize,
    seed: u64,
    sampler: SamplerChoice,
) -> Result<Vec<LuRecord>> {
    p.validate()?;
    let codec = &src.model.codec;
    if codec.schema != src.reference.schema {
        return Err(Error::Precondition("reference data schema differs from the model's".into()));
    }
    let k = src.model.latent_dim();
    let seeds: Vec<u64> = (0..n).map(|i| record_seed(seed, i)).collect();
    let latents = seeds
        .iter()
        .map(|&s| acquire_rare_latent(k, &p, sampler, s))
        .collect::<Result<Vec<_>>>()?;
    let decoded = src.model.decode_batch(&latents)?;
    let reference: Vec<Vec<f64>> = src.reference.rows.iter().map(|r| codec.encode(r)).collect();
    let mut out = Vec::with_capacity(n);
    for (i, (z, feat)) in latents.into_iter().zip(decoded).enumerate() {
        let raw = codec.decode(&feat);
        let values = round_discrete(&raw, &codec.schema);
        validate_row(&values, &codec.schema).map_err(Error::Precondition)?;
        let novelty = novelty_score(&codec.encode(&values), &reference)?;
        out.push(LuRecord {
            id: i as u64,
            batch: None,
            params: GenParams::Rarity(p),
            seed: seeds[i],
            latent: Latent::Continuous(z),
            values: Values::Row(values),
            novelty,
            label: Label::Unlabeled,
            note: String::new(),
            model_ref: src.model_ref.clone(),
            decoded: Some(raw),
        });
    }
    Ok(out)
}

/// Trained VQ-VAE and prior plus the training images, for the image path.
pub struct ImageSource<'a> {
    pub vq: &'a VqVaeModel,
    pub prior: &'a PriorModel,
    pub reference: &'a ImageDataset,
    pub model_ref: String,
}

impl ImageSource<'_> {
    fn check(&self) -> Result<()> {
        if self.vq.grid() != self.prior.geometry() {
            return Err(Error::Geometry(format!(
                "VQ-VAE grid {:?} vs prior grid {:?}",
                self.vq.grid(),
                self.prior.geometry()
            )));
        }
        if self.vq.config.codebook_size != self.prior.codebook_size() {
            return Err(Error::Geometry("codebook size differs between VQ-VAE and prior".into()));
        }
        if (self.reference.height, self.reference.width) != (self.vq.config.image_height, self.vq.config.image_width) {
            return Err(Error::Geometry("reference images differ in size from the model".into()));
        }
        Ok(())
    }
}

/// Records plus the per-map mean entropy of the distributions sampled from.
fn generate_images_traced(
    src: &ImageSource,
    t: Option<ThresholdParam>,
    n: usize,
    seed: u64,
) -> Result<(Vec<LuRecord>, Vec<f64>)> {
    src.check()?;
    let seeds: Vec<u64> = (0..n).map(|i| record_seed(seed, i)).collect();
    let params = GenParams::Threshold(t.unwrap_or_else(ThresholdParam::identity));
    let (h, w) = (src.vq.config.image_height, src.vq.config.image_width);
    let mut records = Vec::with_capacity(n);
    let mut entropies = Vec::with_capacity(n);
    for chunk in (0..n).collect::<Vec<_>>().chunks(64) {
        let chunk_seeds: Vec<u64> = chunk.iter().map(|&i| seeds[i]).collect();
        let maps = src.prior.generate_maps(&chunk_seeds, t)?;
        let plain: Vec<DiscreteLatentMap> = maps.iter().map(|g| g.map.clone()).collect();
        let images = src.vq.decode_maps(&plain)?;
        for ((&i, g), img) in chunk.iter().zip(maps).zip(images) {
            entropies.push(g.mean_entropy);
            records.push(LuRecord {
                id: i as u64,
                batch: None,
                params,
                seed: seeds[i],
                latent: Latent::Map(g.map),
                values: Values::Image(ImageValues::from_unit(h, w, &img)),
                novelty: image_novelty(&img, src.reference)?,
                label: Label::Unlabeled,
                note: String::new(),
                model_ref: src.model_ref.clone(),
                decoded: None,
            });
        }
    }
    Ok((records, entropies))
}

/// `n` images from manipulated maps at threshold `t`.
pub fn generate_lu_images(src: &ImageSource, t: ThresholdParam, n: usize, seed: u64) -> Result<Vec<LuRecord>> {
    t.validate()?;
    Ok(generate_images_traced(src, Some(t), n, seed)?.0)
}

/// `n` images from the unmanipulated prior, seeded like [`generate_lu_images`].
pub fn generate_standard_images(src: &ImageSource, n: usize, seed: u64) -> Result<Vec<LuRecord>> {
    Ok(generate_images_traced(src, None, n, seed)?.0)
}

/// Re-decodes a record's stored latent; equals its stored values when the
/// model is the one that produced it.
pub fn redecode_tabular(model: &VaeModel, rec: &LuRecord) -> Result<Vec<f64>> {
    match &rec.latent {
        Latent::Continuous(z) => Ok(model.codec.decode(&model.decode(z)?)),
        Latent::Map(_) => Err(Error::Precondition("record holds an image latent".into())),
    }
}

pub fn redecode_image(vq: &VqVaeModel, rec: &LuRecord) -> Result<ImageValues> {
    match &rec.latent {
        Latent::Map(m) => Ok(ImageValues::from_unit(
            vq.config.image_height,
            vq.config.image_width,
            &vq.decode_map(m)?,
        )),
        Latent::Continuous(_) => Err(Error::Precondition("record holds a tabular latent".into())),
    }
}

/// Which knob a sweep moves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepAxis {
    /// Threshold `t` of the categorical manipulation.
    Threshold,
    /// `s * base` for `s > 0`; `s = 0` is the baseline `(0, 1)`.
    Ray { base: RarityParams },
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Threshold => "t",
            SweepAxis::Ray { .. } => "s",
        }
    }
}

pub fn ray_point(base: &RarityParams, s: f64) -> Result<RarityParams> {
    if s == 0.0 {
        Ok(RarityParams::baseline())
    } else if s > 0.0 {
        base.scaled(s)
    } else {
        Err(Error::InvalidParam(format!("ray scale must be >= 0, got {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub params: GenParams,
    pub mean_novelty: f64,
    pub novelty_stderr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_abs_latent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_entropy: Option<f64>,
    pub records: Vec<LuRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: String,
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub points: Vec<SweepPoint>,
}

/// Non-empty, finite and strictly increasing or strictly decreasing.
pub fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidParam("sweep grid is empty".into()));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam("sweep grid has non-finite values".into()));
    }
    let up = grid.windows(2).all(|w| w[1] > w[0]);
    let down = grid.windows(2).all(|w| w[1] < w[0]);
    if !(up || down) {
        return Err(Error::InvalidParam(format!("sweep grid {grid:?} is not strictly monotone")));
    }
    Ok(())
}

/// Evenly spaced grid from `from` to `to` inclusive.
pub fn linear_grid(from: f64, to: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidParam("steps must be >= 1".into()));
    }
    if steps == 1 {
        return Ok(vec![from]);
    }
    let grid: Vec<f64> = (0..steps)
        .map(|i| from + (to - from) * i as f64 / (steps - 1) as f64)
        .collect();
    check_grid(&grid)?;
    Ok(grid)
}

fn novelty_summary(records: &[LuRecord]) -> (f64, f64) {
    let nov: Vec<f64> = records.iter().map(|r| r.novelty).collect();
    if nov.is_empty() {
        return (0.0, 0.0);
    }
    let se = if nov.len() > 1 {
        (stats::variance(&nov) * nov.len() as f64 / (nov.len() - 1) as f64 / nov.len() as f64).sqrt()
    } else {
        0.0
    };
    (stats::mean(&nov), se)
}

/// Tabular sweep along a ray. Every point reuses `seed`, so points are
/// paired record by record.
pub fn sweep_tabular(
    src: &TabularSource,
    base: RarityParams,
    grid: &[f64],
    n: usize,
    seed: u64,
    sampler: SamplerChoice,
) -> Result<SweepReport> {
    check_grid(grid)?;
    let axis = SweepAxis::Ray { base };
    let mut points = Vec::with_capacity(grid.len());
    for &s in grid {
        let p = ray_point(&base, s)?;
        let records = generate_lu_tabular(src, p, n, seed, sampler)?;
        let (mean_novelty, novelty_stderr) = novelty_summary(&records);
        let abs: Vec<f64> = records
            .iter()
            .flat_map(|r| match &r.latent {
                Latent::Continuous(z) => z.iter().map(|v| v.abs()).collect(),
                Latent::Map(_) => Vec::new(),
            })
            .collect();
        points.push(SweepPoint {
            value: s,
            params: GenParams::Rarity(p),
            mean_novelty,
            novelty_stderr,
            mean_abs_latent: Some(if abs.is_empty() { 0.0 } else { stats::mean(&abs) }),
            mean_entropy: None,
            records,
        });
    }
    Ok(SweepReport {
        parameter: axis.name().into(),
        axis,
        grid: grid.to_vec(),
        points,
    })
}

/// Image sweep over thresholds, paired by seed like [`sweep_tabular`].
pub fn sweep_images(src: &ImageSource, grid: &[f64], n: usize, seed: u64) -> Result<SweepReport> {
    check_grid(grid)?;
    let mut points = Vec::with_capacity(grid.len());
    for &t in grid {
        let tp = ThresholdParam::new(t)?;
        let (records, entropies) = generate_images_traced(src, Some(tp), n, seed)?;
        let (mean_novelty, novelty_stderr) = novelty_summary(&records);
        points.push(SweepPoint {
            value: t,
            params: GenParams::Threshold(tp),
            mean_novelty,
            novelty_stderr,
            mean_abs_latent: None,
            mean_entropy: Some(if entropies.is_empty() { 0.0 } else { stats::mean(&entropies) }),
            records,
        });
    }
    Ok(SweepReport {
        parameter: SweepAxis::Threshold.name().into(),
        axis: SweepAxis::Threshold,
        grid: grid.to_vec(),
        points,
    })
}
