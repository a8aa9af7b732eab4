//! `utg generate` and `utg sweep`.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use utg_core::pipeline::{
    self, grid_png, linear_grid, records_to_jsonl, write_csv, write_image_batch, write_strip, ImageSource, LuRecord,
    SweepReport, TabularSource,
};
use utg_core::{RarityParams, SamplerChoice, ThresholdParam};
use utg_service::{resolve_models, Loaded, Mode};

use crate::config::{absolute, create_dir, fail, resolve, seed_or_fresh, write_bytes, write_json, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    #[default]
    Metropolis,
    Exact,
}

impl Sampler {
    fn choice(self) -> SamplerChoice {
        match self {
            Sampler::Metropolis => SamplerChoice::default(),
            Sampler::Exact => SamplerChoice::Exact,
        }
    }
}

/// Model selection shared by `generate` and `sweep`.
#[derive(Args, Serialize)]
pub struct ModelArgs {
    /// Trained tabular VAE.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Trained VQ-VAE (image mode, together with --prior).
    #[arg(long)]
    vq: Option<PathBuf>,
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Reference data for novelty; defaults to the model's training data.
    #[arg(long)]
    data: Option<PathBuf>,
}

/// Model paths of a resolved run, rewritten to absolute form once loaded.
struct ModelPaths<'a> {
    model: &'a mut Option<PathBuf>,
    vq: &'a mut Option<PathBuf>,
    prior: &'a mut Option<PathBuf>,
    data: &'a mut Option<PathBuf>,
}

impl ModelPaths<'_> {
    fn mode(&self) -> CliResult<Mode> {
        match (&*self.model, &*self.vq, &*self.prior) {
            (Some(_), None, None) => Ok(Mode::VaeTabular),
            (None, Some(_), Some(_)) => Ok(Mode::VqvaeImage),
            (None, Some(_), None) | (None, None, Some(_)) => Err(fail("image mode needs both --vq and --prior")),
            (None, None, None) => Err(fail("give --model (tabular) or --vq with --prior (images)")),
            _ => Err(fail("--model cannot be combined with --vq/--prior")),
        }
    }

    fn load(self) -> CliResult<(Mode, Loaded)> {
        let mode = self.mode()?;
        let s = |p: &Option<PathBuf>| p.as_ref().map(|p| p.to_string_lossy().into_owned());
        let (refs, loaded) = resolve_models(
            mode,
            s(self.model).as_deref(),
            s(self.vq).as_deref(),
            s(self.prior).as_deref(),
            s(self.data).as_deref(),
        )?;
        *self.model = refs.vae.map(PathBuf::from);
        *self.vq = refs.vq.map(PathBuf::from);
        *self.prior = refs.prior.map(PathBuf::from);
        *self.data = Some(PathBuf::from(refs.data));
        Ok((mode, loaded))
    }
}

macro_rules! model_paths {
    ($run:expr) => {
        ModelPaths {
            model: &mut $run.model,
            vq: &mut $run.vq,
            prior: &mut $run.prior,
            data: &mut $run.data,
        }
    };
}

fn tabular_source(loaded: &Loaded) -> Option<TabularSource<'_>> {
    match loaded {
        Loaded::Tabular {
            vae,
            reference,
            model_ref,
        } => Some(TabularSource {
            model: vae,
            reference,
            model_ref: model_ref.clone(),
        }),
        Loaded::Image { .. } => None,
    }
}

fn image_source(loaded: &Loaded) -> Option<ImageSource<'_>> {
    match loaded {
        Loaded::Image {
            vq,
            prior,
            reference,
            model_ref,
        } => Some(ImageSource {
            vq,
            prior,
            reference,
            model_ref: model_ref.clone(),
        }),
        Loaded::Tabular { .. } => None,
    }
}

#[derive(Args, Serialize)]
pub struct GenerateArgs {
    /// JSON run config; explicit flags override its values.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    models: ModelArgs,
    /// Rarity location (tabular); defaults to 0.
    #[arg(long, allow_hyphen_values = true)]
    mu_u: Option<f64>,
    /// Rarity spread (tabular); defaults to 1.
    #[arg(long)]
    sigma_u: Option<f64>,
    /// Probability threshold in (0, 1] (images); defaults to 1.
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    sampler: Option<Sampler>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn d_n() -> usize {
    100
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRun {
    #[serde(default)]
    model: Option<PathBuf>,
    #[serde(default)]
    vq: Option<PathBuf>,
    #[serde(default)]
    prior: Option<PathBuf>,
    #[serde(default)]
    data: Option<PathBuf>,
    #[serde(default)]
    mu_u: Option<f64>,
    #[serde(default)]
    sigma_u: Option<f64>,
    #[serde(default)]
    t: Option<f64>,
    #[serde(default = "d_n")]
    n: usize,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    sampler: Sampler,
    out: PathBuf,
}

pub fn run_generate(a: GenerateArgs) -> CliResult<()> {
    let mut run: GenerateRun = resolve(a.config.as_deref(), &a)?;
    let (mode, loaded) = model_paths!(run).load()?;
    run.out = absolute(&run.out);
    run.seed = Some(seed_or_fresh(run.seed));
    let seed = run.seed.unwrap_or_default();
    create_dir(&run.out)?;
    let records = match mode {
        Mode::VaeTabular => {
            if run.t.is_some() {
                return Err(fail("--t applies to image models; use --mu-u/--sigma-u"));
            }
            let base = RarityParams::baseline();
            run.mu_u = Some(run.mu_u.unwrap_or(base.mu_u));
            run.sigma_u = Some(run.sigma_u.unwrap_or(base.sigma_u));
            let p = RarityParams::new(run.mu_u.unwrap_or_default(), run.sigma_u.unwrap_or_default())?;
            let src = tabular_source(&loaded).expect("tabular mode");
            let records = pipeline::generate_lu_tabular(&src, p, run.n, seed, run.sampler.choice())?;
            write_tabular(&run.out, &records, &src)?;
            records
        }
        Mode::VqvaeImage => {
            if run.mu_u.is_some() || run.sigma_u.is_some() {
                return Err(fail("--mu-u/--sigma-u apply to tabular models; use --t"));
            }
            let t = ThresholdParam::new(run.t.unwrap_or(1.0))?;
            run.t = Some(t.t);
            let src = image_source(&loaded).expect("image mode");
            let records = pipeline::generate_lu_images(&src, t, run.n, seed)?;
            write_images(&run.out, &records)?;
            records
        }
    };
    write_json(&run.out.join("run.json"), &run)?;
    eprintln!("wrote {} records to {}", records.len(), run.out.display());
    Ok(())
}

fn write_tabular(dir: &Path, records: &[LuRecord], src: &TabularSource) -> CliResult<()> {
    write_bytes(&dir.join("records.jsonl"), records_to_jsonl(records)?.as_bytes())?;
    write_csv(&dir.join("records.csv"), records, &src.model.codec.schema)?;
    Ok(())
}

fn write_images(dir: &Path, records: &[LuRecord]) -> CliResult<()> {
    write_image_batch(dir, records)?;
    if !records.is_empty() {
        let per_row = (records.len() as f64).sqrt().ceil() as usize;
        write_bytes(&dir.join("grid.png"), &grid_png(records, per_row)?)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum SweepParam {
    /// Probability threshold (image models).
    #[serde(rename = "t")]
    #[value(name = "t")]
    T,
    /// Scale along the ray through (mu-u, sigma-u) (tabular models).
    #[serde(rename = "s")]
    #[value(name = "s")]
    S,
}

#[derive(Args, Serialize)]
pub struct SweepArgs {
    /// JSON run config; explicit flags override its values.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    models: ModelArgs,
    #[arg(long, value_enum)]
    param: Option<SweepParam>,
    #[arg(long, allow_hyphen_values = true)]
    from: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    to: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Explicit grid, comma separated; replaces --from/--to/--steps.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with_all = ["from", "to", "steps"])]
    grid: Option<Vec<f64>>,
    /// Base point of the ray for --param s.
    #[arg(long, allow_hyphen_values = true)]
    mu_u: Option<f64>,
    #[arg(long)]
    sigma_u: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    sampler: Option<Sampler>,
    /// Samples per grid point shown in strip.png (images).
    #[arg(long)]
    per_point: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn d_per_point() -> usize {
    8
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepRun {
    #[serde(default)]
    model: Option<PathBuf>,
    #[serde(default)]
    vq: Option<PathBuf>,
    #[serde(default)]
    prior: Option<PathBuf>,
    #[serde(default)]
    data: Option<PathBuf>,
    param: SweepParam,
    #[serde(default)]
    from: Option<f64>,
    #[serde(default)]
    to: Option<f64>,
    #[serde(default)]
    steps: Option<usize>,
    #[serde(default)]
    grid: Option<Vec<f64>>,
    #[serde(default)]
    mu_u: Option<f64>,
    #[serde(default)]
    sigma_u: Option<f64>,
    #[serde(default = "d_n")]
    n: usize,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    sampler: Sampler,
    #[serde(default = "d_per_point")]
    per_point: usize,
    out: PathBuf,
}

pub fn run_sweep(a: SweepArgs) -> CliResult<()> {
    let mut run: SweepRun = resolve(a.config.as_deref(), &a)?;
    let grid = match (&run.grid, run.from, run.to, run.steps) {
        (Some(g), None, None, None) => g.clone(),
        (None, Some(from), Some(to), Some(steps)) => linear_grid(from, to, steps)?,
        (Some(_), ..) => return Err(fail("--grid cannot be combined with --from/--to/--steps")),
        _ => return Err(fail("give --from, --to and --steps, or --grid")),
    };
    pipeline::check_grid(&grid)?;
    let (mode, loaded) = model_paths!(run).load()?;
    run.out = absolute(&run.out);
    run.seed = Some(seed_or_fresh(run.seed));
    let seed = run.seed.unwrap_or_default();
    let report = match (run.param, mode) {
        (SweepParam::S, Mode::VaeTabular) => {
            let (Some(mu), Some(sigma)) = (run.mu_u, run.sigma_u) else {
                return Err(fail("--param s needs the ray base --mu-u and --sigma-u"));
            };
            let base = RarityParams::new(mu, sigma)?;
            let src = tabular_source(&loaded).expect("tabular mode");
            pipeline::sweep_tabular(&src, base, &grid, run.n, seed, run.sampler.choice())?
        }
        (SweepParam::T, Mode::VqvaeImage) => {
            let src = image_source(&loaded).expect("image mode");
            pipeline::sweep_images(&src, &grid, run.n, seed)?
        }
        (SweepParam::T, _) => return Err(fail("--param t sweeps image models (--vq/--prior)")),
        (SweepParam::S, _) => return Err(fail("--param s sweeps tabular models (--model)")),
    };
    create_dir(&run.out)?;
    write_sweep(&run.out, &report, &loaded, run.per_point)?;
    write_json(&run.out.join("run.json"), &run)?;
    eprintln!("wrote {} sweep points to {}", report.points.len(), run.out.display());
    Ok(())
}

/// One subdirectory per point, `summary.json`, and for images `strip.png`.
fn write_sweep(dir: &Path, report: &SweepReport, loaded: &Loaded, per_point: usize) -> CliResult<()> {
    let mut points = Vec::with_capacity(report.points.len());
    for (i, point) in report.points.iter().enumerate() {
        let name = format!("p{i:02}");
        let sub = dir.join(&name);
        create_dir(&sub)?;
        match tabular_source(loaded) {
            Some(src) => write_tabular(&sub, &point.records, &src)?,
            None => write_images(&sub, &point.records)?,
        }
        let mut summary = serde_json::to_value(point).map_err(|e| fail(e.to_string()))?;
        if let Value::Object(m) = &mut summary {
            m.remove("records");
            m.insert("dir".into(), Value::String(name));
        }
        points.push(summary);
    }
    let summary = serde_json::json!({
        "parameter": report.parameter,
        "axis": report.axis,
        "grid": report.grid,
        "points": points,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    if image_source(loaded).is_some() && report.points.iter().any(|p| !p.records.is_empty()) {
        write_strip(&dir.join("strip.png"), report, per_point)?;
    }
    Ok(())
}
