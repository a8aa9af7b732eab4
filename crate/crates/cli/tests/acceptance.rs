//! Acceptance suite. Runs every primary criterion and prints one PASS/FAIL
//! line each; exits non-zero if any fails. Artifacts of the end-to-end runs
//! are kept under the cargo target tmp dir.

use std::io::{BufRead, BufReader};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::Rng;
use utg_core::dataset::{load_idx, validate_row};
use utg_core::fixtures::{gradient_micro_cases, house_sales_schema, two_cluster};
use utg_core::kernel::{grad_check, GradCheckConfig, ParamStore, Tensor};
use utg_core::pipeline::{self, read_jsonl, ImageSource, LuRecord, TabularSource, Values};
use utg_core::rare::{
    density_f, manipulate_categorical, normalizing_constant, sample_exact_oracle, sample_metropolis, ChainConfig,
};
use utg_core::vae::{generate_standard, ElboObjective, LatentPathObjective};
use utg_core::vqvae::{quantize_nearest, Codebook, LatentMap, StraightThroughObjective, VqNets, CODEBOOK};
use utg_core::{
    rng, stats, CategoricalDist, DiscreteLatentMap, PriorConfig, PriorModel, RarityParams, SamplerChoice,
    ThresholdParam, VaeConfig, VaeModel, VqVaeConfig, VqVaeModel,
};

type Outcome = Result<String, String>;

const MU_GRID: [f64; 5] = [0.0, 1.0, 2.0, 5.0, 10.0];
const SIGMA_GRID: [f64; 4] = [0.5, 1.0, 2.0, 5.0];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn utg(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_utg"))
        .args(args)
        .env_remove("UTG_STORE")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stderr).trim().to_owned())
    } else {
        Err(format!(
            "utg {} exited {:?}: {}",
            args.first().unwrap_or(&""),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn density_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    for mu in MU_GRID {
        for sigma in SIGMA_GRID {
            let p = RarityParams::new(mu, sigma).unwrap();
            let f = |x: f64| density_f(x, &p);
            let reach = mu + 40.0 * sigma;
            // Split at the modes and at zero so the adaptive rule sees every bump.
            let cuts = [-reach, -mu - 8.0 * sigma, -mu, 0.0, mu, mu + 8.0 * sigma, reach];
            let total: f64 = cuts.windows(2).map(|w| stats::integrate(&f, w[0], w[1], 1e-12)).sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    ensure(worst < 1e-6, || format!("worst |integral - 1| = {worst:.3e}"))?;
    let a = normalizing_constant(&RarityParams::new(5.0, 5.0).unwrap());
    ensure((a - 1.6826895).abs() < 1e-6, || format!("A(5,5) = {a:.9}"))?;
    Ok(format!("max |integral - 1| = {worst:.1e} over 20 grid points; A(5,5) = {a:.7}"))
}

fn prior_agreement() -> Outcome {
    let p = RarityParams::baseline();
    let n = 10_000;
    let worst = (0..n)
        .map(|i| {
            let x = -6.0 + 12.0 * i as f64 / (n - 1) as f64;
            (density_f(x, &p) - stats::normal_pdf(x, 0.0, 1.0)).abs()
        })
        .fold(0.0, f64::max);
    ensure(worst <= 1e-12, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("max |f - N(0,1)| = {worst:.1e} on 10^4 points in [-6, 6]"))
}

fn sampler_vs_oracle() -> Outcome {
    let n = 100_000;
    let mut worst = (0.0, 0.0, 0.0);
    for (gi, mu) in MU_GRID.into_iter().enumerate() {
        for (gj, sigma) in SIGMA_GRID.into_iter().enumerate() {
            let p = RarityParams::new(mu, sigma).unwrap();
            let seed = (gi * 10 + gj) as u64;
            let chain = sample_metropolis(&p, n, &ChainConfig::with_seed(seed)).map_err(|e| e.to_string())?;
            let exact = sample_exact_oracle(&p, n, 1000 + seed);
            let d = stats::ks_statistic(&chain, &exact);
            if d > worst.0 {
                worst = (d, mu, sigma);
            }
        }
    }
    ensure(worst.0 < 0.01, || format!("KS {:.4} at ({}, {})", worst.0, worst.1, worst.2))?;
    Ok(format!("worst KS D = {:.4} at ({}, {}), n = 10^5", worst.0, worst.1, worst.2))
}

fn rare_latent_statistics() -> Outcome {
    let p = RarityParams::new(5.0, 5.0).unwrap();
    let draws = sample_metropolis(&p, 100_000, &ChainConfig::with_seed(2024)).map_err(|e| e.to_string())?;
    let mean_abs = draws.iter().map(|x| x.abs()).sum::<f64>() / draws.len() as f64;
    // Half-line truncated normal: mu + sigma * phi(mu/sigma) / Phi(mu/sigma).
    let closed = 5.0 + 5.0 * stats::normal_pdf(1.0, 0.0, 1.0) / stats::std_normal_cdf(1.0);
    ensure((closed - 6.4380).abs() < 5e-5, || format!("closed form {closed}"))?;
    ensure((mean_abs - 6.4380).abs() <= 0.05, || format!("mean |z| = {mean_abs:.4}"))?;
    Ok(format!("mean |z| = {mean_abs:.4} (closed form {closed:.4})"))
}

fn algorithm_one_suite() -> Outcome {
    let mut r = rng::rng(77);
    for case in 0..10_000 {
        let v = r.random_range(1..=64);
        let w: Vec<f64> = (0..v).map(|_| -r.random::<f64>().max(1e-300).ln() * r.random::<f64>().powi(2)).collect();
        let total: f64 = w.iter().sum();
        let probs: Vec<f64> = if total > 0.0 {
            w.iter().map(|x| x / total).collect()
        } else {
            vec![1.0 / v as f64; v]
        };
        let d = CategoricalDist::new(probs).map_err(|e| e.to_string())?;
        let t = ThresholdParam::new(r.random_range(1e-3..=1.0)).unwrap();
        let du = manipulate_categorical(&d, t);
        let (p, q) = (d.probs(), du.probs());
        let sum_p: f64 = p.iter().sum();
        let sum_q: f64 = q.iter().sum();
        ensure((sum_p - sum_q).abs() <= 1e-12, || format!("case {case}: sum {sum_p} -> {sum_q}"))?;
        if p.iter().copied().fold(0.0, f64::max) <= t.t {
            ensure(p == q, || format!("case {case}: not identity below threshold"))?;
        }
        for i in 0..v {
            for j in 0..v {
                if p[i] >= p[j] {
                    ensure(q[i] >= q[j], || format!("case {case}: rank of {i},{j} flipped"))?;
                }
            }
        }
        ensure(du.entropy() >= d.entropy() - 1e-12, || format!("case {case}: entropy fell"))?;
    }
    let hand = |p: Vec<f64>, t: f64, want: &[f64]| -> Result<(), String> {
        let d = CategoricalDist::new(p.clone()).unwrap();
        let got = manipulate_categorical(&d, ThresholdParam::new(t).unwrap());
        let err = got.probs().iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(err <= 1e-12, || format!("{p:?}@{t} gave {:?}", got.probs()))
    };
    hand(vec![0.7, 0.2, 0.1], 0.6, &[0.6 + 0.1 / 3.0, 0.2 + 0.1 / 3.0, 0.1 + 0.1 / 3.0])?;
    hand(vec![0.5, 0.3, 0.1, 0.1], 0.25, &[0.325, 0.325, 0.175, 0.175])?;
    Ok("10^4 random instances and both hand-traced cases".into())
}

fn gradient_suite() -> Outcome {
    let cfg = GradCheckConfig::default();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut note = |name: &str, rep: &utg_core::kernel::GradCheckReport| -> Result<(), String> {
        if rep.max_rel_error() > worst.0 {
            worst = (rep.max_rel_error(), name.to_owned());
        }
        ensure(rep.passed(), || format!("{name}:\n{rep}"))
    };
    let mut checked = 0;
    for case in gradient_micro_cases(5) {
        let rep = grad_check(&case.objective(), &case.params, cfg).map_err(|e| e.to_string())?;
        note(case.name, &rep)?;
        checked += 1;
    }

    let mut r = rng::rng(31);
    let (n, k) = (3, 4);
    let h: Vec<f64> = (0..n * 2 * k).map(|_| r.random_range(-1.5..1.5)).collect();
    let eps: Vec<f64> = (0..n * k).map(|_| r.random_range(-2.0..2.0)).collect();
    let w: Vec<f64> = (0..n * k).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut hp = ParamStore::new();
    hp.insert("h", Tensor::from_f64(&[n, 2 * k], &h).unwrap());
    let reparam = LatentPathObjective { eps: eps.clone(), w, k, kl_weight: 0.0 };
    note("reparameterization", &grad_check(&reparam, &hp, cfg).map_err(|e| e.to_string())?)?;
    let kl = LatentPathObjective { eps, w: vec![0.0; n * k], k, kl_weight: 1.0 };
    note("kl", &grad_check(&kl, &hp, cfg).map_err(|e| e.to_string())?)?;

    let ds = two_cluster(4, 3, 6);
    let vcfg = VaeConfig {
        latent_dim: 2,
        encoder_hidden: vec![5],
        decoder_hidden: vec![4],
        ..VaeConfig::default()
    };
    let model = VaeModel::init(&vcfg, ds.codec()).map_err(|e| e.to_string())?;
    let x = ds.normalize();
    let eps: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
    let elbo = ElboObjective {
        nets: &model.nets,
        x,
        eps: Tensor::from_f64(&[4, 2], &eps).unwrap(),
    };
    note("elbo", &grad_check(&elbo, &model.params.cast::<f64>(), cfg).map_err(|e| e.to_string())?)?;

    let qcfg = VqVaeConfig {
        codebook_size: 4,
        code_dim: 3,
        image_height: 4,
        image_width: 4,
        channels: [2, 3],
        ..VqVaeConfig::default()
    };
    let nets = VqNets::new(&qcfg);
    let mut params = ParamStore::<f64>::new();
    nets.decoder.init_params(&mut params, &mut r);
    let z = Tensor::from_f64(&[1, 3, 1, 1], &(0..3).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
    let cb = Tensor::from_f64(&[4, 3], &(0..12).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
    let img = Tensor::from_f64(&[1, 1, 4, 4], &(0..16).map(|_| r.random_range(0.0..1.0)).collect::<Vec<_>>()).unwrap();
    params.insert("z", z.clone());
    params.insert(CODEBOOK, cb.clone());
    let st = StraightThroughObjective::new(&nets.decoder, img, z, &cb, 0.25);
    note("vq_straight_through", &grad_check(&st, &params, cfg).map_err(|e| e.to_string())?)?;
    Ok(format!(
        "{} layer cases + reparameterization, KL, ELBO, straight-through; worst rel err {:.1e} ({})",
        checked, worst.0, worst.1
    ))
}

/// Exhaustive nearest code: smallest squared distance, then smallest index.
fn oracle_nearest(cb: &[Vec<f32>], z: &[f32]) -> usize {
    let dist = |c: &Vec<f32>| -> f64 { c.iter().zip(z).map(|(a, b)| (*b as f64 - *a as f64).powi(2)).sum() };
    let mut order: Vec<(f64, usize)> = cb.iter().enumerate().map(|(i, c)| (dist(c), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order[0].1
}

fn quantizer_oracle() -> Outcome {
    let mut r = rng::rng(12);
    let (v, k) = (32, 6);
    let mut codes: Vec<Vec<f32>> = (0..v).map(|_| (0..k).map(|_| r.random_range(-1.0f32..1.0)).collect()).collect();
    // Duplicates force exact ties.
    codes[9] = codes[3].clone();
    codes[30] = codes[3].clone();
    codes[17] = codes[12].clone();
    let cb = Codebook::new(k, codes.concat()).map_err(|e| e.to_string())?;
    let mut cells = 0;
    let mut ties = 0;
    for _ in 0..100 {
        let data: Vec<Vec<f32>> = (0..100)
            .map(|c| match c % 5 {
                // Cells sitting exactly on (duplicated) code vectors.
                0 => codes[[3, 12, 9, 17][r.random_range(0..4)]].clone(),
                // Quantized coordinates make equidistant codes likely.
                1 => (0..k).map(|_| r.random_range(-2i32..=2) as f32 * 0.5).collect(),
                _ => (0..k).map(|_| r.random_range(-1.5f32..1.5)).collect(),
            })
            .collect();
        let map = LatentMap::new(10, 10, k, data.concat()).map_err(|e| e.to_string())?;
        let q = quantize_nearest(&map, &cb).map_err(|e| e.to_string())?;
        for (c, z) in data.iter().enumerate() {
            let want = oracle_nearest(&codes, z);
            ensure(q.indices[c] as usize == want, || format!("cell {z:?}: got {} want {want}", q.indices[c]))?;
            ties += usize::from(matches!(want, 3 | 12));
            cells += 1;
        }
    }
    Ok(format!("{cells} cells match exhaustive search, {ties} of them ties between duplicated codes"))
}

fn prior_causality() -> Outcome {
    let cfg = PriorConfig {
        codebook_size: 4,
        rows: 3,
        cols: 3,
        layers: 3,
        channels: 8,
        first_kernel: 3,
        kernel: 3,
        ..PriorConfig::default()
    };
    let m = PriorModel::init(&cfg).map_err(|e| e.to_string())?;
    let mut r = rng::rng(8);
    let mut comparisons = 0;
    for _ in 0..8 {
        let base = DiscreteLatentMap::new(3, 3, (0..9).map(|_| r.random_range(0..4u16)).collect()).unwrap();
        for cell in 0..9 {
            let at = (cell / 3, cell % 3);
            let want = m.predict_categorical(&base, at).map_err(|e| e.to_string())?;
            for later in cell..9 {
                for v in 0..4u16 {
                    let mut p = base.clone();
                    p.indices[later] = v;
                    let got = m.predict_categorical(&p, at).map_err(|e| e.to_string())?;
                    let same = got.probs().iter().zip(want.probs()).all(|(a, b)| a.to_bits() == b.to_bits());
                    ensure(same, || format!("cell {cell} moved when cell {later} set to {v}"))?;
                    comparisons += 1;
                }
            }
        }
    }
    Ok(format!("{comparisons} perturbations, all bit-identical"))
}

struct ImageModels {
    vq: VqVaeModel,
    prior: PriorModel,
    reference: utg_core::ImageDataset,
}

impl ImageModels {
    fn source(&self) -> ImageSource<'_> {
        ImageSource {
            vq: &self.vq,
            prior: &self.prior,
            reference: &self.reference,
            model_ref: "acceptance".into(),
        }
    }
}

fn pathwise_identity(models: &ImageModels) -> Outcome {
    let src = models.source();
    let manipulated = pipeline::generate_lu_images(&src, ThresholdParam::identity(), 100, 99).map_err(|e| e.to_string())?;
    let plain = pipeline::generate_standard_images(&src, 100, 99).map_err(|e| e.to_string())?;
    ensure(manipulated.len() == 100 && plain.len() == 100, || "wrong batch size".into())?;
    for (a, b) in manipulated.iter().zip(&plain) {
        ensure(a.latent == b.latent, || format!("record {}: maps differ", a.id))?;
        ensure(a.values == b.values, || format!("record {}: images differ", a.id))?;
    }
    Ok("100 maps and decoded images bit-identical at t = 1.0".into())
}

struct Workspace {
    dir: PathBuf,
    house_model: PathBuf,
}

fn mean_novelty(records: &[LuRecord]) -> f64 {
    records.iter().map(|r| r.novelty).sum::<f64>() / records.len().max(1) as f64
}

fn tabular_protocol(ws: &Workspace) -> Outcome {
    let data = repo().join("data/house-sales");
    let log = utg(&[
        "train", "vae", "--data", s(&data.join("houses.csv")), "--schema", s(&data.join("houses.schema.json")),
        "--latent-dim", "8", "--seed", "42", "--out", s(&ws.house_model),
    ])?;
    let rare_dir = ws.dir.join("lu_houses");
    let base_dir = ws.dir.join("lu_houses_baseline");
    for (dir, mu, sigma) in [(&rare_dir, "5", "5"), (&base_dir, "0", "1")] {
        utg(&[
            "generate", "--model", s(&ws.house_model), "--mu-u", mu, "--sigma-u", sigma, "--n", "100", "--seed", "7",
            "--out", s(dir),
        ])?;
    }
    let rare = read_jsonl(&rare_dir.join("records.jsonl")).map_err(|e| e.to_string())?;
    let base = read_jsonl(&base_dir.join("records.jsonl")).map_err(|e| e.to_string())?;
    ensure(rare.len() == 100, || format!("{} records", rare.len()))?;
    let schema = house_sales_schema();
    for r in &rare {
        let Values::Row(row) = &r.values else {
            return Err("tabular record without a row".into());
        };
        validate_row(row, &schema).map_err(|e| format!("record {}: {e}", r.id))?;
    }
    let header = std::fs::read_to_string(rare_dir.join("records.csv")).map_err(|e| e.to_string())?;
    let columns = header.lines().next().unwrap_or_default().split(',').count();
    ensure(columns == 14, || format!("CSV has {columns} columns"))?;
    let (nr, nb) = (mean_novelty(&rare), mean_novelty(&base));
    ensure(nr > nb, || format!("mean novelty (5,5) {nr:.3} <= (0,1) {nb:.3}"))?;
    Ok(format!(
        "house-sales stand-in: 100 schema-valid records, mean novelty (5,5) {nr:.3} vs (0,1) {nb:.3} [{log}]"
    ))
}

fn image_protocol(ws: &Workspace) -> Result<(String, ImageModels), String> {
    let images = repo().join("data/mnist-subset/images-idx3-ubyte.gz");
    let vq = ws.dir.join("vq.utgm");
    let prior = ws.dir.join("prior.utgm");
    let vq_log = utg(&[
        "train", "vqvae", "--images", s(&images), "--limit", "5000", "--epochs", "3", "--seed", "0", "--out", s(&vq),
    ])?;
    let prior_log = utg(&[
        "train", "prior", "--vq", s(&vq), "--maps", s(&vq.with_extension("maps")), "--channels", "32", "--epochs",
        "3", "--seed", "0", "--out", s(&prior),
    ])?;
    let out = ws.dir.join("lu_mnist");
    utg(&["generate", "--vq", s(&vq), "--prior", s(&prior), "--t", "0.6", "--n", "100", "--seed", "7", "--out", s(&out)])?;
    let pngs = (0..100).filter(|i| out.join(format!("{i:04}.png")).exists()).count();
    ensure(pngs == 100, || format!("{pngs} PNGs"))?;
    let grid = image::open(out.join("grid.png")).map_err(|e| e.to_string())?;
    ensure((grid.width(), grid.height()) == (10 * 30 + 2, 10 * 30 + 2), || {
        format!("grid {}x{}", grid.width(), grid.height())
    })?;

    let sweep = ws.dir.join("sweep_mnist");
    utg(&[
        "sweep", "--param", "t", "--grid", "1.0,0.8,0.6,0.4,0.2", "--vq", s(&vq), "--prior", s(&prior), "--n", "16",
        "--seed", "11", "--per-point", "8", "--out", s(&sweep),
    ])?;
    let strip = image::open(sweep.join("strip.png")).map_err(|e| e.to_string())?;
    ensure((strip.width(), strip.height()) == (5 * 30 + 2, 8 * 30 + 2), || {
        format!("strip {}x{}", strip.width(), strip.height())
    })?;
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(sweep.join("summary.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let entropy: Vec<f64> = summary["points"]
        .as_array()
        .ok_or("summary without points")?
        .iter()
        .map(|p| p["mean_entropy"].as_f64().unwrap_or(f64::NAN))
        .collect();
    ensure(entropy.windows(2).all(|w| w[1] >= w[0]), || {
        format!("entropy not rising as t falls: {entropy:?}")
    })?;

    let models = ImageModels {
        vq: VqVaeModel::load(&vq).map_err(|e| e.to_string())?,
        prior: PriorModel::load(&prior).map_err(|e| e.to_string())?,
        reference: load_idx(&images, None).map_err(|e| e.to_string())?,
    };
    let detail = format!(
        "5000 MNIST images; 100 PNGs + grid.png at t = 0.6; strip over t = 1.0..0.2 with mean entropy {} [{vq_log}; {prior_log}]",
        entropy.iter().map(|e| format!("{e:.2}")).collect::<Vec<_>>().join(" -> ")
    );
    Ok((detail, models))
}

fn distribution_equivalence(ws: &Workspace) -> Outcome {
    let model = VaeModel::load(&ws.house_model).map_err(|e| e.to_string())?;
    let data = repo().join("data/house-sales/houses.csv");
    let reference = utg_core::dataset::load_csv(&data, &model.codec.schema).map_err(|e| e.to_string())?;
    let src = TabularSource {
        model: &model,
        reference: &reference,
        model_ref: s(&ws.house_model).into(),
    };
    let n = 1000;
    let seed = 2718;
    let lu = pipeline::generate_lu_tabular(&src, RarityParams::baseline(), n, seed, SamplerChoice::default())
        .map_err(|e| e.to_string())?;
    let standard: Vec<Vec<f64>> = generate_standard(&model, n, seed)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|features| model.codec.decode(features))
        .collect();
    let mut min_p = (1.0, String::new());
    for (j, col) in model.codec.schema.columns.iter().enumerate() {
        let a: Vec<f64> = lu.iter().map(|r| r.decoded.as_ref().expect("decoded row")[j]).collect();
        let b: Vec<f64> = standard.iter().map(|row| row[j]).collect();
        let p = stats::ks_p_value(stats::ks_statistic(&a, &b), n, n);
        if p < min_p.0 {
            min_p = (p, col.name.clone());
        }
    }
    ensure(min_p.0 >= 0.01, || format!("column {} rejects, p = {:.4}", min_p.1, min_p.0))?;
    Ok(format!("14 columns, n = 1000, smallest KS p-value {:.3} ({})", min_p.0, min_p.1))
}

struct Server {
    child: std::process::Child,
    url: String,
}

fn start_server(store: &Path) -> Result<Server, String> {
    let mut child = Command::new(env!("CARGO_BIN_EXE_utg"))
        .args(["serve", "--port", "0", "--store", s(store)])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().expect("piped")).read_line(&mut line).map_err(|e| e.to_string())?;
    let url = line.trim().strip_prefix("listening on ").ok_or(format!("unexpected banner {line:?}"))?.to_owned();
    Ok(Server { child, url })
}

fn stop_server(mut server: Server) -> Result<(), String> {
    Command::new("kill")
        .args(["-TERM", &server.child.id().to_string()])
        .status()
        .map_err(|e| e.to_string())?;
    let deadline = Instant::now() + Duration::from_secs(10);
    while Instant::now() < deadline {
        if let Some(status) = server.child.try_wait().map_err(|e| e.to_string())? {
            return ensure(status.success(), || format!("serve exited with {status}"));
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    let _ = server.child.kill();
    Err("serve did not stop on SIGTERM".into())
}

fn service_durability(ws: &Workspace) -> Outcome {
    let store = ws.dir.join("sessions");
    let _ = std::fs::remove_dir_all(&store);
    let client = reqwest::blocking::Client::new();
    let server = start_server(&store)?;
    let json = |resp: reqwest::blocking::Response| -> Result<serde_json::Value, String> {
        let status = resp.status();
        let body: serde_json::Value = resp.json().map_err(|e| e.to_string())?;
        ensure(status.is_success(), || format!("{status}: {body}"))?;
        Ok(body)
    };
    let session = json(
        client
            .post(format!("{}/sessions", server.url))
            .json(&serde_json::json!({ "mode": "vae-tabular", "model": ws.house_model }))
            .send()
            .map_err(|e| e.to_string())?,
    )?;
    let sid = session["id"].as_str().ok_or("session without id")?.to_owned();
    let mut batches = Vec::new();
    for (i, params) in [serde_json::json!({ "mu_u": 5.0, "sigma_u": 5.0 }), serde_json::json!({ "mu_u": 2.0, "sigma_u": 1.0 })]
        .iter()
        .enumerate()
    {
        json(
            client
                .patch(format!("{}/sessions/{sid}/params", server.url))
                .json(params)
                .send()
                .map_err(|e| e.to_string())?,
        )?;
        let batch = json(
            client
                .post(format!("{}/sessions/{sid}/batches", server.url))
                .json(&serde_json::json!({ "n": 20, "seed": 100 + i }))
                .send()
                .map_err(|e| e.to_string())?,
        )?;
        batches.push(batch["id"].as_str().ok_or("batch without id")?.to_owned());
    }
    let labels = ["supposable", "unsupposable", "unreal", "unsupposable", "supposable"];
    for (i, label) in labels.iter().enumerate() {
        let bid = &batches[i % 2];
        json(
            client
                .post(format!("{}/sessions/{sid}/batches/{bid}/samples/{}/label", server.url, i * 3))
                .json(&serde_json::json!({ "label": label, "note": format!("triage {i}") }))
                .send()
                .map_err(|e| e.to_string())?,
        )?;
    }
    let export = |url: &str| -> Result<Vec<u8>, String> {
        let resp = client.get(format!("{url}/sessions/{sid}/export")).send().map_err(|e| e.to_string())?;
        ensure(resp.status().is_success(), || format!("export {}", resp.status()))?;
        Ok(resp.bytes().map_err(|e| e.to_string())?.to_vec())
    };
    let before = export(&server.url)?;
    stop_server(server)?;

    let server = start_server(&store)?;
    let after = export(&server.url)?;
    stop_server(server)?;
    ensure(before == after, || "export changed across restart".into())?;
    let lines = before.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count();
    let labelled = String::from_utf8_lossy(&before).matches("\"note\":\"triage").count();
    ensure(lines == 40 && labelled == 5, || format!("{lines} records, {labelled} labelled"))?;
    Ok(format!("2 batches, 5 labels, restart via SIGTERM; {} byte export identical", before.len()))
}

struct Suite {
    results: Vec<(String, bool)>,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match &outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
            Err(why) => println!("FAIL  {name} ({secs:.1}s): {why}"),
        }
        self.results.push((name.to_owned(), outcome.is_ok()));
    }
}

fn main() {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("workspace");
    let ws = Workspace {
        house_model: dir.join("houses.utgm"),
        dir,
    };
    println!("acceptance artifacts in {}", ws.dir.display());

    let mut suite = Suite { results: Vec::new() };
    suite.run("density correctness", density_correctness);
    suite.run("prior agreement at (0,1)", prior_agreement);
    suite.run("sampler vs exact oracle", sampler_vs_oracle);
    suite.run("rare-latent statistics at (5,5)", rare_latent_statistics);
    suite.run("threshold manipulation suite", algorithm_one_suite);
    suite.run("gradient suite", gradient_suite);
    suite.run("quantizer oracle", quantizer_oracle);
    suite.run("prior causality", prior_causality);

    let mut image_models = None;
    suite.run("protocol reproduction: tabular", || tabular_protocol(&ws));
    suite.run("protocol reproduction: images", || {
        let (detail, models) = image_protocol(&ws)?;
        image_models = Some(models);
        Ok(detail)
    });
    suite.run("pathwise identity at t = 1", || match &image_models {
        Some(m) => pathwise_identity(m),
        None => Err("image models unavailable".into()),
    });
    suite.run("distribution equivalence at (0,1)", || distribution_equivalence(&ws));
    suite.run("service durability", || service_durability(&ws));

    let failed: Vec<&str> = suite.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!(
        "acceptance: {} passed, {} failed",
        suite.results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
