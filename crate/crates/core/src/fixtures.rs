//! Small synthetic datasets used by tests, benches and the demo data under
//! `data/`. All generators are deterministic in their seed.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::dataset::{ColumnKind, ColumnSpec, ImageDataset, Schema, TabularDataset};
use crate::kernel::{Activation, Layer, MaskKind, NetworkObjective, ParamStore, Sequential, Tensor};
use crate::rng;

fn continuous_schema(cols: usize) -> Schema {
    Schema::new((0..cols).map(|c| ColumnSpec::new(&format!("x{c}"), ColumnKind::Continuous)).collect())
        .expect("valid schema")
}

/// Two equally sized Gaussian blobs at `-center` and `+center` in every
/// column, with unit-free spread `0.5`.
pub fn two_cluster(n: usize, cols: usize, seed: u64) -> TabularDataset {
    let mut r = rng::rng(seed);
    let noise = Normal::new(0.0, 0.5).expect("finite");
    let rows = (0..n)
        .map(|i| {
            let c = if i % 2 == 0 { -3.0 } else { 3.0 };
            (0..cols).map(|_| c + noise.sample(&mut r)).collect()
        })
        .collect();
    TabularDataset::new(continuous_schema(cols), rows).expect("fixture is valid")
}

/// Cluster membership for [`two_cluster`] rows.
pub fn two_cluster_label(i: usize) -> usize {
    i % 2
}

/// Single correlated Gaussian blob.
pub fn unimodal(n: usize, cols: usize, seed: u64) -> TabularDataset {
    let mut r = rng::rng(seed);
    let std = Normal::new(0.0, 1.0).expect("finite");
    let rows = (0..n)
        .map(|_| {
            let shared = std.sample(&mut r);
            (0..cols)
                .map(|c| 10.0 * c as f64 + 2.0 * (0.6 * shared + 0.8 * std.sample(&mut r)))
                .collect()
        })
        .collect();
    TabularDataset::new(continuous_schema(cols), rows).expect("fixture is valid")
}

/// 8x8 images of two classes: a vertical bar (label 0) and a horizontal bar
/// (label 1), each jittered by one pixel and lightly noised.
pub fn two_pattern_images(n: usize, seed: u64) -> ImageDataset {
    let mut r = rng::rng(seed);
    let mut pixels = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 2) as u8;
        let shift: i32 = r.random_range(-1..=1);
        for y in 0..8i32 {
            for x in 0..8i32 {
                let along = if class == 0 { x } else { y };
                let on = (along - 3 - shift).abs() <= 1 || (along - 4 - shift).abs() <= 0;
                let base = if on { 0.9 } else { 0.05 };
                let v: f32 = base + r.random_range(-0.05..0.05);
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    ImageDataset::new(8, 8, pixels, Some(labels)).expect("fixture is valid")
}

/// The 14 columns of the King County house-sales table.
pub fn house_sales_schema() -> Schema {
    let range = |lo: i32, hi: i32| (lo..=hi).map(f64::from).collect::<Vec<_>>();
    Schema::new(vec![
        ColumnSpec::new("bedrooms", ColumnKind::Integer),
        ColumnSpec::stepped("bathrooms", 0.25),
        ColumnSpec::new("sqft_living", ColumnKind::Integer).with_unit("sqft"),
        ColumnSpec::new("sqft_lot", ColumnKind::Integer).with_unit("sqft"),
        ColumnSpec::stepped("floors", 0.5),
        ColumnSpec::new("waterfront", ColumnKind::Binary),
        ColumnSpec::categorical("view", range(0, 4)),
        ColumnSpec::categorical("condition", range(1, 5)),
        ColumnSpec::categorical("grade", range(1, 13)),
        ColumnSpec::new("sqft_above", ColumnKind::Integer).with_unit("sqft"),
        ColumnSpec::new("sqft_basement", ColumnKind::Integer).with_unit("sqft"),
        ColumnSpec::new("yr_built", ColumnKind::Integer).with_unit("year"),
        ColumnSpec::new("sqft_living15", ColumnKind::Integer).with_unit("sqft"),
        ColumnSpec::new("sqft_lot15", ColumnKind::Integer).with_unit("sqft"),
    ])
    .expect("valid schema")
}

fn weighted(r: &mut impl Rng, values: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    let mut u = r.random_range(0.0..total);
    for (v, w) in values.iter().zip(weights) {
        if u < *w {
            return *v;
        }
        u -= w;
    }
    *values.last().expect("non-empty")
}

/// Synthetic stand-in for the house-sales table: plausible marginals and
/// the obvious couplings (size drives rooms and grade, above + basement =
/// living area). Every row satisfies [`house_sales_schema`]; `n >= 2` rows
/// always include a waterfront property.
pub fn synthetic_house_sales(n: usize, seed: u64) -> TabularDataset {
    let schema = house_sales_schema();
    let mut r = rng::rng(seed);
    let std = Normal::new(0.0, 1.0).expect("finite");
    let lot: LogNormal<f64> = LogNormal::new(8.95, 0.75).expect("finite");
    let grades: Vec<f64> = (3..=13).map(f64::from).collect();
    let grade_w = [0.1, 0.5, 1.2, 9.0, 41.0, 28.0, 12.0, 5.0, 1.9, 0.6, 0.1];
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let grade = weighted(&mut r, &grades, &grade_w);
        let living = (7.55 + 0.17 * (grade - 7.0) + 0.25 * std.sample(&mut r)).exp().clamp(370.0, 12000.0);
        let bedrooms = (1.2 + living / 900.0 + 0.7 * std.sample(&mut r)).round().clamp(1.0, 10.0);
        let bathrooms = ((0.4 + living / 1000.0 + 0.35 * std.sample(&mut r)) * 4.0).round().clamp(2.0, 32.0) / 4.0;
        let floors = if grade >= 8.0 {
            weighted(&mut r, &[1.0, 1.5, 2.0, 2.5, 3.0], &[25.0, 5.0, 62.0, 2.0, 6.0])
        } else {
            weighted(&mut r, &[1.0, 1.5, 2.0, 2.5, 3.0], &[65.0, 12.0, 20.0, 0.5, 2.5])
        };
        let waterfront = if r.random_bool(0.01) { 1.0 } else { 0.0 };
        let view = if waterfront == 1.0 {
            weighted(&mut r, &[2.0, 3.0, 4.0], &[1.0, 2.0, 5.0])
        } else {
            weighted(&mut r, &[0.0, 1.0, 2.0, 3.0, 4.0], &[90.0, 1.6, 4.5, 2.4, 1.5])
        };
        let condition = weighted(&mut r, &[1.0, 2.0, 3.0, 4.0, 5.0], &[0.2, 0.8, 65.0, 26.0, 8.0]);
        let basement = if floors == 1.0 && r.random_bool(0.55) || r.random_bool(0.25) {
            (living * r.random_range(0.2..0.5)).round()
        } else {
            0.0
        };
        let living = living.round();
        let above = living - basement;
        let sqft_lot = lot.sample(&mut r).round().clamp(520.0, 1_650_000.0);
        let yr_built = (1900.0 + 115.0 * r.random::<f64>().powf(0.8)).round().min(2015.0);
        let living15 = (0.55 * living + 900.0 + 280.0 * std.sample(&mut r)).round().max(400.0);
        let lot15 = (0.8 * sqft_lot + 1500.0 * std.sample(&mut r).abs() + 600.0).round();
        rows.push(vec![
            bedrooms, bathrooms, living, sqft_lot, floors, waterfront, view, condition, grade, above, basement,
            yr_built, living15, lot15,
        ]);
    }
    // Small draws can miss the 1% waterfront class, which would leave the
    // column constant.
    if n >= 2 && rows.iter().all(|row| row[5] == 0.0) {
        let last = rows.last_mut().expect("n >= 2");
        last[5] = 1.0;
        last[6] = 4.0;
    }
    TabularDataset::new(schema, rows).expect("stand-in rows satisfy the schema")
}

/// CSV text with a header row, for writing fixtures to disk.
pub fn to_csv(ds: &TabularDataset) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ds.schema.names()).expect("in-memory write");
    for row in &ds.rows {
        w.write_record(row.iter().map(|v| format!("{v}"))).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}


/// A micro network for gradient checking, with its parameters (including
/// the input) and a random read-out.
pub struct GradCase {
    pub name: &'static str,
    pub net: Sequential,
    pub params: ParamStore<f64>,
    pub proj: Tensor<f64>,
}

impl GradCase {
    pub fn objective(&self) -> NetworkObjective<'_> {
        NetworkObjective {
            net: &self.net,
            proj: self.proj.clone(),
        }
    }
}

/// One micro instance per layer kind: dense, plain and strided convolution,
/// both causal masks, each activation and upsampling.
pub fn gradient_micro_cases(seed: u64) -> Vec<GradCase> {
    let cases: Vec<(&'static str, Vec<Layer>, Vec<usize>)> = vec![
        ("dense", vec![Layer::dense("d", 3, 4)], vec![2, 3]),
        ("conv3x3", vec![Layer::conv("c", 2, 3, 3, 1, 1)], vec![2, 2, 4, 4]),
        ("conv4x4_stride2", vec![Layer::conv("c", 2, 3, 4, 2, 1)], vec![1, 2, 6, 6]),
        ("masked_conv_a", vec![Layer::masked_conv("m", 2, 3, 3, MaskKind::A)], vec![1, 2, 3, 3]),
        ("masked_conv_b", vec![Layer::masked_conv("m", 2, 3, 5, MaskKind::B)], vec![1, 2, 4, 4]),
        ("relu", vec![Layer::dense("d", 3, 5), Layer::Act(Activation::Relu)], vec![2, 3]),
        ("sigmoid", vec![Layer::dense("d", 3, 5), Layer::Act(Activation::Sigmoid)], vec![2, 3]),
        ("tanh", vec![Layer::dense("d", 3, 5), Layer::Act(Activation::Tanh)], vec![2, 3]),
        ("upsample2x", vec![Layer::conv("c", 1, 2, 3, 1, 1), Layer::Upsample2x], vec![1, 1, 3, 3]),
    ];
    let mut r = rng::rng(seed);
    cases
        .into_iter()
        .map(|(name, layers, input)| {
            let net = Sequential::new(layers);
            let mut params = ParamStore::new();
            net.init_params(&mut params, &mut r);
            let names: Vec<String> = params.names().cloned().collect();
            for n in names {
                // Nonzero biases so every bias gradient path is exercised.
                if n.ends_with(".b") {
                    for v in params.get_mut(&n).expect("present").data_mut() {
                        *v = r.random_range(-0.5..0.5);
                    }
                }
            }
            let len: usize = input.iter().product();
            let x: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
            params.insert(NetworkObjective::INPUT, Tensor::from_f64(&input, &x).expect("shape"));
            let out = net.predict(&params, params.get(NetworkObjective::INPUT).expect("input")).expect("forward");
            let proj: Vec<f64> = (0..out.len()).map(|_| r.random_range(-1.0..1.0)).collect();
            GradCase {
                name,
                net,
                params,
                proj: Tensor::from_f64(out.shape(), &proj).expect("shape"),
            }
        })
        .collect()
}
