use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schema::{ColumnKind, Schema};
use super::LoadError;
use crate::kernel::Tensor;

/// Per-column mean and population standard deviation of the raw values.
/// Categorical columns are one-hot coded and carry no statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Maps raw rows to the training feature space and back.
///
/// Scalar columns are z-scored; categorical columns become one-hot blocks
/// and are argmax-decoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularCodec {
    pub schema: Schema,
    pub stats: NormStats,
}

impl TabularCodec {
    pub fn width(&self) -> usize {
        self.schema.feature_width()
    }

    pub fn encode(&self, raw: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width());
        for (i, c) in self.schema.columns.iter().enumerate() {
            match c.kind {
                ColumnKind::Categorical => {
                    let allowed = c.allowed().unwrap_or(&[]);
                    let hot = allowed
                        .iter()
                        .position(|&a| a == raw[i])
                        .unwrap_or_else(|| nearest_index(allowed, raw[i]));
                    out.extend((0..allowed.len()).map(|j| if j == hot { 1.0 } else { 0.0 }));
                }
                _ => out.push((raw[i] - self.stats.mean[i]) / self.stats.std[i]),
            }
        }
        out
    }

    /// Inverse of [`encode`](Self::encode) up to argmax on one-hot blocks.
    pub fn decode(&self, features: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.schema.len());
        let mut pos = 0;
        for (i, c) in self.schema.columns.iter().enumerate() {
            match c.kind {
                ColumnKind::Categorical => {
                    let allowed = c.allowed().unwrap_or(&[]);
                    let block = &features[pos..pos + allowed.len()];
                    let mut best = 0;
                    for (j, &v) in block.iter().enumerate() {
                        if v > block[best] {
                            best = j;
                        }
                    }
                    out.push(allowed[best]);
                    pos += allowed.len();
                }
                _ => {
                    out.push(features[pos] * self.stats.std[i] + self.stats.mean[i]);
                    pos += 1;
                }
            }
        }
        out
    }
}

fn nearest_index(values: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (i, &a) in values.iter().enumerate() {
        if (a - v).abs() < (values[best] - v).abs() {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    pub schema: Schema,
    pub rows: Vec<Vec<f64>>,
    pub norm_stats: NormStats,
}

impl TabularDataset {
    /// Validates rows against the schema and computes normalization statistics.
    ///
    /// Scalar columns that are constant across two or more rows are rejected;
    /// a single-row dataset gets unit standard deviations.
    pub fn new(schema: Schema, rows: Vec<Vec<f64>>) -> Result<Self, LoadError> {
        schema.validate()?;
        for (r, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(LoadError::Invalid(format!(
                    "row {} has {} values, schema has {}",
                    r + 1,
                    row.len(),
                    schema.len()
                )));
            }
            for (v, c) in row.iter().zip(&schema.columns) {
                c.check(*v).map_err(|detail| LoadError::KindViolation {
                    row: r + 1,
                    column: c.name.clone(),
                    detail,
                })?;
            }
        }
        let n = rows.len();
        let mut mean = vec![0.0; schema.len()];
        let mut std = vec![1.0; schema.len()];
        for (i, c) in schema.columns.iter().enumerate() {
            if c.kind == ColumnKind::Categorical || n == 0 {
                mean[i] = 0.0;
                std[i] = 1.0;
                continue;
            }
            let m = rows.iter().map(|r| r[i]).sum::<f64>() / n as f64;
            let var = rows.iter().map(|r| (r[i] - m).powi(2)).sum::<f64>() / n as f64;
            mean[i] = m;
            if n >= 2 {
                if var <= 0.0 {
                    return Err(LoadError::ConstantColumn(c.name.clone()));
                }
                std[i] = var.sqrt();
            }
        }
        Ok(TabularDataset {
            schema,
            rows,
            norm_stats: NormStats { mean, std },
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn codec(&self) -> TabularCodec {
        TabularCodec {
            schema: self.schema.clone(),
            stats: self.norm_stats.clone(),
        }
    }

    /// Feature matrix `[n, feature_width]` in normalized units.
    pub fn normalize(&self) -> Tensor<f64> {
        let codec = self.codec();
        let data: Vec<f64> = self.rows.iter().flat_map(|r| codec.encode(r)).collect();
        Tensor::new(vec![self.rows.len(), codec.width()], data).expect("encoded width is fixed")
    }

    pub fn denormalize(&self, features: &[f64]) -> Vec<f64> {
        self.codec().decode(features)
    }
}

/// Reads a CSV file whose header contains every schema column (extra columns
/// are ignored). Rows are numbered from 1, excluding the header.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<TabularDataset, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_csv(&text, schema)
}

pub fn parse_csv(text: &str, schema: &Schema) -> Result<TabularDataset, LoadError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| LoadError::Csv(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let positions = schema
        .columns
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == &c.name)
                .ok_or_else(|| LoadError::MissingColumn(c.name.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| LoadError::Csv(e.to_string()))?;
        let mut row = Vec::with_capacity(schema.len());
        for (c, &pos) in schema.columns.iter().zip(&positions) {
            let cell = record.get(pos).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| LoadError::Unparseable {
                row: r + 1,
                column: c.name.clone(),
                value: cell.to_owned(),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    TabularDataset::new(schema.clone(), rows)
}
