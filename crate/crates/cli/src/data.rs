//! `utg ingest`, `utg export` and `utg synth`.

use std::path::PathBuf;

use clap::{Args, Subcommand, ValueEnum};
use serde_json::json;
use utg_core::dataset::{load_csv, load_idx};
use utg_core::fixtures::{house_sales_schema, synthetic_house_sales, to_csv};
use utg_core::pipeline::{read_jsonl, records_to_jsonl, write_csv, write_image_batch, LuRecord};
use utg_core::{stats, Schema, VaeModel};
use utg_service::Store;

use crate::config::{existing, fail, write_bytes, write_json, CliResult};

#[derive(Args)]
pub struct IngestArgs {
    /// CSV file, validated against --schema.
    #[arg(long, requires = "schema", conflicts_with = "images")]
    data: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// IDX image file, optionally gzip-compressed.
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file matching --images.
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    /// Also write the summary to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Validates a dataset and prints a JSON summary of it.
pub fn run_ingest(a: IngestArgs) -> CliResult<()> {
    let summary = match (&a.data, &a.schema, &a.images) {
        (Some(data), Some(schema), None) => {
            let schema_path = existing(schema, "schema")?;
            let data_path = existing(data, "data")?;
            let schema = Schema::load(&schema_path).map_err(|e| fail(format!("{}: {e}", schema_path.display())))?;
            let ds = load_csv(&data_path, &schema).map_err(|e| fail(format!("{}: {e}", data_path.display())))?;
            let columns: Vec<_> = schema
                .columns
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let col: Vec<f64> = ds.rows.iter().map(|r| r[j]).collect();
                    let min = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    json!({ "name": c.name, "kind": c.kind, "min": min, "max": max, "mean": stats::mean(&col) })
                })
                .collect();
            json!({ "kind": "tabular", "path": data_path, "rows": ds.len(), "columns": columns })
        }
        (None, _, Some(images)) => {
            let images = existing(images, "images")?;
            let labels = a.labels.as_deref().map(|l| existing(l, "labels")).transpose()?;
            let ds = load_idx(&images, labels.as_deref()).map_err(|e| fail(e.to_string()))?;
            let mean = ds.pixels.iter().map(|&p| p as f64).sum::<f64>() / ds.pixels.len().max(1) as f64;
            let label_counts = ds.labels.as_ref().map(|ls| {
                let mut counts = [0usize; 256];
                ls.iter().for_each(|&l| counts[l as usize] += 1);
                let last = counts.iter().rposition(|&c| c > 0).map_or(0, |i| i + 1);
                counts[..last].to_vec()
            });
            json!({
                "kind": "images",
                "path": images,
                "count": ds.len(),
                "height": ds.height,
                "width": ds.width,
                "mean_intensity": mean,
                "label_counts": label_counts,
            })
        }
        _ => return Err(fail("give --data with --schema, or --images")),
    };
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    if let Some(out) = &a.out {
        write_json(out, &summary)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Jsonl,
    Csv,
    Png,
}

#[derive(Args)]
pub struct ExportArgs {
    /// JSONL records written by `generate` or `sweep`.
    #[arg(long, conflicts_with_all = ["store", "session"])]
    records: Option<PathBuf>,
    /// Session store directory.
    #[arg(long, env = "UTG_STORE")]
    store: Option<PathBuf>,
    #[arg(long, requires = "store")]
    session: Option<String>,
    #[arg(long, value_enum, default_value = "jsonl")]
    format: ExportFormat,
    /// Column schema for CSV; defaults to the schema stored in the records' model.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Output file (jsonl, csv) or directory (png).
    #[arg(long)]
    out: PathBuf,
}

pub fn run_export(a: ExportArgs) -> CliResult<()> {
    let (records, jsonl) = match (&a.records, &a.session) {
        (Some(path), None) => {
            let path = existing(path, "records")?;
            let records = read_jsonl(&path)?;
            let text = records_to_jsonl(&records)?;
            (records, text)
        }
        (None, Some(session)) => {
            let store = a.store.as_ref().ok_or_else(|| fail("--session needs --store or UTG_STORE"))?;
            let text = Store::open(store)?.export(session)?;
            let records = text
                .lines()
                .map(|l| serde_json::from_str::<LuRecord>(l).map_err(|e| fail(format!("session {session}: {e}"))))
                .collect::<CliResult<Vec<_>>>()?;
            (records, text)
        }
        _ => return Err(fail("give --records, or --session with --store")),
    };
    match a.format {
        ExportFormat::Jsonl => write_bytes(&a.out, jsonl.as_bytes())?,
        ExportFormat::Csv => {
            let schema = match &a.schema {
                Some(p) => {
                    let p = existing(p, "schema")?;
                    Schema::load(&p).map_err(|e| fail(format!("{}: {e}", p.display())))?
                }
                None => schema_from_records(&records)?,
            };
            write_csv(&a.out, &records, &schema)?;
        }
        ExportFormat::Png => {
            write_image_batch(&a.out, &records)?;
        }
    }
    eprintln!("exported {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn schema_from_records(records: &[LuRecord]) -> CliResult<Schema> {
    let model_ref = records
        .first()
        .map(|r| r.model_ref.clone())
        .ok_or_else(|| fail("no records to export and no --schema given"))?;
    let model = VaeModel::load(std::path::Path::new(&model_ref))
        .map_err(|e| fail(format!("schema from model {model_ref}: {e}; pass --schema")))?;
    Ok(model.codec.schema)
}

#[derive(Subcommand)]
pub enum SynthKind {
    /// Synthetic house-sales table with the 14-column schema.
    Houses(SynthArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5000, value_parser = clap::value_parser!(u64).range(2..))]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving houses.csv and houses.schema.json.
    #[arg(long)]
    out: PathBuf,
}

pub fn run_synth(kind: SynthKind) -> CliResult<()> {
    let SynthKind::Houses(a) = kind;
    let ds = synthetic_house_sales(a.n as usize, a.seed);
    write_bytes(&a.out.join("houses.csv"), to_csv(&ds).as_bytes())?;
    write_bytes(&a.out.join("houses.schema.json"), house_sales_schema().to_json_pretty().as_bytes())?;
    eprintln!("wrote {} rows to {}", ds.len(), a.out.display());
    Ok(())
}
