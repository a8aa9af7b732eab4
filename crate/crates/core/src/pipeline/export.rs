//! Record files: JSONL with full provenance, a CSV projection of tabular
//! values, and 8-bit grayscale PNGs.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;

use super::{LuRecord, SweepReport, Values};
use crate::dataset::Schema;
use crate::error::{Error, Result};

pub fn records_to_jsonl(records: &[LuRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[LuRecord]) -> Result<()> {
    fs::write(path, records_to_jsonl(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<LuRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// One row per tabular record, one column per schema column.
pub fn write_csv(path: &Path, records: &[LuRecord], schema: &Schema) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::InvalidParam(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::InvalidParam(format!("{}: {e}", path.display()));
    w.write_record(schema.names()).map_err(csv_err)?;
    for r in records {
        let Values::Row(v) = &r.values else {
            return Err(Error::Precondition(format!("record {} is not tabular", r.id)));
        };
        if v.len() != schema.len() {
            return Err(Error::shape("write_csv", format!("record {} has {} values", r.id, v.len())));
        }
        w.write_record(v.iter().map(|x| x.to_string())).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn image_png(values: &Values) -> Result<Vec<u8>> {
    let Values::Image(img) = values else {
        return Err(Error::Precondition("record is not an image".into()));
    };
    let gray = GrayImage::from_raw(img.width as u32, img.height as u32, img.bytes()?)
        .ok_or_else(|| Error::shape("image_png", "pixel count"))?;
    encode_png(&gray)
}

fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// `NNNN.png` per record plus `records.jsonl` in `dir`.
pub fn write_image_batch(dir: &Path, records: &[LuRecord]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(records.len());
    for r in records {
        let p = dir.join(format!("{:04}.png", r.id));
        let bytes = image_png(&r.values)?;
        let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&p, e))?;
        paths.push(p);
    }
    write_jsonl(&dir.join("records.jsonl"), records)?;
    Ok(paths)
}

fn tile(cells: &[Vec<&LuRecord>]) -> Result<Vec<u8>> {
    const GAP: u32 = 2;
    let first = cells
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::Precondition("no records to tile".into()))?;
    let Values::Image(i0) = &first.values else {
        return Err(Error::Precondition("tiling needs image records".into()));
    };
    let (h, w) = (i0.height as u32, i0.width as u32);
    let cols = cells.len() as u32;
    let rows = cells.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let mut canvas = GrayImage::from_pixel(cols * (w + GAP) + GAP, rows * (h + GAP) + GAP, image::Luma([255]));
    for (c, column) in cells.iter().enumerate() {
        for (r, rec) in column.iter().enumerate() {
            let Values::Image(img) = &rec.values else {
                return Err(Error::Precondition("tiling needs image records".into()));
            };
            if (img.height as u32, img.width as u32) != (h, w) {
                return Err(Error::Geometry("tiled images differ in size".into()));
            }
            let bytes = img.bytes()?;
            let (x0, y0) = (GAP + c as u32 * (w + GAP), GAP + r as u32 * (h + GAP));
            for y in 0..h {
                for x in 0..w {
                    canvas.put_pixel(x0 + x, y0 + y, image::Luma([bytes[(y * w + x) as usize]]));
                }
            }
        }
    }
    encode_png(&canvas)
}

/// Records tiled row by row, `per_row` images across, with 2-pixel white
/// gutters.
pub fn grid_png(records: &[LuRecord], per_row: usize) -> Result<Vec<u8>> {
    let per_row = per_row.max(1);
    let mut cols: Vec<Vec<&LuRecord>> = vec![Vec::new(); per_row.min(records.len().max(1))];
    for (i, r) in records.iter().enumerate() {
        cols[i % per_row].push(r);
    }
    tile(&cols)
}

/// Sweep strip: one column per grid point, the first `per_point` samples of
/// each point stacked downwards.
pub fn strip_png(report: &SweepReport, per_point: usize) -> Result<Vec<u8>> {
    let cols: Vec<Vec<&LuRecord>> = report.points.iter().map(|p| p.records.iter().take(per_point).collect()).collect();
    tile(&cols)
}

pub fn write_strip(path: &Path, report: &SweepReport, per_point: usize) -> Result<()> {
    fs::write(path, strip_png(report, per_point)?).map_err(|e| Error::io(path, e))
}
