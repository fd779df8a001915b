//! File-based visualizers and loggers: weight-grid images (binary PGM),
//! unit convergence residuals, and CSV metric logs.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::engine::{EpochRow, Phase, RunRecord};
use crate::error::{HebbError, Result};
use crate::tensor::{RngState, Tensor};

pub const METRICS_HEADER: &str = "phase,epoch,lr,loss,accuracy,seconds";
pub const WEIGHT_STATS_HEADER: &str = "phase,epoch,layer,min,max,mean,std,convergence_mean";

#[derive(Debug, Clone)]
pub struct WeightGridSpec {
    /// `[h, w]` or `[c, h, w]`; channels are laid side by side.
    pub unit_shape: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    pub sample_count: usize,
    pub seed: u64,
}

impl WeightGridSpec {
    /// A square-ish grid holding `sample_count` units.
    pub fn square(unit_shape: Vec<usize>, sample_count: usize, seed: u64) -> Self {
        let cols = (sample_count as f64).sqrt().ceil().max(1.0) as usize;
        let rows = sample_count.div_ceil(cols).max(1);
        WeightGridSpec {
            unit_shape,
            rows,
            cols,
            sample_count,
            seed,
        }
    }

    fn tile(&self) -> Result<(usize, usize, usize)> {
        match self.unit_shape.as_slice() {
            [h, w] => Ok((1, *h, *w)),
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(HebbError::dim("weight grid", format!("unit shape must be h×w or c×h×w, got {s:?}"))),
        }
    }
}

/// Renders `[units × d]` weights into a grey-level image.
pub fn render_weight_grid(weights: &Tensor, spec: &WeightGridSpec) -> Result<(usize, usize, Vec<u8>)> {
    let (units, d) = weights.dims2("weight grid")?;
    let (c, th, tw) = spec.tile()?;
    if d != c * th * tw {
        return Err(HebbError::dim(
            "weight grid",
            format!("units have {d} inputs but unit shape {:?} holds {}", spec.unit_shape, c * th * tw),
        ));
    }
    if spec.sample_count > units || spec.sample_count > spec.rows * spec.cols {
        return Err(HebbError::Config(format!(
            "cannot sample {} units from {units} into a {}×{} grid",
            spec.sample_count, spec.rows, spec.cols
        )));
    }
    let mut order: Vec<usize> = (0..units).collect();
    RngState::new(spec.seed).shuffle(&mut order);
    let picked = &order[..spec.sample_count];

    let tile_w = c * tw + (c - 1);
    let width = spec.cols * tile_w + spec.cols - 1;
    let height = spec.rows * th + spec.rows - 1;
    let mut img = vec![0u8; width * height];
    for (slot, &unit) in picked.iter().enumerate() {
        let row = weights.row(unit);
        let (lo, hi) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let (gy, gx) = (slot / spec.cols, slot % spec.cols);
        for ch in 0..c {
            for y in 0..th {
                for x in 0..tw {
                    let v = row[ch * th * tw + y * tw + x];
                    let px = if hi > lo {
                        ((v - lo) / (hi - lo) * 255.0).round() as u8
                    } else {
                        128
                    };
                    let iy = gy * (th + 1) + y;
                    let ix = gx * (tile_w + 1) + ch * (tw + 1) + x;
                    img[iy * width + ix] = px;
                }
            }
        }
    }
    Ok((width, height, img))
}

/// Writes a sampled weight grid as a binary PGM (`P5`) file.
pub fn export_weight_grid(weights: &Tensor, spec: &WeightGridSpec, path: &Path) -> Result<()> {
    let (w, h, pixels) = render_weight_grid(weights, spec)?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&pixels);
    std::fs::write(path, bytes).map_err(|e| HebbError::io(path, e))
}

/// Per-unit `|1 − Σ_i |W_μi|^p|`.
pub fn unit_convergence(weights: &Tensor, p: f64) -> Result<Vec<f64>> {
    if !(p >= 2.0) {
        return Err(HebbError::Config(format!("p = {p} must be >= 2")));
    }
    let (units, _) = weights.dims2("unit_convergence")?;
    Ok((0..units)
        .map(|u| (1.0 - weights.row(u).iter().map(|w| w.abs().powf(p)).sum::<f64>()).abs())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

pub fn weight_stats(t: &Tensor) -> WeightStats {
    let n = t.len() as f64;
    let d = t.data();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    WeightStats {
        min: d.iter().cloned().fold(f64::INFINITY, f64::min),
        max: d.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean,
        std: var.sqrt(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV line (no newline) in the order of [`METRICS_HEADER`].
pub fn format_row(row: &EpochRow) -> String {
    format!(
        "{},{},{},{},{},{}",
        row.phase.as_str(),
        row.epoch,
        row.lr,
        opt(row.loss),
        opt(row.accuracy),
        row.seconds
    )
}

/// Appends lines to a CSV file, writing the header first if the file is new.
/// Each call issues a single write.
pub fn append_lines(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let fresh = !path.exists();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| HebbError::io(path, e))?;
    let mut buf = String::new();
    if fresh {
        buf.push_str(header);
        buf.push('\n');
    }
    for l in lines {
        buf.push_str(l);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(|e| HebbError::io(path, e))
}

/// Appends one epoch row to a metrics CSV.
pub fn append_metrics_row(path: &Path, row: &EpochRow) -> Result<()> {
    append_lines(path, METRICS_HEADER, &[format_row(row)])
}

/// Writes every row of `record` to a fresh metrics CSV.
pub fn log_metrics(record: &RunRecord, path: &Path) -> Result<()> {
    let mut file = File::create(path).map_err(|e| HebbError::io(path, e))?;
    let mut buf = String::from(METRICS_HEADER);
    buf.push('\n');
    for row in &record.rows {
        buf.push_str(&format_row(row));
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(|e| HebbError::io(path, e))
}

/// Parses a metrics CSV written by [`log_metrics`] or [`append_metrics_row`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| HebbError::io(path, e))?;
    let bad = |line: usize, detail: String| HebbError::Format {
        path: path.to_path_buf(),
        offset: line as u64,
        detail,
    };
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(bad(0, "missing or wrong header".into()));
    }
    let num = |s: &str, i: usize| s.parse::<f64>().map_err(|e| bad(i, format!("{s:?}: {e}")));
    let opt_num = |s: &str, i: usize| if s.is_empty() { Ok(None) } else { num(s, i).map(Some) };
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i + 1, format!("expected 6 fields, got {}", f.len())));
            }
            let phase = match f[0] {
                "hebbian" => Phase::Hebbian,
                "supervised" => Phase::Supervised,
                p => return Err(bad(i + 1, format!("unknown phase {p}"))),
            };
            Ok(EpochRow {
                phase,
                epoch: f[1].parse().map_err(|e| bad(i + 1, format!("epoch: {e}")))?,
                lr: num(f[2], i + 1)?,
                loss: opt_num(f[3], i + 1)?,
                accuracy: opt_num(f[4], i + 1)?,
                seconds: num(f[5], i + 1)?,
            })
        })
        .collect()
}
