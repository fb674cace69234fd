//! Depth evaluation: inference over frames with ground truth, metrics CSVs
//! and optional depth dumps.

use std::path::{Path, PathBuf};

use monoformer_core::image::DepthMap;
use monoformer_core::metrics::{aggregate, evaluate_depth, DepthMetricsRecord, EvalOptions, Weighting, CSV_COLUMNS};
use monoformer_core::model::MonoFormer;

use crate::dataset::{EvalPair, FrameRef, LoadedFrame};
use crate::error::{AppError, Result};
use crate::io;

pub const METRICS_CSV: &str = "metrics.csv";
pub const PER_IMAGE_CSV: &str = "per_image.csv";
pub const DEPTH_DUMP_DIR: &str = "depth";
pub const COLOR_DUMP_DIR: &str = "depth_color";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DumpOptions {
    /// Raw predicted depth (meters, safetensors).
    pub depth: bool,
    /// Colorized inverse depth (PNG).
    pub color: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub per_image: Vec<(String, DepthMetricsRecord)>,
    pub summary: DepthMetricsRecord,
}

/// Metrics of `model` on every frame that has ground truth.
pub fn evaluate_model(model: &MonoFormer, frames: &[LoadedFrame], opts: &EvalOptions) -> Result<Vec<(FrameRef, DepthMapPair)>> {
    let mut out = Vec::new();
    for f in frames {
        let Some(gt) = &f.gt_depth else {
            log::warn!("{}: no ground-truth depth, skipped", f.frame.id());
            continue;
        };
        let pred = model.predict_depth(&f.image)?;
        let record = evaluate_depth(&pred, gt, opts)?;
        out.push((f.frame.clone(), DepthMapPair { pred, record }));
    }
    if out.is_empty() {
        return Err(AppError::Dataset("no frame has ground-truth depth".into()));
    }
    Ok(out)
}

/// A prediction with its metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMapPair {
    pub pred: DepthMap,
    pub record: DepthMetricsRecord,
}

/// Runs [`evaluate_model`] and writes `metrics.csv` (one summary row,
/// per-image mean), `per_image.csv` and the requested dumps to `out_dir`.
/// Depth dumps mirror the dataset layout, so `out_dir/depth` pairs with the
/// dataset root in [`crate::dataset::load_eval_pairs`].
pub fn evaluate_to_dir(model: &MonoFormer, frames: &[LoadedFrame], opts: &EvalOptions, out_dir: &Path, dumps: DumpOptions) -> Result<EvalOutcome> {
    let results = evaluate_model(model, frames, opts)?;
    for (frame, r) in &results {
        if dumps.depth {
            io::write_depth(&out_dir.join(DEPTH_DUMP_DIR).join(frame.depth_rel()), &r.pred)?;
        }
        if dumps.color {
            let (w, h) = (r.pred.width(), r.pred.height());
            io::write_rgb8(&out_dir.join(COLOR_DUMP_DIR).join(format!("{}.png", frame.id())), w, h, &colorize(&r.pred))?;
        }
    }
    let per_image: Vec<(String, DepthMetricsRecord)> = results.into_iter().map(|(f, r)| (f.id(), r.record)).collect();
    finish(per_image, out_dir)
}

/// Metrics over pre-computed prediction files.
pub fn evaluate_pairs(pairs: &[EvalPair], opts: &EvalOptions, out_dir: &Path) -> Result<EvalOutcome> {
    if pairs.is_empty() {
        return Err(AppError::Dataset("no depth pairs to evaluate".into()));
    }
    let per_image = pairs
        .iter()
        .map(|p| Ok((p.name.clone(), evaluate_depth(&p.pred, &p.gt, opts)?)))
        .collect::<Result<Vec<_>>>()?;
    finish(per_image, out_dir)
}

fn finish(per_image: Vec<(String, DepthMetricsRecord)>, out_dir: &Path) -> Result<EvalOutcome> {
    let records: Vec<DepthMetricsRecord> = per_image.iter().map(|r| r.1).collect();
    let summary = aggregate(&records, Weighting::PerImage)?;
    write_metrics_csv(&out_dir.join(METRICS_CSV), &summary)?;
    write_per_image_csv(&out_dir.join(PER_IMAGE_CSV), &per_image)?;
    Ok(EvalOutcome { per_image, summary })
}

fn fmt(v: f64) -> String {
    format!("{v:.9}")
}

/// Exactly the standard seven columns, one row.
pub fn write_metrics_csv(path: &Path, r: &DepthMetricsRecord) -> Result<()> {
    io::create_parent(path)?;
    let err = |e: csv::Error| AppError::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(CSV_COLUMNS).map_err(err)?;
    w.write_record(r.values().map(fmt)).map_err(err)?;
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_per_image_csv(path: &Path, rows: &[(String, DepthMetricsRecord)]) -> Result<()> {
    io::create_parent(path)?;
    let err = |e: csv::Error| AppError::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["image"];
    header.extend(CSV_COLUMNS);
    header.push("n_pixels");
    w.write_record(&header).map_err(err)?;
    for (id, r) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(r.values().map(fmt));
        rec.push(r.n_pixels.to_string());
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// Reads the summary row of a `metrics.csv`.
pub fn read_metrics_csv(path: &Path) -> Result<[f64; 7]> {
    let err = |e: csv::Error| AppError::format(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let headers = r.headers().map_err(err)?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_COLUMNS {
        return Err(AppError::format(path, format!("unexpected header {headers:?}")));
    }
    let rec = r
        .records()
        .next()
        .ok_or_else(|| AppError::format(path, "no data row"))?
        .map_err(err)?;
    let mut out = [0.0; 7];
    for (o, v) in out.iter_mut().zip(rec.iter()) {
        *o = v.parse().map_err(|e: std::num::ParseFloatError| AppError::format(path, e.to_string()))?;
    }
    Ok(out)
}

/// Anchors of a perceptually ordered dark-to-bright colormap.
const COLORMAP: [[f64; 3]; 5] = [
    [0.267, 0.005, 0.329],
    [0.230, 0.322, 0.546],
    [0.128, 0.567, 0.551],
    [0.369, 0.789, 0.383],
    [0.993, 0.906, 0.144],
];

/// Inverse depth mapped through the colormap, normalized by its 95th
/// percentile (near is bright).
pub fn colorize(depth: &DepthMap) -> Vec<[u8; 3]> {
    let inv: Vec<f64> = depth.values().iter().map(|d| 1.0 / d.max(1e-6)).collect();
    let mut sorted = inv.clone();
    sorted.sort_by(f64::total_cmp);
    let top = sorted[((sorted.len() - 1) as f64 * 0.95) as usize].max(1e-12);
    inv.iter()
        .map(|v| {
            let t = (v / top).clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
            let i = (t.floor() as usize).min(COLORMAP.len() - 2);
            let f = t - i as f64;
            let c = |k: usize| ((COLORMAP[i][k] * (1.0 - f) + COLORMAP[i + 1][k] * f) * 255.0).round() as u8;
            [c(0), c(1), c(2)]
        })
        .collect()
}

/// Files written by an evaluation into `out_dir`.
pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join(METRICS_CSV)
}
