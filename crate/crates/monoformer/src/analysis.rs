//! Texture-bias report: CKA between encoder features of original and
//! texture-shifted frames, per batch, with CSV and SVG outputs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use monoformer_core::cka::{batched_cka, extract_features, CkaReport, CkaSeries, FeatureLayer, Quartiles};
use monoformer_core::image::ImageFrame;
use monoformer_core::model::MonoFormer;

use crate::dataset::{list_frames, FrameRef};
use crate::error::{AppError, Result};
use crate::io;
use crate::shift::{Manifest, MANIFEST_FILE};

pub const CKA_CSV_COLUMNS: [&str; 5] = ["model", "shift", "batch_index", "m", "cka"];

#[derive(Clone, Debug, PartialEq)]
pub struct BiasOptions {
    pub model_name: String,
    /// Images per CKA batch; the whole set when `None`.
    pub batch_size: Option<usize>,
    pub layer: FeatureLayer,
    /// Average tokens instead of flattening them.
    pub pool: bool,
}

impl Default for BiasOptions {
    fn default() -> Self {
        Self {
            model_name: "monoformer".into(),
            batch_size: None,
            layer: FeatureLayer::Last,
            pool: false,
        }
    }
}

fn load_images(root: &Path, frames: &[FrameRef], size: (usize, usize)) -> Result<Vec<ImageFrame>> {
    frames
        .iter()
        .map(|f| {
            let img = io::read_image(&root.join(f.image_rel()))?;
            Ok(if (img.height(), img.width()) != size { img.resize_area(size.0, size.1) } else { img })
        })
        .collect()
}

/// The frame lists must match exactly, and a shift manifest, when present,
/// must not record failures.
fn check_alignment(original: &Path, frames: &[FrameRef], shifted: &Path) -> Result<()> {
    let other = list_frames(shifted)?;
    if other != frames {
        let a: BTreeSet<_> = frames.iter().collect();
        let b: BTreeSet<_> = other.iter().collect();
        let only_a: Vec<String> = a.difference(&b).map(|f| f.id()).collect();
        let only_b: Vec<String> = b.difference(&a).map(|f| f.id()).collect();
        return Err(AppError::Dataset(format!(
            "{} and {} are not aligned (only in original: [{}]; only in shifted: [{}])",
            original.display(),
            shifted.display(),
            only_a.join(", "),
            only_b.join(", ")
        )));
    }
    let manifest = shifted.join(MANIFEST_FILE);
    if manifest.is_file() {
        let failed = Manifest::read(&manifest)?.failed();
        if failed > 0 {
            return Err(AppError::Dataset(format!("{} records {failed} failed frames", manifest.display())));
        }
    }
    Ok(())
}

/// Per-batch CKA of original vs. each shifted dataset.
pub fn bias_report(model: &MonoFormer, original: &Path, shifted: &[(String, PathBuf)], opts: &BiasOptions) -> Result<CkaReport> {
    let frames = list_frames(original)?;
    if frames.len() < 2 {
        return Err(AppError::Dataset(format!("{} needs at least two frames for CKA", original.display())));
    }
    for (_, root) in shifted {
        check_alignment(original, &frames, root)?;
    }
    let size = model.config.encoder.image_size;
    let batch = opts.batch_size.unwrap_or(frames.len());
    let base = extract_features(model, &load_images(original, &frames, size)?, opts.layer, opts.pool)?;
    let mut series = Vec::with_capacity(shifted.len());
    for (name, root) in shifted {
        let feats = extract_features(model, &load_images(root, &frames, size)?, opts.layer, opts.pool)?;
        let batches = batched_cka(&base, &feats, batch)?;
        log::info!("{name}: {} batches", batches.len());
        series.push(CkaSeries {
            model: opts.model_name.clone(),
            shift: name.clone(),
            batches,
        });
    }
    Ok(CkaReport { series })
}

pub fn write_cka_csv(path: &Path, report: &CkaReport) -> Result<()> {
    io::create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| AppError::format(path, e.to_string()))?;
    let err = |e: csv::Error| AppError::format(path, e.to_string());
    w.write_record(CKA_CSV_COLUMNS).map_err(err)?;
    for s in &report.series {
        for (i, (m, v)) in s.batches.iter().enumerate() {
            w.write_record([s.model.clone(), s.shift.clone(), i.to_string(), m.to_string(), format!("{v:.12}")])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// Rows of a CKA CSV as `(model, shift, batch_index, m, cka)`.
pub fn read_cka_csv(path: &Path) -> Result<Vec<(String, String, usize, usize, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| AppError::format(path, e.to_string()))?;
    let headers = r.headers().map_err(|e| AppError::format(path, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != CKA_CSV_COLUMNS {
        return Err(AppError::format(path, format!("unexpected header {headers:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| AppError::format(path, e.to_string()))?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|e| AppError::format(path, e.to_string()));
            Ok((rec[0].to_string(), rec[1].to_string(), num(2)? as usize, num(3)? as usize, num(4)?))
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, report: &CkaReport) -> Result<()> {
    io::create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| AppError::format(path, e.to_string()))?;
    let err = |e: csv::Error| AppError::format(path, e.to_string());
    w.write_record(["model", "shift", "batches", "min", "q1", "median", "q3", "max"]).map_err(err)?;
    for (s, (model, shift, q)) in report.series.iter().zip(report.summary()?) {
        let f = |v: f64| format!("{v:.12}");
        w.write_record([model, shift, s.batches.len().to_string(), f(q.min), f(q.q1), f(q.median), f(q.q3), f(q.max)])
            .map_err(err)?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 20.0, 30.0, 70.0); // left, right, top, bottom

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Y range padded around `[lo, hi]`, never collapsing to a point.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let span = (hi - lo).max(1e-3);
    (lo - 0.1 * span, hi + 0.1 * span)
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    lo: f64,
    hi: f64,
}

impl Frame {
    fn new(lo: f64, hi: f64) -> Self {
        let (l, r, t, b) = MARGIN;
        Self {
            x0: l,
            x1: PLOT_W - r,
            y0: t,
            y1: PLOT_H - b,
            lo,
            hi,
        }
    }

    fn y(&self, v: f64) -> f64 {
        self.y1 - (v - self.lo) / (self.hi - self.lo) * (self.y1 - self.y0)
    }

    fn axes(&self, svg: &mut String, y_label: &str) {
        let _ = writeln!(
            svg,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
            self.x0,
            self.y0,
            self.x1 - self.x0,
            self.y1 - self.y0
        );
        for i in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
            let y = self.y(v);
            let _ = writeln!(
                svg,
                r#"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v:.3}</text>"#,
                self.x0 - 4.0,
                self.x0,
                self.x0 - 6.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="14" y="{:.1}" font-size="12" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#,
            (self.y0 + self.y1) / 2.0,
            (self.y0 + self.y1) / 2.0,
            escape(y_label)
        );
    }
}

fn svg_open() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" viewBox=\"0 0 {PLOT_W} {PLOT_H}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Box-and-whisker figure, one box per (model, shift) series.
pub fn box_plot_svg(report: &CkaReport) -> Result<String> {
    let summary = report.summary()?;
    let (lo, hi) = summary
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), (_, _, q)| (l.min(q.min), h.max(q.max)));
    let (lo, hi) = if summary.is_empty() { (0.0, 1.0) } else { padded(lo, hi) };
    let f = Frame::new(lo.max(0.0).min(hi - 1e-3), hi.min(1.05));
    let mut svg = svg_open();
    f.axes(&mut svg, "CKA");
    let n = summary.len().max(1) as f64;
    let slot = (f.x1 - f.x0) / n;
    for (i, (model, shift, q)) in summary.iter().enumerate() {
        let cx = f.x0 + slot * (i as f64 + 0.5);
        let half = (slot * 0.3).min(40.0);
        let Quartiles { min, q1, median, q3, max } = *q;
        let _ = writeln!(
            svg,
            r##"<g class="box"><line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/><line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/><rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#9ecae1" stroke="black"/><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#d62728" stroke-width="2"/><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/></g>"##,
            f.y(max),
            f.y(q3),
            f.y(q1),
            f.y(min),
            cx - half,
            f.y(q3),
            2.0 * half,
            (f.y(q1) - f.y(q3)).max(0.5),
            cx - half,
            f.y(median),
            cx + half,
            f.y(median),
            cx - half / 2.0,
            f.y(max),
            cx + half / 2.0,
            f.y(max),
            cx - half / 2.0,
            f.y(min),
            cx + half / 2.0,
            f.y(min),
        );
        let _ = writeln!(
            svg,
            r##"<text x="{cx:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text><text x="{cx:.1}" y="{:.1}" font-size="10" text-anchor="middle" fill="#555">{}</text>"##,
            f.y1 + 18.0,
            escape(shift),
            f.y1 + 32.0,
            escape(model)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// A labelled (CKA, abs_rel) point.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterPoint {
    pub label: String,
    pub cka: f64,
    pub abs_rel: f64,
}

/// CKA on x, AbsRel on y.
pub fn scatter_svg(points: &[ScatterPoint]) -> String {
    let (xl, xh) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.cka), h.max(p.cka)));
    let (yl, yh) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.abs_rel), h.max(p.abs_rel)));
    let (xl, xh) = if points.is_empty() { (0.0, 1.0) } else { padded(xl, xh) };
    let (yl, yh) = if points.is_empty() { (0.0, 1.0) } else { padded(yl, yh) };
    let f = Frame::new(yl, yh);
    let x = |v: f64| f.x0 + (v - xl) / (xh - xl) * (f.x1 - f.x0);
    let mut svg = svg_open();
    f.axes(&mut svg, "Abs Rel");
    for i in 0..=4 {
        let v = xl + (xh - xl) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{v:.3}</text>"#,
            x(v),
            f.y1 + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">CKA (median per shift)</text>"#,
        (f.x0 + f.x1) / 2.0,
        PLOT_H - 20.0
    );
    for p in points {
        let _ = writeln!(
            svg,
            r##"<circle class="point" cx="{:.1}" cy="{:.1}" r="5" fill="#1f77b4"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"##,
            x(p.cka),
            f.y(p.abs_rel),
            x(p.cka) + 7.0,
            f.y(p.abs_rel) - 7.0,
            escape(&p.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    io::create_parent(path)?;
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}
