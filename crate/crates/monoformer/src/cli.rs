//! Command-line interface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use monoformer_core::camera::Pose6DoF;
use monoformer_core::cka::FeatureLayer;
use monoformer_core::synthetic::{generate_synthetic_scene, SceneLayout, SyntheticSceneConfig, TextureKind};

use crate::analysis::{self, BiasOptions, ScatterPoint};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, load_eval_pairs, load_frames, Split};
use crate::error::{AppError, Result};
use crate::evaluate::{self, DumpOptions};
use crate::shift::{self, ShiftSpec, DEFAULT_SPECTRAL_CUTOFF};
use crate::trainer;

#[derive(Debug, Parser)]
#[command(name = "monoformer", version, about = "Self-supervised monocular depth: train, evaluate, texture-shift and CKA analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train depth and pose networks on a sequence dataset.
    Train(TrainArgs),
    /// Compute depth metrics for a checkpoint (or for prediction files).
    Evaluate(EvalArgs),
    /// Write a texture-shifted copy of a dataset.
    Shift(ShiftArgs),
    /// CKA bias report between original and shifted datasets.
    Analyze(AnalyzeArgs),
    /// Render a synthetic sequence with ground-truth depth and poses.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run config; defaults apply to anything it leaves out.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `section.key=value` override, repeatable (e.g. `train.epochs=3`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr_depth: Option<f64>,
    #[arg(long)]
    pub lr_pose: Option<f64>,
    #[arg(long)]
    pub num_layers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "pred_dir")]
    pub checkpoint: Option<PathBuf>,
    /// Architecture to load the weights into (default: the stored config).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, required_unless_present = "pred_dir")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Evaluate existing depth files instead of running a model.
    #[arg(long, requires = "gt_dir", conflicts_with = "checkpoint")]
    pub pred_dir: Option<PathBuf>,
    #[arg(long)]
    pub gt_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub min_depth: Option<f64>,
    #[arg(long)]
    pub max_depth: Option<f64>,
    #[arg(long)]
    pub no_median_scaling: bool,
    /// Skip the per-image depth dumps.
    #[arg(long)]
    pub no_dump: bool,
    /// Also write colorized inverse-depth PNGs.
    #[arg(long)]
    pub color: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ShiftKindArg {
    Identity,
    Watercolor,
    PencilSketch,
    StyleIngest,
    StyleSpectral,
}

#[derive(Debug, Args)]
pub struct ShiftArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub kind: ShiftKindArg,
    #[arg(long)]
    pub sigma_spatial: Option<f64>,
    #[arg(long)]
    pub sigma_range: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    #[arg(long)]
    pub shade: Option<f64>,
    #[arg(long)]
    pub stylized_dir: Option<PathBuf>,
    /// Style image, repeatable.
    #[arg(long = "style")]
    pub styles: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SPECTRAL_CUTOFF)]
    pub cutoff: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub original: PathBuf,
    /// `name=DIR`, repeatable.
    #[arg(long = "shifted", value_name = "NAME=DIR", required = true)]
    pub shifted: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Images per CKA batch (default: all images in one batch).
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value = "monoformer")]
    pub model_name: String,
    /// 1-based encoder layer (default: last).
    #[arg(long)]
    pub layer: Option<usize>,
    /// Average tokens instead of flattening them.
    #[arg(long)]
    pub pool: bool,
    /// `name=metrics.csv` of an evaluation on that shift, repeatable; adds
    /// the CKA vs. Abs Rel scatter.
    #[arg(long = "eval", value_name = "NAME=CSV")]
    pub evals: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LayoutArg {
    Boxes,
    Plane,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TextureArg {
    Noise,
    Checker,
    Stripes,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "seq00")]
    pub sequence: String,
    #[arg(long, value_enum, default_value = "boxes")]
    pub layout: LayoutArg,
    #[arg(long, value_enum, default_value = "noise")]
    pub texture: TextureArg,
    #[arg(long)]
    pub frequency: Option<f64>,
    #[arg(long, default_value_t = 12)]
    pub frames: usize,
    /// Camera translation per frame, meters: `x,y,z`.
    #[arg(long, default_value = "0,0,0.3", value_parser = parse_vec3)]
    pub step: [f64; 3],
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    /// Plane depth for `--layout plane`, meters.
    #[arg(long, default_value_t = 10.0)]
    pub plane_depth: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_vec3(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated numbers".to_string())
}

fn parse_named(items: &[String], what: &str) -> Result<Vec<(String, PathBuf)>> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(n, p)| (n.to_string(), PathBuf::from(p)))
                .ok_or_else(|| AppError::Config(format!("{what} `{s}` is not NAME=PATH")))
        })
        .collect()
}

fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut sets = a.overrides.clone();
    let mut flag = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            sets.push(format!("{key}={v}"));
        }
    };
    flag("train.epochs", a.epochs.map(|v| v.to_string()));
    flag("train.batch_size", a.batch_size.map(|v| v.to_string()));
    flag("train.max_steps", a.max_steps.map(|v| v.to_string()));
    flag("seed", a.seed.map(|v| v.to_string()));
    flag("optimizer.lr_depth", a.lr_depth.map(|v| format!("{v:e}")));
    flag("optimizer.lr_pose", a.lr_pose.map(|v| format!("{v:e}")));
    flag("model.num_layers", a.num_layers.map(|v| v.to_string()));
    flag("data.train_root", a.data.as_ref().map(|p| format!("{:?}", p.display().to_string())));
    flag("output_dir", a.out.as_ref().map(|p| format!("{:?}", p.display().to_string())));
    base.with_overrides(&sets)
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let t = trainer::train(&cfg)?;
    let last = t.last_checkpoint().map(|p| p.display().to_string());
    println!("{}", serde_json::json!({"status": "ok", "steps": t.step(), "checkpoint": last}));
    Ok(())
}

fn run_evaluate(a: &EvalArgs) -> Result<()> {
    let outcome = if let Some(pred_dir) = &a.pred_dir {
        let gt_dir = a.gt_dir.as_ref().expect("clap requires gt_dir");
        let mut opts = RunConfig::default().eval.to_options();
        apply_eval_flags(a, &mut opts);
        evaluate::evaluate_pairs(&load_eval_pairs(pred_dir, gt_dir)?, &opts, &a.out)?
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires checkpoint");
        let ckpt = match &a.config {
            Some(c) => checkpoint::load_with_config(path, &RunConfig::load(c)?)?,
            None => checkpoint::load(path)?,
        };
        let mut opts = ckpt.config.eval.to_options();
        apply_eval_flags(a, &mut opts);
        let data = a.data.as_ref().expect("clap requires data");
        let frames = load_frames(data, &Split::from_option(a.split.as_deref()), Some(ckpt.config.image_size()))?;
        let dumps = DumpOptions {
            depth: !a.no_dump,
            color: a.color,
        };
        evaluate::evaluate_to_dir(&ckpt.model, &frames, &opts, &a.out, dumps)?
    };
    let s = outcome.summary.values();
    println!(
        "{}",
        serde_json::json!({"status": "ok", "images": outcome.per_image.len(), "abs_rel": s[0], "sq_rel": s[1], "rmse": s[2], "rmse_log": s[3], "a1": s[4], "a2": s[5], "a3": s[6]})
    );
    Ok(())
}

fn apply_eval_flags(a: &EvalArgs, opts: &mut monoformer_core::metrics::EvalOptions) {
    if let Some(v) = a.min_depth {
        opts.min_depth = v;
    }
    if let Some(v) = a.max_depth {
        opts.max_depth = v;
    }
    if a.no_median_scaling {
        opts.median_scaling = false;
    }
}

fn shift_spec(a: &ShiftArgs) -> Result<ShiftSpec> {
    Ok(match a.kind {
        ShiftKindArg::Identity => ShiftSpec::Identity,
        ShiftKindArg::Watercolor => {
            let ShiftSpec::Watercolor {
                sigma_spatial,
                sigma_range,
                iterations,
            } = ShiftSpec::watercolor_default()
            else {
                unreachable!()
            };
            ShiftSpec::Watercolor {
                sigma_spatial: a.sigma_spatial.unwrap_or(sigma_spatial),
                sigma_range: a.sigma_range.unwrap_or(sigma_range),
                iterations: a.iterations.unwrap_or(iterations),
            }
        }
        ShiftKindArg::PencilSketch => {
            let ShiftSpec::PencilSketch { blur_sigma, shade } = ShiftSpec::pencil_default() else {
                unreachable!()
            };
            ShiftSpec::PencilSketch {
                blur_sigma: a.blur_sigma.or(blur_sigma),
                shade: a.shade.unwrap_or(shade),
            }
        }
        ShiftKindArg::StyleIngest => ShiftSpec::StyleIngest {
            stylized_dir: a
                .stylized_dir
                .clone()
                .ok_or_else(|| AppError::Config("--stylized-dir is required for style-ingest".into()))?,
        },
        ShiftKindArg::StyleSpectral => ShiftSpec::StyleSpectral {
            style_images: a.styles.clone(),
            cutoff: a.cutoff,
            seed: a.seed,
        },
    })
}

fn run_shift(a: &ShiftArgs) -> Result<()> {
    let spec = shift_spec(a)?;
    let manifest = shift::shift_dataset(&a.data, &spec, &a.out)?;
    println!(
        "{}",
        serde_json::json!({"status": "ok", "shift": spec.name(), "frames": manifest.frames().count(), "manifest": a.out.join(shift::MANIFEST_FILE)})
    );
    Ok(())
}

fn run_analyze(a: &AnalyzeArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let shifted = parse_named(&a.shifted, "--shifted")?;
    let opts = BiasOptions {
        model_name: a.model_name.clone(),
        batch_size: a.batch_size,
        layer: a.layer.map_or(FeatureLayer::Last, FeatureLayer::Index),
        pool: a.pool,
    };
    let report = analysis::bias_report(&ckpt.model, &a.original, &shifted, &opts)?;
    analysis::write_cka_csv(&a.out.join("cka.csv"), &report)?;
    analysis::write_summary_csv(&a.out.join("cka_summary.csv"), &report)?;
    analysis::write_text(&a.out.join("cka_boxplot.svg"), &analysis::box_plot_svg(&report)?)?;
    let evals = parse_named(&a.evals, "--eval")?;
    if !evals.is_empty() {
        let summary = report.summary()?;
        let points = evals
            .iter()
            .map(|(name, csv)| {
                let q = summary
                    .iter()
                    .find(|s| &s.1 == name)
                    .ok_or_else(|| AppError::Config(format!("--eval `{name}` does not name a --shifted dataset")))?;
                Ok(ScatterPoint {
                    label: name.clone(),
                    cka: q.2.median,
                    abs_rel: evaluate::read_metrics_csv(csv)?[0],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        analysis::write_text(&a.out.join("cka_vs_absrel.svg"), &analysis::scatter_svg(&points))?;
    }
    let rows: usize = report.series.iter().map(|s| s.batches.len()).sum();
    println!("{}", serde_json::json!({"status": "ok", "series": report.series.len(), "rows": rows}));
    Ok(())
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    let path: Vec<Pose6DoF> = SyntheticSceneConfig::translating_path(a.frames, a.step);
    let size = (a.height, a.width);
    let mut cfg = match a.layout {
        LayoutArg::Boxes => SyntheticSceneConfig::boxes_on_ground(size, path),
        LayoutArg::Plane => SyntheticSceneConfig::textured_plane(a.plane_depth, size, path),
    };
    cfg.texture.kind = match a.texture {
        TextureArg::Noise => TextureKind::Noise,
        TextureArg::Checker => TextureKind::Checker,
        TextureArg::Stripes => TextureKind::Stripes,
    };
    if let Some(f) = a.frequency {
        cfg.texture.frequency = f;
    }
    let (_, scene) = generate_synthetic_scene(&cfg, a.seed)?;
    dataset::write_synthetic_sequence(&a.out, &a.sequence, &scene)?;
    let layout = match cfg.layout {
        SceneLayout::TexturedPlane { .. } => "plane",
        SceneLayout::BoxesOnGround { .. } => "boxes",
    };
    println!("{}", serde_json::json!({"status": "ok", "frames": scene.frames.len(), "layout": layout, "out": a.out}));
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Shift(a) => run_shift(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Synth(a) => run_synth(a),
    }
}

/// The machine-readable error line printed on failure.
pub fn error_line(e: &AppError) -> String {
    serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}}).to_string()
}
