//! Texture-shifted copies of a dataset.
//!
//! Every shift rewrites the frames only; intrinsics, poses and depth files
//! are copied byte for byte. A JSONL manifest records the spec, then one
//! line per file with input/output paths and SHA-256 checksums.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use monoformer_core::image::ImageFrame;
use monoformer_core::texture::{pencil_sketch, watercolor, PencilParams, WatercolorParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::{list_frames, FrameRef, DEPTH_DIR, INTRINSICS_FILE, POSES_FILE};
use crate::error::{AppError, Result};
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Default spectral-swap cutoff as a fraction of the Nyquist frequency.
pub const DEFAULT_SPECTRAL_CUTOFF: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftSpec {
    /// Plain copy; the reference point of a bias report.
    Identity,
    Watercolor {
        sigma_spatial: f64,
        sigma_range: f64,
        iterations: usize,
    },
    PencilSketch {
        /// Pixels; `width / 24` when absent.
        blur_sigma: Option<f64>,
        shade: f64,
    },
    /// Externally stylized frames laid out like the dataset.
    StyleIngest { stylized_dir: PathBuf },
    /// Fourier-amplitude swap above `cutoff` with a seeded choice among
    /// `style_images`; an approximation of style transfer.
    StyleSpectral {
        style_images: Vec<PathBuf>,
        cutoff: f64,
        seed: u64,
    },
}

impl ShiftSpec {
    pub fn watercolor_default() -> Self {
        let p = WatercolorParams::default();
        ShiftSpec::Watercolor {
            sigma_spatial: p.sigma_spatial,
            sigma_range: p.sigma_range,
            iterations: p.iterations,
        }
    }

    pub fn pencil_default() -> Self {
        let p = PencilParams::default();
        ShiftSpec::PencilSketch {
            blur_sigma: p.blur_sigma,
            shade: p.shade,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShiftSpec::Identity => "identity",
            ShiftSpec::Watercolor { .. } => "watercolor",
            ShiftSpec::PencilSketch { .. } => "pencil_sketch",
            ShiftSpec::StyleIngest { .. } | ShiftSpec::StyleSpectral { .. } => "style_transfer",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ShiftSpec::Watercolor {
                sigma_spatial,
                sigma_range,
                iterations,
            } => WatercolorParams {
                sigma_spatial: *sigma_spatial,
                sigma_range: *sigma_range,
                iterations: *iterations,
            }
            .validate()?,
            ShiftSpec::PencilSketch { blur_sigma, shade } => PencilParams {
                blur_sigma: *blur_sigma,
                shade: *shade,
            }
            .validate()?,
            ShiftSpec::StyleSpectral { style_images, cutoff, .. } => {
                if style_images.is_empty() || !(*cutoff > 0.0 && *cutoff < 1.5) {
                    return Err(AppError::Config("spectral style needs style images and a cutoff in (0, 1.5)".into()));
                }
            }
            ShiftSpec::Identity | ShiftSpec::StyleIngest { .. } => {}
        }
        Ok(())
    }

    fn approximation_note(&self) -> Option<&'static str> {
        matches!(self, ShiftSpec::StyleSpectral { .. })
            .then_some("spectral amplitude swap above the cutoff, content phase kept; not optimization-based style transfer")
    }
}

/// In-place 2-D DFT of a row-major `h x w` buffer (rows, then columns).
fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// 2-D spectrum of a real plane (unnormalized forward DFT).
pub fn spectrum(plane: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut buf, h, w, &mut FftPlanner::new(), false);
    buf
}

/// Radial frequency of DFT bin `(ky, kx)` as a fraction of Nyquist
/// (1 on the axes at Nyquist, up to sqrt(2) in the corners).
pub fn radial_frequency(ky: usize, kx: usize, h: usize, w: usize) -> f64 {
    let signed = |k: usize, n: usize| {
        let k = if k > n / 2 { k as f64 - n as f64 } else { k as f64 };
        k / n as f64 / 0.5
    };
    let (fy, fx) = (signed(ky, h), signed(kx, w));
    (fy * fy + fx * fx).sqrt()
}

/// Replaces the content amplitude above `cutoff` (fraction of Nyquist) with
/// the style amplitude, keeping the content phase. Unclamped planes.
pub fn spectral_swap_planes(content: &ImageFrame, style: &ImageFrame, cutoff: f64) -> Vec<Vec<f64>> {
    let (h, w) = (content.height(), content.width());
    let style = if (style.height(), style.width()) != (h, w) {
        style.resize_area(h, w)
    } else {
        style.clone()
    };
    let mut planner = FftPlanner::new();
    (0..3)
        .map(|c| {
            let to_complex = |p: &[f64]| p.iter().map(|&v| Complex::new(v, 0.0)).collect::<Vec<_>>();
            let mut cs = to_complex(content.channel(c));
            let mut ss = to_complex(style.channel(c));
            fft2(&mut cs, h, w, &mut planner, false);
            fft2(&mut ss, h, w, &mut planner, false);
            for ky in 0..h {
                for kx in 0..w {
                    if radial_frequency(ky, kx, h, w) > cutoff {
                        let i = ky * w + kx;
                        let amp = ss[i].norm();
                        let cn = cs[i].norm();
                        cs[i] = if cn > 0.0 { cs[i] * (amp / cn) } else { Complex::new(amp, 0.0) };
                    }
                }
            }
            fft2(&mut cs, h, w, &mut planner, true);
            let n = (h * w) as f64;
            cs.iter().map(|z| z.re / n).collect()
        })
        .collect()
}

/// [`spectral_swap_planes`] clamped back to `[0, 1]`.
pub fn spectral_swap(content: &ImageFrame, style: &ImageFrame, cutoff: f64) -> Result<ImageFrame> {
    let planes = spectral_swap_planes(content, style, cutoff);
    let data: Vec<f64> = planes.into_iter().flatten().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(ImageFrame::new(content.height(), content.width(), data)?)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ManifestLine {
    Header {
        shift: String,
        spec: ShiftSpec,
        source_root: String,
        approximation: Option<String>,
    },
    /// A shifted frame.
    Frame {
        input: String,
        output: String,
        input_sha256: String,
        output_sha256: Option<String>,
        status: FileStatus,
        error: Option<String>,
    },
    /// A geometry file copied unchanged.
    Copy { path: String, sha256: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub lines: Vec<ManifestLine>,
}

impl Manifest {
    pub fn frames(&self) -> impl Iterator<Item = &ManifestLine> {
        self.lines.iter().filter(|l| matches!(l, ManifestLine::Frame { .. }))
    }

    pub fn failed(&self) -> usize {
        self.frames()
            .filter(|l| matches!(l, ManifestLine::Frame { status: FileStatus::Failed, .. }))
            .count()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for l in &self.lines {
            text.push_str(&serde_json::to_string(l).expect("manifest line serializes"));
            text.push('\n');
        }
        io::create_parent(path)?;
        fs::write(path, text).map_err(|e| AppError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let lines = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| AppError::format(path, e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Self { lines })
    }
}

fn rel_string(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Per-run state shared across frames.
enum Shifter {
    Identity,
    Watercolor(WatercolorParams),
    Pencil(PencilParams),
    Ingest(PathBuf),
    Spectral { styles: Vec<ImageFrame>, cutoff: f64, rng: ChaCha8Rng },
}

impl Shifter {
    fn new(spec: &ShiftSpec, root: &Path, frames: &[FrameRef]) -> Result<Self> {
        spec.validate()?;
        Ok(match spec {
            ShiftSpec::Identity => Shifter::Identity,
            ShiftSpec::Watercolor {
                sigma_spatial,
                sigma_range,
                iterations,
            } => Shifter::Watercolor(WatercolorParams {
                sigma_spatial: *sigma_spatial,
                sigma_range: *sigma_range,
                iterations: *iterations,
            }),
            ShiftSpec::PencilSketch { blur_sigma, shade } => Shifter::Pencil(PencilParams {
                blur_sigma: *blur_sigma,
                shade: *shade,
            }),
            ShiftSpec::StyleIngest { stylized_dir } => {
                check_ingest_names(root, stylized_dir, frames)?;
                Shifter::Ingest(stylized_dir.clone())
            }
            ShiftSpec::StyleSpectral {
                style_images,
                cutoff,
                seed,
            } => Shifter::Spectral {
                styles: style_images.iter().map(|p| io::read_image(p)).collect::<Result<_>>()?,
                cutoff: *cutoff,
                rng: ChaCha8Rng::seed_from_u64(*seed),
            },
        })
    }

    fn apply(&mut self, frame: &FrameRef, image: &ImageFrame) -> Result<ImageFrame> {
        Ok(match self {
            Shifter::Identity => image.clone(),
            Shifter::Watercolor(p) => watercolor(image, p)?,
            Shifter::Pencil(p) => pencil_sketch(image, p)?,
            Shifter::Ingest(dir) => {
                let path = dir.join(frame.image_rel());
                let styled = io::read_image(&path)?;
                if (styled.height(), styled.width()) != (image.height(), image.width()) {
                    return Err(AppError::Dataset(format!(
                        "{}: stylized frame is {}x{}, content {}x{}",
                        path.display(),
                        styled.height(),
                        styled.width(),
                        image.height(),
                        image.width()
                    )));
                }
                styled
            }
            Shifter::Spectral { styles, cutoff, rng } => {
                let k = rng.random_range(0..styles.len());
                spectral_swap(image, &styles[k], *cutoff)?
            }
        })
    }
}

/// Every content frame needs a stylized twin and vice versa.
fn check_ingest_names(root: &Path, stylized_dir: &Path, frames: &[FrameRef]) -> Result<()> {
    if !stylized_dir.is_dir() {
        return Err(AppError::Dataset(format!("stylized directory {} does not exist", stylized_dir.display())));
    }
    let content: BTreeSet<FrameRef> = frames.iter().cloned().collect();
    let styled: BTreeSet<FrameRef> = list_frames(stylized_dir)?.into_iter().collect();
    let mut orphans: Vec<String> = content
        .difference(&styled)
        .map(|f| format!("no stylized frame for {}", root.join(f.image_rel()).display()))
        .collect();
    orphans.extend(
        styled
            .difference(&content)
            .map(|f| format!("stylized frame {} has no content frame", stylized_dir.join(f.image_rel()).display())),
    );
    if orphans.is_empty() {
        Ok(())
    } else {
        Err(AppError::Dataset(orphans.join("; ")))
    }
}

/// Copies the geometry files of every sequence unchanged.
fn copy_geometry(root: &Path, out_root: &Path, sequences: &BTreeSet<String>, lines: &mut Vec<ManifestLine>) -> Result<()> {
    for seq in sequences {
        let mut files: Vec<PathBuf> = [INTRINSICS_FILE, POSES_FILE]
            .iter()
            .map(|f| Path::new(seq).join(f))
            .filter(|p| root.join(p).is_file())
            .collect();
        let depth_dir = root.join(seq).join(DEPTH_DIR);
        if depth_dir.is_dir() {
            let mut depth: Vec<PathBuf> = fs::read_dir(&depth_dir)
                .map_err(|e| AppError::io(&depth_dir, e))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_file())
                .map(|e| Path::new(seq).join(DEPTH_DIR).join(e.file_name()))
                .collect();
            depth.sort();
            files.extend(depth);
        }
        for rel in files {
            let (src, dst) = (root.join(&rel), out_root.join(&rel));
            io::create_parent(&dst)?;
            fs::copy(&src, &dst).map_err(|e| AppError::io(&src, e))?;
            lines.push(ManifestLine::Copy {
                path: rel_string(&rel),
                sha256: io::sha256_file(&dst)?,
            });
        }
    }
    Ok(())
}

/// Writes the shifted dataset and its manifest under `out_root`.
///
/// Frames that fail are marked in the manifest and the call returns
/// [`AppError::ShiftFailed`] after everything else has been written.
pub fn shift_dataset(root: &Path, spec: &ShiftSpec, out_root: &Path) -> Result<Manifest> {
    if !root.is_dir() {
        return Err(AppError::Dataset(format!("dataset root {} does not exist", root.display())));
    }
    let frames = list_frames(root)?;
    let mut shifter = Shifter::new(spec, root, &frames)?;
    let mut lines = vec![ManifestLine::Header {
        shift: spec.name().to_string(),
        spec: spec.clone(),
        source_root: root.display().to_string(),
        approximation: spec.approximation_note().map(String::from),
    }];
    let sequences: BTreeSet<String> = frames.iter().map(|f| f.sequence.clone()).collect();
    copy_geometry(root, out_root, &sequences, &mut lines)?;
    for f in &frames {
        let rel = f.image_rel();
        let (src, dst) = (root.join(&rel), out_root.join(&rel));
        let input_sha256 = io::sha256_file(&src)?;
        let result = io::read_image(&src)
            .and_then(|img| shifter.apply(f, &img))
            .and_then(|out| io::write_image(&dst, &out))
            .and_then(|_| io::sha256_file(&dst));
        let (status, output_sha256, error) = match result {
            Ok(sha) => (FileStatus::Ok, Some(sha), None),
            Err(e) => {
                log::error!("shift failed for {}: {e}", src.display());
                (FileStatus::Failed, None, Some(e.to_string()))
            }
        };
        lines.push(ManifestLine::Frame {
            input: rel_string(&rel),
            output: rel_string(&rel),
            input_sha256,
            output_sha256,
            status,
            error,
        });
    }
    let manifest = Manifest { lines };
    let path = out_root.join(MANIFEST_FILE);
    manifest.write(&path)?;
    let failed = manifest.failed();
    if failed > 0 {
        return Err(AppError::ShiftFailed {
            failed,
            total: frames.len(),
            manifest: path,
        });
    }
    Ok(manifest)
}
