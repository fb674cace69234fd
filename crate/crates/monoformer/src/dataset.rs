//! Sequence datasets on disk.
//!
//! ```text
//! root/
//!   <sequence>/
//!     intrinsics.txt          fx fy cx cy (pixels of the stored frames)
//!     poses.txt               optional, camera-to-world per frame
//!     image/000000.png ...
//!     depth/000000.safetensors ...   optional ground truth, meters
//! ```
//!
//! Split files list target frames as relative image paths, one per line
//! (`seq00/image/000003.png`); blank lines and `#` comments are ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use monoformer_core::camera::{CameraIntrinsics, Pose6DoF};
use monoformer_core::image::{DepthMap, ImageFrame};
use monoformer_core::sample::SequenceSample;
use monoformer_core::synthetic::SyntheticScene;

use crate::error::{AppError, Result};
use crate::io;

pub const IMAGE_DIR: &str = "image";
pub const DEPTH_DIR: &str = "depth";
pub const INTRINSICS_FILE: &str = "intrinsics.txt";
pub const POSES_FILE: &str = "poses.txt";

/// Which target frames to use.
#[derive(Clone, Debug, PartialEq)]
pub enum Split {
    /// Every frame of every sequence.
    All,
    File(PathBuf),
    Entries(Vec<String>),
}

impl Split {
    pub fn from_option(path: Option<&Path>) -> Self {
        path.map_or(Split::All, |p| Split::File(p.to_path_buf()))
    }
}

/// A frame address inside a dataset root.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameRef {
    pub sequence: String,
    pub index: usize,
}

impl FrameRef {
    /// `<sequence>/<index>`, also the relative stem of dumped files.
    pub fn id(&self) -> String {
        format!("{}/{:06}", self.sequence, self.index)
    }

    pub fn image_rel(&self) -> PathBuf {
        Path::new(&self.sequence).join(IMAGE_DIR).join(format!("{:06}.png", self.index))
    }

    pub fn depth_rel(&self) -> PathBuf {
        Path::new(&self.sequence).join(DEPTH_DIR).join(format!("{:06}.safetensors", self.index))
    }

    fn parse(entry: &str) -> Result<Self> {
        let bad = || AppError::Dataset(format!("split entry `{entry}` is not <sequence>/{IMAGE_DIR}/<index>.png"));
        let p = Path::new(entry);
        let index = p
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(bad)?;
        let parent = p.parent().ok_or_else(bad)?;
        if parent.file_name().and_then(|s| s.to_str()) != Some(IMAGE_DIR) {
            return Err(bad());
        }
        let sequence = parent.parent().and_then(|s| s.to_str()).filter(|s| !s.is_empty()).ok_or_else(bad)?;
        Ok(Self {
            sequence: sequence.replace('\\', "/"),
            index,
        })
    }
}

fn read_split_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Every frame under `root`, sorted by sequence then index.
pub fn list_frames(root: &Path) -> Result<Vec<FrameRef>> {
    let mut out = Vec::new();
    let seqs = fs::read_dir(root).map_err(|e| AppError::io(root, e))?;
    let mut names: Vec<String> = Vec::new();
    for entry in seqs {
        let entry = entry.map_err(|e| AppError::io(root, e))?;
        if entry.path().join(IMAGE_DIR).is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    for seq in names {
        let dir = root.join(&seq).join(IMAGE_DIR);
        let mut idx: Vec<usize> = fs::read_dir(&dir)
            .map_err(|e| AppError::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension()? == "png").then_some(())?;
                p.file_stem()?.to_str()?.parse().ok()
            })
            .collect();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|index| FrameRef { sequence: seq.clone(), index }));
    }
    Ok(out)
}

fn resolve_split(root: &Path, split: &Split) -> Result<Vec<FrameRef>> {
    match split {
        Split::All => list_frames(root),
        Split::File(p) => read_split_file(p)?.iter().map(|e| FrameRef::parse(e)).collect(),
        Split::Entries(v) => v.iter().map(|e| FrameRef::parse(e)).collect(),
    }
}

fn check_root(root: &Path) -> Result<()> {
    if !root.is_dir() {
        return Err(AppError::Dataset(format!("dataset root {} does not exist", root.display())));
    }
    Ok(())
}

/// Decoded frame, resized to `size` with area interpolation.
fn load_frame(path: &Path, size: Option<(usize, usize)>) -> Result<ImageFrame> {
    let f = io::read_image(path)?;
    Ok(match size {
        Some((h, w)) if (f.height(), f.width()) != (h, w) => f.resize_area(h, w),
        _ => f,
    })
}

/// Per-sequence metadata read once.
#[derive(Clone, Debug)]
struct SequenceInfo {
    intrinsics_path: PathBuf,
    poses: Option<Vec<Pose6DoF>>,
}

fn sequence_info(root: &Path, seq: &str) -> Result<SequenceInfo> {
    let intrinsics_path = root.join(seq).join(INTRINSICS_FILE);
    if !intrinsics_path.is_file() {
        return Err(AppError::Dataset(format!("missing intrinsics file {}", intrinsics_path.display())));
    }
    let poses_path = root.join(seq).join(POSES_FILE);
    let poses = if poses_path.is_file() { Some(io::read_poses(&poses_path)?) } else { None };
    Ok(SequenceInfo { intrinsics_path, poses })
}

fn intrinsics_for(info: &SequenceInfo, native: &ImageFrame, size: (usize, usize)) -> Result<CameraIntrinsics> {
    let k = io::read_intrinsics(&info.intrinsics_path, native.width(), native.height())?;
    Ok(if (native.height(), native.width()) != size { k.scaled(size.1, size.0) } else { k })
}

/// A training sample with its dataset address.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub frame: FrameRef,
    pub sample: SequenceSample,
}

/// Lazily decoding iterator over the samples of a split.
#[derive(Debug)]
pub struct SequenceLoader {
    root: PathBuf,
    entries: Vec<(FrameRef, [usize; 2])>,
    sequences: BTreeMap<String, SequenceInfo>,
    image_size: Option<(usize, usize)>,
    next: usize,
}

impl SequenceLoader {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameRef> {
        self.entries.iter().map(|e| &e.0)
    }

    fn load(&self, i: usize) -> Result<LoadedSample> {
        let (frame, neighbors) = &self.entries[i];
        let info = &self.sequences[&frame.sequence];
        let seq_dir = self.root.join(&frame.sequence);
        let native = io::read_image(&self.root.join(frame.image_rel()))?;
        let size = self.image_size.unwrap_or((native.height(), native.width()));
        let intrinsics = intrinsics_for(info, &native, size)?;
        let target = if (native.height(), native.width()) != size {
            native.resize_area(size.0, size.1)
        } else {
            native
        };
        let mut sources = Vec::with_capacity(2);
        for &n in neighbors {
            let r = FrameRef { sequence: frame.sequence.clone(), index: n };
            sources.push(load_frame(&self.root.join(r.image_rel()), Some(size))?);
        }
        let depth_path = self.root.join(frame.depth_rel());
        let gt_depth = if depth_path.is_file() { Some(load_depth(&depth_path, size)?) } else { None };
        let gt_relative_poses = match &info.poses {
            Some(p) if neighbors.iter().chain([&frame.index]).all(|&j| j < p.len()) => {
                Some(neighbors.iter().map(|&n| p[n].inverse().compose(&p[frame.index])).collect())
            }
            Some(_) => {
                log::warn!("{}: {POSES_FILE} is shorter than the frame list; poses ignored", seq_dir.display());
                None
            }
            None => None,
        };
        let sample = SequenceSample {
            target,
            sources,
            intrinsics,
            gt_depth,
            gt_relative_poses,
        };
        sample.validate()?;
        Ok(LoadedSample { frame: frame.clone(), sample })
    }

    /// Decodes everything, failing on the first unreadable file.
    pub fn load_all(self) -> Result<Vec<LoadedSample>> {
        self.collect()
    }
}

impl Iterator for SequenceLoader {
    type Item = Result<LoadedSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.entries.len() {
            return None;
        }
        let i = self.next;
        self.next += 1;
        Some(self.load(i))
    }
}

fn load_depth(path: &Path, size: (usize, usize)) -> Result<DepthMap> {
    let d = io::read_depth(path)?;
    Ok(if (d.height(), d.width()) != size { d.resize_area(size.0, size.1) } else { d })
}

/// Samples with sources at `index - stride` and `index + stride`.
///
/// Targets lacking a neighbor are skipped with a warning. A sequence without
/// an intrinsics file is an error, as is a listed target that does not exist.
/// Frames are resized to `image_size` (height, width) when given.
pub fn load_sequence_dataset(root: &Path, split: &Split, frame_stride: usize, image_size: Option<(usize, usize)>) -> Result<SequenceLoader> {
    check_root(root)?;
    if frame_stride == 0 {
        return Err(AppError::Dataset("frame stride must be at least 1".into()));
    }
    let targets = resolve_split(root, split)?;
    let mut sequences = BTreeMap::new();
    let mut entries = Vec::with_capacity(targets.len());
    for t in targets {
        if !sequences.contains_key(&t.sequence) {
            sequences.insert(t.sequence.clone(), sequence_info(root, &t.sequence)?);
        }
        let img = root.join(t.image_rel());
        if !img.is_file() {
            return Err(AppError::Dataset(format!("listed frame {} does not exist", img.display())));
        }
        let prev = t.index.checked_sub(frame_stride);
        let next = t.index + frame_stride;
        let exists = |i: usize| root.join(FrameRef { sequence: t.sequence.clone(), index: i }.image_rel()).is_file();
        match prev {
            Some(p) if exists(p) && exists(next) => entries.push((t, [p, next])),
            _ => log::warn!("skipping {}: no neighbor at stride {frame_stride}", t.id()),
        }
    }
    Ok(SequenceLoader {
        root: root.to_path_buf(),
        entries,
        sequences,
        image_size,
        next: 0,
    })
}

/// A single frame for evaluation or feature extraction.
#[derive(Clone, Debug)]
pub struct LoadedFrame {
    pub frame: FrameRef,
    pub image: ImageFrame,
    pub intrinsics: CameraIntrinsics,
    pub gt_depth: Option<DepthMap>,
}

/// Frames of a split without neighbor requirements.
pub fn load_frames(root: &Path, split: &Split, image_size: Option<(usize, usize)>) -> Result<Vec<LoadedFrame>> {
    check_root(root)?;
    let mut infos: BTreeMap<String, SequenceInfo> = BTreeMap::new();
    let mut out = Vec::new();
    for f in resolve_split(root, split)? {
        if !infos.contains_key(&f.sequence) {
            infos.insert(f.sequence.clone(), sequence_info(root, &f.sequence)?);
        }
        let native = io::read_image(&root.join(f.image_rel()))?;
        let size = image_size.unwrap_or((native.height(), native.width()));
        let intrinsics = intrinsics_for(&infos[&f.sequence], &native, size)?;
        let image = if (native.height(), native.width()) != size {
            native.resize_area(size.0, size.1)
        } else {
            native
        };
        let depth_path = root.join(f.depth_rel());
        let gt_depth = if depth_path.is_file() { Some(load_depth(&depth_path, size)?) } else { None };
        out.push(LoadedFrame {
            frame: f,
            image,
            intrinsics,
            gt_depth,
        });
    }
    Ok(out)
}

/// Writes a rendered scene as one sequence (frames, depth, intrinsics, poses).
pub fn write_synthetic_sequence(root: &Path, sequence: &str, scene: &SyntheticScene) -> Result<()> {
    let dir = root.join(sequence);
    io::write_intrinsics(&dir.join(INTRINSICS_FILE), &scene.intrinsics)?;
    io::write_poses(&dir.join(POSES_FILE), &scene.camera_path)?;
    for (i, (frame, depth)) in scene.frames.iter().zip(&scene.depths).enumerate() {
        let r = FrameRef {
            sequence: sequence.to_string(),
            index: i,
        };
        io::write_image(&root.join(r.image_rel()), frame)?;
        io::write_depth(&root.join(r.depth_rel()), depth)?;
    }
    Ok(())
}

/// A prediction paired with its ground truth.
#[derive(Clone, Debug)]
pub struct EvalPair {
    /// Relative path shared by both files.
    pub name: String,
    pub pred: DepthMap,
    pub gt: DepthMap,
}

fn depth_files(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.is_dir() {
        return Err(AppError::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut out = BTreeSet::new();
    for e in walkdir::WalkDir::new(dir) {
        let e = e.map_err(|e| AppError::Dataset(e.to_string()))?;
        if e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "safetensors") {
            let rel = e.path().strip_prefix(dir).expect("walk stays under dir");
            out.insert(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(out)
}

/// Pairs equally named depth files of two directories (recursively).
///
/// Orphans on either side are an error listing every orphan; sizes must
/// match exactly (resizing is left to the caller).
pub fn load_eval_pairs(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<EvalPair>> {
    let preds = depth_files(pred_dir)?;
    let gts = depth_files(gt_dir)?;
    let orphans: Vec<String> = preds
        .symmetric_difference(&gts)
        .map(|n| {
            let side = if preds.contains(n) { pred_dir } else { gt_dir };
            side.join(n).display().to_string()
        })
        .collect();
    if !orphans.is_empty() {
        return Err(AppError::Dataset(format!("unmatched depth files: {}", orphans.join(", "))));
    }
    preds
        .into_iter()
        .map(|name| {
            let pred = io::read_depth(&pred_dir.join(&name))?;
            let gt = io::read_depth(&gt_dir.join(&name))?;
            if !pred.same_size(&gt) {
                return Err(AppError::Dataset(format!(
                    "{name}: prediction is {}x{}, ground truth {}x{}",
                    pred.height(),
                    pred.width(),
                    gt.height(),
                    gt.width()
                )));
            }
            Ok(EvalPair { name, pred, gt })
        })
        .collect()
}
