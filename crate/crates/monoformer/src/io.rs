//! On-disk formats: 16-bit PNG frames, safetensors depth maps, plain-text
//! intrinsics and camera paths.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use monoformer_core::camera::{CameraIntrinsics, Pose6DoF};
use monoformer_core::image::{DepthMap, ImageFrame};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};

pub const DEPTH_TENSOR: &str = "depth";
pub const DEPTH_UNIT: &str = "meters";

pub(crate) fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    Ok(())
}

/// Decodes any PNG (8 or 16 bit, gray or color) into RGB in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<ImageFrame> {
    let img = image::open(path).map_err(|source| AppError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p.0[c] as f64 / 65535.0;
        }
    }
    Ok(ImageFrame::new(h, w, data)?)
}

/// Writes a 16-bit RGB PNG; values are clamped to `[0, 1]`.
pub fn write_image(path: &Path, frame: &ImageFrame) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (frame.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 65535.0).round() as u16;
        Rgb([px(0), px(1), px(2)])
    });
    create_parent(path)?;
    buf.save(path).map_err(|source| AppError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an 8-bit RGB PNG (visualizations only).
pub fn write_rgb8(path: &Path, width: usize, height: usize, pixels: &[[u8; 3]]) -> Result<()> {
    let buf = ImageBuffer::from_fn(width as u32, height as u32, |x, y| Rgb(pixels[y as usize * width + x as usize]));
    create_parent(path)?;
    buf.save(path).map_err(|source| AppError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn tensor_values(path: &Path, view: &TensorView) -> Result<Vec<f64>> {
    if view.dtype() != Dtype::F64 {
        return Err(AppError::format(path, format!("expected F64 tensor, found {:?}", view.dtype())));
    }
    Ok(view
        .data()
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect())
}

/// Serializes named f64 tensors with string metadata.
pub(crate) fn write_f64_tensors(path: &Path, tensors: &[(String, Vec<usize>, &[f64])], metadata: HashMap<String, String>) -> Result<()> {
    let bytes: Vec<Vec<u8>> = tensors.iter().map(|t| f64_bytes(t.2)).collect();
    let views: Vec<(String, TensorView)> = tensors
        .iter()
        .zip(&bytes)
        .map(|((name, shape, _), b)| {
            let view = TensorView::new(Dtype::F64, shape.clone(), b).map_err(|e| AppError::format(path, e.to_string()))?;
            Ok((name.clone(), view))
        })
        .collect::<Result<_>>()?;
    let out = safetensors::serialize(views, &Some(metadata)).map_err(|e| AppError::format(path, e.to_string()))?;
    create_parent(path)?;
    // Write-then-rename so a crash never leaves a truncated file behind.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out).map_err(|e| AppError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
}

/// Depth map as a single `[H, W]` f64 tensor tagged with its unit.
pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let meta = HashMap::from([("unit".to_string(), DEPTH_UNIT.to_string())]);
    write_f64_tensors(path, &[(DEPTH_TENSOR.into(), vec![depth.height(), depth.width()], depth.values())], meta)
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| AppError::format(path, e.to_string()))?;
    let unit = meta.metadata().as_ref().and_then(|m| m.get("unit").cloned());
    if unit.as_deref() != Some(DEPTH_UNIT) {
        return Err(AppError::format(path, format!("depth unit must be `{DEPTH_UNIT}`, found {unit:?}")));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| AppError::format(path, e.to_string()))?;
    let view = st
        .tensor(DEPTH_TENSOR)
        .map_err(|_| AppError::format(path, format!("no `{DEPTH_TENSOR}` tensor")))?;
    let shape = view.shape().to_vec();
    if shape.len() != 2 {
        return Err(AppError::format(path, format!("depth must be [H, W], found {shape:?}")));
    }
    Ok(DepthMap::new(shape[0], shape[1], tensor_values(path, &view)?)?)
}

/// `fx fy cx cy` in pixels of the stored frames.
pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    create_parent(path)?;
    let text = format!("{} {} {} {}\n", k.fx, k.fy, k.cx, k.cy);
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

pub fn read_intrinsics(path: &Path, width: usize, height: usize) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| AppError::format(path, e.to_string()))?;
    if v.len() != 4 {
        return Err(AppError::format(path, format!("expected `fx fy cx cy`, found {} numbers", v.len())));
    }
    CameraIntrinsics::new(v[0], v[1], v[2], v[3], width, height).map_err(|e| AppError::format(path, e.to_string()))
}

/// One camera-to-world pose per line: `rx ry rz tx ty tz`.
pub fn write_poses(path: &Path, poses: &[Pose6DoF]) -> Result<()> {
    create_parent(path)?;
    let text: String = poses
        .iter()
        .map(|p| {
            let v = p.to_vector();
            format!("{} {} {} {} {} {}\n", v[0], v[1], v[2], v[3], v[4], v[5])
        })
        .collect();
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose6DoF>> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| AppError::format(path, e.to_string()))?;
            let v: [f64; 6] = v
                .try_into()
                .map_err(|_| AppError::format(path, "each pose line needs 6 numbers"))?;
            Ok(Pose6DoF::from_vector(v))
        })
        .collect()
}

/// Hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_is_16_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i * 1000 % 65536) as f64 / 65535.0).collect();
        let f = ImageFrame::new(4, 5, data).unwrap();
        write_image(&p, &f).unwrap();
        assert_eq!(read_image(&p).unwrap(), f);
    }

    #[test]
    fn eight_bit_images_normalize() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::from_fn(2, 1, |x, _| image::Luma([if x == 0 { 0 } else { 255 }])).save(&p).unwrap();
        let f = read_image(&p).unwrap();
        assert_eq!(f.tensor().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let bad = dir.path().join("bad.png");
        fs::write(&bad, b"not a png").unwrap();
        let err = read_image(&bad).unwrap_err().to_string();
        assert!(err.contains("bad.png"), "{err}");
    }

    #[test]
    fn depth_round_trip_and_unit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.safetensors");
        let d = DepthMap::new(2, 3, vec![1.0, 2.5, 3.0, 4.0, 5.0, 1e-3]).unwrap();
        write_depth(&p, &d).unwrap();
        assert_eq!(read_depth(&p).unwrap(), d);
        let q = dir.path().join("e.safetensors");
        write_f64_tensors(&q, &[("depth".into(), vec![1, 1], &[1.0])], HashMap::new()).unwrap();
        assert!(read_depth(&q).is_err());
    }

    #[test]
    fn intrinsics_and_poses() {
        let dir = tempfile::tempdir().unwrap();
        let k = CameraIntrinsics::new(100.0, 101.0, 63.5, 47.5, 128, 96).unwrap();
        let p = dir.path().join("intrinsics.txt");
        write_intrinsics(&p, &k).unwrap();
        assert_eq!(read_intrinsics(&p, 128, 96).unwrap(), k);
        fs::write(&p, "1 2 3").unwrap();
        assert!(read_intrinsics(&p, 128, 96).is_err());
        let poses = vec![Pose6DoF::identity(), Pose6DoF::new([0.1, 0.0, -0.2], [1.0, 2.0, 3.5])];
        let q = dir.path().join("poses.txt");
        write_poses(&q, &poses).unwrap();
        assert_eq!(read_poses(&q).unwrap(), poses);
    }
}
