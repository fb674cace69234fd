mod common;

use std::fs;

use monoformer::dataset::{list_frames, load_eval_pairs, load_frames, load_sequence_dataset, write_synthetic_sequence, Split};
use monoformer::io::write_depth;
use monoformer::AppError;
use monoformer_core::geometry::warp_frame;
use monoformer_core::image::DepthMap;
use monoformer_core::synthetic::{generate_synthetic_scene, SyntheticSceneConfig};

#[test]
fn five_frames_give_three_samples() {
    let dir = tempfile::tempdir().unwrap();
    let scene = common::write_scene(dir.path(), "seq00", 5, (24, 32), 1);
    let loader = load_sequence_dataset(dir.path(), &Split::All, 1, None).unwrap();
    assert_eq!(loader.len(), 3);
    let samples = loader.load_all().unwrap();
    let targets: Vec<usize> = samples.iter().map(|s| s.frame.index).collect();
    assert_eq!(targets, [1, 2, 3]);
    for s in &samples {
        assert!(s.sample.target.in_unit_range());
        assert_eq!(s.sample.sources.len(), 2);
        let gt = s.sample.gt_depth.as_ref().unwrap();
        assert!(gt.tensor().max_abs_diff(scene.depths[s.frame.index].tensor()) == 0.0);
        // Poses round-trip through text, so compare loosely.
        let p = &s.sample.gt_relative_poses.as_ref().unwrap()[0];
        let expect = scene.relative_pose(s.frame.index, s.frame.index - 1);
        let d: f64 = p.to_vector().iter().zip(expect.to_vector()).map(|(a, b)| (a - b).abs()).sum();
        assert!(d < 1e-12);
    }
    // Stride 2 leaves only the middle frame.
    assert_eq!(load_sequence_dataset(dir.path(), &Split::All, 2, None).unwrap().len(), 1);
}

fn warp_error(s: &monoformer_core::sample::SequenceSample) -> Vec<f64> {
    let depth = s.gt_depth.as_ref().unwrap();
    s.sources
        .iter()
        .zip(s.gt_relative_poses.as_ref().unwrap())
        .map(|(src, pose)| {
            let (warped, mask) = warp_frame(src, depth, pose, &s.intrinsics).unwrap();
            let (mut err, mut n) = (0.0, 0.0);
            for c in 0..3 {
                for (i, m) in mask.data().iter().enumerate() {
                    if *m > 0.5 {
                        err += (warped.channel(c)[i] - s.target.channel(c)[i]).abs();
                        n += 1.0;
                    }
                }
            }
            assert!(n > 0.0);
            err / n
        })
        .collect()
}

#[test]
fn loaded_samples_reconstruct_by_gt_warp() {
    let dir = tempfile::tempdir().unwrap();
    let path = SyntheticSceneConfig::translating_path(5, [0.15, 0.0, 0.1]);
    let scene = generate_synthetic_scene(&SyntheticSceneConfig::boxes_on_ground((48, 64), path), 3).unwrap().1;
    write_synthetic_sequence(dir.path(), "seq00", &scene).unwrap();
    let memory = scene.samples(1);
    let loaded = load_sequence_dataset(dir.path(), &Split::All, 1, None).unwrap().load_all().unwrap();
    assert_eq!(memory.len(), loaded.len());
    for (m, l) in memory.iter().zip(&loaded) {
        for (a, b) in warp_error(m).into_iter().zip(warp_error(&l.sample)) {
            assert!(b < 0.02, "mean abs error {b}");
            // 16-bit storage changes the error by quantization noise only.
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}

#[test]
fn empty_split_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    common::write_scene(dir.path(), "seq00", 3, (16, 16), 1);
    let split = dir.path().join("empty.txt");
    fs::write(&split, "# nothing\n\n").unwrap();
    assert_eq!(load_sequence_dataset(dir.path(), &Split::File(split), 1, None).unwrap().count(), 0);
}

#[test]
fn split_file_and_neighbor_skipping() {
    let dir = tempfile::tempdir().unwrap();
    common::write_scene(dir.path(), "seq00", 4, (16, 16), 1);
    let entries = vec!["seq00/image/000000.png".to_string(), "seq00/image/000002.png".to_string()];
    let loader = load_sequence_dataset(dir.path(), &Split::Entries(entries), 1, None).unwrap();
    assert_eq!(loader.frames().map(|f| f.index).collect::<Vec<_>>(), [2]);
    assert!(load_sequence_dataset(dir.path(), &Split::Entries(vec!["seq00/000002.png".into()]), 1, None).is_err());
}

#[test]
fn missing_intrinsics_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    common::write_scene(dir.path(), "seq00", 3, (16, 16), 1);
    fs::remove_file(dir.path().join("seq00/intrinsics.txt")).unwrap();
    let err = load_sequence_dataset(dir.path(), &Split::All, 1, None).unwrap_err();
    assert!(err.to_string().contains("intrinsics"), "{err}");
    assert!(load_frames(dir.path(), &Split::All, None).is_err());
}

#[test]
fn unreadable_image_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    common::write_scene(dir.path(), "seq00", 3, (16, 16), 1);
    fs::write(dir.path().join("seq00/image/000002.png"), b"garbage").unwrap();
    let results: Vec<_> = load_sequence_dataset(dir.path(), &Split::All, 1, None).unwrap().collect();
    let err = results[0].as_ref().unwrap_err();
    assert!(matches!(err, AppError::Image { .. }));
    assert!(err.to_string().contains("000002.png"), "{err}");
}

#[test]
fn resize_scales_intrinsics() {
    let dir = tempfile::tempdir().unwrap();
    let scene = common::write_scene(dir.path(), "seq00", 3, (32, 48), 1);
    let s = load_sequence_dataset(dir.path(), &Split::All, 1, Some((16, 24))).unwrap().next().unwrap().unwrap();
    assert_eq!((s.sample.target.height(), s.sample.target.width()), (16, 24));
    assert!((s.sample.intrinsics.fx - scene.intrinsics.fx / 2.0).abs() < 1e-12);
    assert_eq!(s.sample.gt_depth.unwrap().width(), 24);
}

#[test]
fn multiple_sequences_are_ordered() {
    let dir = tempfile::tempdir().unwrap();
    common::write_scene(dir.path(), "b", 3, (16, 16), 1);
    common::write_scene(dir.path(), "a", 3, (16, 16), 2);
    let ids: Vec<String> = list_frames(dir.path()).unwrap().iter().map(|f| f.id()).collect();
    assert_eq!(ids[0], "a/000000");
    assert_eq!(ids[3], "b/000000");
    assert!(load_sequence_dataset(&dir.path().join("nope"), &Split::All, 1, None).is_err());
}

fn depth_dir(root: &std::path::Path, names: &[&str], size: (usize, usize)) {
    for n in names {
        write_depth(&root.join(n), &DepthMap::filled(size.0, size.1, 2.0)).unwrap();
    }
}

#[test]
fn eval_pairs_match_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let (p, g) = (dir.path().join("pred"), dir.path().join("gt"));
    let names = ["a.safetensors", "b.safetensors", "s/c.safetensors"];
    depth_dir(&p, &names, (4, 5));
    depth_dir(&g, &names, (4, 5));
    let pairs = load_eval_pairs(&p, &g).unwrap();
    assert_eq!(pairs.iter().map(|x| x.name.as_str()).collect::<Vec<_>>(), ["a.safetensors", "b.safetensors", "s/c.safetensors"]);

    depth_dir(&p, &["extra.safetensors"], (4, 5));
    let err = load_eval_pairs(&p, &g).unwrap_err().to_string();
    assert!(err.contains("extra.safetensors"), "{err}");
    fs::remove_file(p.join("extra.safetensors")).unwrap();

    depth_dir(&g, &["b.safetensors"], (4, 6));
    let err = load_eval_pairs(&p, &g).unwrap_err().to_string();
    assert!(err.contains("b.safetensors"), "{err}");
}

#[test]
fn eight_bit_frames_load() {
    let dir = tempfile::tempdir().unwrap();
    common::write_scene(dir.path(), "seq00", 3, (16, 16), 1);
    // Replace one frame by an 8-bit PNG of the same size.
    let p = dir.path().join("seq00/image/000001.png");
    image::RgbImage::from_pixel(16, 16, image::Rgb([255, 0, 128])).save(&p).unwrap();
    let f = load_frames(dir.path(), &Split::Entries(vec!["seq00/image/000001.png".into()]), None).unwrap();
    assert_eq!(f[0].image.get(0, 3, 3), 1.0);
    assert!((f[0].image.get(2, 3, 3) - 128.0 / 255.0).abs() < 1e-15);
}
