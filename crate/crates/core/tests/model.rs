use monoformer_core::acm_ffd::DecoderConfig;
use monoformer_core::autograd::check::central_difference;
use monoformer_core::autograd::Graph;
use monoformer_core::camera::CameraIntrinsics;
use monoformer_core::image::ImageFrame;
use monoformer_core::losses::LossConfig;
use monoformer_core::model::{ModelConfig, MonoFormer};
use monoformer_core::networks::EncoderConfig;
use monoformer_core::optim::{Adam, AdamConfig};
use monoformer_core::params::{ParamGroup, Session};
use monoformer_core::sample::SequenceSample;
use monoformer_core::synthetic::{generate_synthetic_scene, SyntheticSceneConfig};
use monoformer_core::train::{batch_gradients, train_step};
use monoformer_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(layers: usize, size: (usize, usize)) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            num_layers: layers,
            num_heads: 2,
            head_dim: 4,
            embed_dim: 8,
            patch_size: 2,
            stem_channels: vec![4],
            image_size: size,
            mlp_ratio: 2,
        },
        decoder: DecoderConfig {
            channels: vec![8, 4, 4, 4],
            num_scales: 4,
        },
        ..ModelConfig::default()
    }
}

fn frame(h: usize, w: usize, seed: u64) -> ImageFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageFrame::new(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn scene(size: (usize, usize)) -> Vec<SequenceSample> {
    let path = SyntheticSceneConfig::translating_path(5, [0.0, 0.0, 0.3]);
    generate_synthetic_scene(&SyntheticSceneConfig::boxes_on_ground(size, path), 3).unwrap().0
}

#[test]
fn ablation_layer_counts_build_and_step() {
    let samples = scene((32, 32));
    for layers in 2..=5 {
        let cfg = tiny(layers, (32, 32));
        let mut model = MonoFormer::new(&cfg, 1).unwrap();
        assert_eq!(model.encoder.layers.len(), layers);
        let before = model.params.clone();
        let mut opt = Adam::new(AdamConfig::default(), &model.params).unwrap();
        let stats = train_step(&mut model, &mut opt, &samples[..1], &LossConfig::default()).unwrap();
        assert!(stats.loss.is_finite() && stats.loss > 0.0);
        let moved = before.ids().any(|id| before.get(id) != model.params.get(id));
        assert!(moved, "L = {layers}: no parameter changed");
        let d = model.predict_depth(&samples[0].target).unwrap();
        assert_eq!((d.height(), d.width()), (32, 32));
    }
}

#[test]
fn named_parameters_round_trip() {
    let cfg = tiny(2, (16, 16));
    let model = MonoFormer::new(&cfg, 7).unwrap();
    let named: Vec<(String, Tensor)> = model.params.iter().map(|(id, e)| (e.name.clone(), model.params.get(id).clone())).collect();
    let copy = MonoFormer::from_named(&cfg, named.clone()).unwrap();
    let f = frame(16, 16, 1);
    assert_eq!(model.predict_disparity(&f).unwrap(), copy.predict_disparity(&f).unwrap());

    let mut missing = named.clone();
    let dropped = missing.remove(3).0;
    match MonoFormer::from_named(&cfg, missing) {
        Err(Error::ParamMismatch(m)) => assert!(m.contains(&dropped), "{m}"),
        other => panic!("expected mismatch, got {other:?}"),
    }

    let mut extra = named.clone();
    extra.push(("decoder.bogus".into(), Tensor::scalar(1.0)));
    assert!(matches!(MonoFormer::from_named(&cfg, extra), Err(Error::ParamMismatch(m)) if m.contains("decoder.bogus")));

    // A checkpoint from a wider model names the first mis-shaped parameter.
    let mut wide = tiny(2, (16, 16));
    wide.encoder.embed_dim = 16;
    let other = MonoFormer::new(&wide, 7).unwrap();
    let named_wide: Vec<(String, Tensor)> = other.params.iter().map(|(id, e)| (e.name.clone(), other.params.get(id).clone())).collect();
    // Architecture order, not file order.
    let mut named_wide = named_wide;
    named_wide.reverse();
    let first_bad = model
        .params
        .iter()
        .find(|(id, e)| named_wide.iter().any(|(n, t)| n == &e.name && t.shape() != model.params.get(*id).shape()))
        .unwrap()
        .1
        .name
        .clone();
    match MonoFormer::from_named(&cfg, named_wide) {
        Err(Error::ParamMismatch(m)) => assert!(m.contains(&first_bad), "{m}"),
        other => panic!("expected mismatch, got {other:?}"),
    }
}

#[test]
fn parameter_groups_and_learning_rates() {
    let model = MonoFormer::new(&tiny(2, (16, 16)), 0).unwrap();
    for (_, e) in model.params.iter() {
        let expect = if e.name.starts_with("pose.") { ParamGroup::Pose } else { ParamGroup::Depth };
        assert_eq!(e.group, expect, "{}", e.name);
    }
    let opt = Adam::new(AdamConfig::default(), &model.params).unwrap();
    assert_eq!(opt.group_lrs(&model.params), [(ParamGroup::Depth, 2e-5), (ParamGroup::Pose, 5e-4)]);
}

#[test]
fn inference_is_deterministic_and_seeded() {
    let cfg = tiny(2, (16, 16));
    let f = frame(16, 16, 2);
    let a = MonoFormer::new(&cfg, 5).unwrap();
    let b = MonoFormer::new(&cfg, 5).unwrap();
    let c = MonoFormer::new(&cfg, 6).unwrap();
    assert_eq!(a.predict_depth(&f).unwrap(), b.predict_depth(&f).unwrap());
    assert_ne!(a.predict_disparity(&f).unwrap(), c.predict_disparity(&f).unwrap());
    let d = a.predict_disparity(&f).unwrap();
    assert!(d.values().iter().all(|v| *v > 0.0 && *v < 1.0));
    assert!(matches!(a.predict_depth(&frame(8, 16, 2)), Err(Error::Shape { .. })));
}

#[test]
fn model_loss_parameter_gradient() {
    // End-to-end: analytic parameter gradients of the full self-supervised
    // loss against central differences on a few coordinates per tensor.
    let cfg = tiny(2, (16, 16));
    let mut model = MonoFormer::new(&cfg, 11).unwrap();
    // Nonzero pose head so the pose branch contributes gradients.
    let head = model.params.find("pose.head.weight").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    model.params.get_mut(head).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    let sample = SequenceSample {
        target: frame(16, 16, 20),
        sources: vec![frame(16, 16, 21), frame(16, 16, 22)],
        intrinsics: CameraIntrinsics::new(12.0, 12.0, 7.5, 7.5, 16, 16).unwrap(),
        gt_depth: None,
        gt_relative_poses: None,
    };
    let loss_cfg = LossConfig::default();
    let (_, grads) = batch_gradients(&model, std::slice::from_ref(&sample), &loss_cfg).unwrap();
    let names = ["encoder.layer0.fc1.weight", "decoder.stage0.conv.weight", "pose.head.weight", "decoder.head0.weight"];
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for name in names {
        let id = model.params.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let full = grads.get(id).unwrap().to_vec();
        let n = full.len();
        let picks: Vec<usize> = (0..4).map(|i| (i * 7919 + 13) % n).collect();
        let x: Vec<f64> = picks.iter().map(|&i| model.params.get(id).data()[i]).collect();
        let num = central_difference(
            |v| {
                let mut m = model.clone();
                for (&i, &vi) in picks.iter().zip(v) {
                    m.params.get_mut(id).data_mut()[i] = vi;
                }
                let mut g = Graph::new();
                let mut s = Session::new(&mut g, &m.params, false);
                let t = m.sample_loss(&mut s, &sample, &loss_cfg).unwrap();
                g.value(t.total).data()[0]
            },
            &x,
            1e-5,
        );
        analytic.extend(picks.iter().map(|&i| full[i]));
        numeric.extend(num);
    }
    let err = monoformer_core::autograd::check::relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "rel error {err}\n{analytic:?}\n{numeric:?}");
}
