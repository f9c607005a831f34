use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{model_check, module_suite};

fn images(n: usize, size: usize, seed: u64) -> Tensor<f32> {
    Tensor::uniform(vec![n, 3, size, size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn rescbam_build_has_four_neck_attention_blocks() {
    let m = build_model::<f32>(&ModelSpec::nano(2, AttentionVariant::ResCbam), 0).unwrap();
    assert_eq!(m.num_attention_blocks(), 4);
    let attn: Vec<&str> = m
        .store()
        .entries()
        .iter()
        .map(|e| e.name.as_str())
        .filter(|n| n.contains(".attn."))
        .collect();
    assert!(attn.iter().all(|n| n.starts_with("neck.c2f")));
    assert!(attn.contains(&"neck.c2f1.attn.mlp_w1"));
    assert_eq!(attn.len(), 16);
    let none = build_model::<f32>(&ModelSpec::nano(2, AttentionVariant::None), 0).unwrap();
    assert_eq!(none.num_attention_blocks(), 0);
}

#[test]
fn parameter_counts_order() {
    for scale in [Scale::Nano, Scale::Small] {
        let count = |a| {
            build_model::<f32>(&ModelSpec::new(9, a, scale, 64), 0)
                .unwrap()
                .num_params()
        };
        let (none, cbam, res) = (
            count(AttentionVariant::None),
            count(AttentionVariant::Cbam),
            count(AttentionVariant::ResCbam),
        );
        assert!(none < cbam);
        assert_eq!(cbam, res);
    }
}

#[test]
fn builds_are_deterministic() {
    let spec = ModelSpec::nano(3, AttentionVariant::ResCbam);
    let a = build_model::<f32>(&spec, 42).unwrap();
    let b = build_model::<f32>(&spec, 42).unwrap();
    let c = build_model::<f32>(&spec, 43).unwrap();
    assert_eq!(a.store(), b.store());
    assert_ne!(a.store(), c.store());
}

#[test]
fn invalid_specs_name_the_constraint() {
    let base = ModelSpec::nano(2, AttentionVariant::None);
    let cases: Vec<(ModelSpec, &str)> = vec![
        (ModelSpec { input_size: 48, ..base.clone() }, "input_size"),
        (ModelSpec { reg_max: 0, ..base.clone() }, "reg_max"),
        (ModelSpec { num_classes: 0, ..base.clone() }, "num_classes"),
        (ModelSpec { width_mult: 0.0, ..base.clone() }, "width_mult"),
        (ModelSpec { strides: [8, 16, 64], ..base.clone() }, "strides"),
    ];
    for (spec, key) in cases {
        let err = build_model::<f32>(&spec, 0).unwrap_err().to_string();
        assert!(err.contains(key), "{err}");
    }
}

#[test]
fn nano_channels_and_depths() {
    let s = ModelSpec::nano(2, AttentionVariant::None);
    assert_eq!(s.channels(), [16, 32, 64, 128, 128]);
    assert_eq!(s.backbone_depths(), [1, 1, 1, 1]);
    assert_eq!(s.neck_depth(), 1);
    let l = ModelSpec::new(2, AttentionVariant::None, Scale::Large, 640);
    assert_eq!(l.channels(), BASE_CHANNELS);
    assert_eq!(l.backbone_depths(), BASE_DEPTHS);
}

#[test]
fn forward_shapes_and_finiteness() {
    let spec = ModelSpec::nano(2, AttentionVariant::ResCbam);
    let m = build_model::<f32>(&spec, 1).unwrap();
    let raw = m.predict_raw(&images(2, 64, 1)).unwrap();
    let grids: Vec<usize> = raw.scales.iter().map(|s| s.cls.shape()[2]).collect();
    assert_eq!(grids, [8, 4, 2]);
    for s in &raw.scales {
        let g = 64 / s.stride;
        assert_eq!(s.cls.shape(), [2, 2, g, g]);
        assert_eq!(s.reg.shape(), [2, 68, g, g]);
        assert!(s.cls.is_finite() && s.reg.is_finite());
    }
    assert!(m.predict_raw(&images(1, 32, 0)).is_err());
    assert!(m.predict_raw(&Tensor::zeros(vec![1, 1, 64, 64])).is_err());
}

#[test]
fn shape_trace_is_identical_across_variants() {
    let traces: Vec<_> = [AttentionVariant::None, AttentionVariant::Cbam, AttentionVariant::ResCbam]
        .iter()
        .map(|&a| build_model::<f32>(&ModelSpec::nano(2, a), 0).unwrap().shape_trace().unwrap())
        .collect();
    assert_eq!(traces[0], traces[1]);
    assert_eq!(traces[0], traces[2]);
    let neck: Vec<_> = traces[0].iter().filter(|(n, _)| n.starts_with("neck.c2f")).collect();
    assert_eq!(neck.len(), 8);
    for pair in neck.chunks(2) {
        assert_eq!(pair[0].1, pair[1].1, "attention must preserve shape");
    }
}

fn share_weights(from: &Model<f32>, to: &mut Model<f32>) {
    for e in from.store().entries() {
        if let Some(id) = to.store().id(&e.name) {
            to.store_mut().set(id, e.value.clone()).unwrap();
        }
    }
}

#[test]
fn attention_changes_outputs_with_shared_weights() {
    let res = build_model::<f32>(&ModelSpec::nano(2, AttentionVariant::ResCbam), 5).unwrap();
    let mut none = build_model::<f32>(&ModelSpec::nano(2, AttentionVariant::None), 99).unwrap();
    share_weights(&res, &mut none);
    // Batch statistics keep activations at unit scale, unlike fresh running stats.
    let x = images(2, 64, 3);
    let run = |m: &Model<f32>| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        m.forward_frozen(&mut tape, xv, Mode::Train).unwrap().raw(&tape)
    };
    let (a, b) = (run(&res), run(&none));
    let diff: f32 = a.scales.iter().zip(&b.scales).map(|(p, q)| p.reg.max_abs_diff(&q.reg)).fold(0.0, f32::max);
    assert!(diff > 1e-4, "max diff {diff}");
}

#[test]
fn train_mode_updates_running_stats_with_momentum() {
    let spec = ModelSpec::nano(2, AttentionVariant::None);
    let mut m = build_model::<f64>(&spec, 0).unwrap();
    let id = m.store().id("backbone.stem0.bn.running_mean").unwrap();
    let x = images(2, 64, 4).cast::<f64>();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    m.forward(&mut tape, xv, Mode::Train).unwrap();
    // Batch mean of the first conv output, recomputed directly.
    let mut t2 = Tape::new();
    let xv = t2.constant(x);
    let w = t2.constant(m.store().by_name("backbone.stem0.conv.weight").unwrap().clone());
    let y = t2.conv2d(xv, w, None, 2, 1).unwrap();
    let (n, c, h, wd) = t2.value(y).dims4().unwrap();
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            for p in 0..h * wd {
                s += t2.value(y).data()[(ni * c + ci) * h * wd + p];
            }
        }
        let mean = s / (n * h * wd) as f64;
        assert!((m.store().get(id).data()[ci] - 0.03 * mean).abs() < 1e-12);
    }
    // Eval mode leaves buffers alone.
    let before = m.store().clone();
    let mut tape = Tape::new();
    let xv = tape.constant(images(1, 64, 5).cast());
    m.forward(&mut tape, xv, Mode::Eval).unwrap();
    assert_eq!(&before, m.store());
}

#[test]
fn flops_and_params_are_positive_and_ordered() {
    let none = build_model::<f32>(&ModelSpec::nano(2, AttentionVariant::None), 0).unwrap();
    let res = build_model::<f32>(&ModelSpec::nano(2, AttentionVariant::ResCbam), 0).unwrap();
    assert!(none.flops().unwrap() > 1_000_000);
    assert!(res.flops().unwrap() > none.flops().unwrap());
}

fn spec_with_bins(reg_max: usize) -> ModelSpec {
    let mut s = ModelSpec::nano(1, AttentionVariant::None);
    s.reg_max = reg_max;
    s
}

fn raw_single(spec: &ModelSpec, cls: impl Fn(usize, usize) -> f32, reg: impl Fn(usize, usize) -> f32) -> RawPrediction<f32> {
    RawPrediction {
        scales: spec
            .strides
            .iter()
            .enumerate()
            .map(|(si, &stride)| {
                let g = spec.input_size / stride;
                ScaleOutput {
                    stride,
                    cls: Tensor::from_fn(vec![1, 1, g, g], |i| cls(si, i)),
                    reg: Tensor::from_fn(vec![1, spec.reg_channels(), g, g], |i| reg(si, i / (g * g))),
                }
            })
            .collect(),
    }
}

#[test]
fn distance_decoding() {
    assert!((decode_distances(&[0.0f32; 17]) - 8.0).abs() < 1e-9);
    for k in 0..17 {
        let mut l = [-1e4f64; 17];
        l[k] = 0.0;
        assert_eq!(decode_distances(&l), k as f64);
    }
}

#[test]
fn single_confident_cell_decodes_to_one_box_at_its_center() {
    let spec = spec_with_bins(16);
    let bins = 17;
    // P4 cell (1, 2): center (40, 24); every side one-hot at bin 1 -> 16 px.
    let raw = raw_single(
        &spec,
        |si, i| if si == 1 && i == 4 + 2 { 5.0 } else { -10.0 },
        |_, ch| if ch % bins == 1 { 30.0 } else { -30.0 },
    );
    let dets = decode_boxes(&raw, &spec, &DecodeConfig::default()).unwrap();
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].len(), 1);
    let d = dets[0][0];
    assert!((d.cx - 40.0).abs() < 1e-6 && (d.cy - 24.0).abs() < 1e-6);
    assert!((d.w - 32.0).abs() < 1e-6 && (d.h - 32.0).abs() < 1e-6);
    assert!((d.confidence - 1.0 / (1.0 + (-5.0f64).exp())).abs() < 1e-6);
}

#[test]
fn uniform_logits_decode_to_half_range() {
    let spec = spec_with_bins(4);
    let raw = raw_single(&spec, |si, i| if si == 0 && i == 27 { 3.0 } else { -10.0 }, |_, _| 0.0);
    let cfg = DecodeConfig {
        conf_threshold: 0.5,
        ..Default::default()
    };
    let d = decode_boxes(&raw, &spec, &cfg).unwrap()[0][0];
    // Cell (3, 3) at stride 8: center 28, distances 2 bins * 8 px.
    assert!((d.w - 32.0).abs() < 1e-6 && (d.cx - 28.0).abs() < 1e-6);
}

#[test]
fn nms_suppresses_same_class_only() {
    let a = DetBox::new(10.0, 10.0, 10.0, 10.0, 0, 0.9);
    let b = DetBox::new(11.0, 10.0, 10.0, 10.0, 0, 0.8);
    let c = DetBox::new(11.0, 10.0, 10.0, 10.0, 1, 0.7);
    let d = DetBox::new(40.0, 40.0, 10.0, 10.0, 0, 0.95);
    let kept = nms(vec![b, a, c, d], 0.45);
    assert_eq!(kept, vec![d, a, c]);
}

#[test]
fn blank_image_untrained_model_has_no_confident_detections() {
    let spec = ModelSpec::nano(2, AttentionVariant::ResCbam);
    let m = build_model::<f32>(&spec, 0).unwrap();
    let raw = m.predict_raw(&Tensor::zeros(vec![1, 3, 64, 64])).unwrap();
    let cfg = DecodeConfig {
        conf_threshold: 0.99,
        ..Default::default()
    };
    assert!(decode_boxes(&raw, &spec, &cfg).unwrap()[0].is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoded_distances_bounded(seed in 0u64..10_000, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l: Vec<f64> = (0..17).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let d = decode_distances(&l);
        prop_assert!((0.0..=16.0).contains(&d));
    }
}

#[test]
fn weights_round_trip_is_byte_identical() {
    let spec = ModelSpec::nano(3, AttentionVariant::ResCbam);
    let m = build_model::<f32>(&spec, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.rcbm");
    let p2 = dir.path().join("b.rcbm");
    save_weights(&m, &p1).unwrap();
    let loaded = load_weights::<f32>(&p1).unwrap();
    assert_eq!(loaded.spec(), m.spec());
    assert_eq!(loaded.store(), m.store());
    save_weights(&loaded, &p2).unwrap();
    let (a, b) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(a, b);
    assert_eq!(&a[..4], b"RCBM");

    std::fs::write(&p2, &a[..a.len() - 3]).unwrap();
    let err = load_weights::<f32>(&p2).unwrap_err().to_string();
    assert!(err.contains("byte offset"), "{err}");
    std::fs::write(&p2, b"NOPE").unwrap();
    assert!(load_weights::<f32>(&p2).is_err());
}

#[test]
fn assign_rejects_mismatched_store() {
    let a = build_model::<f32>(&ModelSpec::nano(3, AttentionVariant::None), 0).unwrap();
    let mut b = build_model::<f32>(&ModelSpec::nano(2, AttentionVariant::None), 0).unwrap();
    let mut buf = Vec::new();
    write_weights(&a, &mut buf).unwrap();
    let entries = read_weights(&buf[..]).unwrap();
    assert!(assign_weights(&mut b, &entries).is_err());
}

#[test]
fn module_gradients() {
    for r in module_suite(3, 3).unwrap() {
        assert!(r.passed(), "{}: {}", r.name, r.max_rel_err);
    }
}

#[test]
fn full_model_gradient() {
    for a in [AttentionVariant::None, AttentionVariant::ResCbam] {
        let r = model_check(a, 0, 0.01).unwrap();
        assert!(r.coords > 10);
        assert!(r.passed(), "{}: {}", r.name, r.max_rel_err);
    }
}
