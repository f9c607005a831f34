use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

#[test]
fn parses_simple_label() {
    let p = parse_label_file("1 0.5 0.5 0.2 0.1\n", 2).unwrap();
    assert_eq!(p.boxes, vec![LabelBox::new(1, 0.5, 0.5, 0.2, 0.1)]);
    assert_eq!(p.clipped, 0);
    assert!(parse_label_file("", 2).unwrap().boxes.is_empty());
    assert!(parse_label_file("\n  \n", 2).unwrap().boxes.is_empty());
}

#[test]
fn oversized_label_is_clipped_and_counted() {
    let p = parse_label_file("1 0.5 0.5 1.4 0.1", 2).unwrap();
    assert_eq!(p.clipped, 1);
    let b = p.boxes[0];
    assert_eq!((b.cx, b.w), (0.5, 1.0));
    assert!((b.h - 0.1).abs() < 1e-12);
    assert!(b.is_inside_unit());
    let p = parse_label_file("0 1.2 0.5 0.1 0.1", 2).unwrap();
    assert_eq!((p.boxes.len(), p.dropped), (0, 1));
}

#[test]
fn malformed_lines_report_line_numbers() {
    let text = "0 0.5 0.5 0.1 0.1\n0 0.5 0.5 0.1\n";
    let err = parse_label_file(text, 2).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    let err = parse_label_file("\n\n2 0.5 0.5 0.1 0.1", 2).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    assert!(parse_label_file("x 0.5 0.5 0.1 0.1", 2).is_err());
    assert!(parse_label_file("0 nan 0.5 0.1 0.1", 2).is_err());
    assert!(parse_label_file("0 0.5 0.5 -0.1 0.1", 2).is_err());
}

#[test]
fn label_render_round_trips() {
    let boxes = vec![LabelBox::new(0, 0.25, 0.5, 0.125, 0.375), LabelBox::new(3, 0.5, 0.5, 1.0, 1.0)];
    assert_eq!(parse_label_file(&render_label_file(&boxes), 4).unwrap().boxes, boxes);
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("img{i}")).collect()
}

#[test]
fn split_counts_match_examples() {
    assert_eq!(split_counts(10, DEFAULT_SPLIT).unwrap(), [7, 2, 1]);
    let n = 20_327;
    let realized = [14_204.0 / n as f64, 4_094.0 / n as f64, 2_029.0 / n as f64];
    assert_eq!(split_counts(n, realized).unwrap(), [14_204, 4_094, 2_029]);
    let m = split_dataset(&ids(n), 3, realized).unwrap();
    assert_eq!((m.train.len(), m.val.len(), m.test.len()), (14_204, 4_094, 2_029));
    assert!(split_counts(10, [0.7, 0.2, 0.2]).is_err());
    assert!(split_dataset(&[], 0, DEFAULT_SPLIT).is_err());
}

#[test]
fn split_is_seeded_and_manifest_round_trips() {
    let a = split_dataset(&ids(50), 11, DEFAULT_SPLIT).unwrap();
    assert_eq!(a, split_dataset(&ids(50), 11, DEFAULT_SPLIT).unwrap());
    assert_ne!(a, split_dataset(&ids(50), 12, DEFAULT_SPLIT).unwrap());
    assert_eq!(SplitManifest::from_text(&a.to_text()).unwrap(), a);
    assert!(SplitManifest::from_text("seed = 1\n[bogus]\n").is_err());
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 1usize..1000, seed in any::<u64>()) {
        let all = ids(n);
        let m = split_dataset(&all, seed, DEFAULT_SPLIT).unwrap();
        let mut seen: Vec<&String> = m.train.iter().chain(&m.val).chain(&m.test).collect();
        prop_assert_eq!(seen.len(), n);
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), n);
        for (part, r) in [m.train.len(), m.val.len(), m.test.len()].iter().zip(DEFAULT_SPLIT) {
            prop_assert!((*part as f64 - r * n as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn augmentation_stays_in_range(seed in any::<u64>(), alpha in 0.01f64..3.0, beta in -1.0f64..1.0) {
        let img = Tensor::uniform(vec![3, 4, 5], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let out = augment_brightness_contrast(&img, alpha, beta).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn augmentation_examples() {
    let img = Tensor::uniform(vec![3, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(augment_brightness_contrast(&img, 1.0, 0.0).unwrap(), img);
    let flat = Tensor::full(vec![3, 2, 2], 0.75f32);
    assert!(augment_brightness_contrast(&flat, 2.0, 0.0).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(augment_brightness_contrast(&img, 0.0, 0.0).is_err());
    // No clamping for values in [0.3, 0.7] with beta 0.1.
    let mid = Tensor::uniform(vec![3, 16, 16], 0.3, 0.7, &mut ChaCha8Rng::seed_from_u64(1));
    let out = augment_brightness_contrast(&mid, 1.0, 0.1).unwrap();
    let mean = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
    assert!((mean(&out) - mean(&mid) - 0.1).abs() < 1e-6);
}

#[test]
fn augment_ranges_sample_inside_bounds() {
    let r = AugmentRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let (a, b) = r.sample(&mut rng);
        assert!((0.6..=1.4).contains(&a) && (-0.2..=0.2).contains(&b));
    }
    assert_eq!(AugmentRanges::off().sample(&mut rng), (1.0, 0.0));
}

#[test]
fn synthetic_samples_are_deterministic_and_valid() {
    let cfg = SynthConfig::new(30, 4, 9);
    let a = generate_synthetic_dataset(&cfg).unwrap();
    assert_eq!(a, generate_synthetic_dataset(&cfg).unwrap());
    assert_eq!(generate_synthetic_dataset(&SynthConfig::new(1, 4, 9)).unwrap()[0], a[0]);
    for s in &a {
        assert!(!s.boxes.is_empty() && s.boxes.len() <= 4);
        assert!(s.boxes.iter().all(|b| b.is_inside_unit() && b.class_id < 4));
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn synthetic_box_is_tight_around_painted_pixels() {
    let s = &generate_synthetic_dataset(&SynthConfig::new(1, 2, 4)).unwrap()[0];
    let size = 64;
    let plane = &s.image.data()[..size * size];
    for b in &s.boxes {
        let [x1, y1, x2, y2] = b.corners().map(|c| (c * size as f64).round() as usize);
        let bright = |x: usize, y: usize| plane[y * size + x] > 0.4;
        assert!((y1..y2).any(|y| bright(x1, y)) && (y1..y2).any(|y| bright(x2 - 1, y)));
        assert!((x1..x2).any(|x| bright(x, y1)) && (x1..x2).any(|x| bright(x, y2 - 1)));
    }
}

#[test]
fn imbalance_matches_requested_weights() {
    for (n, weights, tol, seed) in [(1000, vec![0.9, 0.1], 0.03, 5), (2000, vec![0.5, 0.3, 0.2], 0.0, 1)] {
        let mut cfg = SynthConfig::new(n, weights.len(), seed);
        cfg.class_weights = Some(weights.clone());
        let data = generate_synthetic_dataset(&cfg).unwrap();
        let mut counts = vec![0usize; weights.len()];
        for b in data.iter().flat_map(|s| &s.boxes) {
            counts[b.class_id] += 1;
        }
        let total: usize = counts.iter().sum();
        for (c, w) in counts.iter().zip(&weights) {
            let share = *c as f64 / total as f64;
            let sigma = (w * (1.0 - w) / total as f64).sqrt();
            let bound = if tol > 0.0 { tol } else { 3.0 * sigma };
            assert!((share - w).abs() <= bound, "share {share} vs {w}");
        }
    }
}

#[test]
fn class_shares_are_unbiased_across_seeds() {
    // Mean z-score of the class-1 share over independent datasets.
    let seeds = 40;
    let mut z_sum = 0.0;
    for seed in 0..seeds {
        let mut cfg = SynthConfig::new(150, 3, 1000 + seed);
        cfg.class_weights = Some(vec![0.5, 0.3, 0.2]);
        let data = generate_synthetic_dataset(&cfg).unwrap();
        let boxes: Vec<_> = data.iter().flat_map(|s| &s.boxes).collect();
        let t = boxes.len() as f64;
        let share = boxes.iter().filter(|b| b.class_id == 1).count() as f64 / t;
        z_sum += (share - 0.3) / (0.21 / t).sqrt();
    }
    let mean_z = z_sum / seeds as f64;
    assert!(mean_z.abs() < 3.0 / (seeds as f64).sqrt(), "mean z {mean_z}");
}

#[test]
fn pgm_and_ppm_decoding() {
    let t = decode_image(b"P5\n1 1\n255\n\xff", Path::new("x.pgm")).unwrap();
    assert_eq!(t.shape(), [3, 1, 1]);
    assert!(t.data().iter().all(|&v| v == 1.0));
    let t = decode_image(b"P6 # comment\n2 1 255\n\x00\x80\xff\x01\x02\x03", Path::new("x.ppm")).unwrap();
    assert_eq!(t.shape(), [3, 1, 2]);
    assert_eq!(t.data()[2], 128.0 / 255.0);

    let img = Tensor::from_fn(vec![3, 2, 2], |i| (i * 20) as f32 / 255.0);
    let bytes = encode_ppm(&img).unwrap();
    let back = decode_image(&bytes, Path::new("rt.ppm")).unwrap();
    assert_eq!(back, img);
    assert_eq!(encode_ppm(&back).unwrap(), bytes);
}

#[test]
fn image_errors_are_descriptive() {
    let err = decode_image(b"P6\n2 2\n255\n\x00\x00", Path::new("t.ppm")).unwrap_err();
    assert!(matches!(err, Error::Image { offset: 13, .. }), "{err}");
    assert!(err.to_string().contains("byte offset 13"));
    assert!(decode_image(b"P3\n1 1\n255\n0 0 0", Path::new("a")).unwrap_err().to_string().contains("magic"));
    assert!(decode_image(b"P6\n1 1\n", Path::new("a")).is_err());
    assert!(decode_image(b"P5\n1 1\n65535\n\x00\x00", Path::new("a")).is_err());
    assert!(load_image(Path::new("/nonexistent/x.ppm")).is_err());
}

#[test]
fn resize_keeps_constants_and_identity() {
    let img = Tensor::full(vec![3, 10, 7], 0.4f32);
    let r = resize_bilinear(&img, 4, 4).unwrap();
    assert!(r.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    let img = Tensor::uniform(vec![3, 4, 4], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(resize_bilinear(&img, 4, 4).unwrap(), img);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic_dataset(&SynthConfig::new(3, 2, 1)).unwrap();
    save_dataset(dir.path(), &data, &default_class_names(2)).unwrap();
    std::fs::remove_file(dir.path().join("labels/synth_00001.txt")).unwrap();
    let loaded = load_dataset(dir.path(), 2).unwrap();
    assert_eq!((loaded.clipped, loaded.dropped), (0, 0));
    assert_eq!(loaded.samples.len(), 3);
    assert_eq!(loaded.class_names.unwrap(), ["fracture", "text"]);
    assert!(loaded.samples[1].boxes.is_empty());
    for (a, b) in loaded.samples[0].boxes.iter().zip(&data[0].boxes) {
        assert_eq!(a, b);
    }
    assert!(loaded.samples[0].image.max_abs_diff(&data[0].image) <= 0.5 / 255.0 + 1e-6);
    assert!(load_dataset(dir.path(), 1).is_err());
}

#[test]
fn class_names_default() {
    let names = default_class_names(DEFAULT_NUM_CLASSES);
    assert_eq!(names.len(), 9);
    assert_eq!(names[3], "bone anomaly");
    assert_eq!(names[8], "class_8");
}
