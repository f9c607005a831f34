use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn corner_box(x1: f64, y1: f64, x2: f64, y2: f64) -> DetBox {
    DetBox::from_corners(x1, y1, x2, y2, 0, 1.0)
}

#[test]
fn iou_examples() {
    let a = corner_box(0.0, 0.0, 2.0, 1.0);
    assert_eq!(iou(&a, &a).unwrap(), 1.0);
    assert!((iou(&a, &corner_box(1.0, 0.0, 3.0, 1.0)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(iou(&a, &corner_box(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
    assert!(iou(&a, &corner_box(1.0, 1.0, 1.0, 2.0)).is_err());
}

#[test]
fn matching_examples() {
    let g = corner_box(0.0, 0.0, 10.0, 10.0);
    let p = DetBox { confidence: 0.8, ..corner_box(0.0, 0.0, 10.0, 9.0) };
    assert_eq!(match_detections(&[p], &[g], 0.5), [true]);
    let lo = DetBox { confidence: 0.3, ..p };
    let hi = DetBox { confidence: 0.9, ..p };
    assert_eq!(match_detections(&[lo, hi], &[g], 0.5), [false, true]);
    // Equal confidence: input order decides.
    assert_eq!(match_detections(&[p, p], &[g], 0.5), [true, false]);
    assert_eq!(match_detections(&[p], &[g], 0.95), [false]);
}

#[test]
fn ap_examples() {
    assert_eq!(average_precision(&[(0.9, true)], 1, ApMethod::Coco101), Some(1.0));
    assert_eq!(average_precision(&[(0.9, true)], 1, ApMethod::AllPoint), Some(1.0));
    assert_eq!(average_precision(&[(0.9, false), (0.5, false)], 2, ApMethod::Coco101), Some(0.0));
    assert_eq!(average_precision(&[], 0, ApMethod::Coco101), None);
    assert_eq!(average_precision(&[(0.4, false)], 0, ApMethod::Coco101), Some(0.0));
    assert_eq!(average_precision(&[], 3, ApMethod::Coco101), Some(0.0));

    // TP, FP, TP, TP against 3 gts: points (1/3, 1), (1/3, 1/2), (2/3, 2/3), (1, 3/4).
    // Envelope is 1 up to recall 1/3 and 3/4 beyond: 34 of the 101 recall
    // samples fall at or below 1/3.
    let flags = [(0.9, true), (0.8, false), (0.7, true), (0.6, true)];
    let coco = average_precision(&flags, 3, ApMethod::Coco101).unwrap();
    assert!((coco - (34.0 + 67.0 * 0.75) / 101.0).abs() < 1e-12);
    let all = average_precision(&flags, 3, ApMethod::AllPoint).unwrap();
    assert!((all - (1.0 / 3.0 + 2.0 / 3.0 * 0.75)).abs() < 1e-12);
}

#[test]
fn evaluate_examples() {
    let gts = vec![
        vec![DetBox::new(20.0, 20.0, 10.0, 10.0, 0, 1.0), DetBox::new(60.0, 60.0, 20.0, 10.0, 1, 1.0)],
        vec![DetBox::new(30.0, 40.0, 8.0, 12.0, 1, 1.0)],
    ];
    let r = evaluate(&gts, &gts, 3, ApMethod::Coco101).unwrap();
    assert_eq!((r.map50, r.map5095, r.f1), (1.0, 1.0, 1.0));
    assert_eq!(r.ap50(2), None);
    assert_eq!((r.num_gt, r.num_predictions, r.num_matched), (3, 3, 3));

    let none = evaluate(&[vec![], vec![]], &gts, 3, ApMethod::Coco101).unwrap();
    assert_eq!((none.map50, none.map5095, none.f1), (0.0, 0.0, 0.0));
    assert!(evaluate(&[vec![]], &gts, 3, ApMethod::Coco101).is_err());
    assert!(evaluate(&gts, &gts, 1, ApMethod::Coco101).is_err());
}

#[test]
fn report_formats() {
    let gts = vec![vec![DetBox::new(20.0, 20.0, 10.0, 10.0, 0, 1.0)]];
    let preds = vec![vec![
        DetBox::new(20.0, 20.0, 10.0, 10.0, 0, 0.9),
        DetBox::new(70.0, 70.0, 10.0, 10.0, 0, 0.3),
    ]];
    let r = evaluate(&preds, &gts, 2, ApMethod::Coco101).unwrap();
    let names = vec!["fracture".to_string(), "text".to_string()];
    assert_eq!(
        r.pr_curve_csv(&names),
        "class,recall,precision\nfracture,1.000000,1.000000\nfracture,1.000000,0.500000\n"
    );
    let kv = r.to_key_value();
    assert!(kv.contains("map50 = 1.000000\n"));
    assert!(kv.contains("class1.ap50 = none\n"));
    assert!((r.f1_confidence - 0.9).abs() < 1e-12);
    assert!(r.summary(&names).contains("fracture"));
}

// ---------------------------------------------------------------------------
// Brute-force reference, written without sharing code with the module.

fn ref_iou(a: &DetBox, b: &DetBox) -> f64 {
    let (ax1, ax2) = (a.cx - a.w / 2.0, a.cx + a.w / 2.0);
    let (ay1, ay2) = (a.cy - a.h / 2.0, a.cy + a.h / 2.0);
    let (bx1, bx2) = (b.cx - b.w / 2.0, b.cx + b.w / 2.0);
    let (by1, by2) = (b.cy - b.h / 2.0, b.cy + b.h / 2.0);
    let w = f64::max(0.0, f64::min(ax2, bx2) - f64::max(ax1, bx1));
    let h = f64::max(0.0, f64::min(ay2, by2) - f64::max(ay1, by1));
    let i = w * h;
    i / (a.w * a.h + b.w * b.h - i)
}

/// Every (pred, gt) candidate pair is scanned again for each prediction, in
/// rank order; ranks come from counting strictly larger confidences plus
/// earlier equal ones.
fn ref_flags(preds: &[DetBox], gts: &[DetBox], thr: f64) -> Vec<bool> {
    let rank = |i: usize| {
        (0..preds.len())
            .filter(|&j| preds[j].confidence > preds[i].confidence || (preds[j].confidence == preds[i].confidence && j < i))
            .count()
    };
    let mut by_rank = vec![0; preds.len()];
    for i in 0..preds.len() {
        by_rank[rank(i)] = i;
    }
    let mut used = vec![false; gts.len()];
    let mut flags = vec![false; preds.len()];
    for &i in &by_rank {
        let cands: Vec<(usize, f64)> =
            (0..gts.len()).filter(|&j| !used[j]).map(|j| (j, ref_iou(&preds[i], &gts[j]))).filter(|c| c.1 >= thr).collect();
        let best = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        if let Some(&(j, _)) = cands.iter().find(|c| c.1 == best) {
            used[j] = true;
            flags[i] = true;
        }
    }
    flags
}

/// Interpolated precision straight from the definition: the best precision
/// over every prefix whose recall reaches `r`.
fn ref_ap(scored: &[(f64, bool)], n_gt: usize, method: ApMethod) -> f64 {
    let mut s = scored.to_vec();
    // Stable insertion sort by descending confidence.
    for i in 1..s.len() {
        let mut j = i;
        while j > 0 && s[j - 1].0 < s[j].0 {
            s.swap(j - 1, j);
            j -= 1;
        }
    }
    let prefix: Vec<(f64, f64)> = (1..=s.len())
        .map(|k| {
            let tp = s[..k].iter().filter(|x| x.1).count() as f64;
            (tp / n_gt as f64, tp / k as f64)
        })
        .collect();
    let interp = |r: f64| prefix.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
    match method {
        ApMethod::Coco101 => (0..=100).map(|i| interp(i as f64 / 100.0)).sum::<f64>() / 101.0,
        ApMethod::AllPoint => {
            let mut recalls: Vec<f64> = prefix.iter().map(|p| p.0).collect();
            recalls.dedup();
            let mut area = 0.0;
            let mut prev = 0.0;
            for r in recalls {
                area += (r - prev) * interp(r);
                prev = r;
            }
            area
        }
    }
}

fn ref_evaluate(preds: &[Vec<DetBox>], gts: &[Vec<DetBox>], nc: usize, method: ApMethod) -> (Vec<Vec<Option<f64>>>, f64, f64) {
    let mut table = vec![vec![None; 10]; nc];
    for c in 0..nc {
        let n_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class_id == c).count()).sum();
        for t in 0..10 {
            let thr = 0.5 + 0.05 * t as f64;
            let thr = (thr * 100.0).round() / 100.0;
            let mut scored = Vec::new();
            for (p, g) in preds.iter().zip(gts) {
                let p: Vec<DetBox> = p.iter().filter(|b| b.class_id == c).copied().collect();
                let g: Vec<DetBox> = g.iter().filter(|b| b.class_id == c).copied().collect();
                let f = ref_flags(&p, &g, thr);
                scored.extend(p.iter().map(|b| b.confidence).zip(f));
            }
            table[c][t] = match (n_gt, scored.is_empty()) {
                (0, true) => None,
                (0, false) => Some(0.0),
                _ => Some(ref_ap(&scored, n_gt, method)),
            };
        }
    }
    let classes: Vec<usize> = (0..nc).filter(|&c| gts.iter().flatten().any(|b| b.class_id == c)).collect();
    let k = classes.len().max(1) as f64;
    let m50 = classes.iter().map(|&c| table[c][0].unwrap()).sum::<f64>() / k;
    let m5095 = classes.iter().map(|&c| table[c].iter().map(|a| a.unwrap()).sum::<f64>() / 10.0).sum::<f64>() / k;
    (table, m50, m5095)
}

type Fixture = (Vec<Vec<DetBox>>, Vec<Vec<DetBox>>);

/// Up to 5 images with up to 5 boxes each; predictions are jittered copies
/// of the ground truth plus clutter, with coarse confidences to force ties.
pub(super) fn random_fixture(seed: u64, nc: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = rng.gen_range(1..=5);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let g: Vec<DetBox> = (0..rng.gen_range(0..=5))
            .map(|_| {
                DetBox::new(
                    rng.gen_range(10.0..90.0),
                    rng.gen_range(10.0..90.0),
                    rng.gen_range(5.0..30.0),
                    rng.gen_range(5.0..30.0),
                    rng.gen_range(0..nc),
                    1.0,
                )
            })
            .collect();
        let mut p = Vec::new();
        for b in &g {
            if p.len() < 5 && rng.gen_bool(0.8) {
                let j = rng.gen_range(0.0..0.3);
                p.push(DetBox::new(
                    b.cx + rng.gen_range(-j..=j) * b.w,
                    b.cy + rng.gen_range(-j..=j) * b.h,
                    b.w * rng.gen_range(1.0 - j..=1.0 + j),
                    b.h * rng.gen_range(1.0 - j..=1.0 + j),
                    if rng.gen_bool(0.9) { b.class_id } else { rng.gen_range(0..nc) },
                    (rng.gen_range(1..=10) as f64) / 10.0,
                ));
            }
        }
        while p.len() < 5 && rng.gen_bool(0.4) {
            p.push(DetBox::new(
                rng.gen_range(10.0..90.0),
                rng.gen_range(10.0..90.0),
                rng.gen_range(5.0..30.0),
                rng.gen_range(5.0..30.0),
                rng.gen_range(0..nc),
                (rng.gen_range(1..=10) as f64) / 10.0,
            ));
        }
        preds.push(p);
        gts.push(g);
    }
    (preds, gts)
}

#[test]
fn match_agrees_with_reference_on_small_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..500 {
        let (p, g) = random_fixture(rng.gen(), 1);
        for (pi, gi) in p.iter().zip(&g) {
            let pi: Vec<DetBox> = pi.iter().take(4).copied().collect();
            let gi: Vec<DetBox> = gi.iter().take(3).copied().collect();
            for thr in [0.3, 0.5, 0.75] {
                assert_eq!(match_detections(&pi, &gi, thr), ref_flags(&pi, &gi, thr));
            }
        }
    }
}

#[test]
fn evaluate_agrees_with_reference() {
    for method in [ApMethod::Coco101, ApMethod::AllPoint] {
        for seed in 0..100 {
            let (p, g) = random_fixture(seed, 3);
            let r = evaluate(&p, &g, 3, method).unwrap();
            let (table, m50, m5095) = ref_evaluate(&p, &g, 3, method);
            for c in 0..3 {
                for t in 0..10 {
                    match (r.ap[c][t], table[c][t]) {
                        (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "seed {seed} class {c} thr {t}: {a} vs {b}"),
                        (a, b) => assert_eq!(a, b),
                    }
                }
            }
            assert!((r.map50 - m50).abs() < 1e-9 && (r.map5095 - m5095).abs() < 1e-9, "seed {seed}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ap_invariant_under_monotone_confidence_maps(seed in any::<u64>(), k in 0.1f64..5.0, shift in -3.0f64..3.0) {
        let (p, g) = random_fixture(seed, 2);
        let mapped: Vec<Vec<DetBox>> = p
            .iter()
            .map(|img| img.iter().map(|b| DetBox { confidence: (k * b.confidence).exp() + shift, ..*b }).collect())
            .collect();
        let a = evaluate(&p, &g, 2, ApMethod::Coco101).unwrap();
        let b = evaluate(&mapped, &g, 2, ApMethod::Coco101).unwrap();
        prop_assert_eq!(a.ap, b.ap);
        prop_assert_eq!(a.f1, b.f1);
    }

    #[test]
    fn map5095_never_exceeds_map50(seed in any::<u64>()) {
        let (p, g) = random_fixture(seed, 3);
        let r = evaluate(&p, &g, 3, ApMethod::Coco101).unwrap();
        prop_assert!(r.map5095 <= r.map50 + 1e-12);
        prop_assert!(r.ap.iter().flatten().flatten().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn adding_an_fp_never_increases_ap(flags in prop::collection::vec((1u8..20, any::<bool>()), 0..12), conf in 0u8..21, n_extra in 0usize..3) {
        let scored: Vec<(f64, bool)> = flags.iter().map(|&(c, f)| (c as f64, f)).collect();
        let n_gt = scored.iter().filter(|s| s.1).count() + n_extra;
        prop_assume!(n_gt > 0);
        let mut more = scored.clone();
        more.push((conf as f64, false));
        for m in [ApMethod::Coco101, ApMethod::AllPoint] {
            prop_assert!(average_precision(&more, n_gt, m).unwrap() <= average_precision(&scored, n_gt, m).unwrap() + 1e-12);
        }
    }
}

/// Adds a copy of one true positive at a lower confidence and reports
/// `(ap_before, ap_after)` at IoU 0.5 for its class, or `None` when the
/// fixture has no true positive.
pub(super) fn duplicate_tp_perturbation(seed: u64) -> Option<(f64, f64)> {
    let (mut p, g) = random_fixture(seed, 2);
    let before = evaluate(&p, &g, 2, ApMethod::Coco101).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut tps = Vec::new();
    for (i, (pi, gi)) in p.iter().zip(&g).enumerate() {
        for c in 0..2 {
            let idx: Vec<usize> = (0..pi.len()).filter(|&k| pi[k].class_id == c).collect();
            let pc: Vec<DetBox> = idx.iter().map(|&k| pi[k]).collect();
            let gc: Vec<DetBox> = gi.iter().filter(|b| b.class_id == c).copied().collect();
            for (k, f) in idx.iter().zip(match_detections(&pc, &gc, 0.5)) {
                if f {
                    tps.push((i, *k));
                }
            }
        }
    }
    if tps.is_empty() {
        return None;
    }
    let (i, k) = tps[rng.gen_range(0..tps.len())];
    let orig = p[i][k];
    let dup = DetBox { confidence: orig.confidence * rng.gen_range(0.0..1.0), ..orig };
    p[i].push(dup);
    let after = evaluate(&p, &g, 2, ApMethod::Coco101).unwrap();
    Some((before.ap50(orig.class_id).unwrap(), after.ap50(orig.class_id).unwrap()))
}

#[test]
#[ignore = "fails: a lower-confidence duplicate may claim a second, overlapping ground truth"]
fn duplicate_tp_never_increases_ap() {
    let mut checked = 0;
    for seed in 0..1000 {
        if let Some((before, after)) = duplicate_tp_perturbation(seed) {
            assert!(after <= before + 1e-12, "seed {seed}: {before} -> {after}");
            checked += 1;
        }
    }
    assert!(checked > 500);
}


#[test]
fn duplicate_can_claim_an_overlapping_ground_truth() {
    let gts = vec![vec![
        DetBox::new(65.0, 42.7, 10.3, 16.6, 0, 1.0),
        DetBox::new(64.2, 42.8, 7.4, 18.3, 0, 1.0),
    ]];
    let tp = DetBox::new(63.5, 43.0, 7.2, 18.4, 0, 0.5);
    let before = evaluate(&[vec![tp]], &gts, 1, ApMethod::Coco101).unwrap();
    let dup = DetBox { confidence: 0.2, ..tp };
    let after = evaluate(&[vec![tp, dup]], &gts, 1, ApMethod::Coco101).unwrap();
    assert_eq!(after.num_matched, 2);
    assert!(after.map50 > before.map50);
}
