use lungsynth::maskcodec::BoundingBox;
use lungsynth::metrics::{
    average_precision, fid, gaussian_stats, greedy_match, iou, map_thresholds, mean_ap, precision_recall, psnr,
    Detection, EmbeddingSet, GroundTruth,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    BoundingBox {
        x: rng.random_range(0..8),
        y: rng.random_range(0..8),
        w: rng.random_range(1..6),
        h: rng.random_range(1..6),
    }
}

/// Largest number of one-to-one detection/ground-truth pairs with IoU ≥ τ,
/// by exhaustive search.
fn optimal_matches(dets: &[Detection], gts: &[GroundTruth], tau: f64, i: usize, taken: &mut Vec<bool>) -> usize {
    if i == dets.len() {
        return 0;
    }
    let mut best = optimal_matches(dets, gts, tau, i + 1, taken);
    for j in 0..gts.len() {
        if !taken[j] && iou(&dets[i].bbox, &gts[j].bbox) >= tau {
            taken[j] = true;
            best = best.max(1 + optimal_matches(dets, gts, tau, i + 1, taken));
            taken[j] = false;
        }
    }
    best
}

/// Score-ordered greedy matching written independently of the library.
fn reference_greedy(dets: &[Detection], gts: &[GroundTruth], tau: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for i in order {
        let candidates = (0..gts.len()).filter(|&j| !taken[j]).map(|j| (j, iou(&dets[i].bbox, &gts[j].bbox)));
        let mut best: Option<(usize, f64)> = None;
        for (j, v) in candidates {
            if v >= tau && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

#[test]
fn greedy_matcher_against_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut disagreements = 0;
    for _ in 0..200 {
        let nd = rng.random_range(0..=4);
        let ng = rng.random_range(0..=4);
        let dets: Vec<Detection> = (0..nd)
            .map(|_| Detection {
                image_id: 0,
                bbox: random_box(&mut rng),
                score: rng.random(),
            })
            .collect();
        let gts: Vec<GroundTruth> = (0..ng)
            .map(|_| GroundTruth {
                image_id: 0,
                bbox: random_box(&mut rng),
            })
            .collect();
        let tau = [0.1, 0.3, 0.5][rng.random_range(0..3)];
        let greedy = greedy_match(&dets, &gts, tau);
        let mut by_det = vec![None; nd];
        for (i, m) in &greedy {
            by_det[*i] = *m;
        }
        assert_eq!(by_det, reference_greedy(&dets, &gts, tau));
        let tp = by_det.iter().filter(|m| m.is_some()).count();
        let best = optimal_matches(&dets, &gts, tau, 0, &mut vec![false; ng]);
        assert!(tp <= best);
        if tp != best {
            disagreements += 1;
        }
        let (p, r) = precision_recall(&dets, &gts, tau);
        let expect_p = if nd == 0 { 0.0 } else { tp as f64 / nd as f64 };
        let expect_r = if ng == 0 { 0.0 } else { tp as f64 / ng as f64 };
        assert_eq!((p, r), (expect_p, expect_r));
    }
    println!("greedy below optimal on {disagreements} of 200 instances");
}

#[test]
fn mean_ap_is_mean_of_ten_aps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let dets: Vec<Detection> = (0..rng.random_range(1..6))
            .map(|_| Detection {
                image_id: rng.random_range(0..2),
                bbox: random_box(&mut rng),
                score: rng.random(),
            })
            .collect();
        let gts: Vec<GroundTruth> = (0..rng.random_range(1..6))
            .map(|_| GroundTruth {
                image_id: rng.random_range(0..2),
                bbox: random_box(&mut rng),
            })
            .collect();
        let aps: Vec<f64> = map_thresholds().iter().map(|&t| average_precision(&dets, &gts, t)).collect();
        assert!((mean_ap(&dets, &gts) - aps.iter().sum::<f64>() / 10.0).abs() < 1e-15);
    }
}

fn gaussian_sample(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> EmbeddingSet {
    let data = Array2::from_shape_fn((n, d), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z + shift
    });
    EmbeddingSet::new(data).unwrap()
}

#[test]
fn fid_shrinks_with_sample_size_and_sees_mean_shift() {
    let d = 8;
    let mut means = Vec::new();
    for n in [64, 256, 1024] {
        let mut total = 0.0;
        for trial in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let a = gaussian_stats(&gaussian_sample(&mut rng, n, d, 0.0)).unwrap();
            let b = gaussian_stats(&gaussian_sample(&mut rng, n, d, 0.0)).unwrap();
            total += fid(&a, &b).unwrap();
        }
        means.push(total / 5.0);
    }
    assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = gaussian_stats(&gaussian_sample(&mut rng, 1024, d, 0.0)).unwrap();
    let b = gaussian_stats(&gaussian_sample(&mut rng, 1024, d, 0.0)).unwrap();
    let shifted = gaussian_stats(&gaussian_sample(&mut rng, 1024, d, 1.0 / (d as f64).sqrt())).unwrap();
    assert!(fid(&a, &b).unwrap() < fid(&a, &shifted).unwrap());
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array2::from_shape_fn((32, 32), |_| rng.random_range(0.0..255.0));
    let noise: Array2<f64> = Array2::from_shape_fn((32, 32), |_| StandardNormal.sample(&mut rng));
    let scores: Vec<f64> = [1.0, 4.0, 16.0]
        .iter()
        .map(|a| psnr(&x, &(&x + &(&noise * *a)), 255.0).unwrap())
        .collect();
    assert!(scores[0] > scores[1] && scores[1] > scores[2]);
}
