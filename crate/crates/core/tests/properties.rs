use fundus_lime::adapters::nn::softmax;
use fundus_lime::evaluate::format_percent;
use fundus_lime::image::RasterImage;
use fundus_lime::perturb::{
    apply_mask, kernel_weight, mask_distance, sample_masks, segment_means, FusionPolicy, MaskVector,
};
use fundus_lime::segmentation::{grid_map, segment_slic, SegmentMap, SegmentationParams};
use fundus_lime::surrogate::fit_weighted_ridge;
use proptest::prelude::*;

fn image_strategy() -> impl Strategy<Value = RasterImage> {
    (2usize..20, 2usize..20).prop_flat_map(|(w, h)| {
        prop::collection::vec(0.0f64..=1.0, w * h * 3).prop_map(move |data| RasterImage::new(w, h, data).unwrap())
    })
}

// independent 4-neighbour flood fill: number of connected regions of equal label
fn regions(map: &SegmentMap) -> usize {
    let (w, h) = (map.width(), map.height());
    let labels = map.labels();
    let mut seen = vec![false; w * h];
    let mut count = 0;
    for start in 0..w * h {
        if seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut next = Vec::new();
            if x > 0 {
                next.push(i - 1)
            }
            if x + 1 < w {
                next.push(i + 1)
            }
            if y > 0 {
                next.push(i - w)
            }
            if y + 1 < h {
                next.push(i + w)
            }
            for j in next {
                if !seen[j] && labels[j] == labels[i] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slic_labels_are_complete_and_connected(
        img in image_strategy(),
        k in 1usize..12,
        m in 0.5f64..30.0,
        iters in 1usize..6,
    ) {
        let params = SegmentationParams { target_segments: k.min(img.pixel_count()), compactness: m, max_iterations: iters, seed: 0 };
        let map = segment_slic(&img, &params).unwrap();
        let d = map.segment_count();
        let mut used = vec![false; d];
        for &l in map.labels() {
            prop_assert!((l as usize) < d);
            used[l as usize] = true;
        }
        prop_assert!(used.iter().all(|&u| u));
        prop_assert_eq!(regions(&map), d);
        prop_assert_eq!(segment_slic(&img, &params).unwrap(), map);
    }

    #[test]
    fn segment_map_round_trips(w in 1usize..30, h in 1usize..30, r in 1usize..5, c in 1usize..5) {
        let map = grid_map(w, h, r.min(h), c.min(w)).unwrap();
        let json = serde_json::to_string(&map).unwrap();
        prop_assert_eq!(&serde_json::from_str::<SegmentMap>(&json).unwrap(), &map);
        prop_assert_eq!(&SegmentMap::decode_label_png(&map.encode_label_png().unwrap()).unwrap(), &map);
    }

    #[test]
    fn masks_are_reproducible(d in 1usize..40, n in 2usize..60, seed in any::<u64>()) {
        let a = sample_masks(d, n, seed).unwrap();
        prop_assert_eq!(a.len(), n);
        prop_assert!(a[0].bits().iter().all(|&b| b));
        prop_assert!(a.iter().all(|m| m.len() == d));
        prop_assert_eq!(a, sample_masks(d, n, seed).unwrap());
    }

    #[test]
    fn kernel_falls_with_distance(bits in prop::collection::vec(any::<bool>(), 2..30), sigma in 0.05f64..2.0) {
        let ones = MaskVector::ones(bits.len());
        let m = MaskVector::from_bits(bits.clone());
        let dist = mask_distance(&m, &ones).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&dist));
        // switching one more segment off never brings the sample closer
        if let Some(i) = bits.iter().position(|&b| b) {
            let mut fewer = m.clone();
            fewer.set(i, false);
            let d2 = mask_distance(&fewer, &ones).unwrap();
            prop_assert!(d2 >= dist - 1e-12);
            prop_assert!(kernel_weight(d2, sigma).unwrap() <= kernel_weight(dist, sigma).unwrap() + 1e-12);
        }
    }

    #[test]
    fn mean_fill_only_touches_masked_segments(img in image_strategy(), seed in any::<u64>()) {
        let map = grid_map(img.width(), img.height(), 2.min(img.height()), 2.min(img.width())).unwrap();
        let d = map.segment_count();
        let mask = sample_masks(d, 2, seed).unwrap().pop().unwrap();
        prop_assert_eq!(&apply_mask(&img, &map, &MaskVector::ones(d), FusionPolicy::SegmentMean).unwrap(), &img);
        let out = apply_mask(&img, &map, &mask, FusionPolicy::SegmentMean).unwrap();
        let means = segment_means(&img, &map).unwrap();
        for (i, &l) in map.labels().iter().enumerate() {
            let expect = if mask.get(l as usize) { img.pixel_at(i) } else { means[l as usize] };
            prop_assert_eq!(out.pixel_at(i), expect);
        }
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0) {
        let p = softmax(&logits).unwrap();
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn percent_is_exact_half_up(a in 0u64..10_000, b in 1u64..10_000) {
        let a = a.min(b);
        let s = format_percent(a, b);
        prop_assert!(s.ends_with('%'));
        let v: f64 = s.trim_end_matches('%').parse().unwrap();
        prop_assert!((v - 100.0 * a as f64 / b as f64).abs() <= 0.005 + 1e-9);
        // exact: hundredths = floor((10000 a + b/2) / b) using integers only
        let hundredths = (20_000 * a + b) / (2 * b);
        prop_assert_eq!(s, format!("{}.{:02}%", hundredths / 100, hundredths % 100));
    }

    #[test]
    fn ridge_penalty_shrinks_coefficients(
        rows in prop::collection::vec((prop::collection::vec(any::<bool>(), 4), -1.0f64..1.0, 0.1f64..1.0), 12..40),
        lambda in 0.01f64..10.0,
    ) {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| r.0.iter().map(|&b| f64::from(u8::from(b))).collect()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let w: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let norm = |c: &[f64]| c.iter().map(|v| v * v).sum::<f64>();
        let small = fit_weighted_ridge(&x, &y, &w, lambda).unwrap();
        let big = fit_weighted_ridge(&x, &y, &w, lambda * 4.0).unwrap();
        prop_assert!(norm(&big.coefficients) <= norm(&small.coefficients) + 1e-12);
        prop_assert!(small.diagnostics.residual < 1e-8);
    }
}
