// Acceptance checks, one PASS/FAIL line each. Runs without the libtest harness
// so the lines show up in plain `cargo test` output; exits non-zero on any FAIL.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fundus_lime::adapters::nn::{batchnorm_infer, conv2d, dense, softmax, BatchNorm, ConvKernel, Tensor3};
use fundus_lime::adapters::{ModelAdapter, MonotoneOracle, PlantedOracle, PlantedOracleSpec, TinyCnnSpec};
use fundus_lime::evaluate::{
    deletion_curve, misclassification_report, parse_prediction_log, pointing_game, PointingResult, Split,
};
use fundus_lime::image::{save_png, ClassLabel, RasterImage};
use fundus_lime::perturb::{build_batch, sample_masks, BatchConfig};
use fundus_lime::segmentation::{segment_grid, segment_slic, SegmentMap, SegmentationParams};
use fundus_lime::surrogate::{explain, fit_weighted_ridge, RidgeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn noise(w: usize, h: usize, rng: &mut ChaCha8Rng) -> RasterImage {
    RasterImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
}

fn planted_oracle_recovery() -> Outcome {
    let start = Instant::now();
    let mut hits = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let image = noise(32, 16, &mut rng);
        let map = segment_grid(&image, 2, 4).unwrap();
        let key = (seed % 8) as usize;
        let oracle = PlantedOracle::new(PlantedOracleSpec::new(map.clone(), key).unwrap(), image.clone()).unwrap();
        let config = BatchConfig {
            samples: 500,
            seed,
            kernel_width: 0.25,
            ..BatchConfig::default()
        };
        let batch = build_batch(&image, &map, &config, &oracle).unwrap();
        let ridge = RidgeConfig { lambda: 1.0, top_k: 5 };
        let e = explain(&batch, &ClassLabel::glaucoma(), &ridge, oracle.id()).unwrap();
        if pointing_game(&e, key) == PointingResult::Hit {
            hits += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: hits >= 99 && secs < 60.0,
        detail: format!("{hits}/100 planted segments ranked first, {secs:.1}s (need >=99, <60s)"),
    }
}

// Gaussian elimination with partial pivoting on the normal equations of
// y ~ b0 + X b, unweighted. Independent of the library solver.
#[allow(clippy::needless_range_loop)]
fn ols_oracle(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = x[0].len() + 1;
    let mut a = vec![vec![0.0; p + 1]; p];
    for (row, &yi) in x.iter().zip(y) {
        let z: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
        for i in 0..p {
            for j in 0..p {
                a[i][j] += z[i] * z[j];
            }
            a[i][p] += z[i] * yi;
        }
    }
    for col in 0..p {
        let piv = (col..p)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=p {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..p).map(|i| a[i][p] / a[i][i]).collect()
}

fn brute_force_surrogate() -> Outcome {
    let mut worst_gap: f64 = 0.0;
    let mut worst_residual: f64 = 0.0;
    let mut oracle_gap: f64 = 0.0;
    let mut fits = 0;
    for d in 2..=12usize {
        for trial in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(d as u64 * 100 + trial);
            let lin: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pairs: Vec<(usize, usize, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0..d),
                        rng.random_range(0..d),
                        rng.random_range(-0.2..0.2),
                    )
                })
                .collect();
            let f = |m: &[f64]| {
                0.3 + lin.iter().zip(m).map(|(a, b)| a * b).sum::<f64>()
                    + pairs.iter().map(|&(i, j, c)| c * m[i] * m[j]).sum::<f64>()
            };

            let all: Vec<Vec<f64>> = (0..1u32 << d)
                .map(|bits| (0..d).map(|j| f64::from((bits >> j) & 1)).collect())
                .collect();
            let y_all: Vec<f64> = all.iter().map(|m| f(m)).collect();
            let exact = fit_weighted_ridge(&all, &y_all, &vec![1.0; all.len()], 0.0).unwrap();
            let oracle = ols_oracle(&all, &y_all);
            oracle_gap = oracle_gap.max((exact.intercept - oracle[0]).abs());
            for j in 0..d {
                oracle_gap = oracle_gap.max((exact.coefficients[j] - oracle[j + 1]).abs());
            }

            let sampled: Vec<Vec<f64>> = sample_masks(d, 4096, 77 + trial)
                .unwrap()
                .iter()
                .map(|m| m.bits().iter().map(|&b| f64::from(u8::from(b))).collect())
                .collect();
            let y_s: Vec<f64> = sampled.iter().map(|m| f(m)).collect();
            let fit = fit_weighted_ridge(&sampled, &y_s, &vec![1.0; sampled.len()], 0.0).unwrap();
            for j in 0..d {
                worst_gap = worst_gap.max((fit.coefficients[j] - exact.coefficients[j]).abs());
            }
            worst_residual = worst_residual
                .max(exact.diagnostics.residual)
                .max(fit.diagnostics.residual);
            fits += 2;
        }
    }
    Outcome {
        pass: worst_gap <= 0.05 && worst_residual < 1e-8 && oracle_gap < 1e-9,
        detail: format!(
            "d=2..12: max |sampled - enumerated| = {worst_gap:.4} (<=0.05), max residual {worst_residual:.1e} over {fits} fits (<1e-8), enumeration vs elimination oracle {oracle_gap:.1e}"
        ),
    }
}

// count 4-connected regions by flood fill
fn regions(map: &SegmentMap) -> usize {
    let (w, h) = (map.width(), map.height());
    let labels = map.labels();
    let mut seen = vec![false; w * h];
    let mut count = 0;
    for s in 0..w * h {
        if seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        let mut stack = vec![s];
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let around = [
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
            ];
            for j in around.into_iter().flatten() {
                if !seen[j] && labels[j] == labels[i] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

fn segmentation_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(2..33), rng.random_range(2..33));
        // mix smooth blobs and noise so both regimes are exercised
        let smooth = rng.random_bool(0.5);
        let phase: f64 = rng.random_range(0.0..6.0);
        let image = if smooth {
            RasterImage::from_fn(w, h, |x, y| {
                let t = ((x as f64 * 0.4 + phase).sin() * (y as f64 * 0.3).cos() + 1.0) / 2.0;
                [t, 1.0 - t, 0.5]
            })
            .unwrap()
        } else {
            noise(w, h, &mut rng)
        };
        let params = SegmentationParams {
            target_segments: rng.random_range(1..=(w * h).min(60)),
            compactness: rng.random_range(0.1..40.0),
            max_iterations: rng.random_range(1..12),
            seed: rng.random(),
        };
        let map = segment_slic(&image, &params).unwrap();
        let d = map.segment_count();
        let mut sizes = vec![0usize; d];
        let mut ok = map.labels().len() == w * h;
        for &l in map.labels() {
            match sizes.get_mut(l as usize) {
                Some(s) => *s += 1,
                None => ok = false,
            }
        }
        ok &= sizes.iter().all(|&s| s > 0);
        ok &= regions(&map) == d;
        ok &= segment_slic(&image, &params).unwrap() == map;
        if !ok {
            violations += 1;
        }
    }
    Outcome {
        pass: violations == 0,
        detail: format!(
            "1000 random images/params, {violations} violations (complete, non-empty, 4-connected, deterministic)"
        ),
    }
}

fn rv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn cnn_numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(1..4);
        let (h, w) = (rng.random_range(k..9), rng.random_range(k..9));
        let (c, f, stride) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..3));
        let input = Tensor3::new(h, w, c, rv(&mut rng, h * w * c)).unwrap();
        let weights = rv(&mut rng, k * k * c * f);
        let bias = rv(&mut rng, f);
        let kernel = ConvKernel::new(k, c, f, weights.clone(), Some(bias.clone())).unwrap();
        let out = conv2d(&input, &kernel, stride).unwrap();
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        if (out.height, out.width, out.channels) != (oh, ow, f) {
            worst = f64::INFINITY;
            continue;
        }
        for oy in 0..oh {
            for ox in 0..ow {
                for ff in 0..f {
                    let mut acc = bias[ff];
                    for ky in 0..k {
                        for kx in 0..k {
                            for cc in 0..c {
                                let px = input.data[((oy * stride + ky) * w + ox * stride + kx) * c + cc];
                                acc += px * weights[((ky * k + kx) * c + cc) * f + ff];
                            }
                        }
                    }
                    worst = worst.max((out.data[(oy * ow + ox) * f + ff] - acc).abs());
                }
            }
        }

        let gamma = rv(&mut rng, c);
        let beta = rv(&mut rng, c);
        let mean = rv(&mut rng, c);
        let var: Vec<f64> = rv(&mut rng, c).iter().map(|v| v.abs() + 0.1).collect();
        let bn = BatchNorm::new(gamma.clone(), beta.clone(), mean.clone(), var.clone(), 1e-5).unwrap();
        let mut x = input.data.clone();
        batchnorm_infer(&mut x, &bn).unwrap();
        for (i, (&got, &orig)) in x.iter().zip(&input.data).enumerate() {
            let ch = i % c;
            let want = gamma[ch] * (orig - mean[ch]) / (var[ch] + 1e-5).sqrt() + beta[ch];
            worst = worst.max((got - want).abs());
        }

        let n_in = rng.random_range(1..8);
        let n_out = rng.random_range(1..5);
        let (dx, dw, db) = (rv(&mut rng, n_in), rv(&mut rng, n_in * n_out), rv(&mut rng, n_out));
        let got = dense(&dx, &dw, &db).unwrap();
        for o in 0..n_out {
            let want = db[o] + (0..n_in).map(|i| dw[o * n_in + i] * dx[i]).sum::<f64>();
            worst = worst.max((got[o] - want).abs());
        }

        let n = rng.random_range(1..6);
        let logits = rv(&mut rng, n);
        let p = softmax(&logits).unwrap();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        for (pi, li) in p.as_slice().iter().zip(&logits) {
            worst = worst.max((pi - li.exp() / z).abs());
        }
        worst_sum = worst_sum.max((p.as_slice().iter().sum::<f64>() - 1.0).abs());

        // extreme logits: no oracle, but still a distribution
        let wild: Vec<f64> = (0..4).map(|_| rng.random_range(-800.0..800.0)).collect();
        let p = softmax(&wild).unwrap();
        worst_sum = worst_sum.max((p.as_slice().iter().sum::<f64>() - 1.0).abs());
    }
    Outcome {
        pass: worst <= 1e-6 && worst_sum <= 1e-9,
        detail: format!(
            "200 random shapes: max op error {worst:.1e} (<=1e-6), max |sum softmax - 1| {worst_sum:.1e} (<=1e-9)"
        ),
    }
}

fn harness_arithmetic() -> Outcome {
    let log = |correct: usize| {
        let mut s = String::new();
        for i in 0..302usize {
            let label = u8::from(i % 2 == 0);
            let right = i < correct;
            let p1 = if (label == 1) == right { 0.9 } else { 0.1 };
            s.push_str(&format!(
                "{{\"sample_id\":\"v{i}\",\"true_label\":{label},\"probs\":[{},{p1}]}}\n",
                1.0 - p1
            ));
        }
        let records = parse_prediction_log(s.as_bytes()).unwrap();
        misclassification_report(&records, None, "resnet50", Split::Valid).unwrap()
    };
    let perfect = log(302);
    let near = log(286);
    let value = |s: &str| s.trim_end_matches('%').parse::<f64>().unwrap();
    let pass = perfect.accuracy_percent == "100.00%"
        && perfect.total_misclassified.count == 0
        && near.accuracy_percent == "94.70%"
        && (value(&near.accuracy_percent) - 94.71).abs() <= 0.02
        && near.total_misclassified.count == 16;
    Outcome {
        pass,
        detail: format!(
            "302/302 -> {} (0 misclassified), 286/302 -> {} vs 94.71 (+-0.02)",
            perfect.accuracy_percent, near.accuracy_percent
        ),
    }
}

fn explain_json(dir: &Path, model: &str, threads: Option<&str>, tag: &str) -> (Vec<u8>, Vec<u8>) {
    let e = format!("e-{tag}.json");
    let o = format!("o-{tag}.png");
    let mut args = vec![
        "explain",
        "--image",
        "eye.png",
        "--model",
        model,
        "--segments",
        "12",
        "--samples",
        "300",
        "--seed",
        "1234",
        "--explanation",
        &e,
        "--overlay",
        &o,
    ];
    if let Some(t) = threads {
        args.extend(["--threads", t]);
    }
    let out = Command::new(env!("CARGO_BIN_EXE_fundus-lime"))
        .current_dir(dir)
        .args(&args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (fs::read(dir.join(&e)).unwrap(), fs::read(dir.join(&o)).unwrap())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let image = RasterImage::from_fn(24, 24, |x, y| {
        let t = (x + y) as f64 / 48.0;
        [0.6 + 0.3 * t, 0.3 + 0.2 * rng.random::<f64>(), 0.1]
    })
    .unwrap();
    save_png(&image, dir.path().join("eye.png")).unwrap();
    TinyCnnSpec::glaucoma_head(24, 24, &[32, 32, 32], 3)
        .unwrap()
        .save(dir.path().join("head.json"))
        .unwrap();
    segment_grid(&image, 3, 3)
        .unwrap()
        .save_json(dir.path().join("grid.json"))
        .unwrap();

    let mut ok = true;
    let mut compared = 0;
    for model in ["tinycnn:head.json", "oracle:grid.json:4"] {
        let base = explain_json(dir.path(), model, Some("1"), "a");
        for (threads, tag) in [(Some("1"), "b"), (Some("4"), "c"), (Some("7"), "d"), (None, "e")] {
            ok &= explain_json(dir.path(), model, threads, tag) == base;
            compared += 1;
        }
    }
    Outcome {
        pass: ok,
        detail: format!("{compared} reruns (1, 4, 7 and default threads) byte-identical to a 1-thread run"),
    }
}

fn deletion_monotone() -> Outcome {
    let mut good = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = noise(20, 20, &mut rng);
        let map = if seed % 2 == 0 {
            segment_grid(&image, rng.random_range(2..5), rng.random_range(2..5)).unwrap()
        } else {
            let params = SegmentationParams {
                target_segments: rng.random_range(4..20),
                ..SegmentationParams::default()
            };
            segment_slic(&image, &params).unwrap()
        };
        let (cx, cy, r) = (
            rng.random_range(3.0..17.0),
            rng.random_range(3.0..17.0),
            rng.random_range(2.0..8.0),
        );
        let model = MonotoneOracle::disk(image.clone(), cx, cy, r).unwrap();
        let config = BatchConfig {
            samples: 200,
            seed,
            ..BatchConfig::default()
        };
        let batch = build_batch(&image, &map, &config, &model).unwrap();
        let e = explain(&batch, &ClassLabel::glaucoma(), &RidgeConfig::default(), model.id()).unwrap();
        let curve = deletion_curve(&image, &map, &e, &model, map.segment_count()).unwrap();
        if curve.windows(2).all(|w| w[1] <= w[0]) {
            good += 1;
        }
    }
    Outcome {
        pass: good == 100,
        detail: format!("{good}/100 seeded runs non-increasing"),
    }
}

fn main() {
    type Check = (&'static str, fn() -> Outcome);
    let checks: [Check; 7] = [
        ("planted-oracle recovery", planted_oracle_recovery),
        ("brute-force surrogate equivalence", brute_force_surrogate),
        ("segmentation invariants", segmentation_invariants),
        ("cnn numerics", cnn_numerics),
        ("harness arithmetic", harness_arithmetic),
        ("explain determinism", determinism),
        ("deletion-curve sanity", deletion_monotone),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let o = check();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
