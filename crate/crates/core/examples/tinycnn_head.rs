// A small CNN classifier head: build, save, reload, classify, explain.
//
//     cargo run --example tinycnn_head

use fundus_lime::adapters::{ModelAdapter, TinyCnnAdapter, TinyCnnSpec};
use fundus_lime::image::RasterImage;
use fundus_lime::perturb::{build_batch, BatchConfig};
use fundus_lime::segmentation::{segment_slic, SegmentationParams};
use fundus_lime::surrogate::{explain, predicted_class, RidgeConfig};

pub fn run_example() -> fundus_lime::Result<()> {
    // conv 3x3/2 -> relu -> flatten -> [dense -> bn -> relu -> dropout] x3 -> dense(2) -> softmax
    let spec = TinyCnnSpec::glaucoma_head(24, 24, &[100, 100, 100], 5)?;
    println!("{} layers", spec.layers().len());

    let dir = tempfile::tempdir().map_err(|e| fundus_lime::Error::io("tempdir", e))?;
    let path = dir.path().join("head.json");
    spec.save(&path)?;
    let model = TinyCnnAdapter::new("head", TinyCnnSpec::load(&path)?);

    // shading inside each region, otherwise mean fill changes nothing
    let image = RasterImage::from_fn(24, 24, |x, y| {
        let r = ((x as f64 - 12.0).powi(2) + (y as f64 - 12.0).powi(2)).sqrt();
        let t = (x + y) as f64 / 48.0;
        if r < 5.0 {
            [0.95, 0.9 - 0.3 * t, 0.7]
        } else {
            [0.5 + 0.4 * t, 0.25, 0.1 + 0.2 * t]
        }
    })?;
    let p = model.predict_one(&image)?;
    println!(
        "P(non-glaucoma) = {:.4}, P(glaucoma) = {:.4}",
        p.as_slice()[0],
        p.as_slice()[1]
    );
    assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let params = SegmentationParams {
        target_segments: 12,
        ..SegmentationParams::default()
    };
    let map = segment_slic(&image, &params)?;
    let config = BatchConfig {
        samples: 200,
        ..BatchConfig::default()
    };
    let batch = build_batch(&image, &map, &config, &model)?;
    let explanation = explain(&batch, &predicted_class(&batch)?, &RidgeConfig::default(), model.id())?;
    print!("{}", explanation.render_text());
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
