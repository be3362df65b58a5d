// Deletion curve: remove the highest-weighted segments first and watch the
// model's confidence fall. The monotone oracle scores the fraction of a disk
// left intact, so the curve can only go down.
//
//     cargo run --example deletion_curve

use fundus_lime::adapters::{ModelAdapter, MonotoneOracle};
use fundus_lime::evaluate::deletion_curve;
use fundus_lime::image::ClassLabel;
use fundus_lime::image::RasterImage;
use fundus_lime::perturb::{build_batch, BatchConfig};
use fundus_lime::segmentation::segment_grid;
use fundus_lime::surrogate::{explain, RidgeConfig};
use rand::{Rng, SeedableRng};

pub fn run_example() -> fundus_lime::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let image = RasterImage::from_fn(24, 24, |_, _| [rng.random(), rng.random(), rng.random()])?;
    let map = segment_grid(&image, 4, 4)?;
    let model = MonotoneOracle::disk(image.clone(), 8.0, 10.0, 6.0)?;

    let batch = build_batch(
        &image,
        &map,
        &BatchConfig {
            samples: 400,
            ..BatchConfig::default()
        },
        &model,
    )?;
    let explanation = explain(&batch, &ClassLabel::glaucoma(), &RidgeConfig::default(), model.id())?;
    let curve = deletion_curve(&image, &map, &explanation, &model, map.segment_count())?;

    for (step, p) in curve.iter().enumerate() {
        println!("{step:>2} removed: {p:.3}");
    }
    assert!(curve.windows(2).all(|w| w[1] <= w[0]));
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
