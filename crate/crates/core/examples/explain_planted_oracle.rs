// End-to-end explanation against a model whose answer we know: the planted
// oracle says "glaucoma" only while one grid cell is left untouched, so the
// surrogate should put that cell first.
//
//     cargo run --example explain_planted_oracle

use fundus_lime::adapters::{ModelAdapter, PlantedOracle, PlantedOracleSpec};
use fundus_lime::evaluate::{pointing_game, PointingResult};
use fundus_lime::image::RasterImage;
use fundus_lime::overlay::render_overlay;
use fundus_lime::perturb::{build_batch, BatchConfig};
use fundus_lime::segmentation::segment_grid;
use fundus_lime::surrogate::{explain, predicted_class, RidgeConfig};
use rand::{Rng, SeedableRng};

pub fn run_example() -> fundus_lime::Result<()> {
    // texture matters: a flat cell looks the same after mean fill
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let image = RasterImage::from_fn(32, 16, |_, _| [rng.random(), rng.random(), rng.random()])?;
    let map = segment_grid(&image, 2, 4)?;

    let key = 6;
    let oracle = PlantedOracle::new(PlantedOracleSpec::new(map.clone(), key)?, image.clone())?;
    let config = BatchConfig {
        samples: 500,
        seed: 11,
        ..BatchConfig::default()
    };
    let batch = build_batch(&image, &map, &config, &oracle)?;
    let target = predicted_class(&batch)?;
    let explanation = explain(&batch, &target, &RidgeConfig::default(), oracle.id())?;

    print!("{}", explanation.render_text());
    assert_eq!(pointing_game(&explanation, key), PointingResult::Hit);

    let overlay = render_overlay(&image, &map, &explanation, 1)?;
    assert_eq!(overlay.width(), image.width());
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
