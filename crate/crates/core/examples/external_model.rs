// Explaining a model that lives in another process. The child reads one JSON
// request per line ({"id", "image": base64 PNG}) and answers {"id", "probs"}.
// Here the child is the small Python stub used by the tests.
//
//     cargo run --example external_model

use std::time::Duration;

use fundus_lime::adapters::{ModelAdapter, ProcessAdapter};
use fundus_lime::image::RasterImage;
use fundus_lime::perturb::{build_batch, BatchConfig};
use fundus_lime::segmentation::segment_grid;
use fundus_lime::surrogate::{explain, predicted_class, RidgeConfig};

const STUB: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/stub_server.py");

pub fn run_example() -> fundus_lime::Result<()> {
    let model = ProcessAdapter::spawn(&format!("python3 '{STUB}' normal"), Duration::from_secs(30))?;

    // one bright quadrant; the stub scores brightness
    let image = RasterImage::from_fn(16, 16, |x, y| if x < 8 && y < 8 { [0.9; 3] } else { [0.2; 3] })?;
    let map = segment_grid(&image, 2, 2)?;
    let config = BatchConfig {
        samples: 64,
        policy: fundus_lime::perturb::FusionPolicy::fixed([0.0; 3])?,
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
