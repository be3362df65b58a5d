// Superpixel segmentation of a synthetic fundus image.
//
//     cargo run --example segment_image

use fundus_lime::image::RasterImage;
use fundus_lime::segmentation::{segment_slic, segment_stats, SegmentationParams};

// orange-red retina, bright optic disc, paler cup
fn synthetic_fundus(size: usize) -> RasterImage {
    let c = size as f64 / 2.0;
    RasterImage::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 - c * 1.3, y as f64 - c);
        let r = (dx * dx + dy * dy).sqrt() / size as f64;
        if r < 0.06 {
            [0.98, 0.95, 0.8]
        } else if r < 0.14 {
            [0.95, 0.75, 0.45]
        } else {
            let shade = 0.8 - 0.3 * ((x as f64 - c).hypot(y as f64 - c) / c).min(1.0);
            [shade, 0.3 * shade, 0.1]
        }
    })
    .expect("non-empty image")
}

pub fn run_example() -> fundus_lime::Result<()> {
    let image = synthetic_fundus(64);
    let params = SegmentationParams {
        target_segments: 30,
        ..SegmentationParams::default()
    };
    let map = segment_slic(&image, &params)?;
    println!("{} superpixels for a 64x64 image", map.segment_count());

    // every segment is one 4-connected region
    assert_eq!(map.component_count(), map.segment_count());

    let stats = segment_stats(&map);
    let largest = stats.iter().max_by_key(|s| s.pixels).expect("at least one segment");
    println!(
        "largest: {} px around ({:.1}, {:.1})",
        largest.pixels, largest.centroid.0, largest.centroid.1
    );

    let dir = tempfile::tempdir().map_err(|e| fundus_lime::Error::io("tempdir", e))?;
    let json = dir.path().join("segments.json");
    map.save_json(&json)?;
    map.save_label_png(dir.path().join("segments.png"))?;
    let back = fundus_lime::segmentation::SegmentMap::load_json(&json)?;
    assert_eq!(back, map);
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
