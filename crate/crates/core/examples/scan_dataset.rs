// Build a dataset manifest from class folders and write it out.
//
//     cargo run --example scan_dataset

use std::fs;

use fundus_lime::dataset::{scan_dataset, DatasetManifest};
use fundus_lime::Error;

pub fn run_example() -> fundus_lime::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
    let root = dir.path();
    for (folder, n) in [("glaucoma", 3), ("non-glaucoma", 5)] {
        let sub = root.join(folder);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for i in 0..n {
            let file = sub.join(format!("{i}.jpg"));
            fs::write(&file, b"").map_err(|e| Error::io(&file, e))?;
        }
    }

    let manifest = scan_dataset(root)?;
    for (class, count) in manifest.class_counts() {
        println!("{:<13} {count}", class.name);
    }
    assert_eq!(manifest.len(), 8);

    let out = root.join("manifest.json");
    manifest.save_json(&out)?;
    assert_eq!(DatasetManifest::load_json(&out)?, manifest);
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
