// Classification report from a JSON Lines prediction log.
//
//     cargo run --example evaluate_log

use std::io::Cursor;

use fundus_lime::evaluate::{misclassification_report, parse_prediction_log, Split};

pub fn run_example() -> fundus_lime::Result<()> {
    // 151 glaucoma and 151 healthy validation images, 16 mistakes
    let mut log = String::new();
    for i in 0..302u32 {
        let label = u8::from(i < 151);
        let wrong = i % 19 == 0;
        let p1 = if (label == 1) != wrong { 0.8 } else { 0.2 };
        log.push_str(&format!(
            "{{\"sample_id\":\"img{i:03}.jpg\",\"true_label\":{label},\"probs\":[{},{p1}]}}\n",
            1.0 - p1
        ));
    }
    let records = parse_prediction_log(Cursor::new(log))?;
    let report = misclassification_report(&records, None, "resnet50", Split::Valid)?;
    print!("{}", report.render_text());
    assert_eq!(report.accuracy_percent, "94.70%");
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
