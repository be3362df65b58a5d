// The surrogate on its own: locality-weighted ridge over binary features.
//
//     cargo run --example weighted_ridge

use fundus_lime::surrogate::{fit_weighted_ridge, weighted_r2};

pub fn run_example() -> fundus_lime::Result<()> {
    // y = 0.1 + 0.7 x0 - 0.2 x2, all 8 rows of a 3-bit design
    let x: Vec<Vec<f64>> = (0..8u32)
        .map(|m| (0..3).map(|j| f64::from((m >> j) & 1)).collect())
        .collect();
    let y: Vec<f64> = x.iter().map(|r| 0.1 + 0.7 * r[0] - 0.2 * r[2]).collect();
    let w: Vec<f64> = (0..8).map(|i| 1.0 / (1.0 + f64::from(i))).collect();

    let exact = fit_weighted_ridge(&x, &y, &w, 0.0)?;
    println!(
        "lambda=0: coef {:.4?} intercept {:.4}",
        exact.coefficients, exact.intercept
    );
    assert!((exact.coefficients[0] - 0.7).abs() < 1e-9);

    // the penalty pulls coefficients toward zero
    let shrunk = fit_weighted_ridge(&x, &y, &w, 1.0)?;
    println!("lambda=1: coef {:.4?}", shrunk.coefficients);
    assert!(shrunk.coefficients[0].abs() < exact.coefficients[0].abs());

    let r2 = weighted_r2(&x, &y, &w, &shrunk.coefficients, shrunk.intercept)?;
    println!("weighted R^2 {r2:.4}, residual {:.1e}", shrunk.diagnostics.residual);
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
