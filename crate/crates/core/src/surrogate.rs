//! Locally weighted linear surrogate fitted over mask bits.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ClassLabel;
use crate::perturb::PerturbationBatch;

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_TOP_K: usize = 5;

/// Eigenvalues below this fraction of the largest are treated as zero when `lambda = 0`.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeConfig {
    pub lambda: f64,
    pub top_k: usize,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            top_k: DEFAULT_TOP_K,
        }
    }
}

impl RidgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::contract(format!(
                "ridge penalty must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.top_k == 0 {
            return Err(Error::contract("top_k must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Max-norm residual of the normal equations at the returned solution.
    pub residual: f64,
    /// The unpenalized system was rank deficient; the minimum-norm solution was returned.
    pub singular: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub diagnostics: FitDiagnostics,
}

fn check_inputs(x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<usize> {
    let n = x.len();
    if n < 2 {
        return Err(Error::contract(format!("need at least 2 samples, got {n}")));
    }
    if y.len() != n || w.len() != n {
        return Err(Error::contract(format!(
            "design has {n} rows but {} targets and {} weights",
            y.len(),
            w.len()
        )));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::contract("design rows must share a non-zero length"));
    }
    if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::contract("sample weights must be finite and non-negative"));
    }
    if !w.iter().any(|v| *v > 0.0) {
        return Err(Error::contract("all sample weights are zero"));
    }
    if y.iter().any(|v| !v.is_finite()) || x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::contract("design and targets must be finite"));
    }
    Ok(d)
}

fn weighted_mean(values: impl Iterator<Item = f64>, w: &[f64], sw: f64) -> f64 {
    values.zip(w).map(|(v, wi)| v * wi).sum::<f64>() / sw
}

/// Minimizes `sum_i w_i (y_i - b0 - x_i . b)^2 + lambda |b|^2` with the intercept unpenalized.
///
/// Solved through the normal equations of the weighted-centered problem,
/// `(Xc' W Xc + lambda I) b = Xc' W yc`, followed by one step of iterative refinement.
/// With `lambda = 0` and a rank-deficient design the minimum-norm solution is returned and
/// flagged in the diagnostics.
pub fn fit_weighted_ridge(x: &[Vec<f64>], y: &[f64], w: &[f64], lambda: f64) -> Result<RidgeFit> {
    let d = check_inputs(x, y, w)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::contract(format!("ridge penalty must be >= 0, got {lambda}")));
    }
    let sw: f64 = w.iter().sum();
    let x_mean: Vec<f64> = (0..d).map(|j| weighted_mean(x.iter().map(|r| r[j]), w, sw)).collect();
    let y_mean = weighted_mean(y.iter().copied(), w, sw);

    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut b = DVector::<f64>::zeros(d);
    let mut xc = vec![0.0; d];
    for ((row, &yi), &wi) in x.iter().zip(y).zip(w) {
        if wi == 0.0 {
            continue;
        }
        for j in 0..d {
            xc[j] = row[j] - x_mean[j];
        }
        let yc = yi - y_mean;
        for j in 0..d {
            let wx = wi * xc[j];
            b[j] += wx * yc;
            for k in j..d {
                a[(j, k)] += wx * xc[k];
            }
        }
    }
    for j in 0..d {
        for k in 0..j {
            a[(j, k)] = a[(k, j)];
        }
        a[(j, j)] += lambda;
    }

    let solver = Solver::new(&a, lambda);
    let mut beta = solver.solve(&b);
    let r = &b - &a * &beta;
    beta += solver.solve(&r);
    let residual = (&a * &beta - &b).amax();

    let intercept = y_mean - beta.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    Ok(RidgeFit {
        coefficients: beta.iter().copied().collect(),
        intercept,
        diagnostics: FitDiagnostics {
            residual,
            singular: solver.singular,
        },
    })
}

enum Factor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    /// Pseudo-inverse through the eigen decomposition.
    Eigen {
        vectors: DMatrix<f64>,
        inv_values: DVector<f64>,
    },
}

struct Solver {
    factor: Factor,
    singular: bool,
}

impl Solver {
    fn new(a: &DMatrix<f64>, lambda: f64) -> Self {
        if lambda > 0.0 {
            if let Some(ch) = a.clone().cholesky() {
                return Self {
                    factor: Factor::Cholesky(ch),
                    singular: false,
                };
            }
        }
        let eig = a.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax();
        let tol = RANK_TOLERANCE * max.max(f64::MIN_POSITIVE);
        let singular = eig.eigenvalues.iter().any(|&v| v <= tol);
        if !singular {
            if let Some(ch) = a.clone().cholesky() {
                return Self {
                    factor: Factor::Cholesky(ch),
                    singular: false,
                };
            }
        }
        let inv_values = eig.eigenvalues.map(|v| if v > tol { 1.0 / v } else { 0.0 });
        Self {
            factor: Factor::Eigen {
                vectors: eig.eigenvectors,
                inv_values,
            },
            singular,
        }
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Factor::Cholesky(ch) => ch.solve(rhs),
            Factor::Eigen { vectors, inv_values } => {
                let proj = vectors.transpose() * rhs;
                vectors * proj.component_mul(inv_values)
            }
        }
    }
}

/// Weighted coefficient of determination `1 - SS_res / SS_tot`.
pub fn weighted_r2(x: &[Vec<f64>], y: &[f64], w: &[f64], coefficients: &[f64], intercept: f64) -> Result<f64> {
    let d = check_inputs(x, y, w)?;
    if coefficients.len() != d {
        return Err(Error::contract(format!(
            "{} coefficients for {d} features",
            coefficients.len()
        )));
    }
    let sw: f64 = w.iter().sum();
    let y_mean = weighted_mean(y.iter().copied(), w, sw);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for ((row, &yi), &wi) in x.iter().zip(y).zip(w) {
        let pred = intercept + row.iter().zip(coefficients).map(|(a, b)| a * b).sum::<f64>();
        ss_res += wi * (yi - pred).powi(2);
        ss_tot += wi * (yi - y_mean).powi(2);
    }
    if ss_tot <= zero_variance_threshold(sw, y_mean) {
        return Err(Error::UndefinedR2);
    }
    Ok(1.0 - ss_res / ss_tot)
}

fn zero_variance_threshold(sw: f64, mean: f64) -> f64 {
    f64::EPSILON * sw * mean.abs().max(1.0).powi(2)
}

/// Mask bits of a batch as a 0/1 design matrix.
pub fn design_from_batch(batch: &PerturbationBatch) -> Vec<Vec<f64>> {
    batch
        .masks
        .iter()
        .map(|m| m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub samples: usize,
    pub sigma: f64,
    pub lambda: f64,
    pub top_k: usize,
    pub model_id: String,
}

/// Per-segment contributions to one class probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub target_class: ClassLabel,
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// `None` when the target is constant over the batch.
    pub r2: Option<f64>,
    /// Up to `top_k` segment ids, by decreasing `|weight|` (ties: smaller id).
    pub selected: Vec<usize>,
    /// The model's output did not vary over the batch; weights carry no information.
    pub degenerate: bool,
    pub diagnostics: FitDiagnostics,
    pub provenance: Provenance,
}

impl Explanation {
    pub fn segment_count(&self) -> usize {
        self.weights.len()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Plain-text table of the selected segments and their signed weights.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "target class: {} ({})",
            self.target_class.name, self.target_class.value
        );
        let r2 = self.r2.map_or_else(|| "undefined".to_string(), |r| format!("{r:.4}"));
        let _ = writeln!(out, "intercept: {:+.6}  r2: {r2}", self.intercept);
        if self.degenerate {
            let _ = writeln!(out, "degenerate: model output is constant over the samples");
        }
        let _ = writeln!(out, "{:>4}  {:>7}  {:>10}", "rank", "segment", "weight");
        for (rank, &seg) in self.selected.iter().enumerate() {
            let _ = writeln!(out, "{:>4}  {:>7}  {:>+10.6}", rank + 1, seg, self.weights[seg]);
        }
        out
    }
}

/// Segment ids ordered by decreasing `|weight|`, ties broken by smaller id.
pub fn rank_by_magnitude(weights: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..weights.len()).collect();
    ids.sort_by(|&a, &b| weights[b].abs().total_cmp(&weights[a].abs()).then(a.cmp(&b)));
    ids
}

/// Class predicted for the unperturbed image (first sample of the batch).
pub fn predicted_class(batch: &PerturbationBatch) -> Result<ClassLabel> {
    let first = batch
        .predictions
        .first()
        .ok_or_else(|| Error::contract("batch has no predictions"))?;
    ClassLabel::from_index(first.argmax() as u8)
}

/// Fits the surrogate for `target_class` on a filled batch.
pub fn explain(
    batch: &PerturbationBatch,
    target_class: &ClassLabel,
    config: &RidgeConfig,
    model_id: &str,
) -> Result<Explanation> {
    config.validate()?;
    batch.validate()?;
    let class = usize::from(target_class.value);
    let y: Vec<f64> = batch
        .predictions
        .iter()
        .map(|p| {
            p.get(class)
                .ok_or_else(|| Error::contract(format!("prediction has no class {class}")))
        })
        .collect::<Result<_>>()?;
    let x = design_from_batch(batch);
    let w = &batch.weights;
    let d = batch.segment_count();

    let provenance = Provenance {
        seed: batch.seed,
        samples: batch.len(),
        sigma: batch.kernel_width,
        lambda: config.lambda,
        top_k: config.top_k,
        model_id: model_id.to_string(),
    };

    let sw: f64 = w.iter().sum();
    let y_mean = weighted_mean(y.iter().copied(), w, sw);
    let ss_tot: f64 = y.iter().zip(w).map(|(v, wi)| wi * (v - y_mean).powi(2)).sum();
    if ss_tot <= zero_variance_threshold(sw, y_mean) {
        return Ok(Explanation {
            target_class: target_class.clone(),
            weights: vec![0.0; d],
            intercept: y_mean,
            r2: None,
            selected: Vec::new(),
            degenerate: true,
            diagnostics: FitDiagnostics {
                residual: 0.0,
                singular: false,
            },
            provenance,
        });
    }

    let fit = fit_weighted_ridge(&x, &y, w, config.lambda)?;
    let r2 = weighted_r2(&x, &y, w, &fit.coefficients, fit.intercept)?;
    let mut selected = rank_by_magnitude(&fit.coefficients);
    selected.truncate(config.top_k.min(d));
    Ok(Explanation {
        target_class: target_class.clone(),
        weights: fit.coefficients,
        intercept: fit.intercept,
        r2: Some(r2),
        selected,
        degenerate: false,
        diagnostics: fit.diagnostics,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ProbabilityVector;
    use crate::perturb::{kernel_weight, mask_distance, sample_masks, MaskVector};

    #[test]
    fn constant_target() {
        let x = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let fit = fit_weighted_ridge(&x, &[0.4; 3], &[1.0; 3], 0.0).unwrap();
        assert!(fit.coefficients.iter().all(|c| c.abs() < 1e-12));
        assert!((fit.intercept - 0.4).abs() < 1e-12);
    }

    #[test]
    fn exact_interpolation() {
        let x = vec![vec![0.0], vec![1.0]];
        let fit = fit_weighted_ridge(&x, &[0.0, 1.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
        assert!(!fit.diagnostics.singular);
    }

    #[test]
    fn zero_weights_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(fit_weighted_ridge(&x, &[0.0, 1.0], &[0.0, 0.0], 0.0).is_err());
        assert!(fit_weighted_ridge(&x[..1], &[0.0], &[1.0], 0.0).is_err());
        assert!(fit_weighted_ridge(&x, &[0.0, 1.0], &[1.0, -1.0], 0.0).is_err());
        assert!(fit_weighted_ridge(&x, &[0.0, 1.0], &[1.0, 1.0], -0.5).is_err());
    }

    #[test]
    fn duplicate_columns_give_min_norm() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]];
        let y = [0.0, 2.0, 2.0, 0.0];
        let fit = fit_weighted_ridge(&x, &y, &[1.0; 4], 0.0).unwrap();
        assert!(fit.diagnostics.singular);
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-9);
        assert!((fit.coefficients[1] - 1.0).abs() < 1e-9);
        assert!(fit.diagnostics.residual < 1e-8);
    }

    #[test]
    fn r2_cases() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0]];
        let y = [1.0, 3.0, 5.0];
        let w = [1.0, 2.0, 1.0];
        assert!((weighted_r2(&x, &y, &w, &[2.0], 1.0).unwrap() - 1.0).abs() < 1e-15);
        // weighted mean of y = (1 + 6 + 5) / 4 = 3
        assert_eq!(weighted_r2(&x, &y, &w, &[0.0], 3.0).unwrap(), 0.0);
        // hand evaluation with b = 1.5, b0 = 1.5: preds 1.5, 3, 4.5
        // ss_res = 0.25 + 0 + 0.25 = 0.5; ss_tot = 4 + 0 + 4 = 8
        let r2 = weighted_r2(&x, &y, &w, &[1.5], 1.5).unwrap();
        assert!((r2 - (1.0 - 0.5 / 8.0)).abs() < 1e-15);
        assert!(matches!(
            weighted_r2(&x, &[2.0; 3], &w, &[0.0], 2.0),
            Err(Error::UndefinedR2)
        ));
    }

    fn batch_from(masks: Vec<MaskVector>, probs: impl Fn(&MaskVector) -> f64) -> PerturbationBatch {
        let ones = MaskVector::ones(masks[0].len());
        let weights = masks
            .iter()
            .map(|m| kernel_weight(mask_distance(m, &ones).unwrap(), 0.25).unwrap())
            .collect();
        let predictions = masks
            .iter()
            .map(|m| {
                let p = probs(m);
                ProbabilityVector::new(vec![1.0 - p, p]).unwrap()
            })
            .collect();
        PerturbationBatch {
            masks,
            weights,
            predictions,
            seed: 1,
            kernel_width: 0.25,
        }
    }

    #[test]
    fn explain_recovers_linear_key_segment() {
        let masks = sample_masks(8, 300, 11).unwrap();
        let batch = batch_from(masks, |m| if m.get(5) { 0.9 } else { 0.1 });
        let e = explain(&batch, &ClassLabel::glaucoma(), &RidgeConfig::default(), "test").unwrap();
        assert_eq!(e.selected[0], 5);
        assert!(e.weights[5] > 0.0);
        assert_eq!(e.selected.len(), 5);
        assert!(e.r2.unwrap() <= 1.0);
        assert!(!e.degenerate);
        assert!(e.diagnostics.residual < 1e-8);
    }

    #[test]
    fn explain_constant_model_is_degenerate() {
        let masks = sample_masks(6, 50, 2).unwrap();
        let batch = batch_from(masks, |_| 0.7);
        let e = explain(&batch, &ClassLabel::glaucoma(), &RidgeConfig::default(), "const").unwrap();
        assert!(e.degenerate);
        assert!(e.weights.iter().all(|w| *w == 0.0));
        assert_eq!(e.r2, None);
        assert!(e.selected.is_empty());
        assert!(e.render_text().contains("undefined"));
    }

    #[test]
    fn ranking_ties_prefer_small_ids() {
        assert_eq!(rank_by_magnitude(&[0.5, -0.9, 0.5, 0.0]), vec![1, 0, 2, 3]);
    }

    #[test]
    fn top_k_clamped_to_segment_count() {
        let masks = sample_masks(3, 64, 4).unwrap();
        let batch = batch_from(masks, |m| if m.get(0) { 0.8 } else { 0.3 });
        let cfg = RidgeConfig { lambda: 0.5, top_k: 10 };
        let e = explain(&batch, &ClassLabel::glaucoma(), &cfg, "m").unwrap();
        assert_eq!(e.selected.len(), 3);
    }
}
