//! Huber training loss and RMSE / R² evaluation metrics.

use std::fmt::Write as _;

use crate::dataio::{DatasetManifest, Split, TipLabels};
use crate::error::{Result, SimicError};
use crate::model::{PredictionMode, SimicModel};

/// Default Huber threshold, in normalized-target units.
pub const DEFAULT_DELTA: f64 = 1.0;

const TARGET_NAMES: [&str; 3] = ["width", "height", "radius"];

/// One Huber term: `e²/(2δ)` for `|e| ≤ δ`, otherwise `|e| − δ/2`.
pub fn huber_term(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        e * e / (2.0 * delta)
    } else {
        e.abs() - delta / 2.0
    }
}

/// Derivative of [`huber_term`] with respect to `e`.
pub fn huber_slope(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        e / delta
    } else {
        e.signum()
    }
}

fn check_lengths(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(SimicError::InvalidArgument(format!(
            "length mismatch: {} targets vs {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    Ok(())
}

/// Sum (or mean, with `mean`) of Huber terms over `e = y − ŷ`.
pub fn huber_loss(y: &[f64], y_hat: &[f64], delta: f64, mean: bool) -> Result<f64> {
    check_lengths(y, y_hat)?;
    if !(delta > 0.0) {
        return Err(SimicError::InvalidArgument(format!("Huber delta must be positive, got {delta}")));
    }
    let total: f64 = y.iter().zip(y_hat).map(|(a, b)| huber_term(a - b, delta)).sum();
    Ok(if mean && !y.is_empty() { total / y.len() as f64 } else { total })
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    if y.is_empty() {
        return Err(SimicError::InvalidArgument("RMSE of an empty set".into()));
    }
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r_squared(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    if y.len() < 2 {
        return Err(SimicError::InvalidArgument("R² needs at least two samples".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(SimicError::Numeric("R² undefined: targets have zero variance".into()));
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMetrics {
    pub target: &'static str,
    pub rmse: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub split: Split,
    pub mode: PredictionMode,
    pub n: usize,
    pub targets: Vec<TargetMetrics>,
}

impl MetricsReport {
    /// Metrics from µm-scale targets and predictions laid out `[N, outputs]`.
    pub fn compute(split: Split, mode: PredictionMode, truth: &[f64], predicted: &[f64]) -> Result<Self> {
        check_lengths(truth, predicted)?;
        let idx = mode.targets();
        let k = idx.len();
        let n = truth.len() / k;
        let column = |v: &[f64], j: usize| v.iter().skip(j).step_by(k).copied().collect::<Vec<_>>();
        let targets = idx
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let (y, p) = (column(truth, j), column(predicted, j));
                Ok(TargetMetrics {
                    target: TARGET_NAMES[t],
                    rmse: rmse(&y, &p)?,
                    r2: r_squared(&y, &p)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { split, mode, n, targets })
    }

    pub fn get(&self, target: &str) -> Option<&TargetMetrics> {
        self.targets.iter().find(|t| t.target == target)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,mode,n,target,rmse_um,r2\n");
        for t in &self.targets {
            let _ = writeln!(out, "{},{},{},{},{:?},{:?}", self.split, self.mode, self.n, t.target, t.rmse, t.r2);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("split={} mode={} n={}\n", self.split, self.mode, self.n);
        let _ = writeln!(out, "{:<8} {:>12} {:>10}", "target", "RMSE (um)", "R2");
        for t in &self.targets {
            let _ = writeln!(out, "{:<8} {:>12.6} {:>10.4}", t.target, t.rmse, t.r2);
        }
        out
    }
}

/// Samples per inference batch in [`evaluate`].
const EVAL_BATCH: usize = 64;

/// De-normalized predictions for every record of `split`, `[N, outputs]` in µm.
pub fn predict_split(model: &SimicModel, manifest: &DatasetManifest, split: Split) -> Result<(Vec<String>, Vec<TipLabels>, Vec<f64>)> {
    let records: Vec<_> = manifest.split_records(split).collect();
    if records.is_empty() {
        return Err(SimicError::InvalidArgument(format!("split {split} is empty")));
    }
    let mut predicted = Vec::with_capacity(records.len() * model.outputs());
    for chunk in records.chunks(EVAL_BATCH) {
        let images = chunk.iter().map(|r| manifest.load_image(r)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = images.iter().collect();
        let wh: Vec<[f64; 2]> = chunk.iter().map(|r| [r.labels.width_um, r.labels.height_um]).collect();
        let structure = model.config().needs_structure().then_some(wh.as_slice());
        let p = model.predict(&refs, structure)?;
        predicted.extend(p.values.into_iter().flatten());
    }
    let ids = records.iter().map(|r| r.id.clone()).collect();
    let labels = records.iter().map(|r| r.labels).collect();
    Ok((ids, labels, predicted))
}

/// RMSE and R² per predicted target on one split, in µm.
pub fn evaluate(model: &SimicModel, manifest: &DatasetManifest, split: Split) -> Result<MetricsReport> {
    let (_, labels, predicted) = predict_split(model, manifest, split)?;
    let mode = model.config().mode;
    let truth: Vec<f64> = labels
        .iter()
        .flat_map(|l| {
            let a = l.as_array();
            mode.targets().iter().map(move |&i| a[i])
        })
        .collect();
    MetricsReport::compute(split, mode, &truth, &predicted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn huber_examples() {
        assert_eq!(huber_loss(&[0.5], &[0.0], 1.0, false).unwrap(), 0.125);
        assert_eq!(huber_term(1.0, 1.0), 0.5);
        assert_eq!(1.0f64.abs() - 0.5, 0.5);
        assert_eq!(huber_loss(&[2.0], &[0.0], 1.0, false).unwrap(), 1.5);
        assert_eq!(huber_loss(&[2.0, 0.5], &[0.0, 0.0], 1.0, false).unwrap(), 1.625);
        assert_eq!(huber_loss(&[2.0, 0.5], &[0.0, 0.0], 1.0, true).unwrap(), 0.8125);
        assert!(huber_loss(&[1.0], &[0.0], 0.0, false).is_err());
        assert!(huber_loss(&[1.0], &[0.0, 1.0], 1.0, false).is_err());
    }

    #[test]
    fn huber_slopes_meet_at_threshold() {
        for delta in [0.3, 1.0, 2.5] {
            // Second-order one-sided differences, exact for each branch's polynomial.
            let h = 1e-3;
            let f = |e: f64| huber_term(e, delta);
            let left = (3.0 * f(delta) - 4.0 * f(delta - h) + f(delta - 2.0 * h)) / (2.0 * h);
            let right = (-3.0 * f(delta) + 4.0 * f(delta + h) - f(delta + 2.0 * h)) / (2.0 * h);
            assert!((left - 1.0).abs() < 1e-9 && (right - 1.0).abs() < 1e-9, "{left} {right}");
            assert_eq!(huber_slope(delta, delta), 1.0);
            assert_eq!(huber_slope(-delta, delta), -1.0);
        }
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap(), 1.0);
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn r_squared_examples() {
        let y = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        assert_eq!(r_squared(&y, &[3.5; 4]).unwrap(), 0.0);
        assert!(r_squared(&y, &[7.0, 4.0, 2.0, 1.0]).unwrap() < 0.0);
        assert!(r_squared(&[2.0, 2.0], &[1.0, 3.0]).is_err());
        assert!(r_squared(&[2.0], &[1.0]).is_err());
    }

    #[test]
    fn report_layout_follows_mode() {
        let truth = [0.2, 0.3, 0.05, 0.4, 0.5, 0.07, 0.3, 0.35, 0.06];
        let pred = [0.21, 0.31, 0.05, 0.38, 0.52, 0.065, 0.3, 0.36, 0.061];
        let full = MetricsReport::compute(Split::Eval, PredictionMode::Full, &truth, &pred).unwrap();
        assert_eq!(full.targets.len(), 3);
        assert_eq!(full.n, 3);
        let half = MetricsReport::compute(Split::Eval, PredictionMode::Half, &[0.05, 0.07, 0.06], &[0.05, 0.065, 0.061]).unwrap();
        assert_eq!(half.targets.len(), 1);
        assert_eq!(half.targets[0].target, "radius");
        assert_eq!(half.targets[0], full.targets[2]);
        assert_eq!(half.to_csv().lines().count(), 2);
        assert!(half.to_table().contains("radius"));
    }

    proptest! {
        #[test]
        fn huber_is_even_and_monotone(e in -10.0f64..10.0, d in 0.01f64..5.0) {
            prop_assert_eq!(huber_term(e, d), huber_term(-e, d));
            prop_assert!(huber_term(e.abs() * 1.1 + 1e-3, d) >= huber_term(e, d));
        }

        #[test]
        fn rmse_and_r2_share_residuals(y in prop::collection::vec(-5.0f64..5.0, 2..40), noise in prop::collection::vec(-1.0f64..1.0, 40)) {
            let p: Vec<f64> = y.iter().zip(&noise).map(|(a, b)| a + b).collect();
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
            prop_assume!(ss_tot > 1e-6);
            let ss_res = rmse(&y, &p).unwrap().powi(2) * y.len() as f64;
            let r2 = r_squared(&y, &p).unwrap();
            prop_assert!((1.0 - ss_res / ss_tot - r2).abs() < 1e-12);
            prop_assert!(r2 <= 1.0);
        }

        #[test]
        fn r2_is_permutation_invariant(y in prop::collection::vec(-5.0f64..5.0, 3..20), shift in 1usize..19) {
            let p: Vec<f64> = y.iter().map(|v| 0.8 * v + 0.1).collect();
            let k = shift % y.len();
            let (mut yr, mut pr) = (y.clone(), p.clone());
            yr.rotate_left(k);
            pr.rotate_left(k);
            if let (Ok(a), Ok(b)) = (r_squared(&y, &p), r_squared(&yr, &pr)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
