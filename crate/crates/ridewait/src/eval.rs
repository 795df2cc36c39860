//! Evaluation harness: MAE/RMSE, per-trip error CDFs, the ridge linear
//! baseline, and the three-model x two-task experiment matrix.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, Task};
use crate::gbt::{self, GbtModel};
use crate::pipeline::FittedPipeline;
use crate::trip::{chrono_split, LabeledTrip};

fn check_pair(actual: &[f64], predicted: &[f64]) -> Result<()> {
    if actual.is_empty() || actual.len() != predicted.len() {
        return Err(Error::Data(format!(
            "metric inputs must be equal-length and non-empty, got {} actual / {} predicted",
            actual.len(),
            predicted.len()
        )));
    }
    if actual.iter().chain(predicted.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Data("metric inputs contain non-finite values".to_string()));
    }
    Ok(())
}

/// Mean absolute error over the test pairs.
pub fn mae(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(actual, predicted)?;
    Ok(actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p).abs())
        .sum::<f64>()
        / actual.len() as f64)
}

/// Root mean square error over the test pairs.
pub fn rmse(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(actual, predicted)?;
    Ok((actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p) * (a - p))
        .sum::<f64>()
        / actual.len() as f64)
        .sqrt())
}

/// Fraction of rows with |error| <= t for each threshold.
pub fn error_cdf(actual: &[f64], predicted: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_pair(actual, predicted)?;
    if thresholds
        .windows(2)
        .any(|w| w[0].is_nan() || w[1].is_nan() || w[0] >= w[1])
    {
        return Err(Error::Config("error CDF thresholds must be strictly ascending".to_string()));
    }
    let n = actual.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let hits = actual
                .iter()
                .zip(predicted)
                .filter(|(a, p)| (*a - *p).abs() <= t)
                .count();
            (t, hits as f64 / n)
        })
        .collect())
}

/// One (model, dataset) evaluation. Construction enforces mae <= rmse and
/// a monotone CDF.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub model_name: String,
    pub mae_s: f64,
    pub rmse_s: f64,
    pub n_test: usize,
    pub error_cdf: Vec<(f64, f64)>,
    pub importance: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn build(
        task: Task,
        model_name: &str,
        actual: &[f64],
        predicted: &[f64],
        thresholds: &[f64],
        importance: Vec<(String, f64)>,
    ) -> Result<EvalReport> {
        let mae_s = mae(actual, predicted)?;
        let rmse_s = rmse(actual, predicted)?;
        if mae_s > rmse_s + 1e-9 {
            return Err(Error::Internal(format!(
                "mae {mae_s} exceeds rmse {rmse_s}"
            )));
        }
        let cdf = error_cdf(actual, predicted, thresholds)?;
        if cdf.windows(2).any(|w| w[1].1 < w[0].1)
            || cdf.iter().any(|&(_, f)| !(0.0..=1.0).contains(&f))
        {
            return Err(Error::Internal("error CDF is not monotone within [0, 1]".to_string()));
        }
        Ok(EvalReport {
            task,
            model_name: model_name.to_string(),
            mae_s,
            rmse_s,
            n_test: actual.len(),
            error_cdf: cdf,
            importance,
        })
    }

    /// Fraction of trips with error at or under the given threshold, when
    /// that threshold was evaluated.
    pub fn frac_under(&self, threshold: f64) -> Option<f64> {
        self.error_cdf
            .iter()
            .find(|(t, _)| *t == threshold)
            .map(|(_, f)| *f)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Ridge least squares fit by normal equations; the intercept is not
/// penalized. Deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefs: Vec<f64>,
    pub schema_fingerprint: String,
    pub warnings: Vec<String>,
}

impl LinearModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept
            + self
                .coefs
                .iter()
                .zip(row)
                .map(|(c, x)| c * x)
                .sum::<f64>()
    }

    pub fn predict(&self, fm: &FeatureMatrix) -> Result<Vec<f64>> {
        if fm.schema.fingerprint() != self.schema_fingerprint {
            return Err(Error::Schema(
                "feature schema fingerprint does not match linear model".to_string(),
            ));
        }
        Ok((0..fm.n_rows()).map(|i| self.predict_row(fm.row(i))).collect())
    }
}

pub fn fit_linear_baseline(fm: &FeatureMatrix, ridge: f64) -> Result<LinearModel> {
    if fm.n_rows() == 0 {
        return Err(Error::Data("cannot fit linear baseline on empty matrix".to_string()));
    }
    if !ridge.is_finite() || ridge < 0.0 {
        return Err(Error::Config(format!("ridge must be finite and non-negative, got {ridge}")));
    }
    let n = fm.n_rows();
    let d = fm.n_cols() + 1; // intercept first

    let mut warnings = Vec::new();
    for j in 0..fm.n_cols() {
        let col = fm.column(j);
        if col.iter().all(|&v| v == col[0]) {
            warnings.push(format!(
                "feature {} is constant; its weight is identified only through the ridge penalty",
                fm.schema.columns[j].name
            ));
        }
    }

    // Normal equations: (A^T A + ridge * diag(0, 1, .., 1)) x = A^T y
    // with A = [1 | X].
    let mut ata = vec![0.0f64; d * d];
    let mut aty = vec![0.0f64; d];
    let mut row_buf = vec![0.0f64; d];
    for i in 0..n {
        row_buf[0] = 1.0;
        row_buf[1..].copy_from_slice(fm.row(i));
        for r in 0..d {
            aty[r] += row_buf[r] * fm.labels[i];
            for c in r..d {
                ata[r * d + c] += row_buf[r] * row_buf[c];
            }
        }
    }
    for r in 0..d {
        for c in 0..r {
            ata[r * d + c] = ata[c * d + r];
        }
    }
    for j in 1..d {
        ata[j * d + j] += ridge;
    }

    let solution = solve_dense(&mut ata, &mut aty, d).ok_or_else(|| {
        Error::Data(format!(
            "normal equations singular (ridge {ridge}); add regularization or drop collinear features"
        ))
    })?;

    Ok(LinearModel {
        intercept: solution[0],
        coefs: solution[1..].to_vec(),
        schema_fingerprint: fm.schema.fingerprint(),
        warnings,
    })
}

/// Gaussian elimination with partial pivoting on a dense system held in
/// row-major `a` (n x n) and `b`. Returns None when a pivot collapses.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    let scale: f64 = a.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| {
                a[r1 * n + col]
                    .abs()
                    .partial_cmp(&a[r2 * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if a[pivot_row * n + col].abs() < 1e-12 * scale {
            return None;
        }
        if pivot_row != col {
            for k in 0..n {
                a.swap(col * n + k, pivot_row * n + k);
            }
            b.swap(col, pivot_row);
        }
        let pivot = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut sum = b[row];
        for k in (row + 1)..n {
            sum -= a[row * n + k] * x[k];
        }
        x[row] = sum / a[row * n + row];
    }
    Some(x)
}

pub const MODEL_LR: &str = "lr";
pub const MODEL_GBT_BASE: &str = "gbt_base";
pub const MODEL_FIXGBOOST: &str = "fixgboost";

pub struct ExperimentResult {
    /// Reports in fixed order: task (pre, post) x model (lr, gbt_base,
    /// fixgboost).
    pub reports: Vec<EvalReport>,
    pub n_train: usize,
    pub n_test: usize,
    /// The trained interaction-feature models per task, for explain runs.
    pub post_full_model: GbtModel,
    pub pre_full_model: GbtModel,
}

impl ExperimentResult {
    pub fn report(&self, task: Task, model: &str) -> &EvalReport {
        self.reports
            .iter()
            .find(|r| r.task == task && r.model_name == model)
            .expect("report exists for every cell")
    }

    /// Combined CSV summary: one row per (model, task) cell.
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "task", "mae_s", "rmse_s", "n_test", "frac_under_120s"])
            .map_err(Error::from)?;
        for r in &self.reports {
            let frac = r
                .frac_under(120.0)
                .map(|f| format!("{f:.4}"))
                .unwrap_or_default();
            w.write_record([
                r.model_name.clone(),
                r.task.name().to_string(),
                format!("{:.3}", r.mae_s),
                format!("{:.3}", r.rmse_s),
                r.n_test.to_string(),
                frac,
            ])
            .map_err(Error::from)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Internal(e.to_string()))?)
            .map_err(|e| Error::Internal(e.to_string()))
    }
}

/// Trains and evaluates {lr, gbt_base, fixgboost} x {pre, post} on a
/// chronological split of the trips.
pub fn run_experiment(trips: Vec<LabeledTrip>, cfg: &RunConfig) -> Result<ExperimentResult> {
    let split = chrono_split(trips, cfg.eval.train_frac)?;
    if split.test.is_empty() {
        return Err(Error::Data(
            "experiment requires a non-empty test split; lower eval.train_frac or add trips"
                .to_string(),
        ));
    }
    let pipeline = FittedPipeline::fit(&split.train, cfg)?;

    let thresholds = &cfg.eval.cdf_thresholds_s;
    let mut reports = Vec::with_capacity(6);
    let mut pre_full_model = None;
    let mut post_full_model = None;

    for task in [Task::Pre, Task::Post] {
        let base_train = pipeline.featurize(&split.train, task, false)?;
        let base_test = pipeline.featurize(&split.test, task, false)?;
        let full_train = pipeline.featurize(&split.train, task, true)?;
        let full_test = pipeline.featurize(&split.test, task, true)?;
        let actual = &base_test.labels;

        let lr = fit_linear_baseline(&base_train, cfg.eval.ridge)?;
        let lr_preds = lr.predict(&base_test)?;
        reports.push(EvalReport::build(task, MODEL_LR, actual, &lr_preds, thresholds, Vec::new())?);

        let gbt_base = gbt::train(&base_train, &cfg.gbt)?;
        let base_preds = gbt_base.predict(&base_test)?;
        reports.push(EvalReport::build(
            task,
            MODEL_GBT_BASE,
            actual,
            &base_preds,
            thresholds,
            gbt_base.ranked_importance(),
        )?);

        let gbt_full = gbt::train(&full_train, &cfg.gbt)?;
        let full_preds = gbt_full.predict(&full_test)?;
        reports.push(EvalReport::build(
            task,
            MODEL_FIXGBOOST,
            actual,
            &full_preds,
            thresholds,
            gbt_full.ranked_importance(),
        )?);

        match task {
            Task::Pre => pre_full_model = Some(gbt_full),
            Task::Post => post_full_model = Some(gbt_full),
        }
    }

    Ok(ExperimentResult {
        reports,
        n_train: split.train.len(),
        n_test: split.test.len(),
        pre_full_model: pre_full_model.expect("pre task ran"),
        post_full_model: post_full_model.expect("post task ran"),
    })
}
