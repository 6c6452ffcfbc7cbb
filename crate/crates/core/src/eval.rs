//! Top-L precision, recall and F1, aggregated as means over admissions and
//! reported in percent, plus cross-validation and hyperparameter sweeps.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Admission;
use crate::error::{Error, Result};
use crate::model::{recommend_top_l, ModelParams};
use crate::scalar::Scalar;
use crate::trainer::{train, TrainConfig};

pub const DEFAULT_TOP_LS: [usize; 4] = [1, 3, 5, 10];

/// Per-admission metrics as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision `hits/L`, recall `hits/|truth|`, and their harmonic mean (0 when both are 0).
pub fn admission_metrics(recommended: &[usize], truth: &[usize]) -> AdmissionMetrics {
    let truth: HashSet<usize> = truth.iter().copied().collect();
    let hits = recommended.iter().filter(|p| truth.contains(p)).count() as f64;
    let precision = if recommended.is_empty() {
        0.0
    } else {
        hits / recommended.len() as f64
    };
    let recall = if truth.is_empty() {
        0.0
    } else {
        hits / truth.len() as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    AdmissionMetrics {
        precision,
        recall,
        f1,
    }
}

/// Means over admissions, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(rename = "L")]
    pub top: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub admission_count: usize,
}

/// One line of the row-wise export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissionRecord {
    pub admission_id: String,
    #[serde(rename = "L")]
    pub top: usize,
    pub recommended: Vec<usize>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn check_tops(tops: &[usize], procedures: usize) -> Result<()> {
    if tops.is_empty() {
        return Err(Error::InvalidArgument("no top-L values requested".into()));
    }
    match tops.iter().find(|&&l| l == 0 || l > procedures) {
        Some(l) => Err(Error::InvalidArgument(format!(
            "top-L {l} out of range 1..={procedures}"
        ))),
        None => Ok(()),
    }
}

/// Per-admission metrics for every requested L; the ranking is computed once per admission.
pub fn evaluate_admissions<T: Scalar>(
    params: &ModelParams<T>,
    test: &[Admission],
    tops: &[usize],
) -> Result<Vec<AdmissionRecord>> {
    check_tops(tops, params.procedure_count())?;
    let deepest = *tops.iter().max().expect("nonempty");
    let mut out = Vec::with_capacity(test.len() * tops.len());
    for adm in test {
        let ranking = recommend_top_l(params, &adm.diseases, deepest)?;
        for &top in tops {
            let rec = &ranking[..top];
            let m = admission_metrics(rec, &adm.positives);
            out.push(AdmissionRecord {
                admission_id: adm.id.clone(),
                top,
                recommended: rec.to_vec(),
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
            });
        }
    }
    Ok(out)
}

/// Averages row-wise records (fixed summation order) into a report.
pub fn aggregate(records: &[AdmissionRecord], tops: &[usize]) -> EvalReport {
    let rows = tops
        .iter()
        .map(|&top| {
            let (mut p, mut r, mut f, mut n) = (0.0, 0.0, 0.0, 0usize);
            for rec in records.iter().filter(|rec| rec.top == top) {
                p += rec.precision;
                r += rec.recall;
                f += rec.f1;
                n += 1;
            }
            let scale = if n == 0 { 0.0 } else { 100.0 / n as f64 };
            MetricRow {
                top,
                precision: p * scale,
                recall: r * scale,
                f1: f * scale,
            }
        })
        .collect();
    let admission_count = records
        .iter()
        .filter(|rec| Some(&rec.top) == tops.first())
        .count();
    EvalReport {
        rows,
        admission_count,
    }
}

pub fn evaluate<T: Scalar>(params: &ModelParams<T>, test: &[Admission], tops: &[usize]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("empty test set".into()));
    }
    Ok(aggregate(&evaluate_admissions(params, test, tops)?, tops))
}

impl EvalReport {
    pub fn row(&self, top: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.top == top)
    }

    /// Element-wise mean of reports with identical L lists.
    pub fn mean(reports: &[EvalReport]) -> Option<EvalReport> {
        let first = reports.first()?;
        let k = reports.len() as f64;
        let rows = first
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| MetricRow {
                top: row.top,
                precision: reports.iter().map(|r| r.rows[i].precision).sum::<f64>() / k,
                recall: reports.iter().map(|r| r.rows[i].recall).sum::<f64>() / k,
                f1: reports.iter().map(|r| r.rows[i].f1).sum::<f64>() / k,
            })
            .collect();
        Some(EvalReport {
            rows,
            admission_count: first.admission_count,
        })
    }

    /// Plain-text table with R, P and F1 columns per L.
    pub fn to_table(&self, label: &str) -> String {
        let label_width = label.len().max(6);
        let mut out = String::new();
        let _ = write!(out, "{:<label_width$}", "");
        for row in &self.rows {
            let _ = write!(out, " | {:^20}", format!("Top-{} (%)", row.top));
        }
        out.push('\n');
        let _ = write!(out, "{:<label_width$}", "Method");
        for _ in &self.rows {
            let _ = write!(out, " | {:>6} {:>6} {:>6}", "R", "P", "F1");
        }
        out.push('\n');
        let _ = write!(out, "{label:<label_width$}");
        for row in &self.rows {
            let _ = write!(
                out,
                " | {:>6.1} {:>6.1} {:>6.1}",
                row.recall, row.precision, row.f1
            );
        }
        out.push('\n');
        out
    }
}

/// Fold assignment: seeded shuffle of the pool, then contiguous, near-equal folds.
pub fn fold_assignment(pool_len: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {folds}")));
    }
    if pool_len < folds {
        return Err(Error::InvalidArgument(format!(
            "{pool_len} admissions cannot fill {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..pool_len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = pool_len / folds;
    let extra = pool_len % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<EvalReport>,
    pub mean: EvalReport,
}

/// Trains on one fold's complement. Exposed so a single fold can be run on its own.
pub fn train_fold<T: Scalar>(
    train_pool: &[Admission],
    assignment: &[Vec<usize>],
    fold: usize,
    sizes: (usize, usize),
    cfg: &TrainConfig,
) -> Result<ModelParams<T>> {
    let held: HashSet<usize> = assignment
        .get(fold)
        .ok_or_else(|| Error::InvalidArgument(format!("fold {fold} out of range")))?
        .iter()
        .copied()
        .collect();
    let train_set: Vec<Admission> = train_pool
        .iter()
        .enumerate()
        .filter(|(i, _)| !held.contains(i))
        .map(|(_, a)| a.clone())
        .collect();
    if train_set.is_empty() {
        return Err(Error::InvalidArgument(format!("fold {fold} leaves no training data")));
    }
    Ok(train(&train_set, sizes.0, sizes.1, cfg)?.0)
}

/// k-fold cross-validation over the training pool, each fold scored on the fixed test set.
pub fn cross_validate<T: Scalar>(
    train_pool: &[Admission],
    test: &[Admission],
    sizes: (usize, usize),
    cfg: &TrainConfig,
    folds: usize,
    tops: &[usize],
) -> Result<CrossValidation> {
    let assignment = fold_assignment(train_pool.len(), folds, cfg.seed)?;
    let reports = (0..folds)
        .map(|fold| {
            let params = train_fold::<T>(train_pool, &assignment, fold, sizes, cfg)?;
            evaluate(&params, test, tops)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = EvalReport::mean(&reports).expect("at least two folds");
    Ok(CrossValidation {
        folds: reports,
        mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "M")]
    Dim,
    #[serde(rename = "alpha")]
    Alpha,
    #[serde(rename = "K")]
    Heads,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M" | "m" | "dim" => Ok(SweepAxis::Dim),
            "alpha" => Ok(SweepAxis::Alpha),
            "K" | "k" | "heads" => Ok(SweepAxis::Heads),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep axis {other:?} (expected M, alpha or K)"
            ))),
        }
    }
}

impl SweepAxis {
    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        let as_count = |v: f64| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::InvalidArgument(format!("{v} is not a positive integer")))
            }
        };
        match self {
            SweepAxis::Dim => cfg.dim = as_count(value)?,
            SweepAxis::Heads => cfg.heads = as_count(value)?,
            SweepAxis::Alpha => cfg.alpha = value,
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// One model per value along `axis`, everything else fixed. Failed cells are
/// recorded and the sweep continues.
pub fn sweep<T: Scalar>(
    train_set: &[Admission],
    test: &[Admission],
    sizes: (usize, usize),
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    tops: &[usize],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    Ok(values
        .iter()
        .map(|&value| {
            let cell = axis.apply(base, value).and_then(|cfg| {
                let (params, _) = train::<T>(train_set, sizes.0, sizes.1, &cfg)?;
                evaluate(&params, test, tops)
            });
            match cell {
                Ok(report) => SweepRow {
                    value,
                    report: Some(report),
                    error: None,
                },
                Err(e) => {
                    log::warn!("sweep value {value}: {e}");
                    SweepRow {
                        value,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect())
}
