//! Threshold metrics for OOD detection. In-distribution samples are the
//! positive class and a score `s` is classified ID when `s >= τ`.
//!
//! All rates are returned as percentages.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};

fn check_nonempty(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Domain(format!(
            "metric needs ID and OOD scores, got {} and {}",
            id.len(),
            ood.len()
        )));
    }
    if id.iter().chain(ood).any(|s| !s.is_finite()) {
        return Err(Error::Domain("scores must be finite".into()));
    }
    Ok(())
}

fn sorted_desc(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    v
}

/// Cumulative (ID accepted, OOD accepted) counts at each distinct threshold,
/// from the highest score down. The +∞ sentinel (nothing accepted) is first.
fn operating_points(id: &[f64], ood: &[f64]) -> Vec<(usize, usize)> {
    let (id, ood) = (sorted_desc(id), sorted_desc(ood));
    let (mut i, mut o) = (0, 0);
    let mut points = vec![(0, 0)];
    while i < id.len() || o < ood.len() {
        let next = match (id.get(i), ood.get(o)) {
            (Some(&a), Some(&b)) => a.max(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        while i < id.len() && id[i] == next {
            i += 1;
        }
        while o < ood.len() && ood[o] == next {
            o += 1;
        }
        points.push((i, o));
    }
    points
}

/// TPR ≥ 0.95 on counts.
fn meets_tpr_95(tp: usize, n_pos: usize) -> bool {
    tp * 100 >= 95 * n_pos
}

/// FPR (%) at the largest threshold whose TPR is at least 95%.
pub fn fpr_at_95_tpr(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_nonempty(id_scores, ood_scores)?;
    let (_, fp) = operating_points(id_scores, ood_scores)
        .into_iter()
        .find(|&(tp, _)| meets_tpr_95(tp, id_scores.len()))
        .expect("accepting everything reaches TPR 1");
    Ok(100.0 * fp as f64 / ood_scores.len() as f64)
}

/// Minimum over thresholds of `0.5·(1 − TPR) + 0.5·FPR`, in percent.
pub fn detection_error(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_nonempty(id_scores, ood_scores)?;
    let (n_id, n_ood) = (id_scores.len() as f64, ood_scores.len() as f64);
    let best = operating_points(id_scores, ood_scores)
        .into_iter()
        .map(|(tp, fp)| 0.5 * (1.0 - tp as f64 / n_id) + 0.5 * (fp as f64 / n_ood))
        .fold(f64::INFINITY, f64::min);
    Ok(100.0 * best)
}

/// Probability (%) that a random ID score beats a random OOD score, ties
/// counting one half.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_nonempty(id_scores, ood_scores)?;
    let mut ood = ood_scores.to_vec();
    ood.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let mut wins = 0.0;
    for &s in id_scores {
        let below = ood.partition_point(|&o| o < s);
        let not_above = ood.partition_point(|&o| o <= s);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(100.0 * wins / (id_scores.len() as f64 * ood_scores.len() as f64))
}

/// Average precision (%) of `pos` against `neg`, equal scores forming one
/// threshold step.
pub fn aupr(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    if pos_scores.is_empty() {
        return Err(Error::Domain("AUPR needs at least one positive".into()));
    }
    if pos_scores.iter().chain(neg_scores).any(|s| !s.is_finite()) {
        return Err(Error::Domain("scores must be finite".into()));
    }
    let n_pos = pos_scores.len() as f64;
    let mut area = 0.0;
    let mut prev_tp = 0;
    for (tp, fp) in operating_points(pos_scores, neg_scores).into_iter().skip(1) {
        if tp > prev_tp {
            area += (tp - prev_tp) as f64 / n_pos * (tp as f64 / (tp + fp) as f64);
            prev_tp = tp;
        }
    }
    Ok(100.0 * area)
}

/// AUPR with ID as the positive class.
pub fn aupr_in(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_nonempty(id_scores, ood_scores)?;
    aupr(id_scores, ood_scores)
}

/// AUPR with OOD as the positive class and negated scores.
pub fn aupr_out(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_nonempty(id_scores, ood_scores)?;
    let neg = |s: &[f64]| s.iter().map(|v| -v).collect::<Vec<_>>();
    aupr(&neg(ood_scores), &neg(id_scores))
}

pub fn cls_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Domain(format!(
            "accuracy needs equal nonempty lists, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Names of the six reported metrics, in report order.
pub const METRIC_NAMES: [&str; 6] = [
    "fpr_at_95_tpr",
    "detection_error",
    "auroc",
    "aupr_in",
    "aupr_out",
    "cls_accuracy",
];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fpr_at_95_tpr: f64,
    pub detection_error: f64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub cls_accuracy: f64,
    pub n_id: usize,
    pub n_ood: usize,
    /// Configuration echoed into the key=value serialization.
    pub echo: Vec<(String, String)>,
}

impl EvalReport {
    pub fn compute(
        id_scores: &[f64],
        ood_scores: &[f64],
        predictions: &[usize],
        labels: &[usize],
    ) -> Result<Self> {
        Ok(Self {
            fpr_at_95_tpr: fpr_at_95_tpr(id_scores, ood_scores)?,
            detection_error: detection_error(id_scores, ood_scores)?,
            auroc: auroc(id_scores, ood_scores)?,
            aupr_in: aupr_in(id_scores, ood_scores)?,
            aupr_out: aupr_out(id_scores, ood_scores)?,
            cls_accuracy: cls_accuracy(predictions, labels)?,
            n_id: id_scores.len(),
            n_ood: ood_scores.len(),
            echo: Vec::new(),
        })
    }

    pub fn with_echo(mut self, key: &str, value: impl ToString) -> Self {
        self.echo.push((key.to_string(), value.to_string()));
        self
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.fpr_at_95_tpr,
            self.detection_error,
            self.auroc,
            self.aupr_in,
            self.aupr_out,
            self.cls_accuracy,
        ]
    }

    pub fn csv_header() -> String {
        format!("{},n_id,n_ood", METRIC_NAMES.join(","))
    }

    pub fn to_csv_row(&self) -> String {
        let mut row: Vec<String> = self.values().iter().map(|v| format!("{v:.6}")).collect();
        row.push(self.n_id.to_string());
        row.push(self.n_ood.to_string());
        row.join(",")
    }

    /// Flat `key=value` block: echo first, then counts and metrics.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.echo {
            let _ = writeln!(out, "{k}={v}");
        }
        let _ = writeln!(out, "n_id={}", self.n_id);
        let _ = writeln!(out, "n_ood={}", self.n_ood);
        for (name, v) in METRIC_NAMES.iter().zip(self.values()) {
            let _ = writeln!(out, "{name}={v:.6}");
        }
        out
    }
}

/// Per-metric mean and sample standard deviation over runs.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateReport {
    pub runs: usize,
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

pub fn aggregate_runs(reports: &[EvalReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Domain("cannot aggregate zero reports".into()));
    }
    let n = reports.len() as f64;
    let mut mean = [0.0; 6];
    let mut std = [0.0; 6];
    for m in 0..6 {
        // Sum in sorted order so the result does not depend on run order.
        let mut vals: Vec<f64> = reports.iter().map(|r| r.values()[m]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
        mean[m] = vals.iter().sum::<f64>() / n;
        if reports.len() > 1 {
            let ss: f64 = vals.iter().map(|v| (v - mean[m]).powi(2)).sum();
            std[m] = (ss / (n - 1.0)).sqrt();
        }
    }
    Ok(AggregateReport {
        runs: reports.len(),
        mean,
        std,
    })
}
