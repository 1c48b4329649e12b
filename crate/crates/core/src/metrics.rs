//! Registration accuracy (EPE, AccS, AccR, OR) and inlier-classification
//! precision/recall.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::nicp::WarpField;

/// EPE threshold for strict accuracy (meters).
pub const ACC_STRICT_EPE: f64 = 0.025;
/// Relative-error threshold for strict accuracy.
pub const ACC_STRICT_RE: f64 = 0.025;
pub const ACC_RELAXED_EPE: f64 = 0.05;
pub const ACC_RELAXED_RE: f64 = 0.05;
/// Relative error above which a point is an outlier.
pub const OUTLIER_RE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub epe: f64,
    pub acc_s: f64,
    pub acc_r: f64,
    pub outlier_ratio: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub point_count: usize,
}

/// Per-point end-point error and relative error (`None` where the ground
/// truth does not move the point).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointError {
    pub epe: f64,
    pub relative: Option<f64>,
}

pub fn point_errors(source: &PointCloud, est: &WarpField, gt: &WarpField) -> Result<Vec<PointError>> {
    if source.is_empty() {
        return Err(Error::Empty("source cloud"));
    }
    Ok(crate::par::map_slice(source.points(), |p| {
        let w = est.warp_point(p);
        let w_gt = gt.warp_point(p);
        let epe = (w - w_gt).norm();
        let motion = (w_gt - p).norm();
        PointError {
            epe,
            relative: (motion > 0.0).then(|| epe / motion),
        }
    }))
}

/// Summarizes per-point errors. A point with undefined relative error is
/// judged by EPE alone and never counts as an outlier.
pub fn summarize(errors: &[PointError]) -> Result<MetricsReport> {
    if errors.is_empty() {
        return Err(Error::Empty("source cloud"));
    }
    let n = errors.len() as f64;
    let count = |f: &dyn Fn(&PointError) -> bool| errors.iter().filter(|e| f(e)).count() as f64 / n;
    let re_below = |e: &PointError, t: f64| e.relative.is_some_and(|r| r < t);
    Ok(MetricsReport {
        epe: errors.iter().map(|e| e.epe).sum::<f64>() / n,
        acc_s: count(&|e| e.epe < ACC_STRICT_EPE || re_below(e, ACC_STRICT_RE)),
        acc_r: count(&|e| e.epe < ACC_RELAXED_EPE || re_below(e, ACC_RELAXED_RE)),
        outlier_ratio: count(&|e| e.relative.is_some_and(|r| r > OUTLIER_RE)),
        precision: None,
        recall: None,
        point_count: errors.len(),
    })
}

pub fn registration_metrics(source: &PointCloud, est: &WarpField, gt: &WarpField) -> Result<MetricsReport> {
    summarize(&point_errors(source, est, gt)?)
}

/// `(precision, recall)`; precision is 0 for an empty prediction and recall
/// is 1 when there are no true inliers.
pub fn classification_metrics(predicted: &[usize], labels: &[bool]) -> (f64, f64) {
    let tp = predicted.iter().filter(|&&i| labels[i]).count() as f64;
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let precision = if predicted.is_empty() { 0.0 } else { tp / predicted.len() as f64 };
    let recall = if positives == 0.0 { 1.0 } else { tp / positives };
    (precision, recall)
}

impl MetricsReport {
    pub fn with_classification(mut self, precision: f64, recall: f64) -> Self {
        self.precision = Some(precision);
        self.recall = Some(recall);
        self
    }

    /// Point-weighted pooling of several reports. Precision/recall are
    /// averaged over the reports that carry them.
    pub fn pooled(reports: &[MetricsReport]) -> Option<MetricsReport> {
        let total: usize = reports.iter().map(|r| r.point_count).sum();
        if total == 0 {
            return None;
        }
        let weighted = |f: fn(&MetricsReport) -> f64| {
            reports.iter().map(|r| f(r) * r.point_count as f64).sum::<f64>() / total as f64
        };
        let mean_opt = |f: fn(&MetricsReport) -> Option<f64>| {
            let vals: Vec<f64> = reports.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Some(MetricsReport {
            epe: weighted(|r| r.epe),
            acc_s: weighted(|r| r.acc_s),
            acc_r: weighted(|r| r.acc_r),
            outlier_ratio: weighted(|r| r.outlier_ratio),
            precision: mean_opt(|r| r.precision),
            recall: mean_opt(|r| r.recall),
            point_count: total,
        })
    }

    pub const CSV_HEADER: &'static str = "name,epe,acc_s,acc_r,outlier_ratio,precision,recall,point_count";

    pub fn csv_row(&self, name: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{name},{},{},{},{},{},{},{}",
            self.epe,
            self.acc_s,
            self.acc_r,
            self.outlier_ratio,
            opt(self.precision),
            opt(self.recall),
            self.point_count
        )
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "  points     {}", self.point_count);
        let _ = writeln!(out, "  EPE (m)    {:.6}", self.epe);
        let _ = writeln!(out, "  AccS (%)   {:.2}", 100.0 * self.acc_s);
        let _ = writeln!(out, "  AccR (%)   {:.2}", 100.0 * self.acc_r);
        let _ = writeln!(out, "  OR (%)     {:.2}", 100.0 * self.outlier_ratio);
        if let (Some(p), Some(r)) = (self.precision, self.recall) {
            let _ = writeln!(out, "  precision  {:.4}", p);
            let _ = writeln!(out, "  recall     {:.4}", r);
        }
        out
    }
}
