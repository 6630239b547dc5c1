//! Aggregation of per-image scores into the median / mean / std DSC and mean
//! IoU table, per semantic label and overall.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_COLUMNS: [&str; 4] = ["Median DSC", "Mean DSC", "Std Dev DSC", "Mean IoU"];
pub const OVERALL_LABEL: &str = "overall";

/// Scores of one evaluated image, as fractions in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub semantic_label: String,
    pub dsc: f64,
    pub iou: f64,
}

/// One table row; all values are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    #[serde(rename = "Median DSC")]
    pub median_dsc: f64,
    #[serde(rename = "Mean DSC")]
    pub mean_dsc: f64,
    #[serde(rename = "Std Dev DSC")]
    pub std_dsc: f64,
    #[serde(rename = "Mean IoU")]
    pub mean_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub columns: Vec<String>,
    /// Labels in lexicographic order, then `overall`.
    pub rows: Vec<ReportRow>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn row(label: &str, scores: &[&ImageScore]) -> ReportRow {
    let n = scores.len() as f64;
    let mut dscs: Vec<f64> = scores.iter().map(|s| s.dsc).collect();
    dscs.sort_by(f64::total_cmp);
    let mean = dscs.iter().sum::<f64>() / n;
    let std = if scores.len() > 1 {
        (dscs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mean_iou = scores.iter().map(|s| s.iou).sum::<f64>() / n;
    ReportRow {
        label: label.to_string(),
        median_dsc: 100.0 * median(&dscs),
        mean_dsc: 100.0 * mean,
        std_dsc: 100.0 * std,
        mean_iou: 100.0 * mean_iou,
    }
}

/// Builds the report; standard deviation uses the `N − 1` denominator.
pub fn aggregate_report(per_image: &[ImageScore]) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty list of scores"));
    }
    if let Some(s) = per_image
        .iter()
        .find(|s| !(0.0..=1.0).contains(&s.dsc) || !(0.0..=1.0).contains(&s.iou))
    {
        return Err(Error::invalid(format!(
            "scores must lie in [0, 1]; got dsc {} iou {}",
            s.dsc, s.iou
        )));
    }
    let mut by_label: BTreeMap<&str, Vec<&ImageScore>> = BTreeMap::new();
    for s in per_image {
        by_label.entry(s.semantic_label.as_str()).or_default().push(s);
    }
    let mut rows: Vec<ReportRow> = by_label.iter().map(|(l, s)| row(l, s)).collect();
    let all: Vec<&ImageScore> = per_image.iter().collect();
    rows.push(row(OVERALL_LABEL, &all));
    Ok(MetricsReport {
        columns: REPORT_COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows,
    })
}

impl MetricsReport {
    pub fn overall(&self) -> &ReportRow {
        self.rows.last().expect("report always has an overall row")
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Plain-text table, two decimals, percent units.
    pub fn to_text(&self) -> String {
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(std::iter::once("Label".len()))
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = write!(out, "{:<label_w$}", "Label");
        for c in REPORT_COLUMNS {
            let _ = write!(out, "  {c:>11}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<label_w$}", r.label);
            for v in [r.median_dsc, r.mean_dsc, r.std_dsc, r.mean_iou] {
                let _ = write!(out, "  {v:>11.2}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(label: &str, dsc: f64, iou: f64) -> ImageScore {
        ImageScore {
            semantic_label: label.into(),
            dsc,
            iou,
        }
    }

    #[test]
    fn single_image() {
        let r = aggregate_report(&[score("MV", 0.8, 0.5)]).unwrap();
        let o = r.overall();
        assert!((o.median_dsc - 80.0).abs() < 1e-12);
        assert!((o.mean_dsc - 80.0).abs() < 1e-12);
        assert_eq!(o.std_dsc, 0.0);
        assert!((o.mean_iou - 50.0).abs() < 1e-12);
        assert_eq!(r.rows.len(), 2);
    }

    #[test]
    fn three_images_hand_statistics() {
        // mean 0.8, deviations ±0.2 → sample variance 0.04, std 0.2
        let r = aggregate_report(&[
            score("MV", 0.6, 0.4),
            score("MV", 1.0, 1.0),
            score("MV", 0.8, 0.6),
        ])
        .unwrap();
        let mv = r.row("MV").unwrap();
        assert!((mv.median_dsc - 80.0).abs() < 1e-9);
        assert!((mv.mean_dsc - 80.0).abs() < 1e-9);
        assert!((mv.std_dsc - 20.0).abs() < 1e-9);
    }

    #[test]
    fn rows_sorted_with_overall_last() {
        let r = aggregate_report(&[score("TUFT", 1.0, 1.0), score("CAP", 0.5, 0.25), score("MV", 0.0, 0.0)])
            .unwrap();
        let labels: Vec<&str> = r.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["CAP", "MV", "TUFT", "overall"]);
        assert_eq!(r.columns, REPORT_COLUMNS);
    }

    #[test]
    fn empty_and_out_of_range_rejected() {
        assert!(aggregate_report(&[]).is_err());
        assert!(aggregate_report(&[score("MV", 1.5, 0.0)]).is_err());
    }
}
