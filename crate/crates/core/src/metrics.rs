//! Confusion-based metrics, the TuSimple lane accuracy, and comparison tables.

use serde::{Deserialize, Serialize};

use crate::data::tusimple::{is_present, ClipAnnotation};
use crate::error::{Error, Result};

/// Horizontal match tolerance of the TuSimple benchmark at 1280 px width.
pub const TUSIMPLE_PIXEL_THRESH: f64 = 20.0;
pub const TUSIMPLE_REFERENCE_WIDTH: f64 = 1280.0;
/// Fraction of rows a predicted lane must match to count as found.
pub const TUSIMPLE_PT_THRESH: f64 = 0.85;

/// `x_tol` for frames of the given width.
pub fn scaled_x_tol(frame_width: usize) -> f64 {
    TUSIMPLE_PIXEL_THRESH * frame_width as f64 / TUSIMPLE_REFERENCE_WIDTH
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// TuSimple lane-level scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LaneAccuracy {
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    pub lane: Option<LaneAccuracy>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall and F1 from counts. Precision and recall are 0
/// when their denominator is 0, and F1 is 0 when both are.
pub fn metrics_from_counts(c: &ConfusionCounts) -> Result<MetricReport> {
    if c.total() == 0 {
        return Err(Error::UndefinedMetric("no evaluated units (TP+TN+FP+FN = 0)".into()));
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    // harmonic mean of precision and recall, as one division of counts
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    Ok(MetricReport {
        label: String::new(),
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f1,
        counts: *c,
        lane: None,
    })
}

fn check_rows(pred: &ClipAnnotation, gt: &ClipAnnotation) -> Result<()> {
    if pred.h_samples != gt.h_samples {
        return Err(Error::InvalidArgument(format!(
            "{}: predictions are not sampled on the ground-truth rows",
            gt.raw_file
        )));
    }
    if let Some(l) = pred.lanes.iter().find(|l| l.len() != gt.h_samples.len()) {
        return Err(Error::InvalidArgument(format!(
            "{}: predicted lane has {} entries for {} rows",
            gt.raw_file,
            l.len(),
            gt.h_samples.len()
        )));
    }
    Ok(())
}

/// Point-level confusion. Each row's present ground-truth and predicted points
/// are matched greedily by increasing horizontal distance within `x_tol`, each
/// point used at most once. Rows with no point on either side count as TN.
pub fn point_confusion(pred: &ClipAnnotation, gt: &ClipAnnotation, x_tol: f64) -> Result<ConfusionCounts> {
    check_rows(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for r in 0..gt.h_samples.len() {
        let g: Vec<f64> = gt.lanes.iter().map(|l| l[r]).filter(|&x| is_present(x)).collect();
        let p: Vec<f64> = pred.lanes.iter().map(|l| l[r]).filter(|&x| is_present(x)).collect();
        if g.is_empty() && p.is_empty() {
            c.tn += 1;
            continue;
        }
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (i, gx) in g.iter().enumerate() {
            for (j, px) in p.iter().enumerate() {
                let d = (gx - px).abs();
                if d <= x_tol {
                    pairs.push((d, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let (mut gu, mut pu) = (vec![false; g.len()], vec![false; p.len()]);
        let mut tp = 0u64;
        for (_, i, j) in pairs {
            if !gu[i] && !pu[j] {
                gu[i] = true;
                pu[j] = true;
                tp += 1;
            }
        }
        c.tp += tp;
        c.fn_ += g.len() as u64 - tp;
        c.fp += p.len() as u64 - tp;
    }
    Ok(c)
}

/// Slope angle of a lane fitted as `x = k·y + b` over its present points.
fn lane_angle(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).filter(|(x, _)| is_present(**x)).map(|(&x, &y)| (x, y)).collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if syy == 0.0 {
        return 0.0;
    }
    let sxy: f64 = pts.iter().map(|p| (p.1 - my) * (p.0 - mx)).sum();
    (sxy / syy).atan()
}

/// Fraction of rows on which two lanes agree within `thresh`; a row absent in
/// both counts as agreement.
fn line_accuracy(pred: &[f64], gt: &[f64], thresh: f64) -> f64 {
    let norm = |x: f64| if is_present(x) { x } else { -100.0 };
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| (norm(**p) - norm(**g)).abs() < thresh)
        .count();
    hits as f64 / gt.len().max(1) as f64
}

/// TuSimple benchmark scoring for one image: per ground-truth lane the best
/// predicted line accuracy with an angle-corrected threshold; lanes below 0.85
/// are missed; unmatched predictions are false positives.
pub fn tusimple_accuracy(pred: &ClipAnnotation, gt: &ClipAnnotation, x_tol: f64) -> Result<LaneAccuracy> {
    check_rows(pred, gt)?;
    let mut line_accs = Vec::with_capacity(gt.lanes.len());
    let (mut matched, mut fn_) = (0usize, 0usize);
    for g in &gt.lanes {
        let thresh = x_tol / lane_angle(g, &gt.h_samples).cos();
        let best = pred
            .lanes
            .iter()
            .map(|p| line_accuracy(p, g, thresh))
            .fold(0.0, f64::max);
        if best < TUSIMPLE_PT_THRESH {
            fn_ += 1;
        } else {
            matched += 1;
        }
        line_accs.push(best);
    }
    let n_gt = gt.lanes.len();
    let fp = pred.lanes.len().saturating_sub(matched);
    if n_gt > 4 && fn_ > 0 {
        fn_ -= 1;
    }
    let mut s: f64 = line_accs.iter().sum();
    if n_gt > 4 {
        s -= line_accs.iter().copied().fold(f64::INFINITY, f64::min);
    }
    let denom = (n_gt.min(4) as f64).max(1.0);
    Ok(LaneAccuracy {
        accuracy: s / denom,
        fp_rate: if pred.lanes.is_empty() { 0.0 } else { fp as f64 / pred.lanes.len() as f64 },
        fn_rate: fn_ as f64 / denom,
    })
}

/// Mean of per-image scores.
pub fn mean_lane_accuracy(scores: &[LaneAccuracy]) -> Option<LaneAccuracy> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    Some(LaneAccuracy {
        accuracy: scores.iter().map(|s| s.accuracy).sum::<f64>() / n,
        fp_rate: scores.iter().map(|s| s.fp_rate).sum::<f64>() / n,
        fn_rate: scores.iter().map(|s| s.fn_rate).sum::<f64>() / n,
    })
}

/// Evaluates predictions against labels matched by `raw_file`. Ground-truth
/// images without a prediction record are scored against an empty prediction.
pub fn evaluate(preds: &[ClipAnnotation], gts: &[ClipAnnotation], x_tol: f64) -> Result<MetricReport> {
    let mut counts = ConfusionCounts::default();
    let mut lane_scores = Vec::with_capacity(gts.len());
    for gt in gts {
        let empty;
        let pred = match preds.iter().find(|p| p.raw_file == gt.raw_file) {
            Some(p) => p,
            None => {
                empty = ClipAnnotation::new(gt.raw_file.clone(), gt.h_samples.clone(), Vec::new());
                &empty
            }
        };
        counts = counts + point_confusion(pred, gt, x_tol)?;
        lane_scores.push(tusimple_accuracy(pred, gt, x_tol)?);
    }
    let mut report = metrics_from_counts(&counts)?;
    report.lane = mean_lane_accuracy(&lane_scores);
    Ok(report)
}

/// Published results, stored verbatim as percentages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceRow {
    pub label: &'static str,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub const PAPER_REFERENCES: [ReferenceRow; 5] = [
    ReferenceRow {
        label: "exp1 (paper reference)",
        accuracy: Some(86.09),
        precision: Some(94.98),
        recall: Some(76.21),
        f1: Some(84.57),
    },
    ReferenceRow {
        label: "exp2 (paper reference)",
        accuracy: Some(89.51),
        precision: Some(94.86),
        recall: Some(83.55),
        f1: Some(88.85),
    },
    ReferenceRow {
        label: "exp3 (paper reference)",
        accuracy: Some(91.50),
        precision: Some(95.23),
        recall: Some(87.38),
        f1: Some(91.13),
    },
    ReferenceRow {
        label: "exp3 extended training (paper reference)",
        accuracy: Some(93.33),
        precision: None,
        recall: None,
        f1: Some(93.23),
    },
    ReferenceRow {
        label: "headline result (paper reference)",
        accuracy: Some(93.40),
        precision: None,
        recall: None,
        f1: None,
    },
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TableRow {
    pub label: String,
    pub source: String,
    /// Percentages.
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
}

impl ComparisonTable {
    pub const HEADER: [&'static str; 6] = ["model", "source", "acc (%)", "prec (%)", "rec (%)", "f1 (%)"];

    /// Tab-separated rendering; missing values are `n/a`.
    pub fn render(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
        let mut s = Self::HEADER.join("\t");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.label,
                r.source,
                cell(r.accuracy),
                cell(r.precision),
                cell(r.recall),
                cell(r.f1)
            ));
        }
        s
    }
}

/// Rows for local reports (and optionally the published references), sorted by
/// F1 descending; rows without F1 go last in input order.
pub fn compare_experiments(reports: &[MetricReport], include_references: bool) -> ComparisonTable {
    let mut rows: Vec<TableRow> = reports
        .iter()
        .map(|r| TableRow {
            label: r.label.clone(),
            source: "local".into(),
            accuracy: Some(100.0 * r.accuracy),
            precision: Some(100.0 * r.precision),
            recall: Some(100.0 * r.recall),
            f1: Some(100.0 * r.f1),
        })
        .collect();
    if include_references {
        rows.extend(PAPER_REFERENCES.iter().map(|r| TableRow {
            label: r.label.into(),
            source: "paper reference".into(),
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
        }));
    }
    rows.sort_by(|a, b| match (a.f1, b.f1) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    ComparisonTable { rows }
}
