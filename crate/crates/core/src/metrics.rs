//! Confusion matrices, IoU/accuracy summaries, report tables and error-colored
//! point cloud export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub ignored: u64,
}

/// Per-class and aggregate metrics. Entries for classes absent from both
/// ground truth and predictions are NaN and excluded from the means.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub per_class_iou: [f64; NUM_CLASSES],
    pub per_class_acc: [f64; NUM_CLASSES],
    pub miou: f64,
    pub macc: f64,
    pub allacc: f64,
    /// No point was counted; every metric is NaN.
    pub empty: bool,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, pred: &[usize], gt: &[usize], ignore_index: usize) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::LabelMismatch {
                labels: gt.len(),
                points: pred.len(),
            });
        }
        if let Some((index, &p)) = pred.iter().enumerate().find(|(_, &p)| p >= NUM_CLASSES) {
            return Err(Error::InvalidPrediction { index, pred: p });
        }
        if let Some((i, &g)) = gt
            .iter()
            .enumerate()
            .find(|(_, &g)| g >= NUM_CLASSES && g != ignore_index)
        {
            return Err(Error::shape(
                "confusion_update",
                format!("ground truth {g} at index {i}"),
            ));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore_index {
                self.ignored += 1;
            } else {
                self.counts[g][p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (c, x) in row.iter_mut().zip(o) {
                *c += x;
            }
        }
        self.ignored += other.ignored;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn summarize(&self) -> Summary {
        let total = self.total();
        let mut iou = [f64::NAN; NUM_CLASSES];
        let mut acc = [f64::NAN; NUM_CLASSES];
        let mut tp_sum = 0;
        let (mut iou_sum, mut acc_sum, mut present) = (0.0, 0.0, 0);
        for c in 0..NUM_CLASSES {
            let tp = self.counts[c][c];
            let fn_ = self.counts[c].iter().sum::<u64>() - tp;
            let fp = (0..NUM_CLASSES).map(|g| self.counts[g][c]).sum::<u64>() - tp;
            tp_sum += tp;
            if tp + fp + fn_ == 0 {
                continue;
            }
            iou[c] = tp as f64 / (tp + fp + fn_) as f64;
            // predicted but never present: recall counts as zero
            acc[c] = if tp + fn_ == 0 {
                0.0
            } else {
                tp as f64 / (tp + fn_) as f64
            };
            iou_sum += iou[c];
            acc_sum += acc[c];
            present += 1;
        }
        let mean = |s: f64| {
            if present == 0 {
                f64::NAN
            } else {
                s / present as f64
            }
        };
        Summary {
            per_class_iou: iou,
            per_class_acc: acc,
            miou: mean(iou_sum),
            macc: mean(acc_sum),
            allacc: if total == 0 {
                f64::NAN
            } else {
                tp_sum as f64 / total as f64
            },
            empty: total == 0,
        }
    }
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.4}")
    }
}

/// One row per model: seven `IoU / Acc` class cells, then mIoU, mAcc, allAcc.
pub fn render_table(rows: &[(String, Summary)], platform: &str, class_names: &[String]) -> String {
    let mut header: Vec<String> = vec!["Model".into()];
    header.extend(class_names.iter().cloned());
    header.extend(["mIoU", "mAcc", "allAcc"].map(String::from));
    let mut body: Vec<Vec<String>> = Vec::with_capacity(rows.len());
    for (model, s) in rows {
        let mut r = vec![model.clone()];
        r.extend((0..NUM_CLASSES).map(|c| {
            format!(
                "{} / {}",
                cell(s.per_class_iou[c]),
                cell(s.per_class_acc[c])
            )
        }));
        r.extend([s.miou, s.macc, s.allacc].map(cell));
        body.push(r);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|j| {
            body.iter()
                .map(|r| r[j].len())
                .chain([header[j].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = format!("{platform}\n");
    out += &line(&header);
    out += &format!(
        "|{}|\n",
        widths
            .iter()
            .map(|w| "-".repeat(w + 2))
            .collect::<Vec<_>>()
            .join("|")
    );
    for r in &body {
        out += &line(r);
    }
    out
}

/// Flat `key=value` lines, keys prefixed with `prefix.`.
pub fn report_lines(prefix: &str, s: &Summary, class_names: &[String]) -> String {
    let mut out = String::new();
    for (c, name) in class_names.iter().enumerate().take(NUM_CLASSES) {
        let key = name.to_ascii_lowercase().replace(' ', "_");
        let _ = writeln!(out, "{prefix}.iou.{key}={}", s.per_class_iou[c]);
        let _ = writeln!(out, "{prefix}.acc.{key}={}", s.per_class_acc[c]);
    }
    let _ = writeln!(out, "{prefix}.miou={}", s.miou);
    let _ = writeln!(out, "{prefix}.macc={}", s.macc);
    let _ = writeln!(out, "{prefix}.allacc={}", s.allacc);
    out
}

pub const WHITE: [u8; 3] = [255, 255, 255];
pub const RED: [u8; 3] = [255, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];
pub const GRAY: [u8; 3] = [128, 128, 128];

/// Error colors per point. With a selected class, misses of that class are
/// red and false alarms blue; without one, every mismatch is red.
pub fn error_colors(
    pred: &[usize],
    gt: &[usize],
    selected: Option<usize>,
    ignore_index: usize,
) -> Result<Vec<[u8; 3]>> {
    if pred.len() != gt.len() {
        return Err(Error::LabelMismatch {
            labels: gt.len(),
            points: pred.len(),
        });
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            if g == ignore_index {
                return GRAY;
            }
            match selected {
                Some(c) if g == c && p != c => RED,
                Some(c) if p == c && g != c => BLUE,
                Some(_) => WHITE,
                None if p != g => RED,
                None => WHITE,
            }
        })
        .collect())
}

/// Writes an ASCII PLY with `x y z red green blue` vertices.
pub fn write_ply(path: impl AsRef<Path>, coords: &[[f32; 3]], colors: &[[u8; 3]]) -> Result<()> {
    if coords.len() != colors.len() {
        return Err(Error::shape(
            "write_ply",
            format!("{} points, {} colors", coords.len(), colors.len()),
        ));
    }
    let mut out = String::with_capacity(coords.len() * 32 + 200);
    out += "ply\nformat ascii 1.0\n";
    let _ = writeln!(out, "element vertex {}", coords.len());
    out += "property float x\nproperty float y\nproperty float z\n";
    out += "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
    for (p, c) in coords.iter().zip(colors) {
        let _ = writeln!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
