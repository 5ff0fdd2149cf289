use crate::data::{ConditionTag, PointScan};
use crate::error::{Error, Result};
use crate::metrics::{render_table, report_lines, ConfusionMatrix};
use crate::network::SegModel;
use crate::scalar::Scalar;

/// One confusion matrix per platform plus their sum.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// In first-seen order.
    pub platforms: Vec<(ConditionTag, ConfusionMatrix)>,
    pub merged: ConfusionMatrix,
}

impl EvalReport {
    pub fn per_platform_miou(&self) -> Vec<(ConditionTag, f64)> {
        self.platforms
            .iter()
            .map(|(c, m)| (c.clone(), m.summarize().miou))
            .collect()
    }

    /// One table per platform and one for all of them.
    pub fn render(&self, model_name: &str, class_names: &[String]) -> String {
        let mut out = String::new();
        for (c, m) in &self.platforms {
            out += &render_table(
                &[(model_name.to_string(), m.summarize())],
                c.as_str(),
                class_names,
            );
            out.push('\n');
        }
        out += &render_table(
            &[(model_name.to_string(), self.merged.summarize())],
            "all",
            class_names,
        );
        out
    }

    /// Flat `key=value` report with `<platform>.` and `all.` prefixes.
    pub fn key_values(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        for (c, m) in &self.platforms {
            out += &report_lines(c.as_str(), &m.summarize(), class_names);
        }
        out += &report_lines("all", &self.merged.summarize(), class_names);
        out
    }
}

/// Accumulates metrics of `predict` over labelled scans.
pub fn evaluate_with(
    scans: &[PointScan],
    ignore_index: usize,
    mut predict: impl FnMut(&PointScan) -> Result<Vec<usize>>,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for scan in scans {
        let gt = scan.labels().ok_or(Error::MissingLabels)?;
        let pred = predict(scan)?;
        let idx = match report
            .platforms
            .iter()
            .position(|(c, _)| c == scan.condition())
        {
            Some(i) => i,
            None => {
                report
                    .platforms
                    .push((scan.condition().clone(), ConfusionMatrix::new()));
                report.platforms.len() - 1
            }
        };
        let mut m = ConfusionMatrix::new();
        m.update(&pred, gt, ignore_index)?;
        report.platforms[idx].1.merge(&m);
        report.merged.merge(&m);
    }
    Ok(report)
}

/// Full-resolution evaluation: each voxel's prediction covers all its points.
pub fn evaluate_model<T: Scalar>(
    model: &SegModel<T>,
    scans: &[PointScan],
    ignore_index: usize,
) -> Result<EvalReport> {
    evaluate_with(scans, ignore_index, |s| model.predict_scan(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{synthetic_dataset, SyntheticConfig};

    #[test]
    fn oracle_scores_one_and_merge_adds_up() {
        let scans = synthetic_dataset(&SyntheticConfig::default(), 1).unwrap();
        let report = evaluate_with(&scans, 255, |s| Ok(s.labels().unwrap().to_vec())).unwrap();
        assert_eq!(report.platforms.len(), 3);
        for (_, m) in &report.platforms {
            assert_eq!(m.summarize().miou, 1.0);
        }
        let mut sum = ConfusionMatrix::new();
        for (_, m) in &report.platforms {
            sum.merge(m);
        }
        assert_eq!(sum, report.merged);
    }

    #[test]
    fn predictions_cover_every_point() {
        let scans = synthetic_dataset(&SyntheticConfig::default(), 1).unwrap();
        let cfg = crate::network::ModelConfig {
            stage_channels: vec![8, 16],
            stage_depths: vec![1, 1],
            voxel_size: 0.5,
            ..Default::default()
        };
        let model = SegModel::<f32>::new(cfg, 0, None).unwrap();
        let report = evaluate_model(&model, &scans, 255).unwrap();
        assert_eq!(report.merged.total(), 6 * 500);
    }
}
