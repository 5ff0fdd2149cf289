use std::path::PathBuf;

use crate::data::manifest::DatasetManifest;
use crate::data::taxonomy::{ClassTaxonomy, NUM_CLASSES};
use crate::error::Error;

/// Per-class point fractions over a set of scans.
#[derive(Debug)]
pub struct LabelDistribution {
    pub counts: [u64; NUM_CLASSES],
    pub ignored: u64,
    pub total: u64,
    pub skipped: Vec<(PathBuf, Error)>,
}

impl LabelDistribution {
    pub fn new() -> Self {
        Self {
            counts: [0; NUM_CLASSES],
            ignored: 0,
            total: 0,
            skipped: Vec::new(),
        }
    }

    pub fn add_labels(&mut self, labels: &[usize]) {
        for &l in labels {
            match self.counts.get_mut(l) {
                Some(c) => *c += 1,
                None => self.ignored += 1,
            }
        }
        self.total += labels.len() as u64;
    }

    pub fn fractions(&self) -> [f64; NUM_CLASSES] {
        let mut out = [0.0; NUM_CLASSES];
        if self.total > 0 {
            for (o, &c) in out.iter_mut().zip(&self.counts) {
                *o = c as f64 / self.total as f64;
            }
        }
        out
    }

    pub fn ignore_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.ignored as f64 / self.total as f64
        }
    }

    /// Two-column fraction table, one row per superclass plus the ignored mass.
    pub fn render(&self, taxonomy: &ClassTaxonomy, title: &str) -> String {
        let names = taxonomy.superclass_names();
        let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(16);
        let mut out = format!("{title} ({} points)\n", self.total);
        for (name, f) in names.iter().zip(self.fractions()) {
            out.push_str(&format!("  {name:<width$}  {:>8.4}%\n", 100.0 * f));
        }
        out.push_str(&format!(
            "  {:<width$}  {:>8.4}%\n",
            "unlabeled/other",
            100.0 * self.ignore_fraction()
        ));
        out
    }
}

impl Default for LabelDistribution {
    fn default() -> Self {
        Self::new()
    }
}

/// Counts labels over every entry of `manifest`, in manifest order. Entries
/// whose labels cannot be read are skipped and reported in `skipped`.
pub fn label_distribution(
    manifest: &DatasetManifest,
    taxonomy: &ClassTaxonomy,
) -> LabelDistribution {
    let mut dist = LabelDistribution::new();
    for entry in &manifest.entries {
        let Some(label_path) = &entry.label_path else {
            dist.skipped
                .push((entry.scan_path.clone(), Error::MissingLabels));
            continue;
        };
        match crate::data::scan::read_labels(label_path, taxonomy, None) {
            Ok(labels) => dist.add_labels(&labels),
            Err(e) => dist.skipped.push((label_path.clone(), e)),
        }
    }
    dist
}
