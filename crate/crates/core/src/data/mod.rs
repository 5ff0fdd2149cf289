//! Scan and label I/O, class remapping, manifests and label statistics.

pub mod manifest;
pub mod scan;
pub mod stats;
pub mod taxonomy;

pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use scan::{
    read_labels, read_raw_labels, read_scan, write_raw_labels, write_scan, ConditionTag, PointScan,
};
pub use stats::{label_distribution, LabelDistribution};
pub use taxonomy::{
    remap_labels, ClassTaxonomy, DEFAULT_IGNORE_INDEX, NUM_CLASSES, SUPERCLASS_NAMES,
};
