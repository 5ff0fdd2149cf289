use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::scan::{read_labels, read_scan, ConditionTag, PointScan};
use crate::data::taxonomy::ClassTaxonomy;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub scan_path: PathBuf,
    pub label_path: Option<PathBuf>,
    pub condition: ConditionTag,
}

impl ManifestEntry {
    pub fn load(&self, taxonomy: &ClassTaxonomy, intensity_scale: f32) -> Result<PointScan> {
        let scan = read_scan(&self.scan_path, self.condition.clone(), intensity_scale)?;
        match &self.label_path {
            Some(p) => {
                let labels = read_labels(p, taxonomy, Some(scan.len()))?;
                scan.with_labels(labels)
            }
            None => Ok(scan),
        }
    }
}

/// A list of scans for one split. On disk: one `<scan>\t<label|->\t<condition>`
/// line per entry, `#` comments allowed, relative paths resolved against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(split: Split, entries: Vec<ManifestEntry>) -> Result<Self> {
        if split != Split::Test {
            if let Some(e) = entries.iter().find(|e| e.label_path.is_none()) {
                return Err(Error::Config(format!(
                    "{split} entry {} has no label file",
                    e.scan_path.display()
                )));
            }
        }
        Ok(Self { split, entries })
    }

    pub fn parse(text: &str, split: Split, base: &Path, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let err = |reason: String| Error::Manifest {
                path: origin.into(),
                line: lineno + 1,
                reason,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!(
                    "expected 3 tab-separated fields, got {}",
                    fields.len()
                )));
            }
            let resolve = |p: &str| {
                let p = Path::new(p);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            };
            let label_path = match fields[1] {
                "-" => None,
                p => Some(resolve(p)),
            };
            if label_path.is_none() && split != Split::Test {
                return Err(err(format!("{split} entries require a label file")));
            }
            let condition = ConditionTag::new(fields[2]).map_err(|e| err(e.to_string()))?;
            entries.push(ManifestEntry {
                scan_path: resolve(fields[0]),
                label_path,
                condition,
            });
        }
        Ok(Self { split, entries })
    }

    pub fn load(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, split, base, path)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                let label = e
                    .label_path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "-".into());
                format!("{}\t{}\t{}\n", e.scan_path.display(), label, e.condition)
            })
            .collect()
    }

    pub fn conditions(&self) -> Vec<ConditionTag> {
        let mut out: Vec<ConditionTag> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.condition) {
                out.push(e.condition.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries_and_resolves_paths() {
        let text = "# comment\na.bin\ta.label\tcar\n/abs/b.bin\t-\tspot\n";
        let m = DatasetManifest::parse(text, Split::Test, Path::new("/data"), Path::new("m.txt"))
            .unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].scan_path, PathBuf::from("/data/a.bin"));
        assert_eq!(
            m.entries[0].label_path,
            Some(PathBuf::from("/data/a.label"))
        );
        assert_eq!(m.entries[1].label_path, None);
        assert_eq!(m.entries[1].condition.as_str(), "spot");
        assert_eq!(m.conditions().len(), 2);
    }

    #[test]
    fn train_requires_labels() {
        let text = "a.bin\t-\tcar\n";
        let err =
            DatasetManifest::parse(text, Split::Train, Path::new("."), Path::new("m")).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 1, .. }));
    }

    #[test]
    fn bad_field_count() {
        let err =
            DatasetManifest::parse("a.bin car\n", Split::Test, Path::new("."), Path::new("m"))
                .unwrap_err();
        assert!(err.to_string().contains("3 tab-separated"));
    }

    #[test]
    fn text_round_trip() {
        let text = "/d/a.bin\t/d/a.label\tcar\n/d/b.bin\t/d/b.label\talice\n";
        let m = DatasetManifest::parse(text, Split::Val, Path::new("/"), Path::new("m")).unwrap();
        assert_eq!(m.to_text(), text);
    }
}
