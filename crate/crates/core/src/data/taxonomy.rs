use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 7;
pub const DEFAULT_IGNORE_INDEX: usize = 255;

/// Superclass names in canonical order.
pub const SUPERCLASS_NAMES: [&str; NUM_CLASSES] = [
    "artificial structures",
    "artificial ground",
    "natural ground",
    "obstacle",
    "vehicle",
    "vegetation",
    "human",
];

/// The 7-superclass label space plus the raw-id remap table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    superclass_names: Vec<String>,
    raw_to_super: BTreeMap<u16, usize>,
    ignore_index: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyFile {
    superclasses: Vec<String>,
    #[serde(default = "default_ignore")]
    ignore_index: usize,
    #[serde(default)]
    remap: BTreeMap<String, usize>,
}

fn default_ignore() -> usize {
    DEFAULT_IGNORE_INDEX
}

impl ClassTaxonomy {
    pub fn new(raw_to_super: BTreeMap<u16, usize>, ignore_index: usize) -> Result<Self> {
        let names = SUPERCLASS_NAMES.iter().map(|s| s.to_string()).collect();
        Self::with_names(names, raw_to_super, ignore_index)
    }

    pub fn with_names(
        superclass_names: Vec<String>,
        raw_to_super: BTreeMap<u16, usize>,
        ignore_index: usize,
    ) -> Result<Self> {
        if superclass_names.len() != NUM_CLASSES {
            return Err(Error::Taxonomy(format!(
                "expected {NUM_CLASSES} superclasses, got {}",
                superclass_names.len()
            )));
        }
        for (i, (got, want)) in superclass_names.iter().zip(SUPERCLASS_NAMES).enumerate() {
            if !got.trim().eq_ignore_ascii_case(want) {
                return Err(Error::Taxonomy(format!(
                    "superclass {i} is {got:?}, expected {want:?}"
                )));
            }
        }
        if ignore_index < NUM_CLASSES {
            return Err(Error::Taxonomy(format!(
                "ignore_index {ignore_index} collides with a superclass index"
            )));
        }
        if let Some((raw, sup)) = raw_to_super.iter().find(|(_, &s)| s >= NUM_CLASSES) {
            return Err(Error::Taxonomy(format!(
                "raw id {raw} maps to {sup}, outside 0..{NUM_CLASSES}"
            )));
        }
        Ok(Self {
            superclass_names,
            raw_to_super,
            ignore_index,
        })
    }

    /// Taxonomy mapping raw ids 0..7 straight onto the superclasses.
    pub fn direct() -> Self {
        let map = (0..NUM_CLASSES).map(|c| (c as u16, c)).collect();
        Self::new(map, DEFAULT_IGNORE_INDEX).expect("direct taxonomy is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: TaxonomyFile =
            toml::from_str(text).map_err(|e| Error::Taxonomy(e.to_string()))?;
        let mut map = BTreeMap::new();
        for (k, v) in file.remap {
            let raw: u16 = k
                .trim()
                .parse()
                .map_err(|_| Error::Taxonomy(format!("raw id {k:?} is not a u16")))?;
            map.insert(raw, v);
        }
        Self::with_names(file.superclasses, map, file.ignore_index)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::from("superclasses = [\n");
        for name in &self.superclass_names {
            out.push_str(&format!("  {name:?},\n"));
        }
        out.push_str(&format!(
            "]\nignore_index = {}\n\n[remap]\n",
            self.ignore_index
        ));
        for (raw, sup) in &self.raw_to_super {
            out.push_str(&format!("{raw} = {sup}\n"));
        }
        out
    }

    pub fn superclass_names(&self) -> &[String] {
        &self.superclass_names
    }

    pub fn ignore_index(&self) -> usize {
        self.ignore_index
    }

    pub fn raw_to_super(&self) -> &BTreeMap<u16, usize> {
        &self.raw_to_super
    }

    pub fn lookup(&self, raw: u16) -> usize {
        self.raw_to_super
            .get(&raw)
            .copied()
            .unwrap_or(self.ignore_index)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.superclass_names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name.trim()))
    }
}

/// Maps raw class ids onto superclass indices; unmapped ids become `ignore_index`.
pub fn remap_labels(raw: &[u16], taxonomy: &ClassTaxonomy) -> Vec<usize> {
    raw.iter().map(|&r| taxonomy.lookup(r)).collect()
}
