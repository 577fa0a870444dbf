//! Cohort manifests: a TOML document listing every slide with its label,
//! source cohort and patient.
//!
//! ```toml
//! label_set = ["normal", "tumor"]
//!
//! [[slides]]
//! slide_id = "s000"
//! path = "slides/s000.h2t"
//! label = "normal"
//! cohort = "discovery"
//! patient_id = "p000"
//! ```
//!
//! Relative slide paths are resolved against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{H2tError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: String,
    pub path: String,
    pub label: String,
    pub cohort: String,
    pub patient_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub label_set: Vec<String>,
    #[serde(default)]
    pub slides: Vec<SlideEntry>,
    /// Directory that relative slide paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CohortManifest {
    pub fn new(label_set: Vec<String>, slides: Vec<SlideEntry>) -> Result<Self> {
        let m = Self {
            label_set,
            slides,
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let labels: HashSet<&str> = self.label_set.iter().map(String::as_str).collect();
        if labels.len() != self.label_set.len() {
            return Err(H2tError::invalid("label_set contains duplicates"));
        }
        let mut ids = HashSet::new();
        for s in &self.slides {
            if s.slide_id.is_empty()
                || s.slide_id.contains(['/', '\\'])
                || s.slide_id == "."
                || s.slide_id == ".."
            {
                return Err(H2tError::invalid(format!(
                    "slide_id {:?} is not usable as a file name",
                    s.slide_id
                )));
            }
            if !ids.insert(s.slide_id.as_str()) {
                return Err(H2tError::invalid(format!(
                    "duplicate slide_id {:?}",
                    s.slide_id
                )));
            }
            if !labels.contains(s.label.as_str()) {
                return Err(H2tError::invalid(format!(
                    "slide {:?} has label {:?} not in label_set",
                    s.slide_id, s.label
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: CohortManifest =
            toml::from_str(text).map_err(|e| H2tError::format(format!("manifest: {e}")))?;
        m.base_dir = base_dir.into();
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest is always serializable")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| H2tError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base).map_err(|e| e.context(path.display()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        super::bytes::write_atomic(path, self.to_toml_string().as_bytes())
    }

    pub fn resolve(&self, slide: &SlideEntry) -> PathBuf {
        let p = Path::new(&slide.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn get(&self, slide_id: &str) -> Option<&SlideEntry> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }

    /// Hex SHA-256 of the canonical TOML serialization (independent of the
    /// source file's formatting).
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    /// A manifest keeping only the slides accepted by `keep`, with the same base dir.
    pub fn filtered(&self, mut keep: impl FnMut(&SlideEntry) -> bool) -> Self {
        Self {
            label_set: self.label_set.clone(),
            slides: self.slides.iter().filter(|s| keep(s)).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    /// Concatenates two manifests sharing a label set. Slide paths are made
    /// absolute-or-relative to each source's base dir.
    pub fn merged(&self, other: &Self) -> Result<Self> {
        if self.label_set != other.label_set {
            return Err(H2tError::invalid("cannot merge manifests with different label sets"));
        }
        let absolutize = |m: &Self, s: &SlideEntry| SlideEntry {
            path: m.resolve(s).to_string_lossy().into_owned(),
            ..s.clone()
        };
        let slides = self
            .slides
            .iter()
            .map(|s| absolutize(self, s))
            .chain(other.slides.iter().map(|s| absolutize(other, s)))
            .collect();
        Self::new(self.label_set.clone(), slides)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, label: &str) -> SlideEntry {
        SlideEntry {
            slide_id: id.into(),
            path: format!("{id}.h2t"),
            label: label.into(),
            cohort: "c".into(),
            patient_id: id.into(),
        }
    }

    #[test]
    fn roundtrip_through_toml() {
        let m = CohortManifest::new(
            vec!["a".into(), "b".into()],
            vec![entry("s1", "a"), entry("s2", "b")],
        )
        .unwrap();
        let text = m.to_toml_string();
        let back = CohortManifest::from_toml_str(&text, "/data").unwrap();
        assert_eq!(back.slides, m.slides);
        assert_eq!(back.resolve(&back.slides[0]), PathBuf::from("/data/s1.h2t"));
        assert_eq!(back.content_hash(), m.content_hash());
    }

    #[test]
    fn rejects_unknown_label_and_duplicates() {
        let err = CohortManifest::new(vec!["a".into()], vec![entry("s1", "z")]).unwrap_err();
        assert!(err.to_string().contains("not in label_set"));
        let err =
            CohortManifest::new(vec!["a".into()], vec![entry("s1", "a"), entry("s1", "a")])
                .unwrap_err();
        assert!(err.to_string().contains("duplicate slide_id"));
        let err = CohortManifest::new(vec!["a".into()], vec![entry("../x", "a")]).unwrap_err();
        assert!(err.to_string().contains("file name"));
    }
}
