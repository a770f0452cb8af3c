//! Line-delimited JSON cohort manifests.
//!
//! One object per slide:
//! `{"patient_id": "P001", "slide_id": "P001-S1", "category": "DX1", "features": "slides/P001-S1.wsif", "label": 1, "split": "train"}`.
//! `category` is optional; `features` is resolved relative to the manifest's directory.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{assemble_graph, PatchGraph};

use super::feature_file::read_feature_file;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideRecord {
    pub patient_id: String,
    pub slide_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub features: PathBuf,
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub slide_ids: Vec<String>,
    pub label: u8,
    pub split: Split,
}

/// Restricts which manifest rows are loaded.
#[derive(Debug, Clone, Default)]
pub struct CohortFilter {
    /// Keep only slides whose category is in this list.
    pub categories: Option<Vec<String>>,
}

impl CohortFilter {
    fn keeps(&self, slide: &SlideRecord) -> bool {
        match &self.categories {
            None => true,
            Some(keep) => slide
                .category
                .as_ref()
                .is_some_and(|c| keep.iter().any(|k| k == c)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cohort {
    base_dir: PathBuf,
    /// Non-blank rows in the manifest file.
    pub rows_read: usize,
    pub slides: Vec<SlideRecord>,
    pub patients: Vec<PatientRecord>,
    slide_index: HashMap<String, usize>,
}

impl Cohort {
    fn from_slides(base_dir: PathBuf, rows_read: usize, slides: Vec<SlideRecord>) -> Result<Self> {
        let mut slide_index = HashMap::with_capacity(slides.len());
        let mut patients: Vec<PatientRecord> = Vec::new();
        let mut patient_index: HashMap<String, usize> = HashMap::new();
        for (k, s) in slides.iter().enumerate() {
            if s.label > 1 {
                return Err(Error::Validation(format!(
                    "slide {} has label {}, expected 0 or 1",
                    s.slide_id, s.label
                )));
            }
            if slide_index.insert(s.slide_id.clone(), k).is_some() {
                return Err(Error::Validation(format!("duplicate slide id {}", s.slide_id)));
            }
            match patient_index.get(&s.patient_id) {
                Some(&p) => {
                    let rec = &mut patients[p];
                    if rec.label != s.label {
                        return Err(Error::Validation(format!(
                            "patient {} has conflicting labels ({} and {})",
                            s.patient_id, rec.label, s.label
                        )));
                    }
                    if rec.split != s.split {
                        return Err(Error::Validation(format!(
                            "patient {} appears in both {} and {} splits",
                            s.patient_id, rec.split, s.split
                        )));
                    }
                    rec.slide_ids.push(s.slide_id.clone());
                }
                None => {
                    patient_index.insert(s.patient_id.clone(), patients.len());
                    patients.push(PatientRecord {
                        patient_id: s.patient_id.clone(),
                        slide_ids: vec![s.slide_id.clone()],
                        label: s.label,
                        split: s.split,
                    });
                }
            }
        }
        Ok(Self {
            base_dir,
            rows_read,
            slides,
            patients,
            slide_index,
        })
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn slide(&self, slide_id: &str) -> Option<&SlideRecord> {
        self.slide_index.get(slide_id).map(|&k| &self.slides[k])
    }

    pub fn patients_in(&self, split: Split) -> Vec<&PatientRecord> {
        self.patients.iter().filter(|p| p.split == split).collect()
    }

    pub fn feature_path(&self, slide: &SlideRecord) -> PathBuf {
        if slide.features.is_absolute() {
            slide.features.clone()
        } else {
            self.base_dir.join(&slide.features)
        }
    }

    /// Reads a slide's features and builds its patch graph.
    ///
    /// `expected_dim`, when given, must match the stored feature width.
    pub fn load_graph(
        &self,
        slide_id: &str,
        radius_factor: f64,
        expected_dim: Option<usize>,
    ) -> Result<PatchGraph> {
        let slide = self
            .slide(slide_id)
            .ok_or_else(|| Error::Validation(format!("unknown slide id {slide_id}")))?;
        let path = self.feature_path(slide);
        let file = read_feature_file(&path)?;
        if let Some(d) = expected_dim {
            if file.dim() != d {
                return Err(Error::Validation(format!(
                    "{} has feature width {}, expected {d}",
                    path.display(),
                    file.dim()
                )));
            }
        }
        assemble_graph(
            slide_id,
            file.features(),
            &file.coordinates()?,
            radius_factor,
        )
    }
}

pub fn parse_manifest(text: &str) -> Result<(usize, Vec<SlideRecord>)> {
    let mut rows = 0;
    let mut slides = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let rec: SlideRecord = serde_json::from_str(line)
            .map_err(|e| Error::json(format!("manifest line {}", lineno + 1), e))?;
        slides.push(rec);
    }
    Ok((rows, slides))
}

/// Loads a manifest, groups slides into patients, and checks every feature path exists.
pub fn load_cohort(manifest_path: &Path, filter: &CohortFilter) -> Result<Cohort> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let (rows_read, slides) = parse_manifest(&text)?;
    let base_dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let kept: Vec<SlideRecord> = slides.into_iter().filter(|s| filter.keeps(s)).collect();
    let cohort = Cohort::from_slides(base_dir, rows_read, kept)?;
    for s in &cohort.slides {
        let path = cohort.feature_path(s);
        if !path.is_file() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "feature file not found"),
            ));
        }
    }
    Ok(cohort)
}

pub fn write_manifest(slides: &[SlideRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for s in slides {
        serde_json::to_writer(&mut out, s).map_err(|e| Error::json("manifest", e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
