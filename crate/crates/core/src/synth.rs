//! Seeded synthetic cohorts of patch-feature slides.
//!
//! Patch features are isotropic Gaussian noise. Positive patients get a fixed class
//! direction (norm `signal_strength`) added to a random subset of patches on their
//! informative slides: every slide under [`InformativePolicy::All`], exactly one under
//! [`InformativePolicy::OnePerPatient`]. The ids of informative slides are written to a
//! truth sidecar.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DEFAULT_PATCH_STRIDE;
use crate::io::{write_feature_file, write_manifest, SlideFeatureFile, SlideRecord, Split};
use crate::training::stratified_partition;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRUTH_FILE: &str = "truth.json";
pub const SLIDE_DIR: &str = "slides";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InformativePolicy {
    All,
    OnePerPatient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub patients_per_class: usize,
    /// Inclusive range.
    pub slides_per_patient: [usize; 2],
    /// Inclusive range.
    pub patches_per_slide: [usize; 2],
    pub feature_dim: usize,
    pub policy: InformativePolicy,
    pub signal_strength: f64,
    pub noise_scale: f64,
    /// Share of patches on an informative slide that carry the signal.
    pub informative_fraction: f64,
    pub test_fraction: f64,
    pub patch_stride: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patients_per_class: 40,
            slides_per_patient: [2, 5],
            patches_per_slide: [30, 80],
            feature_dim: 32,
            policy: InformativePolicy::All,
            signal_strength: 3.0,
            noise_scale: 1.0,
            informative_fraction: 0.5,
            test_fraction: 0.2,
            patch_stride: DEFAULT_PATCH_STRIDE,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [s_lo, s_hi] = self.slides_per_patient;
        let [p_lo, p_hi] = self.patches_per_slide;
        if self.patients_per_class < 2 {
            return Err(Error::Validation("need at least 2 patients per class".into()));
        }
        if s_lo == 0 || s_lo > s_hi {
            return Err(Error::Validation(format!("bad slides-per-patient range [{s_lo}, {s_hi}]")));
        }
        if p_lo == 0 || p_lo > p_hi {
            return Err(Error::Validation(format!("bad patches-per-slide range [{p_lo}, {p_hi}]")));
        }
        if self.feature_dim == 0 || self.patch_stride == 0 {
            return Err(Error::Validation("feature_dim and patch_stride must be positive".into()));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return Err(Error::Validation(format!("signal strength {} must be >= 0", self.signal_strength)));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Validation(format!("noise scale {} must be > 0", self.noise_scale)));
        }
        if !(self.informative_fraction > 0.0 && self.informative_fraction <= 1.0) {
            return Err(Error::Validation("informative_fraction must be in (0, 1]".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Validation("test_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Ground truth recorded alongside a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub policy: InformativePolicy,
    pub signal_strength: f64,
    pub class_direction: Vec<f64>,
    /// Informative slide ids per positive patient.
    pub informative_slides: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub records: Vec<SlideRecord>,
    pub files: Vec<SlideFeatureFile>,
    pub truth: SynthTruth,
}

fn grid_positions(n: usize, stride: u32, rng: &mut ChaCha8Rng) -> Vec<(u32, u32)> {
    let width = (n as f64).sqrt().ceil() as u32;
    let (ox, oy) = (rng.random_range(0..16u32), rng.random_range(0..16u32));
    (0..n as u32)
        .map(|k| ((ox + k % width) * stride, (oy + k / width) * stride))
        .collect()
}

pub fn synthesize(cfg: &SynthConfig) -> Result<SyntheticCohort> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.feature_dim;

    let mut direction: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut direction {
        *v /= norm;
    }
    let shift: Vec<f64> = direction.iter().map(|v| v * cfg.signal_strength).collect();
    let noise = Normal::new(0.0, cfg.noise_scale).map_err(|e| Error::Validation(e.to_string()))?;

    let n_patients = 2 * cfg.patients_per_class;
    let mut labels: Vec<u8> = (0..n_patients).map(|i| u8::from(i < cfg.patients_per_class)).collect();
    labels.shuffle(&mut rng);
    let ids: Vec<usize> = (0..n_patients).collect();
    let (_, test_ids) = stratified_partition(&ids, |&i| labels[i], cfg.test_fraction, rng.random())?;
    let mut is_test = vec![false; n_patients];
    for i in test_ids {
        is_test[i] = true;
    }

    let mut records = Vec::new();
    let mut files = Vec::new();
    let mut informative_slides = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        let patient_id = format!("P{i:03}");
        let n_slides = rng.random_range(cfg.slides_per_patient[0]..=cfg.slides_per_patient[1]);
        let planted = rng.random_range(0..n_slides);
        let mut informative = Vec::new();
        for s in 0..n_slides {
            let slide_id = format!("{patient_id}-S{s:02}");
            let n_patches = rng.random_range(cfg.patches_per_slide[0]..=cfg.patches_per_slide[1]);
            let mut feats: Vec<f64> = (0..n_patches * d).map(|_| noise.sample(&mut rng)).collect();
            let carries = label == 1
                && match cfg.policy {
                    InformativePolicy::All => true,
                    InformativePolicy::OnePerPatient => s == planted,
                };
            if carries {
                let mut patches: Vec<usize> = (0..n_patches).collect();
                patches.shuffle(&mut rng);
                let count = ((cfg.informative_fraction * n_patches as f64).round() as usize).max(1);
                for &p in &patches[..count] {
                    for (v, sh) in feats[p * d..(p + 1) * d].iter_mut().zip(&shift) {
                        *v += sh;
                    }
                }
                informative.push(slide_id.clone());
            }
            let coords = grid_positions(n_patches, cfg.patch_stride, &mut rng);
            files.push(SlideFeatureFile::new(
                d,
                cfg.patch_stride,
                feats.iter().map(|&v| v as f32).collect(),
                coords,
            )?);
            records.push(SlideRecord {
                patient_id: patient_id.clone(),
                slide_id: slide_id.clone(),
                category: None,
                features: PathBuf::from(SLIDE_DIR).join(format!("{slide_id}.wsif")),
                label,
                split: if is_test[i] { Split::Test } else { Split::Train },
            });
        }
        if label == 1 {
            informative_slides.insert(patient_id, informative);
        }
    }
    Ok(SyntheticCohort {
        records,
        files,
        truth: SynthTruth {
            policy: cfg.policy,
            signal_strength: cfg.signal_strength,
            class_direction: direction,
            informative_slides,
        },
    })
}

/// Writes `manifest.jsonl`, `slides/*.wsif` and `truth.json` under `out_dir`.
pub fn write_cohort(cohort: &SyntheticCohort, out_dir: &Path) -> Result<PathBuf> {
    let slide_dir = out_dir.join(SLIDE_DIR);
    std::fs::create_dir_all(&slide_dir).map_err(|e| Error::io(&slide_dir, e))?;
    for (rec, file) in cohort.records.iter().zip(&cohort.files) {
        write_feature_file(file, &out_dir.join(&rec.features))?;
    }
    let manifest = out_dir.join(MANIFEST_FILE);
    write_manifest(&cohort.records, &manifest)?;
    let truth_path = out_dir.join(TRUTH_FILE);
    let text = serde_json::to_string_pretty(&cohort.truth).map_err(|e| Error::json("truth sidecar", e))?;
    std::fs::write(&truth_path, text).map_err(|e| Error::io(&truth_path, e))?;
    Ok(manifest)
}

/// Generates a cohort and writes it; returns the manifest path.
pub fn generate_synthetic_cohort(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    write_cohort(&synthesize(cfg)?, out_dir)
}

pub fn read_truth(path: &Path) -> Result<SynthTruth> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json("truth sidecar", e))
}
