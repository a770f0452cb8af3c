//! Patient-level prediction from per-slide probabilities.

mod mil;

pub use mil::{mil_select, mil_train, MilBag, MilConfig, MilSelector, SlideSelection};

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PatchGraph;
use crate::model::GnnModel;
use crate::training::{compute_metrics, decide, MetricsReport};

/// Probability comparisons closer than this are treated as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub patient_id: String,
    pub probability: f64,
    pub label: u8,
}

impl SlidePrediction {
    pub fn new(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        probability: f64,
        threshold: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::Domain(format!("probability {probability} outside [0, 1]")));
        }
        Ok(Self {
            slide_id: slide_id.into(),
            patient_id: patient_id.into(),
            probability,
            label: decide(probability, threshold),
        })
    }
}

/// How one-dominance ranks slides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceRule {
    /// `|p − threshold|`.
    #[default]
    DistanceFromThreshold,
    /// Highest `p`, so the most confident positive.
    MaxProbability,
}

/// Mean of raw patch features, the instance representation used by the MIL selector.
pub fn slide_embedding(graph: &PatchGraph) -> Result<Vec<f64>> {
    if graph.num_nodes() == 0 {
        return Err(Error::Domain(format!("slide {} has no patches", graph.slide_id)));
    }
    graph.features.column_means()
}

fn check_bag(preds: &[SlidePrediction]) -> Result<()> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Domain("cannot aggregate an empty slide list".into()))?;
    if let Some(other) = preds.iter().find(|p| p.patient_id != first.patient_id) {
        return Err(Error::Validation(format!(
            "slide list mixes patients {} and {}",
            first.patient_id, other.patient_id
        )));
    }
    Ok(())
}

/// Most frequent slide label; an even split goes to `mean probability >= threshold`.
pub fn aggregate_majority_vote(preds: &[SlidePrediction], threshold: f64) -> Result<u8> {
    check_bag(preds)?;
    let positives = preds.iter().filter(|p| p.label == 1).count();
    let negatives = preds.len() - positives;
    Ok(match positives.cmp(&negatives) {
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Equal => {
            let mean = preds.iter().map(|p| p.probability).sum::<f64>() / preds.len() as f64;
            u8::from(mean >= threshold - TIE_TOLERANCE)
        }
    })
}

/// Index of the slide whose prediction dominates; ties go to the lowest slide id.
pub fn one_dominance_winner(
    preds: &[SlidePrediction],
    threshold: f64,
    rule: ConfidenceRule,
) -> Result<usize> {
    check_bag(preds)?;
    let score = |p: &SlidePrediction| match rule {
        ConfidenceRule::DistanceFromThreshold => (p.probability - threshold).abs(),
        ConfidenceRule::MaxProbability => p.probability,
    };
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].slide_id.cmp(&preds[b].slide_id));
    let mut best = order[0];
    for &k in &order[1..] {
        if score(&preds[k]) > score(&preds[best]) + TIE_TOLERANCE {
            best = k;
        }
    }
    Ok(best)
}

pub fn aggregate_one_dominance(
    preds: &[SlidePrediction],
    threshold: f64,
    rule: ConfidenceRule,
) -> Result<u8> {
    Ok(preds[one_dominance_winner(preds, threshold, rule)?].label)
}

/// One patient with the graphs of all of their slides.
#[derive(Debug, Clone)]
pub struct PatientGraphs<'a> {
    pub patient_id: String,
    pub label: u8,
    /// `(slide_id, graph)` pairs.
    pub slides: Vec<(String, &'a PatchGraph)>,
}

#[derive(Debug, Clone, Copy)]
pub enum Strategy<'a> {
    /// Every slide scored independently against its patient's label.
    Wsi,
    MajorityVote,
    OneDominance(ConfidenceRule),
    /// The GNN scores only the slide the selector picks.
    Mil(&'a MilSelector),
}

/// Strategy names as used on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "wsi")]
    Wsi,
    #[serde(rename = "mv")]
    MajorityVote,
    #[serde(rename = "1d")]
    OneDominance,
    #[serde(rename = "mil")]
    Mil,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Wsi,
        StrategyKind::MajorityVote,
        StrategyKind::OneDominance,
        StrategyKind::Mil,
    ];
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::Wsi => "wsi",
            StrategyKind::MajorityVote => "mv",
            StrategyKind::OneDominance => "1d",
            StrategyKind::Mil => "mil",
        })
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wsi" => Ok(StrategyKind::Wsi),
            "mv" => Ok(StrategyKind::MajorityVote),
            "1d" => Ok(StrategyKind::OneDominance),
            "mil" => Ok(StrategyKind::Mil),
            other => Err(Error::Validation(format!(
                "unknown strategy {other:?}, expected wsi|mv|1d|mil"
            ))),
        }
    }
}

fn predict_slides(
    model: &GnnModel,
    patient: &PatientGraphs<'_>,
    threshold: f64,
) -> Result<Vec<SlidePrediction>> {
    patient
        .slides
        .iter()
        .map(|(sid, g)| SlidePrediction::new(sid.clone(), patient.patient_id.clone(), model.predict(g)?, threshold))
        .collect()
}

/// Per-patient (or per-slide, for `Wsi`) decisions as `(id, predicted, truth)`.
pub fn patient_level_decisions(
    model: &GnnModel,
    patients: &[PatientGraphs<'_>],
    strategy: Strategy<'_>,
    threshold: f64,
) -> Result<Vec<(String, u8, u8)>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Domain(format!("threshold {threshold} outside [0, 1]")));
    }
    if let Some(empty) = patients.iter().find(|p| p.slides.is_empty()) {
        return Err(Error::Validation(format!("patient {} has no slides", empty.patient_id)));
    }
    if let Strategy::Mil(selector) = strategy {
        let trained: HashSet<&str> = selector.trained_on().iter().map(String::as_str).collect();
        if let Some(p) = patients.iter().find(|p| trained.contains(p.patient_id.as_str())) {
            return Err(Error::Validation(format!(
                "selector was fitted on patient {}, refusing to evaluate on it",
                p.patient_id
            )));
        }
    }
    let mut out = Vec::new();
    for patient in patients {
        match strategy {
            Strategy::Wsi => {
                for pred in predict_slides(model, patient, threshold)? {
                    out.push((pred.slide_id, pred.label, patient.label));
                }
            }
            Strategy::MajorityVote => {
                let preds = predict_slides(model, patient, threshold)?;
                out.push((patient.patient_id.clone(), aggregate_majority_vote(&preds, threshold)?, patient.label));
            }
            Strategy::OneDominance(rule) => {
                let preds = predict_slides(model, patient, threshold)?;
                out.push((
                    patient.patient_id.clone(),
                    aggregate_one_dominance(&preds, threshold, rule)?,
                    patient.label,
                ));
            }
            Strategy::Mil(selector) => {
                let bag = MilBag::from_graphs(patient)?;
                let pick = selector.select(&bag)?;
                let graph = patient.slides[pick].1;
                out.push((
                    patient.patient_id.clone(),
                    decide(model.predict(graph)?, threshold),
                    patient.label,
                ));
            }
        }
    }
    Ok(out)
}

pub fn patient_level_evaluate(
    model: &GnnModel,
    patients: &[PatientGraphs<'_>],
    strategy: Strategy<'_>,
    threshold: f64,
) -> Result<MetricsReport> {
    let decisions = patient_level_decisions(model, patients, strategy, threshold)?;
    let preds: Vec<u8> = decisions.iter().map(|d| d.1).collect();
    let truth: Vec<u8> = decisions.iter().map(|d| d.2).collect();
    compute_metrics(&preds, &truth)
}
