//! End-to-end protocol: cohort loading, per-seed training, strategy evaluation and
//! summary tables.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aggregation::{
    mil_train, patient_level_evaluate, ConfidenceRule, MilBag, MilConfig, MilSelector,
    PatientGraphs, Strategy, StrategyKind,
};
use crate::error::{Error, Result};
use crate::graph::{PatchGraph, DEFAULT_RADIUS_FACTOR};
use crate::io::{Cohort, PatientRecord, Split};
use crate::model::{Architecture, DimensionPlan, GnnModel};
use crate::training::{
    mean_std, stratified_split, train, MetricsReport, RunHistory, TrainConfig, DEFAULT_THRESHOLD,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub hidden: [usize; 3],
    pub radius_factor: f64,
    pub threshold: f64,
    pub confidence_rule: ConfidenceRule,
    pub mil: MilConfig,
    pub mil_train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            hidden: DimensionPlan::DEFAULT_HIDDEN,
            radius_factor: DEFAULT_RADIUS_FACTOR,
            threshold: DEFAULT_THRESHOLD,
            confidence_rule: ConfidenceRule::default(),
            mil: MilConfig::default(),
            mil_train: TrainConfig::default(),
        }
    }
}

/// A cohort with every slide's graph built in memory.
#[derive(Debug, Clone)]
pub struct CohortGraphs {
    pub cohort: Cohort,
    graphs: Vec<PatchGraph>,
    index: HashMap<String, usize>,
}

impl CohortGraphs {
    /// Builds all graphs; every slide must share the first slide's feature width.
    pub fn load(cohort: Cohort, radius_factor: f64) -> Result<Self> {
        let mut graphs = Vec::with_capacity(cohort.slides.len());
        let mut dim = None;
        for s in &cohort.slides {
            let g = cohort.load_graph(&s.slide_id, radius_factor, dim)?;
            dim = Some(g.feature_dim());
            graphs.push(g);
        }
        let index = cohort
            .slides
            .iter()
            .enumerate()
            .map(|(k, s)| (s.slide_id.clone(), k))
            .collect();
        Ok(Self { cohort, graphs, index })
    }

    pub fn feature_dim(&self) -> Result<usize> {
        self.graphs
            .first()
            .map(PatchGraph::feature_dim)
            .ok_or_else(|| Error::Validation("cohort has no slides".into()))
    }

    pub fn graphs(&self) -> &[PatchGraph] {
        &self.graphs
    }

    pub fn graph(&self, slide_id: &str) -> Result<&PatchGraph> {
        self.index
            .get(slide_id)
            .map(|&k| &self.graphs[k])
            .ok_or_else(|| Error::Validation(format!("unknown slide id {slide_id}")))
    }

    pub fn patient_graphs(&self, patients: &[PatientRecord]) -> Result<Vec<PatientGraphs<'_>>> {
        patients
            .iter()
            .map(|p| {
                Ok(PatientGraphs {
                    patient_id: p.patient_id.clone(),
                    label: p.label,
                    slides: p
                        .slide_ids
                        .iter()
                        .map(|s| Ok((s.clone(), self.graph(s)?)))
                        .collect::<Result<_>>()?,
                })
            })
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<PatientRecord> {
        self.cohort.patients_in(split).into_iter().cloned().collect()
    }

    /// Every slide of the given patients, labelled with its patient's label.
    pub fn labeled_slides(&self, patients: &[PatientRecord]) -> Result<Vec<(&PatchGraph, u8)>> {
        let mut out = Vec::new();
        for p in patients {
            for s in &p.slide_ids {
                out.push((self.graph(s)?, p.label));
            }
        }
        Ok(out)
    }

    pub fn mil_bags(&self, patients: &[PatientRecord]) -> Result<Vec<MilBag>> {
        self.patient_graphs(patients)?
            .iter()
            .map(MilBag::from_graphs)
            .collect()
    }
}

/// Trains one graph model on the training split with a seed-controlled validation hold-out.
pub fn train_gnn(
    data: &CohortGraphs,
    architecture: Architecture,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(GnnModel, RunHistory)> {
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let (tr, va) = stratified_split(&data.split(Split::Train), train_cfg.validation_fraction, seed)?;
    let model = GnnModel::new(architecture, DimensionPlan::new(data.feature_dim()?, cfg.hidden), seed)?;
    train(model, &data.labeled_slides(&tr)?, &data.labeled_slides(&va)?, &train_cfg)
}

/// Fits the slide selector on training-split patients only.
pub fn train_selector(data: &CohortGraphs, cfg: &ExperimentConfig, seed: u64) -> Result<(MilSelector, RunHistory)> {
    let bags = data.mil_bags(&data.split(Split::Train))?;
    mil_train(&bags, &TrainConfig { seed, ..cfg.mil_train.clone() }, cfg.mil)
}

/// Metrics for one strategy over the test split.
pub fn evaluate_strategy(
    model: &GnnModel,
    data: &CohortGraphs,
    kind: StrategyKind,
    selector: Option<&MilSelector>,
    cfg: &ExperimentConfig,
) -> Result<MetricsReport> {
    let test = data.split(Split::Test);
    let patients = data.patient_graphs(&test)?;
    let strategy = match kind {
        StrategyKind::Wsi => Strategy::Wsi,
        StrategyKind::MajorityVote => Strategy::MajorityVote,
        StrategyKind::OneDominance => Strategy::OneDominance(cfg.confidence_rule),
        StrategyKind::Mil => Strategy::Mil(
            selector.ok_or_else(|| Error::Validation("mil strategy needs a trained selector".into()))?,
        ),
    };
    patient_level_evaluate(model, &patients, strategy, cfg.threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub architecture: Architecture,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub best_epoch: usize,
}

/// Trains every architecture once per seed and scores each requested strategy.
///
/// `progress` is called after each trained model.
pub fn run_protocol(
    data: &CohortGraphs,
    architectures: &[Architecture],
    strategies: &[StrategyKind],
    seeds: &[u64],
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(Architecture, u64, &RunHistory),
) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for &seed in seeds {
        let selector = if strategies.contains(&StrategyKind::Mil) {
            Some(train_selector(data, cfg, seed)?.0)
        } else {
            None
        };
        for &arch in architectures {
            let (model, history) = train_gnn(data, arch, cfg, seed)?;
            progress(arch, seed, &history);
            for &strategy in strategies {
                let metrics = evaluate_strategy(&model, data, strategy, selector.as_ref(), cfg)?;
                records.push(RunRecord {
                    architecture: arch,
                    strategy,
                    seed,
                    metrics: metrics.with_seed(seed),
                    best_epoch: history.best_epoch,
                });
            }
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub architecture: Architecture,
    pub strategy: StrategyKind,
    pub runs: usize,
    pub balanced_accuracy: [f64; 2],
    pub recall: [f64; 2],
    pub specificity: [f64; 2],
}

/// One row per (architecture, strategy) in first-seen order; `[mean, sample std]` pairs.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Architecture, StrategyKind)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.architecture, r.strategy)) {
            keys.push((r.architecture, r.strategy));
        }
    }
    keys.into_iter()
        .map(|(architecture, strategy)| {
            let group: Vec<&MetricsReport> = records
                .iter()
                .filter(|r| r.architecture == architecture && r.strategy == strategy)
                .map(|r| &r.metrics)
                .collect();
            let stat = |f: fn(&MetricsReport) -> f64| {
                let (m, s) = mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
                [m, s]
            };
            SummaryRow {
                architecture,
                strategy,
                runs: group.len(),
                balanced_accuracy: stat(|r| r.balanced_accuracy),
                recall: stat(|r| r.recall),
                specificity: stat(|r| r.specificity),
            }
        })
        .collect()
}

pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<8} {:>4}  {:<17}  {:<17}  {:<17}",
        "model", "strategy", "runs", "balanced acc", "recall", "specificity"
    );
    for r in rows {
        let cell = |v: [f64; 2]| format!("{:.4} ± {:.4}", v[0], v[1]);
        let _ = writeln!(
            out,
            "{:<10} {:<8} {:>4}  {:<17}  {:<17}  {:<17}",
            r.architecture.to_string(),
            r.strategy.to_string(),
            r.runs,
            cell(r.balanced_accuracy),
            cell(r.recall),
            cell(r.specificity)
        );
    }
    out
}
