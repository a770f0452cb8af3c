//! Mini-batch Adam training with early stopping, plus evaluation metrics.

mod metrics;
mod split;

pub use metrics::{compute_metrics, mean_std, MetricsReport};
pub use split::{class_weights, stratified_partition, stratified_split};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PatchGraph;
use crate::model::{GnnModel, LossConfig};
use crate::tensor::{adam_step, AdamState, Matrix};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of training patients held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            max_epochs: 100,
            patience: 10,
            batch_size: 32,
            seed: 0,
            validation_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Domain(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Domain(
                "max_epochs, patience and batch_size must be positive".into(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Domain(format!(
                "validation fraction {} must be in (0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_metrics: Option<MetricsReport>,
}

/// Anything with a differentiable weighted-BCE objective over samples of type `S`.
pub trait Trainable<S: ?Sized>: Clone {
    fn sample_loss(&self, sample: &S, label: u8, cfg: &LossConfig) -> Result<f64>;
    fn sample_gradients(&self, sample: &S, label: u8, cfg: &LossConfig) -> Result<(f64, Vec<Matrix>)>;
    fn parameter_shapes(&self) -> Vec<(usize, usize)>;
    fn parameters_mut(&mut self) -> Vec<&mut Matrix>;
}

impl Trainable<PatchGraph> for GnnModel {
    fn sample_loss(&self, graph: &PatchGraph, label: u8, cfg: &LossConfig) -> Result<f64> {
        self.loss(graph, label, cfg)
    }

    fn sample_gradients(
        &self,
        graph: &PatchGraph,
        label: u8,
        cfg: &LossConfig,
    ) -> Result<(f64, Vec<Matrix>)> {
        let (loss, grads) = self.gradients(graph, label, cfg)?;
        Ok((loss, grads.0))
    }

    fn parameter_shapes(&self) -> Vec<(usize, usize)> {
        self.parameters().iter().map(|p| p.shape()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        GnnModel::parameters_mut(self)
    }
}

fn mean_loss<M: Trainable<S>, S: ?Sized>(
    model: &M,
    data: &[(&S, u8)],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for &(s, y) in data {
        total += model.sample_loss(s, y, cfg)?;
    }
    Ok(total / data.len() as f64)
}

/// Generic training loop.
///
/// Each epoch shuffles `train` with a ChaCha8 stream seeded by `cfg.seed`, averages
/// per-sample gradients over each mini-batch in index order and takes one Adam step per
/// batch. Validation loss after each epoch drives early stopping: training stops once
/// `patience` consecutive epochs fail to strictly improve on the best value, and the
/// best parameters are returned.
pub fn fit<M: Trainable<S>, S: ?Sized>(
    mut model: M,
    train: &[(&S, u8)],
    val: &[(&S, u8)],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<(M, RunHistory)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Domain("training and validation sets must be non-empty".into()));
    }
    let shapes = model.parameter_shapes();
    let mut states: Vec<AdamState> = shapes.iter().map(|&(r, c)| AdamState::new(r, c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut history = RunHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        epochs_run: 0,
        stopped_early: false,
        val_metrics: None,
    };
    let mut best_val = f64::INFINITY;
    let mut best_model = model.clone();
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
            for &i in batch {
                let (sample, label) = train[i];
                let (loss, grads) = match model.sample_gradients(sample, label, loss_cfg) {
                    Err(Error::Numeric(_)) => return Err(Error::NonFiniteLoss { epoch, batch: b + 1 }),
                    other => other?,
                };
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
                }
                epoch_loss += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g)?;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for ((param, grad), state) in model.parameters_mut().into_iter().zip(&mut acc).zip(&mut states) {
                grad.scale_in_place(inv);
                adam_step(param, grad, state, cfg.learning_rate, cfg.weight_decay)?;
            }
        }
        let val_loss = match mean_loss(&model, val, loss_cfg) {
            Err(Error::Numeric(_)) => f64::NAN,
            other => other?,
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        history.train_loss.push(epoch_loss / train.len() as f64);
        history.val_loss.push(val_loss);
        history.epochs_run = epoch;
        if val_loss < best_val {
            best_val = val_loss;
            best_model = model.clone();
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok((best_model, history))
}

/// Trains a graph model; class weights come from the training labels.
pub fn train(
    model: GnnModel,
    train: &[(&PatchGraph, u8)],
    val: &[(&PatchGraph, u8)],
    cfg: &TrainConfig,
) -> Result<(GnnModel, RunHistory)> {
    let labels: Vec<u8> = train.iter().map(|&(_, y)| y).collect();
    let loss_cfg = class_weights(&labels)?;
    let (model, mut history) = fit(model, train, val, &loss_cfg, cfg)?;
    history.val_metrics = evaluate(&model, val, DEFAULT_THRESHOLD).ok();
    Ok((model, history))
}

/// Hard label from a probability; the threshold itself counts as positive.
pub fn decide(probability: f64, threshold: f64) -> u8 {
    u8::from(probability >= threshold)
}

pub fn evaluate(model: &GnnModel, data: &[(&PatchGraph, u8)], threshold: f64) -> Result<MetricsReport> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Domain(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut preds = Vec::with_capacity(data.len());
    let mut truth = Vec::with_capacity(data.len());
    for &(g, y) in data {
        preds.push(decide(model.predict(g)?, threshold));
        truth.push(y);
    }
    compute_metrics(&preds, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{assemble_graph, PatchCoordinates};
    use crate::model::{Architecture, DimensionPlan};
    use rand::Rng;

    fn toy_graphs(count: usize, seed: u64) -> Vec<(PatchGraph, u8)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|k| {
                let y = (k % 2) as u8;
                let coords = PatchCoordinates::from_grid(&[(0, 0), (1, 0), (0, 1), (1, 1), (2, 1)], 256).unwrap();
                let shift = if y == 1 { 1.0 } else { -1.0 };
                let data: Vec<f64> = (0..5 * 3).map(|_| shift + 0.3 * rng.random_range(-1.0..1.0)).collect();
                let feats = Matrix::from_vec(5, 3, data).unwrap();
                (assemble_graph(format!("s{k}"), feats, &coords, 1.5).unwrap(), y)
            })
            .collect()
    }

    fn refs(v: &[(PatchGraph, u8)]) -> Vec<(&PatchGraph, u8)> {
        v.iter().map(|(g, y)| (g, *y)).collect()
    }

    fn small_model(arch: Architecture, seed: u64) -> GnnModel {
        GnnModel::new(arch, DimensionPlan::new(3, [8, 6, 4]), seed).unwrap()
    }

    #[test]
    fn zero_learning_rate_stops_after_patience_plus_one() {
        let data = toy_graphs(12, 1);
        let (tr, va) = data.split_at(8);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let model = small_model(Architecture::Gcn, 3);
        let (out, h) = train(model.clone(), &refs(tr), &refs(va), &cfg).unwrap();
        assert!(h.stopped_early);
        assert_eq!(h.epochs_run, cfg.patience + 1);
        assert_eq!(h.best_epoch, 1);
        assert_eq!(out.flatten_parameters(), model.flatten_parameters());
    }

    #[test]
    fn same_seed_same_history() {
        let data = toy_graphs(10, 2);
        let (tr, va) = data.split_at(6);
        let cfg = TrainConfig {
            max_epochs: 5,
            batch_size: 3,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let a = train(small_model(Architecture::Gat { heads: 2 }, 0), &refs(tr), &refs(va), &cfg).unwrap();
        let b = train(small_model(Architecture::Gat { heads: 2 }, 0), &refs(tr), &refs(va), &cfg).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0.flatten_parameters(), b.0.flatten_parameters());
    }

    #[test]
    fn learns_separable_toy_problem() {
        let data = toy_graphs(24, 4);
        let (tr, va) = data.split_at(16);
        let cfg = TrainConfig {
            max_epochs: 60,
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let (m, h) = train(small_model(Architecture::Sage(crate::layers::SageAggregator::Mean), 5), &refs(tr), &refs(va), &cfg).unwrap();
        assert!(h.val_loss[h.best_epoch - 1] < h.val_loss[0]);
        assert_eq!(evaluate(&m, &refs(va), 0.5).unwrap().balanced_accuracy, 1.0);
    }

    #[test]
    fn head_only_descent_is_monotone_for_small_steps() {
        let data = toy_graphs(8, 6);
        let batch = refs(&data);
        let loss_cfg = LossConfig::default();
        let mut model = small_model(Architecture::Gcn, 7);
        let n = model.parameters().len();
        let mut states: Vec<AdamState> = model.parameters()[n - 2..]
            .iter()
            .map(|p| AdamState::new(p.rows(), p.cols()))
            .collect();
        let batch_loss = |m: &GnnModel| mean_loss(m, &batch, &loss_cfg).unwrap();
        let mut prev = batch_loss(&model);
        for _ in 0..10 {
            let mut acc = Gradients::zeros(&model);
            for &(g, y) in &batch {
                acc.add(&model.gradients(g, y, &loss_cfg).unwrap().1);
            }
            let grads: Vec<Matrix> = acc.0.into_iter().map(|g| g.scale(1.0 / batch.len() as f64)).collect();
            let mut params = model.parameters_mut();
            for (k, state) in states.iter_mut().enumerate() {
                adam_step(params[n - 2 + k], &grads[n - 2 + k], state, 1e-4, 0.0).unwrap();
            }
            let now = batch_loss(&model);
            assert!(now <= prev, "{now} > {prev}");
            prev = now;
        }
    }

    struct Gradients(Vec<Matrix>);
    impl Gradients {
        fn zeros(m: &GnnModel) -> Self {
            Self(m.parameters().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect())
        }
        fn add(&mut self, g: &crate::model::Gradients) {
            for (a, b) in self.0.iter_mut().zip(&g.0) {
                a.add_assign(b).unwrap();
            }
        }
    }

    #[test]
    fn nan_loss_is_reported_with_position() {
        let mut data = toy_graphs(6, 8);
        data.truncate(6);
        let mut model = small_model(Architecture::Gcn, 0);
        for p in model.parameters_mut() {
            for (k, v) in p.as_mut_slice().iter_mut().enumerate() {
                *v = if k % 2 == 0 { 1e300 } else { -1e300 };
            }
        }
        let (tr, va) = data.split_at(4);
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        let res = fit(model, &refs(tr), &refs(va), &LossConfig::default(), &cfg);
        assert!(matches!(res, Err(Error::NonFiniteLoss { epoch: 1, batch: 1 })), "{res:?}");
    }

    #[test]
    fn threshold_rule() {
        assert_eq!(decide(0.5, 0.5), 1);
        assert_eq!(decide(0.4999, 0.5), 0);
        assert_eq!(decide(0.0, 0.0), 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TrainConfig::default());
    }
}
