//! Gated-attention multiple-instance selector over slide embeddings.
//!
//! For a bag of `K` slide embeddings `e_k` (standardised with statistics from the
//! training bags):
//!
//! ```text
//! h_k = Pᵀ e_k + b
//! s_k = wᵀ (tanh(Vᵀ h_k) ⊙ σ(Uᵀ h_k))
//! α   = softmax(s)
//! p   = σ(cᵀ Σ_k α_k h_k + c₀)
//! ```
//!
//! The selected slide is `argmax_k α_k`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{weighted_bce, LossConfig};
use crate::tensor::{sigmoid, softmax_backward, softmax_in_place, Matrix};
use crate::training::{class_weights, fit, stratified_partition, RunHistory, TrainConfig, Trainable};

use super::{slide_embedding, PatientGraphs};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilConfig {
    pub attention_dim: usize,
    pub gate_dim: usize,
    /// Standardise embeddings with per-feature mean and std of the training slides.
    pub standardize: bool,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            attention_dim: 16,
            gate_dim: 8,
            standardize: true,
        }
    }
}

/// One patient's slides as embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MilBag {
    pub patient_id: String,
    pub label: u8,
    pub slide_ids: Vec<String>,
    /// `K × d`, row `k` belongs to `slide_ids[k]`.
    pub embeddings: Matrix,
}

impl MilBag {
    pub fn new(patient_id: impl Into<String>, label: u8, slide_ids: Vec<String>, embeddings: Matrix) -> Result<Self> {
        let patient_id = patient_id.into();
        if slide_ids.is_empty() {
            return Err(Error::Domain(format!("patient {patient_id} has an empty bag")));
        }
        if embeddings.rows() != slide_ids.len() {
            return Err(Error::Shape {
                op: "mil_bag",
                left: embeddings.shape(),
                right: (slide_ids.len(), embeddings.cols()),
            });
        }
        Ok(Self {
            patient_id,
            label,
            slide_ids,
            embeddings,
        })
    }

    pub fn from_graphs(patient: &PatientGraphs<'_>) -> Result<Self> {
        let mut rows = Vec::with_capacity(patient.slides.len());
        for (_, g) in &patient.slides {
            rows.push(slide_embedding(g)?);
        }
        if rows.is_empty() {
            return Err(Error::Domain(format!("patient {} has an empty bag", patient.patient_id)));
        }
        Self::new(
            patient.patient_id.clone(),
            patient.label,
            patient.slides.iter().map(|(s, _)| s.clone()).collect(),
            Matrix::from_rows(&rows)?,
        )
    }

    pub fn len(&self) -> usize {
        self.slide_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slide_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideSelection {
    pub patient_id: String,
    pub slide_id: String,
    pub attention: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilSelector {
    config: MilConfig,
    center: Vec<f64>,
    scale: Vec<f64>,
    projector: Matrix,
    projector_bias: Matrix,
    attention_v: Matrix,
    attention_u: Matrix,
    attention_w: Matrix,
    classifier: Matrix,
    classifier_bias: Matrix,
    trained_on: Vec<String>,
}

struct MilTape {
    h: Matrix,
    tanh_part: Matrix,
    gate_part: Matrix,
    alpha: Vec<f64>,
    pooled: Vec<f64>,
    probability: f64,
}

impl MilSelector {
    /// Fresh Glorot-initialised selector with identity standardisation.
    pub fn new(input_dim: usize, config: MilConfig, seed: u64) -> Result<Self> {
        if input_dim == 0 || config.attention_dim == 0 || config.gate_dim == 0 {
            return Err(Error::Domain("MIL dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, g) = (config.attention_dim, config.gate_dim);
        Ok(Self {
            config,
            center: vec![0.0; input_dim],
            scale: vec![1.0; input_dim],
            projector: Matrix::glorot(input_dim, a, &mut rng),
            projector_bias: Matrix::zeros(1, a),
            attention_v: Matrix::glorot(a, g, &mut rng),
            attention_u: Matrix::glorot(a, g, &mut rng),
            attention_w: Matrix::glorot(g, 1, &mut rng),
            classifier: Matrix::glorot(a, 1, &mut rng),
            classifier_bias: Matrix::zeros(1, 1),
            trained_on: Vec::new(),
        })
    }

    pub fn config(&self) -> MilConfig {
        self.config
    }

    pub fn input_dim(&self) -> usize {
        self.center.len()
    }

    /// Patients whose bags were used for fitting (training and validation).
    pub fn trained_on(&self) -> &[String] {
        &self.trained_on
    }

    pub fn parameters(&self) -> Vec<&Matrix> {
        vec![
            &self.projector,
            &self.projector_bias,
            &self.attention_v,
            &self.attention_u,
            &self.attention_w,
            &self.classifier,
            &self.classifier_bias,
        ]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.projector,
            &mut self.projector_bias,
            &mut self.attention_v,
            &mut self.attention_u,
            &mut self.attention_w,
            &mut self.classifier,
            &mut self.classifier_bias,
        ]
    }

    fn fit_standardization(&mut self, bags: &[&MilBag]) {
        let d = self.input_dim();
        let rows: Vec<&[f64]> = bags
            .iter()
            .flat_map(|b| (0..b.len()).map(move |k| b.embeddings.row(k)))
            .collect();
        let n = rows.len() as f64;
        for j in 0..d {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            self.center[j] = mean;
            self.scale[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
    }

    fn standardized(&self, bag: &MilBag) -> Result<Matrix> {
        if bag.is_empty() {
            return Err(Error::Domain(format!("patient {} has an empty bag", bag.patient_id)));
        }
        if bag.embeddings.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "mil_forward",
                left: bag.embeddings.shape(),
                right: (bag.len(), self.input_dim()),
            });
        }
        let mut x = bag.embeddings.clone();
        for k in 0..x.rows() {
            for (j, v) in x.row_mut(k).iter_mut().enumerate() {
                *v = (*v - self.center[j]) / self.scale[j];
            }
        }
        Ok(x)
    }

    fn forward(&self, x: &Matrix) -> Result<MilTape> {
        let mut h = x.matmul(&self.projector)?;
        let bias = self.projector_bias.as_slice();
        for k in 0..h.rows() {
            for (v, b) in h.row_mut(k).iter_mut().zip(bias) {
                *v += b;
            }
        }
        let tanh_part = h.matmul(&self.attention_v)?.map(f64::tanh);
        let gate_part = h.matmul(&self.attention_u)?.map(sigmoid);
        let mut alpha = tanh_part.hadamard(&gate_part)?.matmul(&self.attention_w)?.into_vec();
        softmax_in_place(&mut alpha);
        let mut pooled = vec![0.0; h.cols()];
        for (k, &a) in alpha.iter().enumerate() {
            for (p, v) in pooled.iter_mut().zip(h.row(k)) {
                *p += a * v;
            }
        }
        let logit = crate::tensor::dot(&pooled, self.classifier.as_slice()) + self.classifier_bias.get(0, 0);
        Ok(MilTape {
            h,
            tanh_part,
            gate_part,
            alpha,
            pooled,
            probability: sigmoid(logit),
        })
    }

    fn backward(&self, x: &Matrix, tape: &MilTape, grad_logit: f64) -> Result<Vec<Matrix>> {
        let a = self.config.attention_dim;
        let grad_classifier = Matrix::column(&tape.pooled)?.scale(grad_logit);
        let grad_classifier_bias = Matrix::filled(1, 1, grad_logit);
        let grad_pooled: Vec<f64> = self.classifier.as_slice().iter().map(|c| c * grad_logit).collect();

        let k_count = tape.h.rows();
        let mut grad_h = Matrix::zeros(k_count, a);
        let mut grad_alpha = vec![0.0; k_count];
        for k in 0..k_count {
            grad_alpha[k] = crate::tensor::dot(&grad_pooled, tape.h.row(k));
            for (g, &p) in grad_h.row_mut(k).iter_mut().zip(&grad_pooled) {
                *g = tape.alpha[k] * p;
            }
        }
        let grad_scores = Matrix::column(&softmax_backward(&tape.alpha, &grad_alpha))?;
        let gated = tape.tanh_part.hadamard(&tape.gate_part)?;
        let grad_w = gated.t_matmul(&grad_scores)?;
        let grad_gated = grad_scores.matmul_t(&self.attention_w)?;
        let grad_tanh_pre = grad_gated
            .hadamard(&tape.gate_part)?
            .hadamard(&tape.tanh_part.map(|t| 1.0 - t * t))?;
        let grad_gate_pre = grad_gated
            .hadamard(&tape.tanh_part)?
            .hadamard(&tape.gate_part.map(|s| s * (1.0 - s)))?;
        let grad_v = tape.h.t_matmul(&grad_tanh_pre)?;
        let grad_u = tape.h.t_matmul(&grad_gate_pre)?;
        grad_h.add_assign(&grad_tanh_pre.matmul_t(&self.attention_v)?)?;
        grad_h.add_assign(&grad_gate_pre.matmul_t(&self.attention_u)?)?;
        let grad_projector = x.t_matmul(&grad_h)?;
        let grad_projector_bias = Matrix::from_vec(1, a, grad_h.column_means()?.iter().map(|m| m * k_count as f64).collect())?;
        Ok(vec![
            grad_projector,
            grad_projector_bias,
            grad_v,
            grad_u,
            grad_w,
            grad_classifier,
            grad_classifier_bias,
        ])
    }

    /// Attention weights over the bag's slides, in bag order.
    pub fn attention(&self, bag: &MilBag) -> Result<Vec<f64>> {
        Ok(self.forward(&self.standardized(bag)?)?.alpha)
    }

    /// Raw (pre-softmax) attention scores, in bag order.
    pub fn scores(&self, bag: &MilBag) -> Result<Vec<f64>> {
        let tape = self.forward(&self.standardized(bag)?)?;
        Ok(tape
            .tanh_part
            .hadamard(&tape.gate_part)?
            .matmul(&self.attention_w)?
            .into_vec())
    }

    /// Bag-level survival probability from the attention-pooled embedding.
    pub fn bag_probability(&self, bag: &MilBag) -> Result<f64> {
        Ok(self.forward(&self.standardized(bag)?)?.probability)
    }

    /// Index into `bag.slide_ids` of the highest-attention slide; exact ties go to the
    /// lexicographically smallest slide id.
    pub fn select(&self, bag: &MilBag) -> Result<usize> {
        let scores = self.scores(bag)?;
        let mut best = 0;
        for k in 1..bag.len() {
            let better = scores[k] > scores[best]
                || (scores[k] == scores[best] && bag.slide_ids[k] < bag.slide_ids[best]);
            if better {
                best = k;
            }
        }
        Ok(best)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("MIL checkpoint", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let sel: Self = serde_json::from_str(text).map_err(|e| Error::json("MIL checkpoint", e))?;
        sel.check_shapes()?;
        Ok(sel)
    }

    fn check_shapes(&self) -> Result<()> {
        let (d, a, g) = (self.input_dim(), self.config.attention_dim, self.config.gate_dim);
        let expected = [(d, a), (1, a), (a, g), (a, g), (g, 1), (a, 1), (1, 1)];
        for (p, &want) in self.parameters().iter().zip(&expected) {
            if p.shape() != want {
                return Err(Error::Validation(format!(
                    "MIL checkpoint parameter has shape {:?}, expected {want:?}",
                    p.shape()
                )));
            }
        }
        if self.scale.len() != d || self.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Validation("MIL checkpoint has an invalid standardisation".into()));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl Trainable<MilBag> for MilSelector {
    fn sample_loss(&self, bag: &MilBag, label: u8, cfg: &LossConfig) -> Result<f64> {
        Ok(weighted_bce(self.bag_probability(bag)?, label, cfg))
    }

    fn sample_gradients(&self, bag: &MilBag, label: u8, cfg: &LossConfig) -> Result<(f64, Vec<Matrix>)> {
        let x = self.standardized(bag)?;
        let tape = self.forward(&x)?;
        let p = tape.probability;
        let grads = self.backward(&x, &tape, cfg.weight(label) * (p - f64::from(label)))?;
        Ok((weighted_bce(p, label, cfg), grads))
    }

    fn parameter_shapes(&self) -> Vec<(usize, usize)> {
        self.parameters().iter().map(|p| p.shape()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        MilSelector::parameters_mut(self)
    }
}

/// Fits a selector on `bags` with the same split, weighting and early-stopping protocol as
/// graph-model training.
pub fn mil_train(bags: &[MilBag], cfg: &TrainConfig, mil: MilConfig) -> Result<(MilSelector, RunHistory)> {
    let first = bags
        .first()
        .ok_or_else(|| Error::Domain("MIL training needs at least one bag".into()))?;
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    class_weights(&labels)?;
    let refs: Vec<&MilBag> = bags.iter().collect();
    let (train_bags, val_bags) = stratified_partition(&refs, |b| b.label, cfg.validation_fraction, cfg.seed)?;

    let mut selector = MilSelector::new(first.embeddings.cols(), mil, cfg.seed)?;
    if mil.standardize {
        selector.fit_standardization(&train_bags);
    }
    selector.trained_on = bags.iter().map(|b| b.patient_id.clone()).collect();

    let train_labels: Vec<u8> = train_bags.iter().map(|b| b.label).collect();
    let loss_cfg = class_weights(&train_labels)?;
    let train_set: Vec<(&MilBag, u8)> = train_bags.iter().map(|&b| (b, b.label)).collect();
    let val_set: Vec<(&MilBag, u8)> = val_bags.iter().map(|&b| (b, b.label)).collect();
    fit(selector, &train_set, &val_set, &loss_cfg, cfg)
}

pub fn mil_select(selector: &MilSelector, bags: &[MilBag]) -> Result<Vec<SlideSelection>> {
    bags.iter()
        .map(|bag| {
            let k = selector.select(bag)?;
            let alpha = selector.attention(bag)?;
            Ok(SlideSelection {
                patient_id: bag.patient_id.clone(),
                slide_id: bag.slide_ids[k].clone(),
                attention: alpha[k],
            })
        })
        .collect()
}
