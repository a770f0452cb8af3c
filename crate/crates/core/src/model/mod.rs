//! Three-layer GNN with global average pooling and a sigmoid head, trained with
//! class-weighted binary cross-entropy.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PatchGraph;
use crate::layers::{GatLayer, GcnLayer, Layer, LayerTape, SageAggregator, SageLayer};
use crate::tensor::{sigmoid, Activation, Matrix};

pub const NUM_LAYERS: usize = 3;
/// Lower/upper clamp on probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    Gcn,
    Gat { heads: u8 },
    Sage(SageAggregator),
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::Gcn,
        Architecture::Gat { heads: 1 },
        Architecture::Gat { heads: 2 },
        Architecture::Sage(SageAggregator::Mean),
        Architecture::Sage(SageAggregator::Max),
    ];
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Gcn => f.write_str("gcn"),
            Architecture::Gat { heads } => write!(f, "gat{heads}"),
            Architecture::Sage(agg) => write!(f, "sage-{agg}"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Architecture::Gcn),
            "gat1" => Ok(Architecture::Gat { heads: 1 }),
            "gat2" => Ok(Architecture::Gat { heads: 2 }),
            "sage-mean" => Ok(Architecture::Sage(SageAggregator::Mean)),
            "sage-max" => Ok(Architecture::Sage(SageAggregator::Max)),
            other => Err(Error::Validation(format!(
                "unknown architecture {other:?} (expected gcn|gat1|gat2|sage-mean|sage-max)"
            ))),
        }
    }
}

impl Serialize for Architecture {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Input width followed by the output widths of the three GNN layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionPlan {
    pub input: usize,
    pub hidden: [usize; NUM_LAYERS],
}

impl DimensionPlan {
    pub const DEFAULT_HIDDEN: [usize; NUM_LAYERS] = [256, 128, 64];

    pub fn new(input: usize, hidden: [usize; NUM_LAYERS]) -> Self {
        Self { input, hidden }
    }

    /// 1024 → 256 → 128 → 64 for ResNet-50 embeddings.
    pub fn with_default_hidden(input: usize) -> Self {
        Self::new(input, Self::DEFAULT_HIDDEN)
    }

    pub fn output(&self) -> usize {
        self.hidden[NUM_LAYERS - 1]
    }

    fn widths(&self) -> [(usize, usize); NUM_LAYERS] {
        [
            (self.input, self.hidden[0]),
            (self.hidden[0], self.hidden[1]),
            (self.hidden[1], self.hidden[2]),
        ]
    }
}

/// Per-class loss weights `(w₀, w₁)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub class_weights: [f64; 2],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            class_weights: [1.0, 1.0],
        }
    }
}

impl LossConfig {
    pub fn new(w0: f64, w1: f64) -> Result<Self> {
        if !(w0 > 0.0 && w1 > 0.0) || !w0.is_finite() || !w1.is_finite() {
            return Err(Error::Domain(format!("class weights must be positive, got ({w0}, {w1})")));
        }
        Ok(Self {
            class_weights: [w0, w1],
        })
    }

    #[inline]
    pub fn weight(&self, label: u8) -> f64 {
        self.class_weights[usize::from(label != 0)]
    }
}

/// `−w_y · [y ln p + (1 − y) ln(1 − p)]` with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn weighted_bce(p: f64, y: u8, cfg: &LossConfig) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let ll = if y != 0 { p.ln() } else { (1.0 - p).ln() };
    -cfg.weight(y) * ll
}

/// Column-wise mean over nodes.
pub fn global_average_pool(h: &Matrix) -> Result<Vec<f64>> {
    if h.rows() == 0 || h.cols() == 0 {
        return Err(Error::Domain("global average pool of an empty matrix".into()));
    }
    h.column_means()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    architecture: Architecture,
    plan: DimensionPlan,
    layers: Vec<Layer>,
    /// `d_final × 1`
    pub head_weight: Matrix,
    /// `1 × 1`, kept as a matrix so every parameter shares one optimiser path.
    pub head_bias: Matrix,
}

/// Model-level forward cache.
#[derive(Debug, Clone)]
pub struct ModelTape {
    layer_tapes: Vec<LayerTape>,
    num_nodes: usize,
    pooled: Vec<f64>,
    pub logit: f64,
    pub probability: f64,
}

/// Gradients aligned with [`GnnModel::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Matrix>);

impl Gradients {
    pub fn zeros_like(model: &GnnModel) -> Self {
        Gradients(
            model
                .parameters()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| g.scale_in_place(factor));
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }
}

impl GnnModel {
    /// Glorot-initialised model; ReLU after every GNN layer.
    pub fn new(architecture: Architecture, plan: DimensionPlan, seed: u64) -> Result<Self> {
        if plan.input == 0 || plan.hidden.contains(&0) {
            return Err(Error::Validation(format!("widths must be positive: {plan:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = Activation::Relu;
        let mut layers = Vec::with_capacity(NUM_LAYERS);
        for (d_in, d_out) in plan.widths() {
            let layer = match architecture {
                Architecture::Gcn => Layer::Gcn(GcnLayer::new(d_in, d_out, act, &mut rng)),
                Architecture::Gat { heads } => {
                    let heads = usize::from(heads);
                    if d_out % heads != 0 {
                        return Err(Error::Validation(format!(
                            "layer width {d_out} not divisible by {heads} heads"
                        )));
                    }
                    Layer::Gat(GatLayer::new(d_in, d_out / heads, heads, act, &mut rng)?)
                }
                Architecture::Sage(agg) => {
                    Layer::Sage(SageLayer::new(d_in, d_out, agg, act, &mut rng))
                }
            };
            layers.push(layer);
        }
        let head_weight = Matrix::glorot(plan.output(), 1, &mut rng);
        Ok(Self {
            architecture,
            plan,
            layers,
            head_weight,
            head_bias: Matrix::zeros(1, 1),
        })
    }

    pub(crate) fn from_parts(
        architecture: Architecture,
        plan: DimensionPlan,
        layers: Vec<Layer>,
        head_weight: Matrix,
        head_bias: Matrix,
    ) -> Result<Self> {
        if layers.len() != NUM_LAYERS {
            return Err(Error::Validation(format!("expected {NUM_LAYERS} layers, got {}", layers.len())));
        }
        let mut width = plan.input;
        for (k, layer) in layers.iter().enumerate() {
            if layer.in_dim() != width || layer.out_dim() != plan.hidden[k] {
                return Err(Error::Validation(format!(
                    "layer {k} is {}→{}, plan expects {width}→{}",
                    layer.in_dim(),
                    layer.out_dim(),
                    plan.hidden[k]
                )));
            }
            width = layer.out_dim();
        }
        if head_weight.shape() != (width, 1) || head_bias.shape() != (1, 1) {
            return Err(Error::Validation("head shape does not match final width".into()));
        }
        Ok(Self {
            architecture,
            plan,
            layers,
            head_weight,
            head_bias,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn plan(&self) -> DimensionPlan {
        self.plan
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn head_bias(&self) -> f64 {
        self.head_bias.get(0, 0)
    }

    /// Layer parameters in order, then the head weight and head bias.
    pub fn parameters(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.layers.iter().flat_map(Layer::parameters).collect();
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self
            .layers
            .iter_mut()
            .flat_map(Layer::parameters_mut)
            .collect();
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn flatten_parameters(&self) -> Vec<f64> {
        self.parameters()
            .iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    pub fn load_flat_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::Shape {
                op: "load_flat_parameters",
                left: (self.num_parameters(), 1),
                right: (flat.len(), 1),
            });
        }
        let mut offset = 0;
        for p in self.parameters_mut() {
            let n = p.len();
            p.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn forward(&self, graph: &PatchGraph) -> Result<(f64, ModelTape)> {
        if graph.feature_dim() != self.plan.input {
            return Err(Error::Shape {
                op: "model_forward",
                left: graph.features.shape(),
                right: (graph.num_nodes(), self.plan.input),
            });
        }
        let mut tapes = Vec::with_capacity(NUM_LAYERS);
        let (mut h, tape) = self.layers[0].forward(&graph.features, graph)?;
        tapes.push(tape);
        for layer in &self.layers[1..] {
            let (next, tape) = layer.forward(&h, graph)?;
            tapes.push(tape);
            h = next;
        }
        let pooled = global_average_pool(&h)?;
        let logit = crate::tensor::dot(&pooled, self.head_weight.as_slice()) + self.head_bias();
        let probability = sigmoid(logit);
        Ok((
            probability,
            ModelTape {
                layer_tapes: tapes,
                num_nodes: graph.num_nodes(),
                pooled,
                logit,
                probability,
            },
        ))
    }

    /// Smallest distance from any non-differentiable point across the forward pass.
    pub fn kink_margin(&self, tape: &ModelTape) -> f64 {
        self.layers
            .iter()
            .zip(&tape.layer_tapes)
            .fold(f64::INFINITY, |m, (l, t)| m.min(l.kink_margin(t)))
    }

    pub fn predict(&self, graph: &PatchGraph) -> Result<f64> {
        Ok(self.forward(graph)?.0)
    }

    pub fn loss(&self, graph: &PatchGraph, label: u8, cfg: &LossConfig) -> Result<f64> {
        Ok(weighted_bce(self.predict(graph)?, label, cfg))
    }

    /// Loss and its gradient with respect to every parameter.
    ///
    /// The logit gradient is `w_y (p − y)`, the derivative of the unclamped loss.
    pub fn gradients(
        &self,
        graph: &PatchGraph,
        label: u8,
        cfg: &LossConfig,
    ) -> Result<(f64, Gradients)> {
        let (p, tape) = self.forward(graph)?;
        let loss = weighted_bce(p, label, cfg);
        let grad_logit = cfg.weight(label) * (p - f64::from(label));
        let grads = self.backward(graph, &tape, grad_logit)?;
        Ok((loss, grads))
    }

    /// Back-propagates `∂L/∂z` through the head, pooling, and all layers.
    pub fn backward(&self, graph: &PatchGraph, tape: &ModelTape, grad_logit: f64) -> Result<Gradients> {
        let d = self.plan.output();
        let grad_head_weight = Matrix::from_vec(
            d,
            1,
            tape.pooled.iter().map(|&v| v * grad_logit).collect(),
        )?;
        let grad_head_bias = Matrix::filled(1, 1, grad_logit);
        let inv_n = 1.0 / tape.num_nodes as f64;
        let row: Vec<f64> = self
            .head_weight
            .as_slice()
            .iter()
            .map(|&w| w * grad_logit * inv_n)
            .collect();
        let mut grad = Matrix::from_vec(tape.num_nodes, d, row.repeat(tape.num_nodes))?;

        let mut per_layer = Vec::with_capacity(NUM_LAYERS);
        for (layer, ltape) in self.layers.iter().zip(&tape.layer_tapes).rev() {
            let (grad_in, grads) = layer.backward(graph, ltape, &grad)?;
            per_layer.push(grads);
            grad = grad_in;
        }
        let mut all: Vec<Matrix> = per_layer.into_iter().rev().flatten().collect();
        all.push(grad_head_weight);
        all.push(grad_head_bias);
        Ok(Gradients(all))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_gradient, max_relative_error, SparseAdjacency, DEFAULT_FD_EPS};
    use rand::seq::SliceRandom;
    use rand::Rng;

    pub(crate) fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize) -> PatchGraph {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.4) {
                    edges.push((i, j));
                }
            }
        }
        let feats =
            Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
        PatchGraph::from_adjacency("g", feats, SparseAdjacency::from_undirected_edges(n, &edges).unwrap())
            .unwrap()
    }

    #[test]
    fn architecture_names_round_trip() {
        for a in Architecture::ALL {
            assert_eq!(a.to_string().parse::<Architecture>().unwrap(), a);
        }
        assert!("gat3".parse::<Architecture>().is_err());
    }

    #[test]
    fn gap_examples() {
        assert_eq!(global_average_pool(&Matrix::from_vec(1, 2, vec![3.0, -1.0]).unwrap()).unwrap(), vec![3.0, -1.0]);
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(global_average_pool(&m).unwrap(), vec![2.0, 3.0]);
        assert_eq!(
            global_average_pool(&m.permute_rows(&[1, 0])).unwrap(),
            vec![2.0, 3.0]
        );
        assert!(global_average_pool(&Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn bce_examples() {
        let unit = LossConfig::default();
        assert!((weighted_bce(0.5, 1, &unit) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(weighted_bce(1.0, 1, &unit) < 1e-6);
        let heavy = LossConfig::new(1.0, 2.0).unwrap();
        for p in [0.1, 0.5, 0.93] {
            assert_eq!(weighted_bce(p, 1, &heavy), 2.0 * weighted_bce(p, 1, &unit));
        }
        assert!(weighted_bce(0.0, 1, &unit).is_finite());
        assert!(LossConfig::new(0.0, 1.0).is_err());
    }

    #[test]
    fn balanced_weights_equal_plain_bce() {
        let unit = LossConfig::default();
        for p in [0.01, 0.3, 0.77] {
            assert_eq!(weighted_bce(p, 1, &unit), -(p as f64).ln());
            assert_eq!(weighted_bce(p, 0, &unit), -(1.0 - p as f64).ln());
        }
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for arch in Architecture::ALL {
            let mut model = GnnModel::new(arch, DimensionPlan::new(3, [4, 4, 2]), 1).unwrap();
            model.head_weight = Matrix::zeros(2, 1);
            let g = random_graph(&mut rng, 5, 3);
            assert_eq!(model.predict(&g).unwrap(), 0.5);
        }
    }

    #[test]
    fn zero_feature_identity_model_gives_one_half() {
        let plan = DimensionPlan::new(2, [2, 2, 2]);
        let layers = (0..3)
            .map(|_| {
                Layer::Gcn(GcnLayer {
                    weight: Matrix::identity(2),
                    activation: Activation::Identity,
                })
            })
            .collect();
        let model = GnnModel::from_parts(
            Architecture::Gcn,
            plan,
            layers,
            Matrix::column(&[1.0, 0.0]).unwrap(),
            Matrix::zeros(1, 1),
        )
        .unwrap();
        let g = PatchGraph::from_adjacency(
            "z",
            Matrix::zeros(1, 2),
            SparseAdjacency::from_triplets(1, vec![]).unwrap(),
        )
        .unwrap();
        assert_eq!(model.predict(&g).unwrap(), 0.5);
    }

    #[test]
    fn forward_matches_composition_of_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for arch in Architecture::ALL {
            let model = GnnModel::new(arch, DimensionPlan::new(4, [6, 4, 2]), 3).unwrap();
            let g = random_graph(&mut rng, 6, 4);
            let mut h = g.features.clone();
            for layer in model.layers() {
                h = layer.forward(&h, &g).unwrap().0;
            }
            let means = h.column_means().unwrap();
            let z: f64 = means.iter().zip(model.head_weight.as_slice()).map(|(a, b)| a * b).sum::<f64>()
                + model.head_bias();
            let expected = 1.0 / (1.0 + (-z).exp());
            assert!((model.predict(&g).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let model = GnnModel::new(Architecture::Gcn, DimensionPlan::new(4, [4, 4, 4]), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = random_graph(&mut rng, 3, 5);
        assert!(matches!(model.predict(&g), Err(Error::Shape { .. })));
    }

    #[test]
    fn gat2_requires_even_widths() {
        assert!(GnnModel::new(Architecture::Gat { heads: 2 }, DimensionPlan::new(4, [5, 4, 2]), 0).is_err());
    }

    #[test]
    fn head_bias_gradient_is_weighted_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = LossConfig::new(0.7, 2.5).unwrap();
        for arch in Architecture::ALL {
            let model = GnnModel::new(arch, DimensionPlan::new(3, [4, 4, 2]), 9).unwrap();
            let g = random_graph(&mut rng, 5, 3);
            for y in [0u8, 1] {
                let p = model.predict(&g).unwrap();
                let (_, grads) = model.gradients(&g, y, &cfg).unwrap();
                let gb = grads.0.last().unwrap().get(0, 0);
                assert!((gb - cfg.weight(y) * (p - f64::from(y))).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = LossConfig::new(0.8, 1.4).unwrap();
        for arch in Architecture::ALL {
            let model = GnnModel::new(arch, DimensionPlan::new(4, [4, 4, 2]), 17).unwrap();
            let g = random_graph(&mut rng, 6, 4);
            let y = rng.random_range(0..2u8);
            let (_, grads) = model.gradients(&g, y, &cfg).unwrap();
            let fd = finite_diff_gradient(
                |x| {
                    let mut m = model.clone();
                    m.load_flat_parameters(x)?;
                    m.loss(&g, y, &cfg)
                },
                &model.flatten_parameters(),
                DEFAULT_FD_EPS,
            )
            .unwrap();
            let err = max_relative_error(&grads.flatten(), &fd, 1e-6);
            assert!(err < 1e-4, "{arch}: {err}");
        }
    }

    #[test]
    fn output_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for arch in Architecture::ALL {
            let model = GnnModel::new(arch, DimensionPlan::new(3, [4, 4, 4]), 2).unwrap();
            let g = random_graph(&mut rng, 9, 3);
            let mut perm: Vec<usize> = (0..9).collect();
            perm.shuffle(&mut rng);
            let a = model.predict(&g).unwrap();
            let b = model.predict(&g.permuted(&perm).unwrap()).unwrap();
            assert!((a - b).abs() < 1e-10);
            assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn flat_parameter_round_trip() {
        let mut model = GnnModel::new(Architecture::Gat { heads: 2 }, DimensionPlan::new(3, [4, 4, 2]), 1).unwrap();
        let flat = model.flatten_parameters();
        let mut shifted: Vec<f64> = flat.iter().map(|v| v + 1.0).collect();
        model.load_flat_parameters(&shifted).unwrap();
        assert_eq!(model.flatten_parameters(), shifted);
        shifted.pop();
        assert!(model.load_flat_parameters(&shifted).is_err());
    }

    #[test]
    fn kink_margin_sees_relu_hinges() {
        let g = PatchGraph::from_adjacency(
            "k",
            Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap(),
            SparseAdjacency::from_triplets(2, vec![]).unwrap(),
        )
        .unwrap();
        let build = |activation| {
            let layers = (0..3)
                .map(|_| {
                    Layer::Gcn(GcnLayer {
                        weight: Matrix::identity(2),
                        activation,
                    })
                })
                .collect();
            GnnModel::from_parts(
                Architecture::Gcn,
                DimensionPlan::new(2, [2, 2, 2]),
                layers,
                Matrix::column(&[1.0, 0.0]).unwrap(),
                Matrix::zeros(1, 1),
            )
            .unwrap()
        };
        let smooth = build(Activation::Identity);
        let (_, tape) = smooth.forward(&g).unwrap();
        assert_eq!(smooth.kink_margin(&tape), f64::INFINITY);
        // first layer sees 0.5, later layers see the clipped zeros
        let relu = build(Activation::Relu);
        let (_, tape) = relu.forward(&g).unwrap();
        assert_eq!(relu.kink_margin(&tape), 0.0);
    }
}
