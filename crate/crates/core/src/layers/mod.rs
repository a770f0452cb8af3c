//! GNN layer families and their reverse-mode passes.

mod gat;
mod gcn;
mod sage;

pub use gat::{GatHead, GatLayer, GatTape};
pub use gcn::{GcnLayer, GcnTape};
pub use sage::{SageAggregator, SageLayer, SageTape};

use crate::error::{Error, Result};
use crate::graph::PatchGraph;
use crate::tensor::{Activation, Matrix};

/// Hinge distance of `pre = aggregated · W`, skipping rows whose aggregated input is
/// exactly zero: those rows come from clipped units and stay zero nearby.
fn live_hinge_distance(activation: Activation, aggregated: &Matrix, pre: &Matrix) -> f64 {
    (0..pre.rows())
        .filter(|&i| aggregated.row(i).iter().any(|&v| v != 0.0))
        .fold(f64::INFINITY, |m, i| {
            m.min(activation.kink_distance(pre.row(i)))
        })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Gcn(GcnLayer),
    Gat(GatLayer),
    Sage(SageLayer),
}

/// Forward intermediates needed by [`Layer::backward`].
#[derive(Debug, Clone)]
pub enum LayerTape {
    Gcn(GcnTape),
    Gat(GatTape),
    Sage(SageTape),
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Gcn(l) => l.in_dim(),
            Layer::Gat(l) => l.in_dim(),
            Layer::Sage(l) => l.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Gcn(l) => l.out_dim(),
            Layer::Gat(l) => l.out_dim(),
            Layer::Sage(l) => l.out_dim(),
        }
    }

    /// Dispatches to the adjacency each family consumes: GCN the normalised operator,
    /// GAT and SAGE the self-looped neighbourhoods.
    pub fn forward(&self, h: &Matrix, graph: &PatchGraph) -> Result<(Matrix, LayerTape)> {
        Ok(match self {
            Layer::Gcn(l) => {
                let (out, t) = l.forward(h, &graph.normalized)?;
                (out, LayerTape::Gcn(t))
            }
            Layer::Gat(l) => {
                let (out, t) = l.forward(h, &graph.with_self_loops)?;
                (out, LayerTape::Gat(t))
            }
            Layer::Sage(l) => {
                let (out, t) = l.forward(h, &graph.with_self_loops)?;
                (out, LayerTape::Sage(t))
            }
        })
    }

    /// Returns `(∂L/∂input, per-parameter gradients in `parameters()` order)`.
    pub fn backward(
        &self,
        graph: &PatchGraph,
        tape: &LayerTape,
        grad_output: &Matrix,
    ) -> Result<(Matrix, Vec<Matrix>)> {
        match (self, tape) {
            (Layer::Gcn(l), LayerTape::Gcn(t)) => l.backward(t, &graph.normalized, grad_output),
            (Layer::Gat(l), LayerTape::Gat(t)) => l.backward(t, &graph.with_self_loops, grad_output),
            (Layer::Sage(l), LayerTape::Sage(t)) => {
                l.backward(t, &graph.with_self_loops, grad_output)
            }
            _ => Err(Error::Validation("tape was produced by a different layer family".into())),
        }
    }

    /// Smallest distance, over every intermediate of `tape`, to a point where this
    /// layer's forward map is not differentiable (ReLU hinges, LeakyReLU scores,
    /// max-aggregation ties). Infinite when the map is smooth everywhere.
    pub fn kink_margin(&self, tape: &LayerTape) -> f64 {
        match (self, tape) {
            (Layer::Gcn(l), LayerTape::Gcn(t)) => t.kink_margin(l.activation),
            (Layer::Gat(l), LayerTape::Gat(t)) => t.kink_margin(l.activation),
            (Layer::Sage(l), LayerTape::Sage(t)) => t.kink_margin(l.activation),
            _ => f64::NAN,
        }
    }

    pub fn parameters(&self) -> Vec<&Matrix> {
        match self {
            Layer::Gcn(l) => vec![&l.weight],
            Layer::Sage(l) => vec![&l.weight],
            Layer::Gat(l) => l
                .heads
                .iter()
                .flat_map(|h| [&h.weight, &h.attention])
                .collect(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Layer::Gcn(l) => vec![&mut l.weight],
            Layer::Sage(l) => vec![&mut l.weight],
            Layer::Gat(l) => l
                .heads
                .iter_mut()
                .flat_map(|h| [&mut h.weight, &mut h.attention])
                .collect(),
        }
    }
}
