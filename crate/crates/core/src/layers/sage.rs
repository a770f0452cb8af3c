use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Activation, Matrix, SparseAdjacency};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SageAggregator {
    Mean,
    Max,
}

impl fmt::Display for SageAggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SageAggregator::Mean => "mean",
            SageAggregator::Max => "max",
        })
    }
}

impl FromStr for SageAggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(SageAggregator::Mean),
            "max" => Ok(SageAggregator::Max),
            other => Err(Error::Validation(format!("unknown aggregator {other:?}"))),
        }
    }
}

/// Full-batch GraphSAGE: `σ(AGGREGATE({h_i} ∪ {h_j : j ∈ 𝒩(i)}) · W)`.
///
/// The aggregation set of node `i` is row `i` of `A + I`. There is no separate self weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SageLayer {
    pub weight: Matrix,
    pub aggregator: SageAggregator,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct SageTape {
    aggregated: Matrix,
    pre: Matrix,
    /// For max aggregation: source node of each `(i, c)` coordinate, row-major.
    argmax: Option<Vec<usize>>,
    /// For max aggregation: smallest gap between the winner and the runner-up,
    /// ignoring ties among exact zeros.
    max_gap: f64,
}

impl SageTape {
    pub(crate) fn kink_margin(&self, activation: Activation) -> f64 {
        super::live_hinge_distance(activation, &self.aggregated, &self.pre).min(self.max_gap)
    }
}

impl SageLayer {
    pub fn new<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        aggregator: SageAggregator,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Matrix::glorot(d_in, d_out, rng),
            aggregator,
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(
        &self,
        h: &Matrix,
        adjacency_with_self_loops: &SparseAdjacency,
    ) -> Result<(Matrix, SageTape)> {
        let adj = adjacency_with_self_loops;
        if h.cols() != self.in_dim() || h.rows() != adj.n() {
            return Err(Error::Shape {
                op: "sage_forward",
                left: h.shape(),
                right: (adj.n(), self.in_dim()),
            });
        }
        let d = h.cols();
        let mut aggregated = Matrix::zeros(h.rows(), d);
        let mut max_gap = f64::INFINITY;
        let argmax = match self.aggregator {
            SageAggregator::Mean => {
                for i in 0..adj.n() {
                    let members = adj.neighbors(i);
                    let row = aggregated.row_mut(i);
                    for &j in members {
                        for (a, &v) in row.iter_mut().zip(h.row(j)) {
                            *a += v;
                        }
                    }
                    let inv = 1.0 / members.len() as f64;
                    row.iter_mut().for_each(|a| *a *= inv);
                }
                None
            }
            SageAggregator::Max => {
                let mut argmax = vec![0usize; h.rows() * d];
                for i in 0..adj.n() {
                    // Members are sorted ascending; strict `>` keeps the lowest index on ties.
                    let members = adj.neighbors(i);
                    let first = members[0];
                    let row = aggregated.row_mut(i);
                    row.copy_from_slice(h.row(first));
                    let idx = &mut argmax[i * d..(i + 1) * d];
                    idx.iter_mut().for_each(|v| *v = first);
                    for &j in &members[1..] {
                        for (c, &v) in h.row(j).iter().enumerate() {
                            if v > row[c] {
                                row[c] = v;
                                idx[c] = j;
                            }
                        }
                    }
                    // Ties among exact zeros are ReLU-clipped inputs from the previous
                    // layer; they stay clipped under small perturbations.
                    for c in 0..d {
                        for &j in members {
                            if j != idx[c] && !(row[c] == 0.0 && h.get(j, c) == 0.0) {
                                max_gap = max_gap.min(row[c] - h.get(j, c));
                            }
                        }
                    }
                }
                Some(argmax)
            }
        };
        let pre = aggregated.matmul(&self.weight)?;
        let out = self.activation.apply(&pre);
        Ok((
            out,
            SageTape {
                aggregated,
                pre,
                argmax,
                max_gap,
            },
        ))
    }

    pub fn backward(
        &self,
        tape: &SageTape,
        adjacency_with_self_loops: &SparseAdjacency,
        grad_output: &Matrix,
    ) -> Result<(Matrix, Vec<Matrix>)> {
        let adj = adjacency_with_self_loops;
        if grad_output.shape() != tape.pre.shape() || adj.n() != tape.pre.rows() {
            return Err(Error::Validation(format!(
                "sage backward: gradient {:?} does not match tape {:?}",
                grad_output.shape(),
                tape.pre.shape()
            )));
        }
        let grad_pre = self.activation.backward(&tape.pre, grad_output)?;
        let grad_weight = tape.aggregated.t_matmul(&grad_pre)?;
        let grad_agg = grad_pre.matmul_t(&self.weight)?;
        let d = self.in_dim();
        let mut grad_input = Matrix::zeros(adj.n(), d);
        match (&self.aggregator, &tape.argmax) {
            (SageAggregator::Mean, _) => {
                for i in 0..adj.n() {
                    let members = adj.neighbors(i);
                    let inv = 1.0 / members.len() as f64;
                    for &j in members {
                        for (g, &v) in grad_input.row_mut(j).iter_mut().zip(grad_agg.row(i)) {
                            *g += v * inv;
                        }
                    }
                }
            }
            (SageAggregator::Max, Some(argmax)) => {
                for i in 0..adj.n() {
                    for c in 0..d {
                        let src = argmax[i * d + c];
                        let g = grad_input.get(src, c) + grad_agg.get(i, c);
                        grad_input.set(src, c, g);
                    }
                }
            }
            (SageAggregator::Max, None) => {
                return Err(Error::Validation("max-aggregation tape lacks argmax indices".into()))
            }
        }
        Ok((grad_input, vec![grad_weight]))
    }
}
