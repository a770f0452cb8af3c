use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{spmm, Activation, Matrix, SparseAdjacency};

/// Spectral graph convolution `σ(Â H W)` with a pre-normalised propagation operator `Â`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub weight: Matrix,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct GcnTape {
    /// `Â H`
    aggregated: Matrix,
    /// `Â H W`
    pre: Matrix,
}

impl GcnTape {
    pub(crate) fn kink_margin(&self, activation: Activation) -> f64 {
        super::live_hinge_distance(activation, &self.aggregated, &self.pre)
    }
}

impl GcnLayer {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            weight: Matrix::glorot(d_in, d_out, rng),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, h: &Matrix, normalized: &SparseAdjacency) -> Result<(Matrix, GcnTape)> {
        if h.cols() != self.in_dim() {
            return Err(Error::Shape {
                op: "gcn_forward",
                left: h.shape(),
                right: self.weight.shape(),
            });
        }
        let aggregated = spmm(normalized, h)?;
        let pre = aggregated.matmul(&self.weight)?;
        let out = self.activation.apply(&pre);
        Ok((out, GcnTape { aggregated, pre }))
    }

    /// Returns `(∂L/∂H, [∂L/∂W])`. `normalized` is symmetric, so `Âᵀ = Â`.
    pub fn backward(
        &self,
        tape: &GcnTape,
        normalized: &SparseAdjacency,
        grad_output: &Matrix,
    ) -> Result<(Matrix, Vec<Matrix>)> {
        if grad_output.shape() != tape.pre.shape() || normalized.n() != tape.pre.rows() {
            return Err(Error::Validation(format!(
                "gcn backward: gradient {:?} does not match tape {:?}",
                grad_output.shape(),
                tape.pre.shape()
            )));
        }
        let grad_pre = self.activation.backward(&tape.pre, grad_output)?;
        let grad_weight = tape.aggregated.t_matmul(&grad_pre)?;
        let grad_aggregated = grad_pre.matmul_t(&self.weight)?;
        let grad_input = spmm(normalized, &grad_aggregated)?;
        Ok((grad_input, vec![grad_weight]))
    }
}
