use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Matrix;

/// Negative slope used inside GAT attention scoring.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
    Sigmoid,
}

impl Activation {
    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    #[inline]
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    /// ReLU uses the subgradient 0 at `x == 0`; LeakyReLU uses 1.
    #[inline]
    pub fn derivative_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    /// Distance from the nearest point where the activation is not differentiable.
    pub fn kink_distance(self, pre: &[f64]) -> f64 {
        match self {
            Activation::Relu | Activation::LeakyRelu { .. } => {
                pre.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
            }
            Activation::Identity | Activation::Sigmoid => f64::INFINITY,
        }
    }

    pub fn apply(self, x: &Matrix) -> Matrix {
        x.map(|v| self.apply_scalar(v))
    }

    /// `grad_output ⊙ σ'(pre)`.
    pub fn backward(self, pre: &Matrix, grad_output: &Matrix) -> Result<Matrix> {
        if pre.shape() != grad_output.shape() {
            return Err(Error::Shape {
                op: "activation_backward",
                left: pre.shape(),
                right: grad_output.shape(),
            });
        }
        let mut out = grad_output.clone();
        for (g, &x) in out.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            *g *= self.derivative_scalar(x);
        }
        Ok(out)
    }
}

/// Applies `kind` element-wise.
pub fn apply_activation(kind: Activation, x: &Matrix) -> Matrix {
    kind.apply(x)
}

/// Logistic function, evaluated without overflow for large `|z|`.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
