use crate::error::{Error, Result};

use super::Matrix;

/// Moment buffers and step counter for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self::with_hyper(rows, cols, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(rows: usize, cols: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn for_param(param: &Matrix) -> Self {
        Self::new(param.rows(), param.cols())
    }
}

/// One Adam update with coupled (L2) weight decay: `g ← g + λθ` before the moment updates.
pub fn adam_step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Shape {
            op: "adam_step",
            left: param.shape(),
            right: grad.shape(),
        });
    }
    if state.m.shape() != param.shape() || state.v.shape() != param.shape() {
        return Err(Error::Shape {
            op: "adam_step(state)",
            left: param.shape(),
            right: state.m.shape(),
        });
    }
    if !(lr >= 0.0) {
        return Err(Error::Domain(format!("learning rate must be non-negative, got {lr}")));
    }
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = 1.0 - b1.powf(t);
    let bias2 = 1.0 - b2.powf(t);
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (i, (p, &g)) in param
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .enumerate()
    {
        let g = g + weight_decay * *p;
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}
