use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    dot, softmax_backward, softmax_in_place, Activation, Matrix, SparseAdjacency,
};

/// One attention head: a projection `W` and an attention vector `a = [a_src ‖ a_dst]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatHead {
    pub weight: Matrix,
    /// Shape `(2 · d_head) × 1`.
    pub attention: Matrix,
}

/// Graph attention layer with 1 or 2 heads, merged by concatenation.
///
/// Attention for node `i` runs over `𝒩(i) ∪ {i}`, i.e. the rows of `A + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
    pub activation: Activation,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone)]
struct HeadTape {
    z: Matrix,
    /// Pre-LeakyReLU scores, aligned with the CSR entries of `A + I`.
    raw: Vec<f64>,
    alpha: Vec<f64>,
    pre: Matrix,
}

#[derive(Debug, Clone)]
pub struct GatTape {
    input: Matrix,
    heads: Vec<HeadTape>,
}

impl GatTape {
    /// Attention coefficients of `head`, aligned with the CSR entries of `A + I`.
    pub fn attention(&self, head: usize) -> &[f64] {
        &self.heads[head].alpha
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub(crate) fn kink_margin(&self, activation: Activation) -> f64 {
        self.heads.iter().fold(f64::INFINITY, |m, h| {
            let raw = h.raw.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            m.min(raw).min(activation.kink_distance(h.pre.as_slice()))
        })
    }
}

impl GatLayer {
    pub fn new<R: Rng + ?Sized>(
        d_in: usize,
        d_head: usize,
        head_count: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=2).contains(&head_count) {
            return Err(Error::Validation(format!(
                "GAT supports 1 or 2 heads, got {head_count}"
            )));
        }
        if d_in == 0 || d_head == 0 {
            return Err(Error::Validation("GAT widths must be positive".into()));
        }
        let heads = (0..head_count)
            .map(|_| GatHead {
                weight: Matrix::glorot(d_in, d_head, rng),
                attention: Matrix::glorot(2 * d_head, 1, rng),
            })
            .collect();
        Ok(Self {
            heads,
            activation,
            leaky_slope: crate::tensor::DEFAULT_LEAKY_SLOPE,
        })
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].weight.cols()
    }

    pub fn in_dim(&self) -> usize {
        self.heads[0].weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.head_dim() * self.head_count()
    }

    fn leaky(&self) -> Activation {
        Activation::LeakyRelu {
            slope: self.leaky_slope,
        }
    }

    pub fn forward(
        &self,
        h: &Matrix,
        adjacency_with_self_loops: &SparseAdjacency,
    ) -> Result<(Matrix, GatTape)> {
        let adj = adjacency_with_self_loops;
        if h.cols() != self.in_dim() || h.rows() != adj.n() {
            return Err(Error::Shape {
                op: "gat_forward",
                left: h.shape(),
                right: (adj.n(), self.in_dim()),
            });
        }
        if let Some(i) = (0..adj.n()).find(|&i| adj.degree(i) == 0) {
            return Err(Error::Domain(format!("node {i} has an empty attention neighbourhood")));
        }
        let d_head = self.head_dim();
        let leaky = self.leaky();
        let mut out = Matrix::zeros(h.rows(), self.out_dim());
        let mut tapes = Vec::with_capacity(self.heads.len());
        for (k, head) in self.heads.iter().enumerate() {
            let z = h.matmul(&head.weight)?;
            let (a_src, a_dst) = head.attention.as_slice().split_at(d_head);
            let src: Vec<f64> = (0..z.rows()).map(|i| dot(z.row(i), a_src)).collect();
            let dst: Vec<f64> = (0..z.rows()).map(|j| dot(z.row(j), a_dst)).collect();

            let mut raw = Vec::with_capacity(adj.nnz());
            let mut alpha = Vec::with_capacity(adj.nnz());
            let mut pre = Matrix::zeros(h.rows(), d_head);
            for i in 0..adj.n() {
                let start = alpha.len();
                for &j in adj.neighbors(i) {
                    let r = src[i] + dst[j];
                    raw.push(r);
                    alpha.push(leaky.apply_scalar(r));
                }
                softmax_in_place(&mut alpha[start..]);
                let row = pre.row_mut(i);
                for (&j, &a) in adj.neighbors(i).iter().zip(&alpha[start..]) {
                    for (p, &v) in row.iter_mut().zip(z.row(j)) {
                        *p += a * v;
                    }
                }
            }
            out.set_column_block(k * d_head, &self.activation.apply(&pre));
            tapes.push(HeadTape { z, raw, alpha, pre });
        }
        Ok((
            out,
            GatTape {
                input: h.clone(),
                heads: tapes,
            },
        ))
    }

    /// Returns `(∂L/∂H, [∂L/∂W_0, ∂L/∂a_0, ∂L/∂W_1, ∂L/∂a_1, ...])`.
    pub fn backward(
        &self,
        tape: &GatTape,
        adjacency_with_self_loops: &SparseAdjacency,
        grad_output: &Matrix,
    ) -> Result<(Matrix, Vec<Matrix>)> {
        let adj = adjacency_with_self_loops;
        let n = tape.input.rows();
        if grad_output.shape() != (n, self.out_dim())
            || tape.heads.len() != self.heads.len()
            || adj.n() != n
            || tape.heads.iter().any(|t| t.alpha.len() != adj.nnz())
        {
            return Err(Error::Validation(format!(
                "gat backward: gradient {:?} does not match tape ({n}, {})",
                grad_output.shape(),
                self.out_dim()
            )));
        }
        let d_head = self.head_dim();
        let leaky = self.leaky();
        let mut grad_input = Matrix::zeros(n, self.in_dim());
        let mut grads = Vec::with_capacity(2 * self.heads.len());
        for (k, (head, ht)) in self.heads.iter().zip(&tape.heads).enumerate() {
            let grad_pre = self
                .activation
                .backward(&ht.pre, &grad_output.column_block(k * d_head, d_head))?;
            let (a_src, a_dst) = head.attention.as_slice().split_at(d_head);

            let mut grad_z = Matrix::zeros(n, d_head);
            let mut grad_src = vec![0.0; n];
            let mut grad_dst = vec![0.0; n];
            let offsets = adj.row_offsets();
            for i in 0..n {
                let range = offsets[i]..offsets[i + 1];
                let cols = adj.neighbors(i);
                let alpha = &ht.alpha[range.clone()];
                let g_i = grad_pre.row(i);
                let mut grad_alpha = Vec::with_capacity(cols.len());
                for (&j, &a) in cols.iter().zip(alpha) {
                    grad_alpha.push(dot(g_i, ht.z.row(j)));
                    for (gz, &g) in grad_z.row_mut(j).iter_mut().zip(g_i) {
                        *gz += a * g;
                    }
                }
                let grad_scores = softmax_backward(alpha, &grad_alpha);
                for ((&j, &gs), &r) in cols.iter().zip(&grad_scores).zip(&ht.raw[range]) {
                    let g_raw = gs * leaky.derivative_scalar(r);
                    grad_src[i] += g_raw;
                    grad_dst[j] += g_raw;
                }
            }

            let mut grad_attention = Matrix::zeros(2 * d_head, 1);
            {
                let (g_src, g_dst) = grad_attention.as_mut_slice().split_at_mut(d_head);
                for i in 0..n {
                    let z_i = ht.z.row(i);
                    for c in 0..d_head {
                        g_src[c] += grad_src[i] * z_i[c];
                        g_dst[c] += grad_dst[i] * z_i[c];
                    }
                }
            }
            for i in 0..n {
                let row = grad_z.row_mut(i);
                for c in 0..d_head {
                    row[c] += grad_src[i] * a_src[c] + grad_dst[i] * a_dst[c];
                }
            }

            grads.push(tape.input.t_matmul(&grad_z)?);
            grads.push(grad_attention);
            grad_input.add_assign(&grad_z.matmul_t(&head.weight)?)?;
        }
        Ok((grad_input, grads))
    }
}
