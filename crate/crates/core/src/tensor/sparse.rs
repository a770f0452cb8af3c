use crate::error::{Error, Result};

use super::Matrix;

/// Structurally symmetric CSR adjacency with `f64` edge weights.
///
/// Column indices are sorted within each row and `(i, j)` is stored iff `(j, i)` is.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseAdjacency {
    /// Builds from an unordered list of `(row, col, weight)` triplets.
    pub fn from_triplets(n: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("adjacency must have at least one node".into()));
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_offsets = vec![0usize; n + 1];
        let mut col_indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for (idx, &(r, c, w)) in entries.iter().enumerate() {
            if r >= n || c >= n {
                return Err(Error::Validation(format!(
                    "entry ({r}, {c}) out of range for {n} nodes"
                )));
            }
            if idx > 0 && entries[idx - 1].0 == r && entries[idx - 1].1 == c {
                return Err(Error::Validation(format!("duplicate entry ({r}, {c})")));
            }
            if !w.is_finite() {
                return Err(Error::Numeric(format!("non-finite weight at ({r}, {c})")));
            }
            row_offsets[r + 1] += 1;
            col_indices.push(c);
            values.push(w);
        }
        for i in 0..n {
            row_offsets[i + 1] += row_offsets[i];
        }
        let adj = Self {
            n,
            row_offsets,
            col_indices,
            values,
        };
        adj.check_symmetric()?;
        Ok(adj)
    }

    /// Builds from an undirected edge list with unit weights; each pair is stored both ways.
    pub fn from_undirected_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut entries = Vec::with_capacity(edges.len() * 2);
        for &(a, b) in edges {
            entries.push((a, b, 1.0));
            if a != b {
                entries.push((b, a, 1.0));
            }
        }
        Self::from_triplets(n, entries)
    }

    fn check_symmetric(&self) -> Result<()> {
        for i in 0..self.n {
            for &j in self.neighbors(i) {
                if self.get(j, i).is_none() {
                    return Err(Error::Validation(format!(
                        "adjacency not structurally symmetric: ({i}, {j}) present but ({j}, {i}) missing"
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Stored entries, counting both directions and any diagonal.
    #[inline]
    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    #[inline]
    pub fn row_values(&self, i: usize) -> &[f64] {
        &self.values[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let cols = self.neighbors(i);
        cols.binary_search(&j)
            .ok()
            .map(|k| self.values[self.row_offsets[i] + k])
    }

    pub fn has_diagonal_entries(&self) -> bool {
        (0..self.n).any(|i| self.get(i, i).is_some())
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row_values(i).iter().sum()
    }

    /// Returns a copy with the same structure and new values (same ordering as `values()`).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Shape {
                op: "with_values",
                left: (self.values.len(), 1),
                right: (values.len(), 1),
            });
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (&j, &w) in self.neighbors(i).iter().zip(self.row_values(i)) {
                out.set(i, j, w);
            }
        }
        out
    }

    /// Relabels nodes: node `perm[i]` of `self` becomes node `i` of the result (P A Pᵀ).
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let mut inverse = vec![0usize; self.n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let mut entries = Vec::with_capacity(self.nnz());
        for i in 0..self.n {
            for (&j, &w) in self.neighbors(i).iter().zip(self.row_values(i)) {
                entries.push((inverse[i], inverse[j], w));
            }
        }
        Self::from_triplets(self.n, entries)
    }
}

/// Sparse-times-dense product: row `i` of the result is `Σ_j adj(i,j) · h(j,:)`.
pub fn spmm(adj: &SparseAdjacency, h: &Matrix) -> Result<Matrix> {
    if adj.n() != h.rows() {
        return Err(Error::Shape {
            op: "spmm",
            left: (adj.n(), adj.n()),
            right: h.shape(),
        });
    }
    let mut out = Matrix::zeros(h.rows(), h.cols());
    for i in 0..adj.n() {
        let out_row = out.row_mut(i);
        for (&j, &w) in adj.neighbors(i).iter().zip(adj.row_values(i)) {
            for (o, &v) in out_row.iter_mut().zip(h.row(j)) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}
