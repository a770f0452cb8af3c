//! Patch graphs: spatial-proximity adjacency over patch coordinates and the
//! self-looped, symmetrically normalised propagation operator.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, SparseAdjacency};

/// Radius multiplier that connects the 8 grid neighbours of a patch.
pub const DEFAULT_RADIUS_FACTOR: f64 = 1.5;
pub const DEFAULT_PATCH_STRIDE: u32 = 256;

/// Level-0 pixel positions of the patches of one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchCoordinates {
    positions: Vec<(u32, u32)>,
    patch_stride: u32,
}

impl PatchCoordinates {
    pub fn new(positions: Vec<(u32, u32)>, patch_stride: u32) -> Result<Self> {
        if patch_stride == 0 {
            return Err(Error::Validation("patch stride must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(positions.len());
        for (i, p) in positions.iter().enumerate() {
            if !seen.insert(*p) {
                return Err(Error::Validation(format!(
                    "duplicate patch coordinate ({}, {}) at index {i}",
                    p.0, p.1
                )));
            }
        }
        Ok(Self {
            positions,
            patch_stride,
        })
    }

    /// Coordinates on the patch grid, i.e. `(col * stride, row * stride)`.
    pub fn from_grid(cells: &[(u32, u32)], patch_stride: u32) -> Result<Self> {
        Self::new(
            cells
                .iter()
                .map(|&(c, r)| (c * patch_stride, r * patch_stride))
                .collect(),
            patch_stride,
        )
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[(u32, u32)] {
        &self.positions
    }

    pub fn patch_stride(&self) -> u32 {
        self.patch_stride
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            patch_stride: self.patch_stride,
        }
    }
}

/// Unit-weight edges between patches within `radius_factor · stride` of each other.
pub fn build_adjacency(coords: &PatchCoordinates, radius_factor: f64) -> Result<SparseAdjacency> {
    if coords.is_empty() {
        return Err(Error::Domain("cannot build a graph from zero patches".into()));
    }
    if !(radius_factor > 0.0) || !radius_factor.is_finite() {
        return Err(Error::Domain(format!("radius factor must be positive, got {radius_factor}")));
    }
    let radius = radius_factor * f64::from(coords.patch_stride);
    let radius_sq = radius * radius;

    // Bucket patches into square cells of side `radius`; neighbours lie in the 3x3 block.
    let cell_of = |(x, y): (u32, u32)| {
        (
            (f64::from(x) / radius).floor() as i64,
            (f64::from(y) / radius).floor() as i64,
        )
    };
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, &p) in coords.positions.iter().enumerate() {
        buckets.entry(cell_of(p)).or_default().push(i);
    }

    let mut entries = Vec::new();
    for (i, &(xi, yi)) in coords.positions.iter().enumerate() {
        let (cx, cy) = cell_of((xi, yi));
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = buckets.get(&(cx + dx, cy + dy)) else {
                    continue;
                };
                for &j in bucket {
                    if j == i {
                        continue;
                    }
                    let (xj, yj) = coords.positions[j];
                    let ddx = i64::from(xi) - i64::from(xj);
                    let ddy = i64::from(yi) - i64::from(yj);
                    let dist_sq = (ddx * ddx + ddy * ddy) as f64;
                    if dist_sq <= radius_sq {
                        entries.push((i, j, 1.0));
                    }
                }
            }
        }
    }
    SparseAdjacency::from_triplets(coords.len(), entries)
}

/// `Ã = A + I`.
pub fn add_self_loops(adj: &SparseAdjacency) -> Result<SparseAdjacency> {
    let mut entries = Vec::with_capacity(adj.nnz() + adj.n());
    for i in 0..adj.n() {
        for (&j, &w) in adj.neighbors(i).iter().zip(adj.row_values(i)) {
            if i == j {
                return Err(Error::Validation(format!(
                    "adjacency already has a diagonal entry at node {i}"
                )));
            }
            entries.push((i, j, w));
        }
        entries.push((i, i, 1.0));
    }
    SparseAdjacency::from_triplets(adj.n(), entries)
}

/// `D̃^{-1/2} Ã D̃^{-1/2}` with `D̃_ii = Σ_j Ã_ij`.
pub fn sym_normalize(adj_with_loops: &SparseAdjacency) -> Result<SparseAdjacency> {
    let degrees: Vec<f64> = (0..adj_with_loops.n())
        .map(|i| {
            let d = adj_with_loops.row_sum(i);
            if d > 0.0 {
                Ok(d)
            } else {
                Err(Error::Domain(format!("node {i} has non-positive degree {d}")))
            }
        })
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(adj_with_loops.nnz());
    for i in 0..adj_with_loops.n() {
        for (&j, &w) in adj_with_loops
            .neighbors(i)
            .iter()
            .zip(adj_with_loops.row_values(i))
        {
            values.push(w / (degrees[i] * degrees[j]).sqrt());
        }
    }
    adj_with_loops.with_values(values)
}

/// One slide as a graph: node features plus raw, self-looped, and normalised adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGraph {
    pub slide_id: String,
    pub features: Matrix,
    /// Raw `A`, zero diagonal.
    pub adjacency: SparseAdjacency,
    /// `A + I`, the neighbourhoods used for attention.
    pub with_self_loops: SparseAdjacency,
    /// `D̃^{-1/2} Ã D̃^{-1/2}`.
    pub normalized: SparseAdjacency,
}

impl PatchGraph {
    /// Builds a graph from an existing raw adjacency (zero diagonal).
    pub fn from_adjacency(
        slide_id: impl Into<String>,
        features: Matrix,
        adjacency: SparseAdjacency,
    ) -> Result<Self> {
        if features.rows() != adjacency.n() {
            return Err(Error::Validation(format!(
                "feature rows ({}) do not match node count ({})",
                features.rows(),
                adjacency.n()
            )));
        }
        let with_self_loops = add_self_loops(&adjacency)?;
        let normalized = sym_normalize(&with_self_loops)?;
        Ok(Self {
            slide_id: slide_id.into(),
            features,
            adjacency,
            with_self_loops,
            normalized,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.n()
    }

    /// Undirected edge count of the raw adjacency.
    pub fn num_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::from_adjacency(
            self.slide_id.clone(),
            self.features.permute_rows(perm),
            self.adjacency.permute(perm)?,
        )
    }
}

pub fn assemble_graph(
    slide_id: impl Into<String>,
    features: Matrix,
    coords: &PatchCoordinates,
    radius_factor: f64,
) -> Result<PatchGraph> {
    if features.rows() != coords.len() {
        return Err(Error::Validation(format!(
            "{} feature rows but {} coordinates",
            features.rows(),
            coords.len()
        )));
    }
    let adjacency = build_adjacency(coords, radius_factor)?;
    PatchGraph::from_adjacency(slide_id, features, adjacency)
}
