//! Heterogeneous hypergraph over (object, modality) vertices.
//!
//! Vertices are stored modality-major: object `i` in modality `r` is row
//! `r * N + i`. Three hyperedge families can be enabled independently:
//!
//! * one modality edge per modality, holding its `N` vertices;
//! * one object edge per object, holding its `M` vertices;
//! * one neighborhood edge per vertex, holding the vertex and its `k`
//!   nearest other vertices (Euclidean, ties broken by lower index).
//!
//! All hyperedge weights are 1. Propagation evaluates
//! `D_v^{-1/2} H W D_e^{-1} H^T D_v^{-1/2} X` without materializing `H`.

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::RowOperator;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StructureError {
    #[error("vertex count {rows} does not equal M*N = {m}*{n}")]
    VertexCount { rows: usize, m: usize, n: usize },
    #[error("k = {k} out of range; need 1 <= k < {vertices}")]
    KOutOfRange { k: usize, vertices: usize },
    #[error("vertex {0} has zero degree and cannot be normalized")]
    ZeroDegree(usize),
    #[error("tau must lie in [0, 1], got {0}")]
    Tau(f64),
    #[error("residual and reconstruction blocks differ in shape")]
    Shape,
    #[error("no hyperedge family enabled")]
    NoEdges,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeTag {
    Modality,
    Object,
    Knn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EdgeFamilies {
    pub modality: bool,
    pub object: bool,
    pub knn: bool,
}

impl EdgeFamilies {
    pub const ALL: EdgeFamilies = EdgeFamilies {
        modality: true,
        object: true,
        knn: true,
    };
}

impl Default for EdgeFamilies {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hyperedge {
    pub tag: EdgeTag,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Hypergraph {
    vertices: Tensor,
    n_modalities: usize,
    n_objects: usize,
    edges: Vec<Hyperedge>,
    weights: Vec<f64>,
    vertex_degree: Vec<f64>,
    edge_degree: Vec<f64>,
}

/// `v = tau * f_hat + (1 - tau) * delta`, stacked modality-major.
pub fn build_vertices(f_hat: &[Tensor], delta: &[Tensor], tau: f64) -> Result<Tensor, StructureError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(StructureError::Tau(tau));
    }
    if f_hat.len() != delta.len() || f_hat.iter().zip(delta).any(|(a, b)| a.shape() != b.shape()) {
        return Err(StructureError::Shape);
    }
    let blocks: Vec<Tensor> = f_hat
        .iter()
        .zip(delta)
        .map(|(f, d)| {
            let data = f
                .data()
                .iter()
                .zip(d.data())
                .map(|(x, y)| tau * x + (1.0 - tau) * y)
                .collect();
            Tensor::new(f.rows(), f.cols(), data).expect("same shape")
        })
        .collect();
    Tensor::vstack(&blocks).map_err(|_| StructureError::Shape)
}

fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest other rows of every row, nearest first. Ties go to the
/// lower index.
pub fn knn(vertices: &Tensor, k: usize) -> Result<Vec<Vec<usize>>, StructureError> {
    let n = vertices.rows();
    if k == 0 || k >= n {
        return Err(StructureError::KOutOfRange { k, vertices: n });
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let row = vertices.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_distance(row, vertices.row(j)), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_unstable_by(cmp);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

impl Hypergraph {
    /// Builds the enabled hyperedge families over `vertices`.
    pub fn build(
        vertices: Tensor,
        n_modalities: usize,
        n_objects: usize,
        k: usize,
        families: EdgeFamilies,
    ) -> Result<Self, StructureError> {
        let total = n_modalities * n_objects;
        if vertices.rows() != total {
            return Err(StructureError::VertexCount {
                rows: vertices.rows(),
                m: n_modalities,
                n: n_objects,
            });
        }
        if !(families.modality || families.object || families.knn) {
            return Err(StructureError::NoEdges);
        }
        let mut edges = Vec::new();
        if families.modality {
            for r in 0..n_modalities {
                edges.push(Hyperedge {
                    tag: EdgeTag::Modality,
                    members: (0..n_objects).map(|i| r * n_objects + i).collect(),
                });
            }
        }
        if families.object {
            for i in 0..n_objects {
                edges.push(Hyperedge {
                    tag: EdgeTag::Object,
                    members: (0..n_modalities).map(|r| r * n_objects + i).collect(),
                });
            }
        }
        if families.knn {
            for (v, neighbors) in knn(&vertices, k)?.into_iter().enumerate() {
                let mut members = Vec::with_capacity(k + 1);
                members.push(v);
                members.extend(neighbors);
                edges.push(Hyperedge {
                    tag: EdgeTag::Knn,
                    members,
                });
            }
        }
        Ok(Self::from_edges(vertices, n_modalities, n_objects, edges))
    }

    /// Assembles a hypergraph from explicit edges (unit weights).
    pub fn from_edges(vertices: Tensor, n_modalities: usize, n_objects: usize, edges: Vec<Hyperedge>) -> Self {
        let weights = vec![1.0; edges.len()];
        let mut vertex_degree = vec![0.0; vertices.rows()];
        for (e, w) in edges.iter().zip(&weights) {
            for &v in &e.members {
                vertex_degree[v] += w;
            }
        }
        let edge_degree = edges.iter().map(|e| e.members.len() as f64).collect();
        Self {
            vertices,
            n_modalities,
            n_objects,
            edges,
            weights,
            vertex_degree,
            edge_degree,
        }
    }

    pub fn vertices(&self) -> &Tensor {
        &self.vertices
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.rows()
    }

    pub fn n_modalities(&self) -> usize {
        self.n_modalities
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn edges(&self) -> &[Hyperedge] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `D_v` diagonal: sum of weights of incident edges.
    pub fn vertex_degrees(&self) -> &[f64] {
        &self.vertex_degree
    }

    /// `D_e` diagonal: edge cardinalities.
    pub fn edge_degrees(&self) -> &[f64] {
        &self.edge_degree
    }

    pub fn vertex_index(&self, object: usize, modality: usize) -> usize {
        modality * self.n_objects + object
    }

    /// Dense `|V| x |E|` 0/1 incidence matrix.
    pub fn incidence(&self) -> Tensor {
        let mut h = Tensor::zeros(self.n_vertices(), self.edges.len());
        for (j, e) in self.edges.iter().enumerate() {
            for &v in &e.members {
                h.set(v, j, 1.0);
            }
        }
        h
    }

    pub fn count(&self, tag: EdgeTag) -> usize {
        self.edges.iter().filter(|e| e.tag == tag).count()
    }

    pub fn propagator(&self) -> Result<HypergraphPropagator, StructureError> {
        if let Some(v) = self.vertex_degree.iter().position(|&d| d <= 0.0) {
            return Err(StructureError::ZeroDegree(v));
        }
        Ok(HypergraphPropagator {
            n: self.n_vertices(),
            members: self.edges.iter().map(|e| e.members.clone()).collect(),
            edge_scale: self.weights.iter().zip(&self.edge_degree).map(|(w, d)| w / d).collect(),
            vertex_scale: self.vertex_degree.iter().map(|d| d.powf(-0.5)).collect(),
        })
    }
}

/// Sparse evaluation of `D_v^{-1/2} H W D_e^{-1} H^T D_v^{-1/2}`.
#[derive(Debug, Clone)]
pub struct HypergraphPropagator {
    n: usize,
    members: Vec<Vec<usize>>,
    edge_scale: Vec<f64>,
    vertex_scale: Vec<f64>,
}

impl RowOperator for HypergraphPropagator {
    fn input_rows(&self) -> usize {
        self.n
    }

    fn output_rows(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut scaled = x.detached();
        for (r, s) in self.vertex_scale.iter().enumerate() {
            scaled.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= s);
        }
        let mut out = Tensor::zeros(self.n, d);
        let mut acc = vec![0.0; d];
        for (members, scale) in self.members.iter().zip(&self.edge_scale) {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &v in members {
                acc.iter_mut().zip(scaled.row(v)).for_each(|(a, x)| *a += x);
            }
            for &v in members {
                let row = &mut out.data_mut()[v * d..(v + 1) * d];
                row.iter_mut().zip(&acc).for_each(|(o, a)| *o += scale * a);
            }
        }
        for (r, s) in self.vertex_scale.iter().enumerate() {
            out.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= s);
        }
        out
    }

    fn apply_transpose(&self, x: &Tensor) -> Tensor {
        // symmetric
        self.apply(x)
    }
}

/// Pairwise graph propagation `D^{-1/2} (A + I) D^{-1/2}` over a
/// symmetrized k-nearest-neighbor graph.
#[derive(Debug, Clone)]
pub struct GraphPropagator {
    neighbors: Vec<Vec<usize>>,
    scale: Vec<f64>,
}

impl GraphPropagator {
    pub fn knn_graph(vertices: &Tensor, k: usize) -> Result<Self, StructureError> {
        let lists = knn(vertices, k)?;
        let n = vertices.rows();
        let mut adj: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        let scale = adj.iter().map(|a| (a.len() as f64).powf(-0.5)).collect();
        Ok(Self { neighbors: adj, scale })
    }
}

impl RowOperator for GraphPropagator {
    fn input_rows(&self) -> usize {
        self.neighbors.len()
    }

    fn output_rows(&self) -> usize {
        self.neighbors.len()
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut out = Tensor::zeros(x.rows(), d);
        for (i, adj) in self.neighbors.iter().enumerate() {
            let row = &mut out.data_mut()[i * d..(i + 1) * d];
            for &j in adj {
                let w = self.scale[i] * self.scale[j];
                row.iter_mut().zip(x.row(j)).for_each(|(o, v)| *o += w * v);
            }
        }
        out
    }

    fn apply_transpose(&self, x: &Tensor) -> Tensor {
        self.apply(x)
    }
}
