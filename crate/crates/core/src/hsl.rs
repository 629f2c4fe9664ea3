//! Hierarchical structure learning.
//!
//! Frozen residual-center outputs become hypergraph vertices
//! `v = tau * f_hat + (1 - tau) * delta`. One or more convolution layers
//! smooth them over the hypergraph, and a memory bank of `L` anchors
//! re-expresses each smoothed vertex as a softmax-weighted anchor average
//! `z`. Training minimizes the mean distance between a smoothed vertex and
//! its memory rebuild.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Gradients, Graph, RowOperator, Var};
use crate::hypergraph::{build_vertices, EdgeFamilies, GraphPropagator, Hypergraph, StructureError};
use crate::nn::absorb_one;
use crate::optim::Sgd;
use crate::rce::RceOutputs;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum HslError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// What mixes information between vertices before the memory bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StructureKind {
    /// Hierarchical hypergraph convolution (the full model).
    Hypergraph,
    /// Symmetric-normalized propagation over a pairwise kNN graph.
    Gcn,
    /// No mixing; each vertex is transformed on its own.
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HslConfig {
    pub knn_k: usize,
    pub tau: f64,
    pub n_anchors: usize,
    pub anchor_dim: usize,
    pub conv_layers: usize,
    pub families: EdgeFamilies,
    pub structure: StructureKind,
}

impl Default for HslConfig {
    fn default() -> Self {
        Self {
            knn_k: 10,
            tau: 0.75,
            n_anchors: 64,
            anchor_dim: 64,
            conv_layers: 1,
            families: EdgeFamilies::ALL,
            structure: StructureKind::Hypergraph,
        }
    }
}

impl HslConfig {
    pub fn validate(&self) -> Result<(), HslError> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(StructureError::Tau(self.tau).into());
        }
        if self.n_anchors == 0 || self.anchor_dim == 0 || self.conv_layers == 0 {
            return Err(HslError::Config(
                "anchors, anchor dim and layer count must be positive".into(),
            ));
        }
        if self.knn_k == 0 {
            return Err(HslError::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HgnnLayer {
    /// `input_dim x output_dim`.
    pub theta: Tensor,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    /// `L x d_z`.
    pub anchors: Tensor,
}

impl MemoryBank {
    pub fn new(anchors: Tensor) -> Result<Self, HslError> {
        if anchors.rows() == 0 {
            return Err(HslError::Config("memory bank needs at least one anchor".into()));
        }
        if anchors.data().iter().any(|x| !x.is_finite()) {
            return Err(HslError::Config("anchors must be finite".into()));
        }
        Ok(Self { anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    /// Normalized activation scores of every row of `v`.
    pub fn scores(&self, v: &Tensor) -> Result<Tensor, HslError> {
        let g = Graph::new();
        let a = g.constant(self.anchors.clone());
        let x = g.constant(v.clone());
        Ok(g.value(memory_scores(&g, a, x)?))
    }

    /// Anchor average weighted by `scores`.
    pub fn rebuild(&self, scores: &Tensor) -> Result<Tensor, HslError> {
        Ok(scores.matmul(&self.anchors)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HslModel {
    pub config: HslConfig,
    pub layers: Vec<HgnnLayer>,
    pub bank: MemoryBank,
}

#[derive(Debug, Clone)]
pub struct HslVars {
    pub thetas: Vec<Var>,
    pub anchors: Var,
}

/// Vertex set plus the mixing operator built over it.
#[derive(Debug, Clone)]
pub struct Structure {
    pub vertices: Tensor,
    pub hypergraph: Option<Hypergraph>,
    pub operator: Option<Rc<dyn RowOperator>>,
}

impl Structure {
    pub fn build(vertices: Tensor, n_modalities: usize, n_objects: usize, cfg: &HslConfig) -> Result<Self, HslError> {
        match cfg.structure {
            StructureKind::Hypergraph => {
                let h = Hypergraph::build(vertices.clone(), n_modalities, n_objects, cfg.knn_k, cfg.families)?;
                let op: Rc<dyn RowOperator> = Rc::new(h.propagator()?);
                Ok(Self {
                    vertices,
                    hypergraph: Some(h),
                    operator: Some(op),
                })
            }
            StructureKind::Gcn => {
                let op: Rc<dyn RowOperator> = Rc::new(GraphPropagator::knn_graph(&vertices, cfg.knn_k)?);
                Ok(Self {
                    vertices,
                    hypergraph: None,
                    operator: Some(op),
                })
            }
            StructureKind::Mlp => Ok(Self {
                vertices,
                hypergraph: None,
                operator: None,
            }),
        }
    }

    /// Vertices from frozen residual-center outputs.
    pub fn from_rce(outputs: &RceOutputs, cfg: &HslConfig) -> Result<Self, HslError> {
        let vertices = build_vertices(&outputs.f_hat, &outputs.delta, cfg.tau)?;
        let n = outputs.f_hat.first().map_or(0, Tensor::rows);
        Self::build(vertices, outputs.f_hat.len(), n, cfg)
    }
}

/// `sigma(P X Theta)`; without an operator, `sigma(X Theta)`.
pub fn hypergraph_conv(
    g: &Graph,
    operator: Option<&Rc<dyn RowOperator>>,
    theta: Var,
    activation: Activation,
    x: Var,
) -> Result<Var, HslError> {
    let projected = g.matmul(x, theta)?;
    let mixed = match operator {
        Some(op) => g.apply_operator(projected, Rc::clone(op))?,
        None => projected,
    };
    Ok(match activation {
        Activation::Relu => g.relu(mixed),
        Activation::Identity => mixed,
    })
}

/// Softmax over anchors of `-||v - a||^2 / sqrt(d_z)`.
pub fn memory_scores(g: &Graph, anchors: Var, v: Var) -> Result<Var, HslError> {
    let (_, dz) = g.shape(anchors);
    let d = g.sq_dist(v, anchors)?;
    let s = g.scale(d, -1.0 / (dz as f64).sqrt());
    Ok(g.softmax_rows(s))
}

pub fn memory_rebuild(g: &Graph, scores: Var, anchors: Var) -> Result<Var, HslError> {
    Ok(g.matmul(scores, anchors)?)
}

/// Batch mean of `||v - z||`.
pub fn loss_mr(g: &Graph, v: Var, z: Var) -> Result<Var, HslError> {
    let diff = g.sub(v, z)?;
    Ok(g.mean(g.l2norm_rows(diff)))
}

#[derive(Debug, Clone, Copy)]
pub struct HslForward {
    pub smoothed: Var,
    pub scores: Var,
    pub aligned: Var,
}

impl HslModel {
    /// Seeded uniform weights for the convolution layers and the anchors.
    /// Anchors are not drawn from data so they favor no category.
    pub fn initialize(cfg: HslConfig, input_dim: usize, seed: u64) -> Result<Self, HslError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(cfg.conv_layers);
        let mut input = input_dim;
        for l in 0..cfg.conv_layers {
            let s = 1.0 / (input as f64).sqrt();
            let activation = if l + 1 == cfg.conv_layers {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(HgnnLayer {
                theta: Tensor::uniform(input, cfg.anchor_dim, s, &mut rng).with_requires_grad(),
                activation,
            });
            input = cfg.anchor_dim;
        }
        let s = 1.0 / (cfg.anchor_dim as f64).sqrt();
        let anchors = Tensor::uniform(cfg.n_anchors, cfg.anchor_dim, s, &mut rng).with_requires_grad();
        Ok(Self {
            bank: MemoryBank::new(anchors)?,
            config: cfg,
            layers,
        })
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> HslVars {
        let record = |t: &Tensor| if trainable { g.param(t) } else { g.constant(t.clone()) };
        HslVars {
            thetas: self.layers.iter().map(|l| record(&l.theta)).collect(),
            anchors: record(&self.bank.anchors),
        }
    }

    pub fn absorb(&mut self, grads: &Gradients, vars: &HslVars) -> Result<(), TensorError> {
        for (layer, &v) in self.layers.iter_mut().zip(&vars.thetas) {
            absorb_one(&mut layer.theta, grads, v)?;
        }
        absorb_one(&mut self.bank.anchors, grads, vars.anchors)
    }

    /// Parameters in checkpoint order.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .map(|l| &l.theta)
            .chain(std::iter::once(&self.bank.anchors))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .map(|l| &mut l.theta)
            .chain(std::iter::once(&mut self.bank.anchors))
    }

    pub fn forward(&self, g: &Graph, vars: &HslVars, structure: &Structure) -> Result<HslForward, HslError> {
        let mut x = g.constant(structure.vertices.clone());
        for (layer, &theta) in self.layers.iter().zip(&vars.thetas) {
            x = hypergraph_conv(g, structure.operator.as_ref(), theta, layer.activation, x)?;
        }
        let scores = memory_scores(g, vars.anchors, x)?;
        let aligned = memory_rebuild(g, scores, vars.anchors)?;
        Ok(HslForward {
            smoothed: x,
            scores,
            aligned,
        })
    }

    /// Structure-aware embeddings before the memory bank.
    pub fn smooth(&self, structure: &Structure) -> Result<Tensor, HslError> {
        let g = Graph::new();
        let mut x = g.constant(structure.vertices.clone());
        for layer in &self.layers {
            let theta = g.constant(layer.theta.clone());
            x = hypergraph_conv(&g, structure.operator.as_ref(), theta, layer.activation, x)?;
        }
        Ok(g.value(x))
    }

    /// Aligned embeddings `z` for every vertex, modality-major.
    pub fn align(&self, structure: &Structure) -> Result<Tensor, HslError> {
        let g = Graph::new();
        let vars = self.bind(&g, false);
        let fwd = self.forward(&g, &vars, structure)?;
        Ok(g.value(fwd.aligned))
    }

    pub fn loss(&self, structure: &Structure) -> Result<f64, HslError> {
        let g = Graph::new();
        let vars = self.bind(&g, false);
        let fwd = self.forward(&g, &vars, structure)?;
        Ok(g.scalar(loss_mr(&g, fwd.smoothed, fwd.aligned)?))
    }
}

/// Jointly fits the convolution weights and anchors on the memory
/// reconstruction loss with full-batch SGD. The log holds the loss before
/// each update.
pub fn train_hsl(model: &mut HslModel, structure: &Structure, epochs: usize, lr: f64) -> Result<Vec<f64>, HslError> {
    let opt = Sgd::new(lr);
    let mut log = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let g = Graph::new();
        let vars = model.bind(&g, true);
        let fwd = model.forward(&g, &vars, structure)?;
        let loss = loss_mr(&g, fwd.smoothed, fwd.aligned)?;
        log.push(g.scalar(loss));
        let grads = g.backward(loss)?;
        model.absorb(&grads, &vars)?;
        opt.step(model.params_mut())?;
    }
    Ok(log)
}

/// Splits modality-major rows into one `N x d` block per modality.
pub fn split_modalities(rows: &Tensor, n_modalities: usize) -> Vec<Tensor> {
    let n = rows.rows() / n_modalities.max(1);
    (0..n_modalities).map(|r| rows.slice_rows(r * n, (r + 1) * n)).collect()
}
