//! Self-supervised open-set cross-modal retrieval over per-modality feature
//! vectors.
//!
//! The pipeline has two separately trained stages:
//!
//! 1. [`rce`]: nested per-modality auto-encoders that map every modality into
//!    a shared space and learn a residual offset towards each object's center.
//! 2. [`hsl`]: a hypergraph over all (object, modality) vertices with
//!    modality, object and nearest-neighbor hyperedges, smoothed by
//!    hypergraph convolution and re-expressed through a learned memory bank.
//!
//! [`eval`] ranks targets by cosine similarity and scores rankings with mAP,
//! NDCG, ANMRR and interpolated precision-recall curves. [`pipeline`] glues
//! the stages to the file formats in [`dataset`] and [`checkpoint`].

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod hsl;
pub mod hypergraph;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rce;
pub mod report;
pub mod split;
pub mod synth;
pub mod tensor;

pub use autodiff::{Gradients, Graph, RowOperator, Var};
pub use config::{PipelineConfig, Variant};
pub use dataset::{FeatureSet, ModalFeatures};
pub use eval::MetricReport;
pub use optim::Sgd;
pub use pipeline::TrainedPipeline;
pub use tensor::{Tensor, TensorError};
