//! Two-stage training, transductive embedding and cross-modal evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig, Variant};
use std::io::{Read, Seek};

use crate::dataset::{read_ocmf_features_from, DatasetError, FeatureSet, ModalFeatures};
use crate::eval::{average_reports, rank_with, EvalError, MetricReport, RankOptions, RankedRetrieval};
use crate::hsl::{split_modalities, train_hsl, HslError, HslModel, Structure};
use crate::rce::{train_rce, train_rce_category_center, EpochRecord, RceError, RceModel};
use crate::split::modality_pairs;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Rce(#[from] RceError),
    #[error(transparent)]
    Hsl(#[from] HslError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("variant `{0}` needs labels; pass them explicitly")]
    NeedsLabels(Variant),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Shape(String),
}

/// Seed offset for the second stage so both stages do not share a stream.
const HSL_SEED_OFFSET: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPipeline {
    pub config: PipelineConfig,
    pub rce: RceModel,
    pub hsl: HslModel,
    pub rce_log: Vec<EpochRecord>,
    pub hsl_log: Vec<f64>,
}

/// Trains both stages on unlabeled features.
pub fn train(cfg: &PipelineConfig, features: &ModalFeatures) -> Result<TrainedPipeline, PipelineError> {
    if cfg.variant.uses_labels() {
        return Err(PipelineError::NeedsLabels(cfg.variant));
    }
    train_inner(cfg, features, None)
}

/// Trains a label-consuming ablation. Label-free variants ignore `labels`.
pub fn train_with_labels(
    cfg: &PipelineConfig,
    features: &ModalFeatures,
    labels: &[u32],
) -> Result<TrainedPipeline, PipelineError> {
    if labels.len() != features.n_objects() {
        return Err(PipelineError::Shape(format!(
            "{} labels for {} objects",
            labels.len(),
            features.n_objects()
        )));
    }
    train_inner(cfg, features, cfg.variant.uses_labels().then_some(labels))
}

/// Reads the feature blocks of an OCMF stream, seeking past any label
/// section, optionally keeps only `indices`, and trains on the result.
pub fn train_from_ocmf<R: Read + Seek>(
    cfg: &PipelineConfig,
    reader: R,
    indices: Option<&[usize]>,
) -> Result<TrainedPipeline, PipelineError> {
    let features = read_ocmf_features_from(reader)?;
    let features = match indices {
        None => features,
        Some(idx) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= features.n_objects()) {
                return Err(PipelineError::Shape(format!(
                    "index {bad} out of range for {} objects",
                    features.n_objects()
                )));
            }
            features.subset(idx)
        }
    };
    train(cfg, &features)
}

fn train_inner(
    cfg: &PipelineConfig,
    features: &ModalFeatures,
    labels: Option<&[u32]>,
) -> Result<TrainedPipeline, PipelineError> {
    cfg.validate()?;
    let rce_cfg = cfg.rce_config(features.feature_dim());
    let mut rce = RceModel::new(rce_cfg, features.n_modalities(), cfg.seed)?;
    let rce_log = match labels {
        Some(l) => train_rce_category_center(&mut rce, features, l, cfg.rce_epochs, cfg.rce_lr)?,
        None => train_rce(&mut rce, features, cfg.rce_epochs, cfg.rce_lr)?,
    };
    if let Some(last) = rce_log.last() {
        log::info!("rce: {} epochs, final loss {:.6}", rce_log.len(), last.loss.total);
    }
    let outputs = rce.infer(features)?;
    let hsl_cfg = cfg.hsl_config();
    let structure = Structure::from_rce(&outputs, &hsl_cfg)?;
    let mut hsl = HslModel::initialize(
        hsl_cfg,
        structure.vertices.cols(),
        cfg.seed.wrapping_add(HSL_SEED_OFFSET),
    )?;
    let hsl_log = train_hsl(&mut hsl, &structure, cfg.hsl_epochs, cfg.hsl_lr)?;
    if let Some(last) = hsl_log.last() {
        log::info!("hsl: {} epochs, final loss {:.6}", hsl_log.len(), last);
    }
    Ok(TrainedPipeline {
        config: cfg.clone(),
        rce,
        hsl,
        rce_log,
        hsl_log,
    })
}

impl TrainedPipeline {
    /// Aligned embeddings, one `N x d_z` block per modality. The structure
    /// is rebuilt over `features` alone.
    pub fn embed(&self, features: &ModalFeatures) -> Result<Vec<Tensor>, PipelineError> {
        if features.n_modalities() != self.rce.n_modalities() || features.feature_dim() != self.rce.config.feature_dim {
            return Err(PipelineError::Shape(format!(
                "model expects {} modalities of dim {}, data has {} of dim {}",
                self.rce.n_modalities(),
                self.rce.config.feature_dim,
                features.n_modalities(),
                features.feature_dim()
            )));
        }
        let outputs = self.rce.infer(features)?;
        let structure = Structure::from_rce(&outputs, &self.hsl.config)?;
        let z = self.hsl.align(&structure)?;
        Ok(split_modalities(&z, features.n_modalities()))
    }
}

/// Trains `variant` on a labelled training set. Labels reach the trainer
/// only for variants that consume them.
pub fn train_variant(
    cfg: &PipelineConfig,
    variant: Variant,
    train_set: &FeatureSet,
) -> Result<TrainedPipeline, PipelineError> {
    let cfg = PipelineConfig { variant, ..cfg.clone() };
    match (&train_set.labels, variant.uses_labels()) {
        (Some(labels), true) => train_with_labels(&cfg, &train_set.features, labels),
        (None, true) => Err(PipelineError::NeedsLabels(variant)),
        (_, false) => train(&cfg, &train_set.features),
    }
}

/// Embeds a labelled evaluation set and scores all modality pairs.
pub fn evaluate_model(
    model: &TrainedPipeline,
    eval_set: &FeatureSet,
    n_points: usize,
    options: RankOptions,
) -> Result<Vec<PairReport>, PipelineError> {
    let labels = eval_set
        .labels
        .as_ref()
        .ok_or_else(|| PipelineError::Shape("evaluation needs labels".into()))?;
    let blocks = model.embed(&eval_set.features)?;
    evaluate_pairs(&blocks, labels, n_points, options)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairReport {
    pub query_modality: usize,
    pub target_modality: usize,
    pub report: MetricReport,
}

fn check_blocks(blocks: &[Tensor], labels: &[u32]) -> Result<(), PipelineError> {
    if blocks.len() < 2 {
        return Err(PipelineError::Shape(
            "cross-modal evaluation needs at least two modalities".into(),
        ));
    }
    if let Some(b) = blocks.iter().find(|b| b.rows() != labels.len()) {
        return Err(PipelineError::Shape(format!(
            "{} rows for {} labels",
            b.rows(),
            labels.len()
        )));
    }
    Ok(())
}

/// Scores every ordered modality pair, all objects as both queries and targets.
pub fn evaluate_pairs(
    blocks: &[Tensor],
    labels: &[u32],
    n_points: usize,
    options: RankOptions,
) -> Result<Vec<PairReport>, PipelineError> {
    check_blocks(blocks, labels)?;
    modality_pairs(blocks.len())
        .into_iter()
        .map(|(q, t)| {
            let rr = rank_with(&blocks[q], labels, &blocks[t], labels, options)?;
            Ok(PairReport {
                query_modality: q,
                target_modality: t,
                report: MetricReport::from_ranking(&rr, n_points)?,
            })
        })
        .collect()
}

/// Metrics of rankings drawn uniformly at random, one seeded permutation
/// per query.
pub fn random_baseline(
    labels: &[u32],
    n_modalities: usize,
    seed: u64,
    n_points: usize,
) -> Result<Vec<PairReport>, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    modality_pairs(n_modalities)
        .into_iter()
        .map(|(q, t)| {
            let mut order_all = Vec::with_capacity(labels.len());
            let mut relevant = Vec::with_capacity(labels.len());
            for &ql in labels {
                let mut order: Vec<usize> = (0..labels.len()).collect();
                order.shuffle(&mut rng);
                relevant.push(order.iter().map(|&j| labels[j] == ql).collect());
                order_all.push(order);
            }
            let mut rr = RankedRetrieval::from_relevance(relevant);
            rr.order = order_all;
            Ok(PairReport {
                query_modality: q,
                target_modality: t,
                report: MetricReport::from_ranking(&rr, n_points)?,
            })
        })
        .collect()
}

/// Pair reports of the raw input features.
pub fn raw_feature_baseline(
    features: &ModalFeatures,
    labels: &[u32],
    n_points: usize,
    options: RankOptions,
) -> Result<Vec<PairReport>, PipelineError> {
    let blocks: Vec<Tensor> = (0..features.n_modalities()).map(|r| features.tensor(r)).collect();
    evaluate_pairs(&blocks, labels, n_points, options)
}

pub fn mean_report(pairs: &[PairReport]) -> Option<MetricReport> {
    let reports: Vec<MetricReport> = pairs.iter().map(|p| p.report.clone()).collect();
    average_reports(&reports)
}
