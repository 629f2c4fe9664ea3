//! Synthetic multi-modal open-set data.
//!
//! Every category draws a centroid in a shared latent space; every object
//! jitters around its category centroid; every modality observes the latent
//! through its own fixed affine map plus isotropic noise. Modalities of one
//! object therefore share a latent center while their raw features differ.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{DatasetError, FeatureSet, ModalFeatures};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_categories: usize,
    pub per_category: usize,
    pub n_modalities: usize,
    pub feature_dim: usize,
    /// Scale of each modality map's deviation from the identity.
    pub modality_shift: f64,
    /// Std-dev of per-(object, modality) observation noise.
    pub noise: f64,
    /// Std-dev of an object's offset from its category centroid.
    pub object_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_categories: 30,
            per_category: 20,
            n_modalities: 3,
            feature_dim: 64,
            modality_shift: 1.0,
            noise: 0.3,
            object_jitter: 0.6,
            seed: 2022,
        }
    }
}

/// `f = x A + b` for a latent row vector `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityMap {
    pub matrix: Tensor,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub features: FeatureSet,
    /// One map per modality.
    pub maps: Vec<ModalityMap>,
    /// Noise-free latent center of every object, `N x d0`.
    pub latents: Tensor,
}

/// Default modality names; the first three follow the usual 3D triple.
pub fn default_modality_names(m: usize) -> Vec<String> {
    (0..m)
        .map(|r| match r {
            0 => "image".to_string(),
            1 => "voxel".to_string(),
            2 => "point".to_string(),
            _ => format!("modality{r}"),
        })
        .collect()
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<FeatureSet, DatasetError> {
    generate_synthetic_detailed(cfg).map(|d| d.features)
}

pub fn generate_synthetic_detailed(cfg: &SynthConfig) -> Result<SyntheticDataset, DatasetError> {
    if cfg.n_categories == 0 || cfg.per_category == 0 || cfg.n_modalities == 0 || cfg.feature_dim == 0 {
        return Err(DatasetError::Invalid("all synthetic counts must be positive".into()));
    }
    if !(cfg.modality_shift >= 0.0 && cfg.noise >= 0.0 && cfg.object_jitter >= 0.0) {
        return Err(DatasetError::Invalid(
            "shift, noise and jitter must be non-negative".into(),
        ));
    }
    let d = cfg.feature_dim;
    let n = cfg.n_categories * cfg.per_category;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };

    let maps: Vec<ModalityMap> = (0..cfg.n_modalities)
        .map(|_| {
            let mut matrix = Tensor::identity(d);
            let s = cfg.modality_shift / (d as f64).sqrt();
            for x in matrix.data_mut() {
                *x += s * normal();
            }
            let offset = (0..d).map(|_| cfg.modality_shift * normal()).collect();
            ModalityMap { matrix, offset }
        })
        .collect();

    let mut latents = Tensor::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..cfg.n_categories {
        let centroid: Vec<f64> = (0..d).map(|_| normal()).collect();
        for j in 0..cfg.per_category {
            let i = c * cfg.per_category + j;
            for (k, mu) in centroid.iter().enumerate() {
                latents.set(i, k, mu + cfg.object_jitter * normal());
            }
            labels.push(c as u32);
        }
    }

    let mut data = Vec::with_capacity(cfg.n_modalities * n * d);
    for map in &maps {
        let mut mapped = latents.matmul(&map.matrix).expect("square map");
        for i in 0..n {
            for k in 0..d {
                let v = mapped.get(i, k) + map.offset[k] + cfg.noise * normal();
                mapped.set(i, k, v);
            }
        }
        data.extend(mapped.data().iter().map(|&x| x as f32));
    }
    let features = ModalFeatures::new(n, cfg.n_modalities, d, data, default_modality_names(cfg.n_modalities))?;
    Ok(SyntheticDataset {
        features: FeatureSet::new(features, Some(labels))?,
        maps,
        latents,
    })
}
