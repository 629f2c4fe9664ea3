//! Pipeline hyperparameters and their `key=value` file form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hsl::{HslConfig, StructureKind};
use crate::hypergraph::EdgeFamilies;
use crate::rce::{CenterMode, RceConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {value}")]
    Value { key: String, value: String },
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Model variant: the full model or one of the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    DirectCenter,
    NoModalityEdges,
    NoModalityObjectEdges,
    Gcn,
    Mlp,
    /// Needs labels at training time.
    CategoryCenter,
}

impl Variant {
    /// The label-free variants in report order.
    pub const SELF_SUPERVISED: [Variant; 6] = [
        Variant::DirectCenter,
        Variant::NoModalityEdges,
        Variant::NoModalityObjectEdges,
        Variant::Gcn,
        Variant::Mlp,
        Variant::Full,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::DirectCenter => "direct-center",
            Variant::NoModalityEdges => "no-modality-edges",
            Variant::NoModalityObjectEdges => "no-modality-object-edges",
            Variant::Gcn => "gcn",
            Variant::Mlp => "mlp",
            Variant::CategoryCenter => "category-center",
        }
    }

    /// Row label for comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "RCE+HSL",
            Variant::DirectCenter => "Direct Center+HSL",
            Variant::NoModalityEdges => "RCE+HSL w/o E_m",
            Variant::NoModalityObjectEdges => "RCE+HSL w/o E_m,E_o",
            Variant::Gcn => "RCE+GCN-based HSL",
            Variant::Mlp => "RCE+MLP-based HSL",
            Variant::CategoryCenter => "Category Center+HSL",
        }
    }

    pub fn uses_labels(self) -> bool {
        self == Variant::CategoryCenter
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Variant::Full,
            Variant::DirectCenter,
            Variant::NoModalityEdges,
            Variant::NoModalityObjectEdges,
            Variant::Gcn,
            Variant::Mlp,
            Variant::CategoryCenter,
        ]
        .into_iter()
        .find(|v| v.tag() == s)
        .ok_or_else(|| ConfigError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub alpha: f64,
    pub reconstruction: bool,
    pub tau: f64,
    pub knn_k: usize,
    pub n_anchors: usize,
    pub unified_dim: usize,
    pub anchor_dim: usize,
    pub hidden: usize,
    pub conv_layers: usize,
    pub rce_epochs: usize,
    pub rce_lr: f64,
    pub hsl_epochs: usize,
    pub hsl_lr: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            reconstruction: false,
            tau: 0.75,
            knn_k: 10,
            n_anchors: 64,
            unified_dim: 64,
            anchor_dim: 64,
            hidden: 256,
            conv_layers: 1,
            rce_epochs: 40,
            rce_lr: 0.1,
            hsl_epochs: 120,
            hsl_lr: 0.001,
            seed: 2022,
            variant: Variant::Full,
        }
    }
}

pub const KEYS: [&str; 15] = [
    "alpha",
    "reconstruction",
    "tau",
    "knn_k",
    "n_anchors",
    "unified_dim",
    "anchor_dim",
    "hidden",
    "conv_layers",
    "rce_epochs",
    "rce_lr",
    "hsl_epochs",
    "hsl_lr",
    "seed",
    "variant",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key.trim() {
            "alpha" => self.alpha = parse(key, value)?,
            "reconstruction" => self.reconstruction = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "knn_k" => self.knn_k = parse(key, value)?,
            "n_anchors" => self.n_anchors = parse(key, value)?,
            "unified_dim" => self.unified_dim = parse(key, value)?,
            "anchor_dim" => self.anchor_dim = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "conv_layers" => self.conv_layers = parse(key, value)?,
            "rce_epochs" => self.rce_epochs = parse(key, value)?,
            "rce_lr" => self.rce_lr = parse(key, value)?,
            "hsl_epochs" => self.hsl_epochs = parse(key, value)?,
            "hsl_lr" => self.hsl_lr = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "alpha" => self.alpha.to_string(),
            "reconstruction" => self.reconstruction.to_string(),
            "tau" => self.tau.to_string(),
            "knn_k" => self.knn_k.to_string(),
            "n_anchors" => self.n_anchors.to_string(),
            "unified_dim" => self.unified_dim.to_string(),
            "anchor_dim" => self.anchor_dim.to_string(),
            "hidden" => self.hidden.to_string(),
            "conv_layers" => self.conv_layers.to_string(),
            "rce_epochs" => self.rce_epochs.to_string(),
            "rce_lr" => self.rce_lr.to_string(),
            "hsl_epochs" => self.hsl_epochs.to_string(),
            "hsl_lr" => self.hsl_lr.to_string(),
            "seed" => self.seed.to_string(),
            "variant" => self.variant.tag().to_string(),
            _ => return None,
        })
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are ignored.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                message: "expected key=value".into(),
            })?;
            cfg.set(k, v).map_err(|e| ConfigError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Every key in fixed order, one `key=value` per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of [`to_text`](Self::to_text).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.rce_config(1)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.hsl_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, lr) in [("rce_lr", self.rce_lr), ("hsl_lr", self.hsl_lr)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn rce_config(&self, feature_dim: usize) -> RceConfig {
        RceConfig {
            unified_dim: self.unified_dim,
            hidden: self.hidden,
            alpha: self.alpha,
            reconstruction: self.reconstruction,
            mode: if self.variant == Variant::DirectCenter {
                CenterMode::Direct
            } else {
                CenterMode::Residual
            },
            ..RceConfig::new(feature_dim)
        }
    }

    pub fn hsl_config(&self) -> HslConfig {
        let (families, structure) = match self.variant {
            Variant::NoModalityEdges => (
                EdgeFamilies {
                    modality: false,
                    ..EdgeFamilies::ALL
                },
                StructureKind::Hypergraph,
            ),
            Variant::NoModalityObjectEdges => (
                EdgeFamilies {
                    modality: false,
                    object: false,
                    knn: true,
                },
                StructureKind::Hypergraph,
            ),
            Variant::Gcn => (EdgeFamilies::ALL, StructureKind::Gcn),
            Variant::Mlp => (EdgeFamilies::ALL, StructureKind::Mlp),
            _ => (EdgeFamilies::ALL, StructureKind::Hypergraph),
        };
        HslConfig {
            knn_k: self.knn_k,
            tau: self.tau,
            n_anchors: self.n_anchors,
            anchor_dim: self.anchor_dim,
            conv_layers: self.conv_layers,
            families,
            structure,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!((c.alpha, c.tau, c.seed), (0.5, 0.75, 2022));
        assert_eq!((c.rce_epochs, c.rce_lr, c.hsl_epochs, c.hsl_lr), (40, 0.1, 120, 0.001));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn text_round_trip() {
        let mut c = PipelineConfig::default();
        c.set("tau", "0.3").unwrap();
        c.set("variant", "gcn").unwrap();
        c.set("hsl_lr", "0.0125").unwrap();
        let back = PipelineConfig::parse_str(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), PipelineConfig::default().hash());
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            PipelineConfig::parse_str("alpha"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            PipelineConfig::parse_str("# c\n\nbogus=1"),
            Err(ConfigError::Parse { line: 3, .. })
        ));
        assert!(PipelineConfig::parse_str("variant=nope").is_err());
        assert!(PipelineConfig::parse_str("knn_k=-1").is_err());
        let c = PipelineConfig::parse_str("alpha=2").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in Variant::SELF_SUPERVISED.into_iter().chain([Variant::CategoryCenter]) {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
        }
        assert!(Variant::CategoryCenter.uses_labels());
        assert!(!Variant::SELF_SUPERVISED.iter().any(|v| v.uses_labels()));
    }

    #[test]
    fn variants_map_to_stage_configs() {
        let mut c = PipelineConfig {
            variant: Variant::NoModalityObjectEdges,
            ..PipelineConfig::default()
        };
        let h = c.hsl_config();
        assert!(!h.families.modality && !h.families.object && h.families.knn);
        c.variant = Variant::DirectCenter;
        assert_eq!(c.rce_config(8).mode, CenterMode::Direct);
        c.variant = Variant::Mlp;
        assert_eq!(c.hsl_config().structure, StructureKind::Mlp);
    }
}
