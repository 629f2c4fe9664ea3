//! Binary checkpoint of a trained pipeline.
//!
//! Little-endian layout:
//!
//! ```text
//! "SRCR" | u32 version = 1
//! u32 config_len | config_len bytes of key=value text
//! u32 M | u32 d0 | u32 d_u | u32 hidden
//! u32 tensor_count | tensor_count x tensor          (RCE section)
//! "HSL\0"
//! u32 k | f64 tau | u32 L | u32 d_z
//! u32 layer_count | (layer_count + 1) x u32 layer dims
//! u32 tensor_count | tensor_count x tensor          (HSL section)
//! ```
//!
//! A tensor is `u32 rows | u32 cols | rows*cols f32` row-major. RCE tensors
//! follow branch order; within a branch: outer encoder, outer decoder, inner
//! encoder, inner decoder (each as weight, bias per layer), then the modality
//! encoding. HSL tensors are the convolution weights in layer order followed
//! by the anchor matrix.
//!
//! Values are stored as `f32`, so a loaded model differs from the in-memory
//! one by rounding.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::hsl::{HslError, HslModel};
use crate::pipeline::TrainedPipeline;
use crate::rce::{RceError, RceModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SRCR";
pub const HSL_MAGIC: &[u8; 4] = b"HSL\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated or malformed: {0}")]
    Format(String),
    #[error("checkpoint does not match its own config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Rce(#[from] RceError),
    #[error(transparent)]
    Hsl(#[from] HslError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rows());
    put_u32(out, t.cols());
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn to_bytes(p: &TrainedPipeline) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    let text = p.config.to_text();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    let rc = &p.rce.config;
    put_u32(&mut out, p.rce.n_modalities());
    put_u32(&mut out, rc.feature_dim);
    put_u32(&mut out, rc.unified_dim);
    put_u32(&mut out, rc.hidden);
    let rce: Vec<&Tensor> = p.rce.params().collect();
    put_u32(&mut out, rce.len());
    for t in rce {
        put_tensor(&mut out, t);
    }

    out.extend_from_slice(HSL_MAGIC);
    let hc = &p.hsl.config;
    put_u32(&mut out, hc.knn_k);
    out.extend_from_slice(&hc.tau.to_le_bytes());
    put_u32(&mut out, p.hsl.bank.len());
    put_u32(&mut out, p.hsl.bank.dim());
    put_u32(&mut out, p.hsl.layers.len());
    put_u32(&mut out, p.hsl.layers.first().map_or(0, |l| l.theta.rows()));
    for l in &p.hsl.layers {
        put_u32(&mut out, l.theta.cols());
    }
    let hsl: Vec<&Tensor> = p.hsl.params().collect();
    put_u32(&mut out, hsl.len());
    for t in hsl {
        put_tensor(&mut out, t);
    }
    out
}

pub fn save(p: &TrainedPipeline, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(p))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainedPipeline, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Format(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor_into(&mut self, target: &mut Tensor) -> Result<(), CheckpointError> {
        let (rows, cols) = (self.u32()?, self.u32()?);
        if (rows, cols) != target.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "tensor {rows}x{cols}, expected {}x{}",
                target.rows(),
                target.cols()
            )));
        }
        let raw = self.take(rows * cols * 4)?;
        for (x, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        Ok(())
    }

    fn expect(&self, what: &str, got: usize, want: usize) -> Result<(), CheckpointError> {
        if got != want {
            return Err(CheckpointError::Mismatch(format!(
                "{what} is {got}, config implies {want}"
            )));
        }
        Ok(())
    }
}

/// Rebuilds the models from their config, then overwrites every parameter.
/// Loss logs are not stored and come back empty.
pub fn from_bytes(bytes: &[u8]) -> Result<TrainedPipeline, CheckpointError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = c.u32()? as u32;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = c.u32()?;
    let text = std::str::from_utf8(c.take(len)?).map_err(|e| CheckpointError::Format(e.to_string()))?;
    let config = PipelineConfig::parse_str(text)?;
    let (m, d0) = (c.u32()?, c.u32()?);
    let (du, hidden) = (c.u32()?, c.u32()?);
    let mut rce = RceModel::new(config.rce_config(d0), m, config.seed)?;
    c.expect("unified dim", du, rce.config.unified_dim)?;
    c.expect("hidden width", hidden, rce.config.hidden)?;
    let count = c.u32()?;
    c.expect("RCE tensor count", count, rce.params().count())?;
    for t in rce.params_mut() {
        c.tensor_into(t)?;
    }

    if c.take(4)? != HSL_MAGIC {
        return Err(CheckpointError::Format("missing HSL section".into()));
    }
    let hsl_cfg = config.hsl_config();
    let k = c.u32()?;
    c.expect("k", k, hsl_cfg.knn_k)?;
    let tau = c.f64()?;
    if tau != hsl_cfg.tau {
        return Err(CheckpointError::Mismatch(format!(
            "tau {tau} vs config {}",
            hsl_cfg.tau
        )));
    }
    let (n_anchors, anchor_dim) = (c.u32()?, c.u32()?);
    c.expect("anchor count", n_anchors, hsl_cfg.n_anchors)?;
    c.expect("anchor dim", anchor_dim, hsl_cfg.anchor_dim)?;
    let layers = c.u32()?;
    c.expect("layer count", layers, hsl_cfg.conv_layers)?;
    let input_dim = c.u32()?;
    let mut hsl = HslModel::initialize(hsl_cfg, input_dim, 0)?;
    for l in 0..layers {
        let out = c.u32()?;
        c.expect("layer width", out, hsl.layers[l].theta.cols())?;
    }
    let count = c.u32()?;
    c.expect("HSL tensor count", count, hsl.params().count())?;
    for t in hsl.params_mut() {
        c.tensor_into(t)?;
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok(TrainedPipeline {
        config,
        rce,
        hsl,
        rce_log: Vec::new(),
        hsl_log: Vec::new(),
    })
}
