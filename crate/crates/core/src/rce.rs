//! Residual-center embedding.
//!
//! Each modality `r` owns two nested auto-encoders:
//!
//! ```text
//! u_r     = outer_encoder_r(f_r)                 d0 -> du
//! f_hat_r = outer_decoder_r(u_r)                 du -> d0
//! delta_r = inner_encoder_r(f_hat_r + e_r)       d0 -> d0
//! c_r     = inner_decoder_r(f_hat_r + delta_r)   d0 -> du
//! ```
//!
//! The object center `u` is the mean of the `u_r`. Training pulls every
//! `u_r` and `c_r` towards `u` (residual-center loss) and asks decoders of
//! other modalities to reproduce `c_r` from this modality's inner code
//! (cross-reconstruction loss). The modality encoding `e_r` lives in the
//! `d0` space so that it can be added to `f_hat_r`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Gradients, Graph, Var};
use crate::dataset::ModalFeatures;
use crate::nn::{absorb_one, Mlp, MlpVars};
use crate::optim::Sgd;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum RceError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How the per-modality embeddings relate to the object center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CenterMode {
    /// Nested auto-encoders with a learned residual (the full model).
    Residual,
    /// No inner auto-encoder: the outer code is pulled straight to the
    /// center, the residual is identically zero and `c_r = u_r`.
    Direct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RceConfig {
    pub feature_dim: usize,
    pub unified_dim: usize,
    pub hidden: usize,
    pub alpha: f64,
    /// Adds a mean `||f_hat - f||` term to the loss. Off by default.
    pub reconstruction: bool,
    pub mode: CenterMode,
}

impl RceConfig {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            unified_dim: 64,
            hidden: 256,
            alpha: 0.5,
            reconstruction: false,
            mode: CenterMode::Residual,
        }
    }

    pub fn validate(&self) -> Result<(), RceError> {
        check_alpha(self.alpha)?;
        if self.feature_dim == 0 || self.unified_dim == 0 || self.hidden == 0 {
            return Err(RceError::Config("dimensions must be positive".into()));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<(), RceError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(RceError::Config(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBranch {
    pub outer_encoder: Mlp,
    pub outer_decoder: Mlp,
    pub inner_encoder: Mlp,
    pub inner_decoder: Mlp,
    /// Learnable modality encoding, `1 x d0`.
    pub encoding: Tensor,
}

impl ModalityBranch {
    fn new(cfg: &RceConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d0, du, h) = (cfg.feature_dim, cfg.unified_dim, cfg.hidden);
        let outer_encoder = Mlp::new(&[d0, h, du], rng);
        let outer_decoder = Mlp::new(&[du, h, d0], rng);
        let inner_encoder = Mlp::new(&[d0, h, d0], rng);
        let inner_decoder = Mlp::new(&[d0, h, du], rng);
        let encoding = Tensor::uniform(1, d0, 1.0 / (d0 as f64).sqrt(), rng).with_requires_grad();
        Self {
            outer_encoder,
            outer_decoder,
            inner_encoder,
            inner_decoder,
            encoding,
        }
    }

    /// Parameters in checkpoint order.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.outer_encoder
            .params()
            .chain(self.outer_decoder.params())
            .chain(self.inner_encoder.params())
            .chain(self.inner_decoder.params())
            .chain(std::iter::once(&self.encoding))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.outer_encoder
            .params_mut()
            .chain(self.outer_decoder.params_mut())
            .chain(self.inner_encoder.params_mut())
            .chain(self.inner_decoder.params_mut())
            .chain(std::iter::once(&mut self.encoding))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RceModel {
    pub config: RceConfig,
    pub branches: Vec<ModalityBranch>,
}

#[derive(Debug, Clone)]
pub struct BranchVars {
    pub outer_encoder: MlpVars,
    pub outer_decoder: MlpVars,
    pub inner_encoder: MlpVars,
    pub inner_decoder: MlpVars,
    pub encoding: Var,
}

#[derive(Debug, Clone)]
pub struct RceVars {
    pub branches: Vec<BranchVars>,
}

/// Every intermediate of one forward pass, as nodes on a graph.
#[derive(Debug, Clone)]
pub struct RceForward {
    pub inputs: Vec<Var>,
    pub u: Vec<Var>,
    pub f_hat: Vec<Var>,
    pub delta: Vec<Var>,
    pub c: Vec<Var>,
    pub center: Var,
    pub mode: CenterMode,
}

/// Frozen forward results.
#[derive(Debug, Clone, PartialEq)]
pub struct RceOutputs {
    pub u: Vec<Tensor>,
    pub f_hat: Vec<Tensor>,
    pub delta: Vec<Tensor>,
    pub c: Vec<Tensor>,
    pub center: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RceLoss {
    pub total: f64,
    pub residual_center: f64,
    pub cross_reconstruction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: RceLoss,
}

impl RceModel {
    pub fn new(config: RceConfig, n_modalities: usize, seed: u64) -> Result<Self, RceError> {
        config.validate()?;
        if n_modalities == 0 {
            return Err(RceError::Config("at least one modality is required".into()));
        }
        // Every branch starts from the same draw so the unified space starts
        // aligned; the branches still train independently.
        let branches = (0..n_modalities)
            .map(|_| ModalityBranch::new(&config, &mut ChaCha8Rng::seed_from_u64(seed)))
            .collect();
        Ok(Self { config, branches })
    }

    pub fn n_modalities(&self) -> usize {
        self.branches.len()
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> RceVars {
        let branches = self
            .branches
            .iter()
            .map(|b| BranchVars {
                outer_encoder: b.outer_encoder.bind(g, trainable),
                outer_decoder: b.outer_decoder.bind(g, trainable),
                inner_encoder: b.inner_encoder.bind(g, trainable),
                inner_decoder: b.inner_decoder.bind(g, trainable),
                encoding: if trainable {
                    g.param(&b.encoding)
                } else {
                    g.constant(b.encoding.clone())
                },
            })
            .collect();
        RceVars { branches }
    }

    pub fn absorb(&mut self, grads: &Gradients, vars: &RceVars) -> Result<(), TensorError> {
        for (b, v) in self.branches.iter_mut().zip(&vars.branches) {
            b.outer_encoder.absorb(grads, &v.outer_encoder)?;
            b.outer_decoder.absorb(grads, &v.outer_decoder)?;
            b.inner_encoder.absorb(grads, &v.inner_encoder)?;
            b.inner_decoder.absorb(grads, &v.inner_decoder)?;
            absorb_one(&mut b.encoding, grads, v.encoding)?;
        }
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.branches.iter().flat_map(ModalityBranch::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.branches.iter_mut().flat_map(ModalityBranch::params_mut)
    }

    fn check_features(&self, features: &ModalFeatures) -> Result<(), RceError> {
        if features.feature_dim() != self.config.feature_dim {
            return Err(RceError::Dim(format!(
                "model expects d0={}, features have {}",
                self.config.feature_dim,
                features.feature_dim()
            )));
        }
        if features.n_modalities() != self.n_modalities() {
            return Err(RceError::Dim(format!(
                "model has {} modalities, features have {}",
                self.n_modalities(),
                features.n_modalities()
            )));
        }
        Ok(())
    }

    /// Records the full forward pass for `features` on `g`.
    pub fn forward(&self, g: &Graph, vars: &RceVars, features: &ModalFeatures) -> Result<RceForward, RceError> {
        self.check_features(features)?;
        let inputs: Vec<Var> = (0..self.n_modalities())
            .map(|r| g.constant(features.tensor(r)))
            .collect();
        self.forward_inputs(g, vars, &inputs)
    }

    pub fn forward_inputs(&self, g: &Graph, vars: &RceVars, inputs: &[Var]) -> Result<RceForward, RceError> {
        let mut u = Vec::new();
        let mut f_hat = Vec::new();
        for (r, &f) in inputs.iter().enumerate() {
            let (ur, fr) = outer_forward(g, &vars.branches[r], f, self.config.feature_dim)?;
            u.push(ur);
            f_hat.push(fr);
        }
        let center = aggregate_center(g, &u)?;
        let mut delta = Vec::new();
        let mut c = Vec::new();
        for r in 0..inputs.len() {
            match self.config.mode {
                CenterMode::Residual => {
                    let (dr, cr) = inner_forward(g, &vars.branches[r], f_hat[r], self.config.feature_dim)?;
                    delta.push(dr);
                    c.push(cr);
                }
                CenterMode::Direct => {
                    let (n, d) = g.shape(f_hat[r]);
                    delta.push(g.constant(Tensor::zeros(n, d)));
                    c.push(u[r]);
                }
            }
        }
        Ok(RceForward {
            inputs: inputs.to_vec(),
            u,
            f_hat,
            delta,
            c,
            center,
            mode: self.config.mode,
        })
    }

    /// Total training objective for a recorded forward pass.
    pub fn objective(&self, g: &Graph, vars: &RceVars, fwd: &RceForward) -> Result<Var, RceError> {
        let mut total = loss_rce(g, vars, fwd, self.config.alpha)?;
        if self.config.reconstruction {
            let rec = reconstruction_loss(g, fwd)?;
            total = g.add(total, rec)?;
        }
        Ok(total)
    }

    /// Frozen forward pass.
    pub fn infer(&self, features: &ModalFeatures) -> Result<RceOutputs, RceError> {
        let g = Graph::new();
        let vars = self.bind(&g, false);
        let fwd = self.forward(&g, &vars, features)?;
        let values = |vs: &[Var]| vs.iter().map(|&v| g.value(v)).collect::<Vec<_>>();
        Ok(RceOutputs {
            u: values(&fwd.u),
            f_hat: values(&fwd.f_hat),
            delta: values(&fwd.delta),
            c: values(&fwd.c),
            center: g.value(fwd.center),
        })
    }

    pub fn evaluate_loss(&self, features: &ModalFeatures) -> Result<RceLoss, RceError> {
        let g = Graph::new();
        let vars = self.bind(&g, false);
        let fwd = self.forward(&g, &vars, features)?;
        breakdown(self, &g, &vars, &fwd)
    }
}

fn breakdown(model: &RceModel, g: &Graph, vars: &RceVars, fwd: &RceForward) -> Result<RceLoss, RceError> {
    let rc = loss_rc(g, fwd)?;
    let cr = loss_cr(g, vars, fwd)?;
    let total = model.objective(g, vars, fwd)?;
    Ok(RceLoss {
        total: g.scalar(total),
        residual_center: g.scalar(rc),
        cross_reconstruction: g.scalar(cr),
    })
}

/// `(u_r, f_hat_r)` for one modality.
pub fn outer_forward(g: &Graph, branch: &BranchVars, f: Var, feature_dim: usize) -> Result<(Var, Var), RceError> {
    let (_, d) = g.shape(f);
    if d != feature_dim {
        return Err(RceError::Dim(format!("features have dim {d}, expected {feature_dim}")));
    }
    let u = branch.outer_encoder.forward(g, f)?;
    let f_hat = branch.outer_decoder.forward(g, u)?;
    Ok((u, f_hat))
}

/// `(delta_r, c_r)` for one modality.
pub fn inner_forward(g: &Graph, branch: &BranchVars, f_hat: Var, feature_dim: usize) -> Result<(Var, Var), RceError> {
    let (_, d) = g.shape(f_hat);
    if d != feature_dim {
        return Err(RceError::Dim(format!(
            "reconstruction has dim {d}, expected {feature_dim}"
        )));
    }
    let shifted = g.add(f_hat, branch.encoding)?;
    let delta = branch.inner_encoder.forward(g, shifted)?;
    let centered = g.add(f_hat, delta)?;
    let c = branch.inner_decoder.forward(g, centered)?;
    Ok((delta, c))
}

/// Mean over modalities.
pub fn aggregate_center(g: &Graph, u: &[Var]) -> Result<Var, RceError> {
    let (first, rest) = u
        .split_first()
        .ok_or_else(|| RceError::Config("cannot aggregate zero modalities".into()))?;
    let mut acc = *first;
    for &x in rest {
        acc = g.add(acc, x)?;
    }
    Ok(g.scale(acc, 1.0 / u.len() as f64))
}

/// Batch mean of the per-row Euclidean distance between `a` and `b`.
fn mean_distance(g: &Graph, a: Var, b: Var) -> Result<Var, TensorError> {
    let diff = g.sub(a, b)?;
    Ok(g.mean(g.l2norm_rows(diff)))
}

/// `(1/M) sum_r (||u_r - u|| + ||c_r - u||)`, batch-averaged.
pub fn loss_rc(g: &Graph, fwd: &RceForward) -> Result<Var, RceError> {
    loss_rc_towards(g, fwd, fwd.center)
}

/// Residual-center loss against an arbitrary center (one row per object).
pub fn loss_rc_towards(g: &Graph, fwd: &RceForward, center: Var) -> Result<Var, RceError> {
    let m = fwd.u.len();
    let mut terms = Vec::with_capacity(2 * m);
    for r in 0..m {
        terms.push(mean_distance(g, fwd.u[r], center)?);
        terms.push(mean_distance(g, fwd.c[r], center)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / m as f64))
}

/// `1/(M(M-1)) sum_k sum_{l != k} ||inner_decoder_l(inner_encoder_k(f_hat_k + delta_k)) - c_k||`,
/// batch-averaged. Zero (with a warning) when `M < 2`.
pub fn loss_cr(g: &Graph, vars: &RceVars, fwd: &RceForward) -> Result<Var, RceError> {
    let m = fwd.u.len();
    if m < 2 || fwd.mode == CenterMode::Direct {
        if m < 2 {
            log::warn!("cross-reconstruction loss needs two modalities; using 0");
        }
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut acc: Option<Var> = None;
    for k in 0..m {
        let centered = g.add(fwd.f_hat[k], fwd.delta[k])?;
        let code = vars.branches[k].inner_encoder.forward(g, centered)?;
        for l in (0..m).filter(|&l| l != k) {
            let crossed = vars.branches[l].inner_decoder.forward(g, code)?;
            let term = mean_distance(g, crossed, fwd.c[k])?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
    }
    Ok(g.scale(acc.expect("m >= 2"), 1.0 / (m * (m - 1)) as f64))
}

/// `alpha * L_rc + (1 - alpha) * L_cr`.
pub fn loss_rce(g: &Graph, vars: &RceVars, fwd: &RceForward, alpha: f64) -> Result<Var, RceError> {
    check_alpha(alpha)?;
    let rc = loss_rc(g, fwd)?;
    let cr = loss_cr(g, vars, fwd)?;
    let a = g.scale(rc, alpha);
    let b = g.scale(cr, 1.0 - alpha);
    Ok(g.add(a, b)?)
}

fn reconstruction_loss(g: &Graph, fwd: &RceForward) -> Result<Var, RceError> {
    let m = fwd.inputs.len();
    let mut acc: Option<Var> = None;
    for r in 0..m {
        let t = mean_distance(g, fwd.f_hat[r], fwd.inputs[r])?;
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(g.scale(acc.expect("at least one modality"), 1.0 / m as f64))
}

/// Row-averaging operator that replaces every object's center with the mean
/// center of its category. Used only by the label-consuming ablation.
pub fn category_center(g: &Graph, center: Var, labels: &[u32]) -> Result<Var, RceError> {
    let n = labels.len();
    if g.shape(center).0 != n {
        return Err(RceError::Dim(format!("{n} labels for {} objects", g.shape(center).0)));
    }
    let mut avg = Tensor::zeros(n, n);
    for i in 0..n {
        let members: Vec<usize> = (0..n).filter(|&j| labels[j] == labels[i]).collect();
        let w = 1.0 / members.len() as f64;
        for j in members {
            avg.set(i, j, w);
        }
    }
    let op = g.constant(avg);
    Ok(g.matmul(op, center)?)
}

/// Full-batch SGD on the training objective. Returns the loss recorded
/// before each update.
pub fn train_rce(
    model: &mut RceModel,
    features: &ModalFeatures,
    epochs: usize,
    lr: f64,
) -> Result<Vec<EpochRecord>, RceError> {
    train_with(model, features, epochs, lr, None)
}

/// Ablation-only variant whose center term targets category centers.
pub fn train_rce_category_center(
    model: &mut RceModel,
    features: &ModalFeatures,
    labels: &[u32],
    epochs: usize,
    lr: f64,
) -> Result<Vec<EpochRecord>, RceError> {
    train_with(model, features, epochs, lr, Some(labels))
}

fn train_with(
    model: &mut RceModel,
    features: &ModalFeatures,
    epochs: usize,
    lr: f64,
    labels: Option<&[u32]>,
) -> Result<Vec<EpochRecord>, RceError> {
    let opt = Sgd::new(lr);
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let g = Graph::new();
        let vars = model.bind(&g, true);
        let fwd = model.forward(&g, &vars, features)?;
        let (loss, record) = match labels {
            None => {
                let rc = loss_rc(&g, &fwd)?;
                let cr = loss_cr(&g, &vars, &fwd)?;
                let total = model.objective(&g, &vars, &fwd)?;
                (total, (g.scalar(rc), g.scalar(cr)))
            }
            Some(labels) => {
                let target = category_center(&g, fwd.center, labels)?;
                let rc = loss_rc_towards(&g, &fwd, target)?;
                let cr = loss_cr(&g, &vars, &fwd)?;
                let a = g.scale(rc, model.config.alpha);
                let b = g.scale(cr, 1.0 - model.config.alpha);
                (g.add(a, b)?, (g.scalar(rc), g.scalar(cr)))
            }
        };
        log.push(EpochRecord {
            epoch: epoch + 1,
            loss: RceLoss {
                total: g.scalar(loss),
                residual_center: record.0,
                cross_reconstruction: record.1,
            },
        });
        let grads = g.backward(loss)?;
        model.absorb(&grads, &vars)?;
        opt.step(model.params_mut())?;
    }
    Ok(log)
}
