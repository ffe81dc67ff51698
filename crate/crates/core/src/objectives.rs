//! Training objective: masked reconstruction, optional uniformity term and
//! the scheduled manifold regularizer.

use std::sync::OnceLock;

use magma_tensor::{Tensor, Var};
use serde::Serialize;

use crate::error::{config_err, MagmaError, Result};
use crate::manifold_reg::{pool_patches, reg_loss, LayerActivations, RegConfig};
use crate::model::{Encoded, MaskPlan};
use crate::registry::{Named, Registry};

const TARGET_EPS: f64 = 1e-6;
pub const UNIFORMITY_T: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub lambda: f64,
    pub e_st: usize,
    pub e_dur: usize,
    pub uniformity_weight: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            e_st: 10,
            e_dur: 100,
            uniformity_weight: 0.01,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return config_err(format!("lambda must be a finite value >= 0, got {}", self.lambda));
        }
        if self.e_dur == 0 {
            return config_err("e_dur must be at least 1");
        }
        if !(self.uniformity_weight >= 0.0) {
            return config_err(format!(
                "uniformity_weight must be >= 0, got {}",
                self.uniformity_weight
            ));
        }
        Ok(())
    }
}

/// `λ` inside `[e_st, e_st + e_dur)`, zero elsewhere.
pub fn effective_lambda(epoch: usize, sched: &Schedule) -> f64 {
    if epoch >= sched.e_st && epoch < sched.e_st + sched.e_dur {
        sched.lambda
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub regularizer: f64,
    pub uniformity: f64,
    pub effective_lambda: f64,
}

// ── Components ───────────────────────────────────────────────────────

fn normalize_patches(target: &Tensor) -> Tensor {
    let d = *target.shape().last().unwrap();
    let mut out = Vec::with_capacity(target.numel());
    for row in target.data().chunks(d) {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let s = (var + TARGET_EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mu) / s));
    }
    Tensor::new(target.shape().to_vec(), out).expect("same shape")
}

/// Mean squared error over the masked patches of `[B×P×patch_dim]`
/// predictions. Visible patches carry zero weight.
pub fn reconstruction_loss<'t>(
    pred: Var<'t>,
    target: &Tensor,
    plan: &MaskPlan,
    normalize_targets: bool,
) -> Result<Var<'t>> {
    let shape = pred.shape();
    if shape != target.shape() || shape.len() != 3 {
        return Err(magma_tensor::TensorError::Dimension {
            op: "reconstruction_loss",
            lhs: shape,
            rhs: target.shape().to_vec(),
        }
        .into());
    }
    let (b, p) = (shape[0], shape[1]);
    if plan.batch() != b || plan.num_patches() != p {
        return Err(MagmaError::Contract("mask plan does not match predictions".into()));
    }
    let masked: usize = plan.mask.iter().flatten().filter(|&&m| m).count();
    if masked == 0 {
        return Err(MagmaError::Contract("no masked patches to reconstruct".into()));
    }
    let target = if normalize_targets {
        normalize_patches(target)
    } else {
        target.clone()
    };
    let tape = pred.tape();
    let weights: Vec<f64> = plan
        .mask
        .iter()
        .flatten()
        .map(|&m| if m { 1.0 / masked as f64 } else { 0.0 })
        .collect();
    let per_patch = pred.sub(&tape.constant(target))?.square()?.mean_axes(&[2])?;
    Ok(per_patch
        .mul(&tape.constant(Tensor::new(vec![b, p], weights)?))?
        .sum()?)
}

/// `log mean_{i≠j} exp(−t·||ẑ_i − ẑ_j||²)` over L2-normalised rows.
pub fn uniformity_loss<'t>(z: Var<'t>, t: f64) -> Result<Var<'t>> {
    let shape = z.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(MagmaError::Degenerate(format!("uniformity needs [B×D] with B ≥ 2, got {shape:?}")));
    }
    let b = shape[0];
    let norms = z.square()?.sum_axes(&[1])?;
    if norms.value().data().iter().any(|&n| n == 0.0) {
        return Err(MagmaError::Degenerate("zero-norm row in uniformity loss".into()));
    }
    let tape = z.tape();
    let inv = tape.scalar(1.0).div(&norms.sqrt()?)?;
    let zhat = z.row_scale(&inv)?;
    let mut off = Tensor::filled(&[b, b], 1.0 / (b * (b - 1)) as f64);
    for i in 0..b {
        off.data_mut()[i * b + i] = 0.0;
    }
    let mean = zhat
        .pairwise_sq_dists()?
        .scale(-t)?
        .exp()?
        .mul(&tape.constant(off))?
        .sum()?;
    Ok(mean.log()?)
}

// ── Methods ──────────────────────────────────────────────────────────

/// A pretraining method is a choice of auxiliary terms over the shared MAE
/// objective.
pub trait Method: Named + Send + Sync {
    fn uses_regularizer(&self) -> bool;
    fn uses_uniformity(&self) -> bool;
}

macro_rules! method {
    ($ty:ident, $name:literal, $reg:literal, $unif:literal) => {
        pub struct $ty;
        impl Named for $ty {
            fn name(&self) -> &'static str {
                $name
            }
        }
        impl Method for $ty {
            fn uses_regularizer(&self) -> bool {
                $reg
            }
            fn uses_uniformity(&self) -> bool {
                $unif
            }
        }
    };
}

method!(Mae, "mae", false, false);
method!(MMae, "m_mae", true, false);
method!(UMae, "u_mae", false, true);
method!(MuMae, "mu_mae", true, true);

pub fn methods() -> &'static Registry<dyn Method> {
    static REG: OnceLock<Registry<dyn Method>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg: Registry<dyn Method> = Registry::new("method");
        reg.register(Box::new(Mae));
        reg.register(Box::new(MMae));
        reg.register(Box::new(UMae));
        reg.register(Box::new(MuMae));
        reg
    })
}

// ── Assembly ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    pub normalize_targets: bool,
    /// Drop the class token before pooling block outputs.
    pub exclude_class_token: bool,
    /// Evaluate the regularizer for logging even when it is gated off.
    pub log_regularizer: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            normalize_targets: false,
            exclude_class_token: true,
            log_regularizer: true,
        }
    }
}

/// Pooled block outputs for the layers `cfg` refers to.
pub fn layer_activations<'t>(enc: &Encoded<'t>, cfg: &RegConfig, exclude_cls: bool) -> Result<LayerActivations<'t>> {
    let mut acts = LayerActivations::new();
    for l in [cfg.ref_layer, cfg.target_layer] {
        let tokens = *enc
            .blocks
            .get(l.wrapping_sub(1))
            .ok_or_else(|| MagmaError::Config(format!("layer {l} has no recorded activations")))?;
        acts.insert(l, pool_patches(tokens, exclude_cls && enc.has_class_token)?);
    }
    Ok(acts)
}

fn detached<'t>(acts: &LayerActivations<'t>) -> Result<LayerActivations<'t>> {
    let mut out = LayerActivations::new();
    for l in acts.layers() {
        out.insert(l, acts.get(l)?.detach());
    }
    Ok(out)
}

pub struct LossInputs<'a, 't> {
    pub pred: Var<'t>,
    pub target: &'a Tensor,
    pub plan: &'a MaskPlan,
    pub encoded: &'a Encoded<'t>,
}

/// `rec + w·unif + λ_eff·reg`. Outside the active window the regularizer is
/// computed from detached activations, so it is logged without touching
/// the gradient.
pub fn total_loss<'t>(
    inputs: &LossInputs<'_, 't>,
    method: &dyn Method,
    reg_cfg: &RegConfig,
    sched: &Schedule,
    epoch: usize,
    opts: &ObjectiveOptions,
) -> Result<(Var<'t>, LossBreakdown)> {
    let rec = reconstruction_loss(inputs.pred, inputs.target, inputs.plan, opts.normalize_targets)?;
    let mut total = rec;
    let mut breakdown = LossBreakdown {
        total: 0.0,
        reconstruction: rec.item(),
        regularizer: 0.0,
        uniformity: 0.0,
        effective_lambda: 0.0,
    };

    if method.uses_uniformity() && sched.uniformity_weight > 0.0 {
        let pooled = pool_patches(
            inputs.encoded.final_norm,
            opts.exclude_class_token && inputs.encoded.has_class_token,
        )?;
        let unif = uniformity_loss(pooled, UNIFORMITY_T)?;
        breakdown.uniformity = unif.item();
        total = total.add(&unif.scale(sched.uniformity_weight)?)?;
    }

    let lambda = if method.uses_regularizer() {
        effective_lambda(epoch, sched)
    } else {
        0.0
    };
    breakdown.effective_lambda = lambda;
    if lambda > 0.0 || opts.log_regularizer {
        let acts = layer_activations(inputs.encoded, reg_cfg, opts.exclude_class_token)?;
        if lambda > 0.0 {
            let reg = reg_loss(&acts, reg_cfg)?;
            breakdown.regularizer = reg.item();
            total = total.add(&reg.scale(lambda)?)?;
        } else {
            breakdown.regularizer = reg_loss(&detached(&acts)?, reg_cfg)?.item();
        }
    }
    breakdown.total = total.item();
    Ok((total, breakdown))
}
