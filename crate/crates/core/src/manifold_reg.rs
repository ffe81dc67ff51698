//! Batch-wide, layer-wise manifold regularizer.
//!
//! Per-sample representations of a reference layer define an RBF affinity
//! graph over the batch; the target layer is penalised for spreading apart
//! samples that the reference layer considers close. Two evaluation routes
//! are provided: the pairwise double sum and the Laplacian trace form.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use magma_tensor::{Tensor, Var};

use crate::error::{config_err, MagmaError, Result};
use crate::registry::{Named, Registry};

/// Whether the reference-layer kernel participates in backpropagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelGrad {
    Flow,
    Detach,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// Only reference → target.
    SingleDirectedPair,
    /// Every ordered pair (a, b), a ≠ b, of {reference, target}.
    AllOrderedPairs,
}

impl FromStr for KernelGrad {
    type Err = MagmaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Self::Flow),
            "detach" => Ok(Self::Detach),
            _ => config_err(format!("kernel_grad must be flow|detach, got '{s}'")),
        }
    }
}

impl fmt::Display for KernelGrad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Flow => "flow",
            Self::Detach => "detach",
        })
    }
}

impl FromStr for PairMode {
    type Err = MagmaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_directed_pair" => Ok(Self::SingleDirectedPair),
            "all_ordered_pairs" => Ok(Self::AllOrderedPairs),
            _ => config_err(format!(
                "pair_mode must be single_directed_pair|all_ordered_pairs, got '{s}'"
            )),
        }
    }
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SingleDirectedPair => "single_directed_pair",
            Self::AllOrderedPairs => "all_ordered_pairs",
        })
    }
}

/// Regularizer settings. Layers are 1-based encoder block indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RegConfig {
    pub ref_layer: usize,
    pub target_layer: usize,
    /// Registered [`LaplacianStrategy`] name.
    pub laplacian: String,
    pub kernel_grad: KernelGrad,
    pub pair_mode: PairMode,
    pub sigma_floor: f64,
    /// Fixed bandwidth; `None` selects the adaptive batch statistic.
    pub fixed_sigma: Option<f64>,
}

impl RegConfig {
    /// Penultimate block as reference, last block as target.
    pub fn for_depth(depth: usize) -> Self {
        Self {
            ref_layer: depth.saturating_sub(1).max(1),
            target_layer: depth,
            laplacian: SymmetricNormalized.name().to_string(),
            kernel_grad: KernelGrad::Flow,
            pair_mode: PairMode::SingleDirectedPair,
            sigma_floor: 1e-8,
            fixed_sigma: None,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.ref_layer == self.target_layer {
            return config_err(format!(
                "ref_layer and target_layer must differ (both {})",
                self.ref_layer
            ));
        }
        for (key, l) in [("ref_layer", self.ref_layer), ("target_layer", self.target_layer)] {
            if l == 0 || l > depth {
                return config_err(format!("{key}={l} outside [1, {depth}]"));
            }
        }
        laplacians().get(&self.laplacian)?;
        if !(self.sigma_floor > 0.0) {
            return config_err(format!("sigma_floor must be positive, got {}", self.sigma_floor));
        }
        if let Some(s) = self.fixed_sigma {
            if !(s > 0.0) {
                return config_err(format!("sigma must be positive, got {s}"));
            }
        }
        Ok(())
    }
}

// ── Laplacian strategies ─────────────────────────────────────────────

/// Builds a graph matrix from a kernel matrix `W` (B×B).
pub trait LaplacianStrategy: Named + Send + Sync {
    /// True when the produced matrix is positive semidefinite.
    fn positive_semidefinite(&self) -> bool;
    fn build<'t>(&self, w: Var<'t>) -> Result<Var<'t>>;
}

/// L = D − W
pub struct Unnormalized;

/// L = I − D^{-1/2} W D^{-1/2}
pub struct SymmetricNormalized;

/// L = D^{-1/2} W D^{-1/2}, the normalized affinity itself. Not a Laplacian:
/// it is not PSD and does not vanish on identical representations.
pub struct NormalizedAffinity;

impl Named for Unnormalized {
    fn name(&self) -> &'static str {
        "unnormalized"
    }
}

impl Named for SymmetricNormalized {
    fn name(&self) -> &'static str {
        "symmetric_normalized"
    }
}

impl Named for NormalizedAffinity {
    fn name(&self) -> &'static str {
        "normalized_affinity"
    }
}

/// Off-diagonal part of `W` and the full degrees `D_ii = Σ_j W_ij`.
///
/// Laplacian diagonals are assembled from the off-diagonal degree
/// `Σ_{j≠i} W_ij` rather than as `D_ii − W_ii`; the two agree exactly in real
/// arithmetic, but the subtraction loses all precision when the off-diagonal
/// affinities are tiny compared with the unit self-affinity.
struct Degrees<'t> {
    off: Var<'t>,
    off_degree: Var<'t>,
    degree: Var<'t>,
}

fn degrees<'t>(w: Var<'t>) -> Result<Degrees<'t>> {
    let n = w.shape()[0];
    let mut mask = Tensor::ones(&[n, n]);
    for i in 0..n {
        mask.data_mut()[i * n + i] = 0.0;
    }
    let off = w.mul(&w.tape().constant(mask))?;
    let off_degree = off.sum_axes(&[1])?;
    let degree = w.sum_axes(&[1])?;
    // W_ii = 1, so every degree is at least one.
    if let Some(bad) = degree.value().data().iter().find(|&&x| !(x >= 1.0 - 1e-12)) {
        return Err(MagmaError::Contract(format!("kernel degree {bad} < 1")));
    }
    Ok(Degrees {
        off,
        off_degree,
        degree,
    })
}

fn inv_sqrt_degree<'t>(d: &Degrees<'t>) -> Result<Var<'t>> {
    Ok(d.degree.tape().scalar(1.0).div(&d.degree.sqrt()?)?)
}

impl LaplacianStrategy for Unnormalized {
    fn positive_semidefinite(&self) -> bool {
        true
    }

    fn build<'t>(&self, w: Var<'t>) -> Result<Var<'t>> {
        let d = degrees(w)?;
        Ok(d.off_degree.diag_embed()?.sub(&d.off)?)
    }
}

impl LaplacianStrategy for SymmetricNormalized {
    fn positive_semidefinite(&self) -> bool {
        true
    }

    fn build<'t>(&self, w: Var<'t>) -> Result<Var<'t>> {
        // diag: 1 − 1/D_ii = Σ_{j≠i} W_ij / D_ii; off-diagonal: −W_ij/√(D_ii D_jj)
        let d = degrees(w)?;
        let s = inv_sqrt_degree(&d)?;
        let diag = d.off_degree.div(&d.degree)?.diag_embed()?;
        Ok(diag.sub(&d.off.row_scale(&s)?.col_scale(&s)?)?)
    }
}

impl LaplacianStrategy for NormalizedAffinity {
    fn positive_semidefinite(&self) -> bool {
        false
    }

    fn build<'t>(&self, w: Var<'t>) -> Result<Var<'t>> {
        let d = degrees(w)?;
        let s = inv_sqrt_degree(&d)?;
        Ok(w.row_scale(&s)?.col_scale(&s)?)
    }
}

pub fn laplacians() -> &'static Registry<dyn LaplacianStrategy> {
    static REG: OnceLock<Registry<dyn LaplacianStrategy>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg: Registry<dyn LaplacianStrategy> = Registry::new("laplacian");
        reg.register(Box::new(Unnormalized));
        reg.register(Box::new(SymmetricNormalized));
        reg.register(Box::new(NormalizedAffinity));
        reg
    })
}

// ── Kernel ───────────────────────────────────────────────────────────

/// RBF affinities over a batch and the bandwidth that produced them.
#[derive(Debug, Clone, Copy)]
pub struct KernelMatrix<'t> {
    pub w: Var<'t>,
    pub sigma: f64,
}

/// Per-sample mean over the token axis of `[B×P×D]` tokens. With
/// `exclude_class_token` the first token is dropped.
pub fn pool_patches<'t>(tokens: Var<'t>, exclude_class_token: bool) -> Result<Var<'t>> {
    let shape = tokens.shape();
    if shape.len() != 3 {
        return Err(MagmaError::Contract(format!("pool_patches expects [B×P×D], got {shape:?}")));
    }
    let start = usize::from(exclude_class_token);
    if shape[1] <= start {
        return Err(MagmaError::Degenerate("no patch tokens left to pool".into()));
    }
    let patches = if start > 0 {
        tokens.narrow(1, start, shape[1] - start)?
    } else {
        tokens
    };
    Ok(patches.mean_axes(&[1])?)
}

pub fn pairwise_sq_dists<'t>(z: Var<'t>) -> Result<Var<'t>> {
    let b = z.shape()[0];
    if b < 2 {
        return Err(MagmaError::Degenerate(format!("batch of {b} has no pairs")));
    }
    Ok(z.pairwise_sq_dists()?)
}

/// `sqrt(max(var, floor))` where `var` is the population variance of the
/// off-diagonal entries of `d2`.
pub fn adaptive_sigma(d2: &Tensor, sigma_floor: f64) -> f64 {
    let b = d2.shape()[0];
    let off: Vec<f64> = (0..b)
        .flat_map(|i| (0..b).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| d2.data()[i * b + j])
        .collect();
    let n = off.len() as f64;
    let mean = off.iter().sum::<f64>() / n;
    let var = off.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    var.max(sigma_floor).sqrt()
}

/// `W_ij = exp(−d2_ij / (2σ))`.
pub fn rbf_kernel<'t>(d2: Var<'t>, sigma: f64) -> Result<KernelMatrix<'t>> {
    if !(sigma > 0.0) {
        return Err(MagmaError::Contract(format!("sigma must be positive, got {sigma}")));
    }
    let w = d2.scale(-1.0 / (2.0 * sigma))?.exp()?;
    if cfg!(debug_assertions) {
        check_kernel(&w.value())?;
    }
    Ok(KernelMatrix { w, sigma })
}

fn check_kernel(w: &Tensor) -> Result<()> {
    let b = w.shape()[0];
    for i in 0..b {
        if w.data()[i * b + i] != 1.0 {
            return Err(MagmaError::Contract(format!("kernel diagonal W[{i},{i}] != 1")));
        }
        for j in 0..b {
            let v = w.data()[i * b + j];
            if !(0.0..=1.0).contains(&v) || (v - w.data()[j * b + i]).abs() > 1e-12 {
                return Err(MagmaError::Contract(format!("kernel entry W[{i},{j}]={v} invalid")));
            }
        }
    }
    Ok(())
}

/// Kernel over the reference representations, honouring the bandwidth and
/// gradient settings of `cfg`. The bandwidth is always a constant.
pub fn reference_kernel<'t>(z_ref: Var<'t>, cfg: &RegConfig) -> Result<KernelMatrix<'t>> {
    let z = match cfg.kernel_grad {
        KernelGrad::Flow => z_ref,
        KernelGrad::Detach => z_ref.detach(),
    };
    let d2 = pairwise_sq_dists(z)?;
    let sigma = match cfg.fixed_sigma {
        Some(s) => s,
        None => adaptive_sigma(&d2.value(), cfg.sigma_floor),
    };
    rbf_kernel(d2, sigma)
}

pub fn laplacian<'t>(kernel: &KernelMatrix<'t>, mode: &str) -> Result<Var<'t>> {
    laplacians().get(mode)?.build(kernel.w)
}

fn check_pair(z_ref: Var<'_>, z_tgt: Var<'_>) -> Result<usize> {
    let (r, t) = (z_ref.shape(), z_tgt.shape());
    if r.len() != 2 || t.len() != 2 || r[0] != t[0] {
        return Err(MagmaError::Contract(format!(
            "reference {r:?} and target {t:?} batches disagree"
        )));
    }
    if r[0] < 2 {
        return Err(MagmaError::Degenerate("regularizer needs a batch of at least 2".into()));
    }
    Ok(r[0])
}

/// `(1/B²) Σ_ij W_ij(Z_ref) · ||Z_tgt,i − Z_tgt,j||²`
pub fn reg_loss_double_sum<'t>(z_ref: Var<'t>, z_tgt: Var<'t>, cfg: &RegConfig) -> Result<Var<'t>> {
    let b = check_pair(z_ref, z_tgt)?;
    let kernel = reference_kernel(z_ref, cfg)?;
    let d2 = pairwise_sq_dists(z_tgt)?;
    Ok(kernel.w.mul(&d2)?.sum()?.scale(1.0 / (b * b) as f64)?)
}

/// `(1/B²) Tr(Z_tgtᵀ L Z_tgt)` with `L` built from the reference kernel.
pub fn reg_loss_trace<'t>(z_ref: Var<'t>, z_tgt: Var<'t>, cfg: &RegConfig) -> Result<Var<'t>> {
    let b = check_pair(z_ref, z_tgt)?;
    let kernel = reference_kernel(z_ref, cfg)?;
    let lap = laplacian(&kernel, &cfg.laplacian)?;
    let quad = z_tgt.transpose()?.matmul(&lap.matmul(&z_tgt)?)?;
    Ok(quad.trace()?.scale(1.0 / (b * b) as f64)?)
}

/// Pooled per-layer representations keyed by 1-based block index.
#[derive(Debug, Default, Clone)]
pub struct LayerActivations<'t> {
    layers: BTreeMap<usize, Var<'t>>,
}

impl<'t> LayerActivations<'t> {
    pub fn new() -> Self {
        Self {
            layers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, layer: usize, pooled: Var<'t>) {
        self.layers.insert(layer, pooled);
    }

    pub fn get(&self, layer: usize) -> Result<Var<'t>> {
        self.layers
            .get(&layer)
            .copied()
            .ok_or_else(|| MagmaError::Config(format!("layer {layer} has no recorded activations")))
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.keys().copied()
    }
}

/// The regularizer over recorded activations, dispatched per `cfg.pair_mode`.
pub fn reg_loss<'t>(acts: &LayerActivations<'t>, cfg: &RegConfig) -> Result<Var<'t>> {
    if cfg.ref_layer == cfg.target_layer {
        return config_err(format!(
            "regularizer needs two distinct layers, got {} twice",
            cfg.ref_layer
        ));
    }
    let (k, l) = (acts.get(cfg.ref_layer)?, acts.get(cfg.target_layer)?);
    let forward = reg_loss_trace(k, l, cfg)?;
    match cfg.pair_mode {
        PairMode::SingleDirectedPair => Ok(forward),
        PairMode::AllOrderedPairs => Ok(forward.add(&reg_loss_trace(l, k, cfg)?)?),
    }
}
